//! `infer`: reconstruct one HDR frame per fusion group.
//!
//! Outputs keep dataset group order: `hdr/group_NNNN.pfm` holds the
//! normalized radiance, `preview/group_NNNN.png` its mu-law tonemap.

use std::fs;
use std::path::Path;
use std::time::Instant;

use hdrfusion::io::dataset::Dataset;
use hdrfusion::io::{pfm, pngio};
use hdrfusion::model::Eafnet;
use hdrfusion::radiometry::mu_tonemap;
use hdrfusion::tensor::checkpoint::load_checkpoint;
use hdrfusion::Real;

use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;
use crate::CliError;

pub fn run(
    cfg: &ExperimentConfig,
    seed: u64,
    out: &Path,
    checkpoint: &Path,
    dataset_dir: &Path,
) -> Result<(), CliError> {
    let start = Instant::now();
    let net = Eafnet::new(cfg.model.clone())?;
    let store = load_checkpoint::<Real>(checkpoint)?;
    // Fails naming the first missing, misshapen, or unknown tensor, so a
    // checkpoint trained under a different config is rejected up front.
    net.validate_store(&store)?;

    let dataset = Dataset::<Real>::load(dataset_dir)?;
    let groups = dataset.fusion_groups()?;
    fs::create_dir_all(out.join("hdr"))?;
    fs::create_dir_all(out.join("preview"))?;

    let mut manifest = RunManifest::new("infer", seed, cfg.to_value()?);
    manifest.input("checkpoint", checkpoint);
    manifest.input("dataset", dataset_dir);

    for (i, group) in groups.iter().enumerate() {
        let hdr = net.infer(&store, group, dataset.white_point)?;
        let pfm_rel = format!("hdr/group_{i:04}.pfm");
        pfm::save(&out.join(&pfm_rel), &hdr)?;
        manifest.artifact(pfm_rel);

        let preview = mu_tonemap(&hdr, cfg.model.mu)?;
        let png_rel = format!("preview/group_{i:04}.png");
        pngio::save(&out.join(&png_rel), &preview)?;
        manifest.artifact(png_rel);
    }

    manifest.wall_clock_s = start.elapsed().as_secs_f64();
    manifest.details = serde_json::json!({ "groups": groups.len() });
    manifest.write(out)?;
    println!(
        "reconstructed {} groups in {:.1}s -> {}",
        groups.len(),
        manifest.wall_clock_s,
        out.display()
    );
    Ok(())
}
