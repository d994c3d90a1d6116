//! `evaluate`: score reconstructed frames against dataset ground truth.
//!
//! Groups without ground truth still contribute to the stability
//! statistics; a dataset with no ground truth at all yields a
//! stability-only report.

use std::fs;
use std::path::Path;
use std::time::Instant;

use hdrfusion::io::dataset::Dataset;
use hdrfusion::io::{pfm, write_atomic};
use hdrfusion::metrics::evaluate_sequence;
use hdrfusion::radiometry::HdrImage;
use hdrfusion::Real;

use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;
use crate::CliError;

pub fn run(
    cfg: &ExperimentConfig,
    seed: u64,
    out: &Path,
    outputs_dir: &Path,
    dataset_dir: &Path,
) -> Result<(), CliError> {
    let start = Instant::now();
    fs::create_dir_all(out)?;

    let infer_run = RunManifest::load(outputs_dir)?;
    let pfm_rels: Vec<&String> =
        infer_run.artifacts.iter().filter(|a| a.ends_with(".pfm")).collect();
    if pfm_rels.is_empty() {
        return Err(CliError::Input(format!(
            "{} lists no .pfm artifacts to evaluate",
            outputs_dir.display()
        )));
    }
    let outputs: Vec<HdrImage<Real>> = pfm_rels
        .iter()
        .map(|rel| Ok(pfm::load(&outputs_dir.join(rel.as_str()))?.convert::<Real>()))
        .collect::<Result<_, CliError>>()?;

    let dataset = Dataset::<Real>::load(dataset_dir)?;
    if outputs.len() != dataset.groups.len() {
        return Err(CliError::Input(format!(
            "{} outputs but {} dataset groups",
            outputs.len(),
            dataset.groups.len()
        )));
    }
    // Ground truth is stored as raw radiance; reconstructions live on the
    // normalized scale, so bring the references onto it too.
    let gts: Vec<Option<HdrImage<Real>>> = dataset
        .ground_truths
        .iter()
        .map(|slot| {
            slot.as_ref().map(|gt| gt.scale(1.0 / dataset.white_point)).transpose()
        })
        .collect::<Result<_, _>>()?;

    let report = evaluate_sequence(&outputs, &gts, cfg.model.mu)?;
    write_atomic(&out.join("report.json"), &serde_json::to_vec_pretty(&report)?)?;
    write_atomic(&out.join("report.csv"), report.to_csv().as_bytes())?;

    let mut manifest = RunManifest::new("evaluate", seed, cfg.to_value()?);
    manifest.input("outputs", outputs_dir);
    manifest.input("dataset", dataset_dir);
    manifest.artifact("report.json");
    manifest.artifact("report.csv");
    manifest.wall_clock_s = start.elapsed().as_secs_f64();
    manifest.details = serde_json::json!({
        "frames": outputs.len(),
        "scored_frames": report.per_frame.len(),
        "mean_psnr_mu": report.mean_psnr_mu,
        "mean_ssim_mu": report.mean_ssim_mu,
        "lsd": report.lsd,
        "t_ssim": report.t_ssim,
        "l_avg": report.l_avg,
    });
    manifest.write(out)?;

    match report.mean_psnr_mu {
        Some(p) => println!(
            "scored {} of {} frames: psnr-mu {:.2} dB, lsd {:.5}",
            report.per_frame.len(),
            outputs.len(),
            p,
            report.lsd
        ),
        None => println!(
            "no ground truth found; stability-only report: lsd {:.5}, l_avg {:.5}",
            report.lsd, report.l_avg
        ),
    }
    Ok(())
}
