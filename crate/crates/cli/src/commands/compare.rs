//! `compare`: temporal stability of two pipelines, side by side.
//!
//! Each side is either a dataset directory (its display stream is
//! compared: all frames for AE, the constant-exposure reference camera
//! for DCS) or an infer run directory (reconstructions, tonemapped).
//! Fluctuation statistics are reported on the [0, 1] scale and times 255.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use hdrfusion::capture::CameraId;
use hdrfusion::io::dataset::{Dataset, DatasetKind};
use hdrfusion::io::{pfm, write_atomic};
use hdrfusion::metrics::{frame_luminance, l_avg, lsd, t_ssim};
use hdrfusion::radiometry::{mu_tonemap, LdrImage};
use hdrfusion::Real;

use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;
use crate::svg::{line_chart, Series};
use crate::CliError;

#[derive(Serialize)]
struct SideReport {
    source: String,
    kind: &'static str,
    /// Frames actually compared (common prefix of both sides).
    frames: usize,
    /// Frames the source provided.
    total_frames: usize,
    l_avg: f64,
    lsd: f64,
    t_ssim: Option<f64>,
    /// Largest jump between consecutive frame means.
    fluctuation_max: f64,
    l_avg_255: f64,
    lsd_255: f64,
    fluctuation_max_255: f64,
    trace: Vec<f64>,
}

#[derive(Serialize)]
struct ComparisonReport {
    compared_frames: usize,
    warning: Option<String>,
    ae: SideReport,
    dcs: SideReport,
    /// None when the DCS side is perfectly flat.
    lsd_ratio_ae_over_dcs: Option<f64>,
}

/// Loads one side as display-referred frames, detecting what the
/// directory holds.
fn load_side(
    dir: &Path,
    mu: f64,
) -> Result<(Vec<LdrImage<Real>>, &'static str), CliError> {
    if dir.join("manifest.json").exists() {
        let ds = Dataset::<Real>::load(dir)?;
        let frames = match ds.kind {
            DatasetKind::Ae => ds.frames,
            DatasetKind::Dcs => {
                ds.frames.into_iter().filter(|f| f.camera == CameraId::Primary).collect()
            }
        };
        Ok((frames.into_iter().map(|f| f.image).collect(), "capture-stream"))
    } else if dir.join(crate::manifest::RUN_FILE).exists() {
        let run = RunManifest::load(dir)?;
        let mut frames = Vec::new();
        for rel in run.artifacts.iter().filter(|a| a.ends_with(".pfm")) {
            let hdr = pfm::load(&dir.join(rel))?.convert::<Real>();
            frames.push(mu_tonemap(&hdr, mu)?);
        }
        if frames.is_empty() {
            return Err(CliError::Input(format!(
                "{} lists no .pfm artifacts to compare",
                dir.display()
            )));
        }
        Ok((frames, "reconstruction"))
    } else {
        Err(CliError::Input(format!(
            "{} is neither a dataset nor a run directory",
            dir.display()
        )))
    }
}

fn side_report(
    source: &Path,
    kind: &'static str,
    frames: &[LdrImage<Real>],
    total: usize,
) -> Result<SideReport, CliError> {
    let trace: Vec<f64> = frames.iter().map(frame_luminance).collect();
    let fluctuation_max =
        trace.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0_f64, f64::max);
    let l_avg = l_avg(frames)?;
    let lsd = lsd(frames)?;
    Ok(SideReport {
        source: source.display().to_string(),
        kind,
        frames: frames.len(),
        total_frames: total,
        l_avg,
        lsd,
        t_ssim: t_ssim(frames)?,
        fluctuation_max,
        l_avg_255: l_avg * 255.0,
        lsd_255: lsd * 255.0,
        fluctuation_max_255: fluctuation_max * 255.0,
        trace,
    })
}

pub fn run(
    cfg: &ExperimentConfig,
    seed: u64,
    out: &Path,
    ae_dir: &Path,
    dcs_dir: &Path,
) -> Result<(), CliError> {
    let start = Instant::now();
    fs::create_dir_all(out)?;

    let (ae_frames, ae_kind) = load_side(ae_dir, cfg.model.mu)?;
    let (dcs_frames, dcs_kind) = load_side(dcs_dir, cfg.model.mu)?;

    let common = ae_frames.len().min(dcs_frames.len());
    let warning = (ae_frames.len() != dcs_frames.len()).then(|| {
        format!(
            "sequence lengths differ (ae {}, dcs {}); comparing first {common} frames",
            ae_frames.len(),
            dcs_frames.len()
        )
    });
    if let Some(w) = &warning {
        println!("warning: {w}");
    }

    let ae = side_report(ae_dir, ae_kind, &ae_frames[..common], ae_frames.len())?;
    let dcs = side_report(dcs_dir, dcs_kind, &dcs_frames[..common], dcs_frames.len())?;
    let ratio = (dcs.lsd > 0.0).then(|| ae.lsd / dcs.lsd);
    let report =
        ComparisonReport { compared_frames: common, warning, ae, dcs, lsd_ratio_ae_over_dcs: ratio };

    write_atomic(&out.join("comparison.json"), &serde_json::to_vec_pretty(&report)?)?;
    let chart = line_chart(
        "per-frame mean luminance",
        "mean luminance",
        &[
            Series { label: "ae", color: "#d62728", values: &report.ae.trace },
            Series { label: "dcs", color: "#1f77b4", values: &report.dcs.trace },
        ],
    );
    write_atomic(&out.join("comparison.svg"), chart.as_bytes())?;

    let mut manifest = RunManifest::new("compare", seed, cfg.to_value()?);
    manifest.input("ae", ae_dir);
    manifest.input("dcs", dcs_dir);
    manifest.artifact("comparison.json");
    manifest.artifact("comparison.svg");
    manifest.wall_clock_s = start.elapsed().as_secs_f64();
    manifest.details = serde_json::json!({
        "compared_frames": report.compared_frames,
        "ae_lsd": report.ae.lsd,
        "dcs_lsd": report.dcs.lsd,
        "lsd_ratio_ae_over_dcs": report.lsd_ratio_ae_over_dcs,
    });
    manifest.write(out)?;

    for side in [&report.ae, &report.dcs] {
        println!(
            "{:>4}: lsd {:.5} ({:.2}/255), l_avg {:.5}, max fluctuation {:.5} ({:.2}/255)",
            if std::ptr::eq(side, &report.ae) { "ae" } else { "dcs" },
            side.lsd,
            side.lsd_255,
            side.l_avg,
            side.fluctuation_max,
            side.fluctuation_max_255
        );
    }
    match report.lsd_ratio_ae_over_dcs {
        Some(r) => println!("lsd ratio ae/dcs: {r:.2}"),
        None => println!("lsd ratio ae/dcs: undefined (dcs perfectly stable)"),
    }
    Ok(())
}
