//! `gradcheck`: analytic gradients vs central differences, per op and
//! through the whole network.
//!
//! The end-to-end case always runs the small fixed configuration at
//! 16x16: finite differences cost one forward pass per parameter, so the
//! check must stay cheap to be run routinely. Gradient correctness is a
//! property of the ops, not of any particular channel width.

use std::fs;
use std::path::Path;
use std::time::Instant;

use hdrfusion::io::write_atomic;
use hdrfusion::model::{end_to_end_case, EafnetConfig};
use hdrfusion::tensor::gradcheck::{engine_cases, run_gradcheck};

use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;
use crate::CliError;

pub fn run(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    let start = Instant::now();
    let mut cases = engine_cases();
    cases.push(end_to_end_case(&EafnetConfig::tiny(), 16, 16, seed)?);

    let rows = run_gradcheck(&cases)?;
    println!("{:<28} {:>12} {:>9}  result", "case", "max rel err", "tol");
    for row in &rows {
        println!(
            "{:<28} {:>12.3e} {:>9.1e}  {}",
            row.name,
            row.max_rel_error,
            row.tol,
            if row.pass { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> =
        rows.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();

    if let Some(out) = out {
        fs::create_dir_all(out)?;
        write_atomic(&out.join("gradcheck.json"), &serde_json::to_vec_pretty(&rows)?)?;
        let mut manifest = RunManifest::new("gradcheck", seed, cfg.to_value()?);
        manifest.artifact("gradcheck.json");
        manifest.wall_clock_s = start.elapsed().as_secs_f64();
        manifest.details =
            serde_json::json!({ "cases": rows.len(), "failed": failed.len() });
        if !failed.is_empty() {
            manifest.status = "failed".to_string();
        }
        manifest.write(out)?;
    }

    if failed.is_empty() {
        println!("all {} cases passed in {:.1}s", rows.len(), start.elapsed().as_secs_f64());
        Ok(())
    } else {
        Err(CliError::GradCheckFailed(failed.join(", ")))
    }
}
