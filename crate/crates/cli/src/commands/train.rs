//! `train`: fit the fusion network on a simulated dataset.
//!
//! The checkpoint (weights + optimizer state) is rewritten atomically
//! after every epoch and the history line is flushed immediately, so an
//! aborted or diverged run keeps its progress and can be resumed.

use std::cell::RefCell;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use hdrfusion::io::dataset::Dataset;
use hdrfusion::model::train::TrainError;
use hdrfusion::model::{init_params, train, Eafnet, EpochRecord};
use hdrfusion::tensor::checkpoint::{load_checkpoint, save_checkpoint};
use hdrfusion::Real;

use super::{CHECKPOINT_FILE, HISTORY_FILE};
use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;
use crate::CliError;

fn read_history(path: &Path) -> Result<Vec<EpochRecord>, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

pub fn run(
    cfg: &ExperimentConfig,
    seed: u64,
    out: &Path,
    dataset_dir: &Path,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let start = Instant::now();
    fs::create_dir_all(out)?;
    let dataset = Dataset::<Real>::load(dataset_dir)?;
    let groups = dataset.fusion_groups()?;
    let net = Eafnet::new(cfg.model.clone())?;

    let (store, start_epoch, prior) = match resume {
        Some(dir) => {
            let store = load_checkpoint::<Real>(&dir.join(CHECKPOINT_FILE))?;
            let prior = read_history(&dir.join(HISTORY_FILE))?;
            let start_epoch = prior.last().map_or(0, |r| r.epoch + 1);
            println!("resuming from {} at epoch {start_epoch}", dir.display());
            (store, start_epoch, prior)
        }
        None => (init_params::<Real>(&cfg.model, seed)?, 0, Vec::new()),
    };

    // The new history file carries the full trajectory: prior records
    // first, then one flushed line per finished epoch.
    let mut history_file = fs::File::create(out.join(HISTORY_FILE))?;
    for record in &prior {
        writeln!(history_file, "{}", serde_json::to_string(record)?)?;
    }
    history_file.flush()?;

    let ckpt_path = out.join(CHECKPOINT_FILE);
    let persist_error: RefCell<Option<CliError>> = RefCell::new(None);
    let history_file = RefCell::new(history_file);
    let total = cfg.train.epochs;

    let result = train(
        &net,
        &cfg.train,
        &groups,
        dataset.white_point,
        store,
        start_epoch,
        seed,
        |record, store| {
            match record.val_psnr_mu {
                Some(v) => println!(
                    "epoch {:>4}/{total} loss {:.6} lr {:.2e} val {:.2} dB",
                    record.epoch, record.loss, record.lr, v
                ),
                None => println!(
                    "epoch {:>4}/{total} loss {:.6} lr {:.2e}",
                    record.epoch, record.loss, record.lr
                ),
            }
            if persist_error.borrow().is_some() {
                return;
            }
            let persist = || -> Result<(), CliError> {
                save_checkpoint(&ckpt_path, store)?;
                let mut file = history_file.borrow_mut();
                writeln!(file, "{}", serde_json::to_string(record)?)?;
                file.flush()?;
                Ok(())
            };
            if let Err(e) = persist() {
                *persist_error.borrow_mut() = Some(e);
            }
        },
    );
    if let Some(e) = persist_error.into_inner() {
        return Err(e);
    }

    let mut manifest = RunManifest::new("train", seed, cfg.to_value()?);
    manifest.input("dataset", dataset_dir);
    if let Some(dir) = resume {
        manifest.input("resume", dir);
    }
    manifest.artifact(HISTORY_FILE);
    manifest.wall_clock_s = start.elapsed().as_secs_f64();

    match result {
        Ok(outcome) => {
            save_checkpoint(&ckpt_path, &outcome.params)?;
            manifest.artifact(CHECKPOINT_FILE);
            let last = outcome.history.last();
            manifest.details = serde_json::json!({
                "epochs_run": outcome.history.len(),
                "start_epoch": start_epoch,
                "stopped_at_lr_floor": outcome.stopped_at_lr_floor,
                "final_loss": last.map(|r| r.loss),
                "final_val_psnr_mu": last.and_then(|r| r.val_psnr_mu),
                "optimizer_steps": outcome.params.step(),
            });
            manifest.write(out)?;
            println!(
                "trained {} epochs in {:.1}s -> {}",
                outcome.history.len(),
                manifest.wall_clock_s,
                ckpt_path.display()
            );
            Ok(())
        }
        Err(err @ TrainError::Diverged { .. }) => {
            // Abort, but leave a manifest covering the partial artifacts.
            manifest.status = "diverged".to_string();
            if ckpt_path.exists() {
                manifest.artifact(CHECKPOINT_FILE);
            }
            manifest.details = serde_json::json!({ "error": err.to_string() });
            manifest.write(out)?;
            Err(err.into())
        }
        Err(err) => Err(err.into()),
    }
}
