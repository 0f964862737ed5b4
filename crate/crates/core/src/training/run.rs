use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::step::{train_step_it, train_step_mcl, train_step_v, StepLosses};
use super::{Strategy, TrainPlan};
use crate::data::{make_views, BalancedSampler, ImageStore, ProtocolSplit, Sample};
use crate::encoders::{load_archive, save_archive, FaceImage, FasModel, Manifest};
use crate::error::{Error, Result};
use crate::label::Class;
use crate::prompts::PromptSet;
use crate::seed::{rng_for, stream};

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub l_ce: f64,
    pub l_simclr: f64,
    pub l_mse: f64,
    pub l_total: f64,
    pub lr: f64,
    /// Seconds since this process started the run.
    pub wall_time: f64,
}

/// Shared inputs of a run.
pub struct RunContext<'a> {
    pub images: &'a ImageStore,
    pub prompts: &'a PromptSet,
    /// Where logs and checkpoints go; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    pub config_hash: String,
    /// Continue from this checkpoint instead of `model`'s weights.
    pub resume: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: FasModel,
    pub optimizer: AdamW,
    /// Completed iterations, counting any before a resume.
    pub iteration: usize,
    /// Rows produced by this call.
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Reads a log written by [`run_training`].
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let rows = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?
        .deserialize::<LogRow>()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(rows)
}

fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("iter_{iteration:06}.safetensors"))
}

fn write_checkpoint(path: &Path, model: &FasModel, opt: &AdamW, plan: &TrainPlan, iteration: usize, hash: &str) -> Result<()> {
    let manifest = Manifest::new(
        &model.config,
        Some(plan.strategy.name().to_string()),
        iteration,
        plan.seed,
        hash.to_string(),
    );
    save_archive(path, model, &manifest, &opt.state(&model.store))
}

/// Opens the log for appending, dropping any rows past `start` left by an
/// interrupted run.
fn open_log(dir: &Path, start: usize, note: &str) -> Result<csv::Writer<std::fs::File>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(LOG_FILE);
    let kept: Vec<LogRow> = if start > 0 && path.exists() {
        read_log(&path)?
            .into_iter()
            .filter(|r| r.iteration <= start)
            .collect()
    } else {
        Vec::new()
    };
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let mut file = file;
    writeln!(file, "# {note}").map_err(|e| Error::io(&path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(["iteration", "l_ce", "l_simclr", "l_mse", "l_total", "lr", "wall_time"])?;
    for r in &kept {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(w)
}

fn diagnostic_dump(dir: &Path, iteration: usize, detail: &str, lr: f64, batch: &[Sample], model: &FasModel) {
    let norms: serde_json::Map<String, serde_json::Value> = model
        .store
        .ids()
        .map(|id| {
            let t = model.store.get(id);
            let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            (model.store.name(id).to_string(), serde_json::json!(norm))
        })
        .collect();
    let dump = serde_json::json!({
        "iteration": iteration,
        "detail": detail,
        "lr": lr,
        "batch": batch.iter().map(|s| s.id.clone()).collect::<Vec<_>>(),
        "parameter_norms": norms,
    });
    let path = dir.join(format!("diagnostic_iter_{iteration:06}.json"));
    match serde_json::to_string_pretty(&dump) {
        Ok(text) => {
            if let Err(e) = std::fs::write(&path, text) {
                log::error!("could not write {}: {e}", path.display());
            }
        }
        Err(e) => log::error!("could not serialize diagnostics: {e}"),
    }
}

/// Runs `plan` on `split`: `plan.iterations` steps of the strategy's
/// update, drawing one balanced batch per step. Checkpoints every
/// `plan.checkpoint_every` iterations and at the end.
pub fn run_training(plan: &TrainPlan, split: &ProtocolSplit, model: FasModel, ctx: &RunContext) -> Result<TrainOutcome> {
    plan.validate()?;
    let (mut model, mut opt, start) = match &ctx.resume {
        None => (
            model,
            AdamW::new(plan.betas, plan.eps, plan.weight_decay, plan.decoupled_weight_decay),
            0,
        ),
        Some(path) => {
            let archive = load_archive(path)?;
            let m = &archive.manifest;
            if m.strategy.as_deref() != Some(plan.strategy.name()) {
                return Err(Error::checkpoint(
                    path,
                    format!("was written by strategy {:?}, not {}", m.strategy, plan.strategy),
                ));
            }
            if m.seed != plan.seed {
                return Err(Error::checkpoint(path, format!("has seed {}, the plan uses {}", m.seed, plan.seed)));
            }
            if m.config_hash != ctx.config_hash {
                log::warn!("resuming from a checkpoint written under a different configuration");
            }
            let mut opt = AdamW::new(plan.betas, plan.eps, plan.weight_decay, plan.decoupled_weight_decay);
            opt.restore(&archive.model.store, &archive.extra)?;
            (archive.model, opt, m.iteration)
        }
    };
    if start > plan.iterations {
        return Err(Error::Config(format!(
            "checkpoint is at iteration {start}, past the planned {}",
            plan.iterations
        )));
    }

    let domains = split.train_domains();
    let sampler = BalancedSampler::new(&domains, plan.per_domain_batch, plan.seed)?;
    if plan.strategy == Strategy::MCL && sampler.batch_size() < 2 {
        return Err(Error::DegenerateBatch(sampler.batch_size()));
    }
    let mut log_writer = match &ctx.out_dir {
        Some(dir) => {
            let note = format!(
                "config_hash={} seed={} code_version={}",
                ctx.config_hash,
                plan.seed,
                env!("CARGO_PKG_VERSION")
            );
            Some(open_log(dir, start, &note)?)
        }
        None => None,
    };
    let clock = Instant::now();
    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();

    for t in start..plan.iterations {
        let batch = sampler.batch(t as u64);
        let images: Vec<Arc<FaceImage>> = batch
            .par_iter()
            .map(|s| ctx.images.get(&s.path))
            .collect::<Result<_>>()?;
        let refs: Vec<&FaceImage> = images.iter().map(|a| a.as_ref()).collect();
        let labels: Vec<Class> = batch.iter().map(|s| s.label).collect();
        let lr = plan.schedule.lr(plan.lr, t, plan.iterations);
        let step = match plan.strategy {
            Strategy::V => train_step_v(&mut model, &mut opt, plan, lr, &refs, &labels),
            Strategy::IT => train_step_it(&mut model, &mut opt, plan, lr, ctx.prompts, &refs, &labels),
            Strategy::MCL => {
                let pairs = refs
                    .iter()
                    .zip(&labels)
                    .enumerate()
                    .map(|(i, (img, label))| {
                        let mut rng = rng_for(plan.seed, &[stream::AUGMENT, t as u64, i as u64]);
                        make_views(img, *label, ctx.prompts, &plan.augment, &mut rng)
                    })
                    .collect::<Result<Vec<_>>>()?;
                train_step_mcl(&mut model, &mut opt, plan, lr, ctx.prompts, &pairs)
            }
        };
        let losses: StepLosses = match step {
            Ok(l) => l,
            Err(Error::NonFiniteLoss { detail, .. }) => {
                if let Some(dir) = &ctx.out_dir {
                    diagnostic_dump(dir, t + 1, &detail, lr, &batch, &model);
                }
                return Err(Error::NonFiniteLoss {
                    iteration: t + 1,
                    detail,
                });
            }
            Err(e) => return Err(e),
        };
        let row = LogRow {
            iteration: t + 1,
            l_ce: losses.l_ce,
            l_simclr: losses.l_simclr,
            l_mse: losses.l_mse,
            l_total: losses.l_total,
            lr,
            wall_time: clock.elapsed().as_secs_f64(),
        };
        if let Some(w) = &mut log_writer {
            w.serialize(&row)?;
            w.flush().map_err(|e| Error::io(LOG_FILE, e))?;
        }
        log::debug!("iteration {} loss {:.6}", row.iteration, row.l_total);
        rows.push(row);

        let done = t + 1;
        if let Some(dir) = &ctx.out_dir {
            if plan.checkpoint_every > 0 && done % plan.checkpoint_every == 0 && done < plan.iterations {
                let path = checkpoint_path(dir, done);
                write_checkpoint(&path, &model, &opt, plan, done, &ctx.config_hash)?;
                checkpoints.push(path);
            }
        }
    }

    if let Some(dir) = &ctx.out_dir {
        let path = dir.join(FINAL_CHECKPOINT);
        write_checkpoint(&path, &model, &opt, plan, plan.iterations, &ctx.config_hash)?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        iteration: plan.iterations,
        log: rows,
        checkpoints,
    })
}
