//! The work behind each subcommand.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use fas_core::data::synthetic::{in_memory, write_to_disk};
use fas_core::data::{build_protocol, DataRoot, Domain, DomainSource, ImageStore, ProtocolId, ProtocolSplit, SyntheticConfig};
use fas_core::encoders::{load_archive, load_pretrained, FasModel, ModelConfig, PretrainedOptions};
use fas_core::evaluation::{
    aggregate_seeds, evaluate, histogram_svg, infer_scores, paired_ttest, render_table, roc_curve, roc_svg,
    score_image, write_roc_csv, AggregateReport, MetricReport, RunMeta, Scorer, TTest,
};
use fas_core::prompts::{embed_prompt_set, PromptSet};
use fas_core::training::{run_training, RunContext, Strategy, CHECKPOINT_DIR, FINAL_CHECKPOINT};

use crate::config::{ModelKind, ModelSource, RunConfig};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const REPORT_FILE: &str = "report.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const RUN_FILE: &str = "run.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

/// Identity of one seed's run, written next to its artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStamp {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub protocol: String,
    pub split: String,
    pub strategy: String,
}

impl RunStamp {
    fn note(&self) -> String {
        format!(
            "config_hash={} seed={} code_version={}",
            self.config_hash, self.seed, self.code_version
        )
    }
}

/// Data, prompts and images shared by every seed of a run.
pub struct Workspace {
    pub cfg: RunConfig,
    pub hash: String,
    pub images: ImageStore,
    pub prompts: PromptSet,
    source: Box<dyn DomainSource>,
}

impl Workspace {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let hash = cfg.hash();
        let image_size = model_config(&cfg.model)?.image_size;
        let images = ImageStore::new(image_size, true);
        let source: Box<dyn DomainSource> = match &cfg.data.synthetic {
            Some(syn) => {
                ensure!(
                    syn.size == image_size,
                    "data.synthetic.size is {} but the model expects {image_size}",
                    syn.size
                );
                // All domains, always in the same order, so a split sees the
                // same images whatever protocol asked for it.
                Box::new(in_memory(&Domain::ALL, syn, &images)?)
            }
            None => Box::new(DataRoot(cfg.data_root()?)),
        };
        let prompts = cfg.prompt_set()?;
        Ok(Self {
            cfg,
            hash,
            images,
            prompts,
            source,
        })
    }

    pub fn split(&self, seed: u64) -> Result<ProtocolSplit> {
        let p = &self.cfg.protocol;
        let split = build_protocol(&self.cfg.spec()?, self.source.as_ref(), p.shots, p.supplementary, seed)?;
        Ok(split)
    }

    pub fn stamp(&self, seed: u64) -> RunStamp {
        RunStamp {
            config_hash: self.hash.clone(),
            seed,
            code_version: CODE_VERSION.to_string(),
            protocol: self.cfg.protocol.id.name().to_string(),
            split: self.cfg.spec().map(|s| s.name()).unwrap_or_default(),
            strategy: self.cfg.train.strategy.label().to_string(),
        }
    }

    fn fresh_model(&self, seed: u64) -> Result<FasModel> {
        let src = &self.cfg.model;
        Ok(match src.kind {
            ModelKind::Toy => FasModel::new(ModelConfig::toy(), seed)?,
            ModelKind::VitB16 => FasModel::new(ModelConfig::vit_b16(), seed)?,
            ModelKind::Pretrained => {
                let path = src.path.as_ref().context("model.path is required")?;
                let opts = PretrainedOptions {
                    seed,
                    merges: src.merges.clone(),
                    ..Default::default()
                };
                let (model, report) = load_pretrained(path, &opts)?;
                log::info!(
                    "loaded {} tensors from {}; {} initialized fresh",
                    report.mapped,
                    path.display(),
                    report.initialized.len()
                );
                model
            }
        })
    }
}

fn model_config(src: &ModelSource) -> Result<ModelConfig> {
    Ok(match src.kind {
        ModelKind::Toy => ModelConfig::toy(),
        ModelKind::VitB16 | ModelKind::Pretrained => ModelConfig::vit_b16(),
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir.join(CHECKPOINT_DIR))
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
        .collect();
    found.sort();
    found.pop()
}

/// What `train` produced for one seed.
#[derive(Debug)]
pub struct TrainedSeed {
    pub seed: u64,
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub final_loss: Option<f64>,
}

/// Trains one model per configured seed. With `resume`, a seed whose
/// directory already holds checkpoints continues from the latest one.
pub fn cmd_train(ws: &Workspace, resume: bool) -> Result<Vec<TrainedSeed>> {
    let cfg = &ws.cfg;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let dir = cfg.seed_dir(seed);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let stamp = ws.stamp(seed);
        fs::write(dir.join(CONFIG_SNAPSHOT), format!("# {}\n{}", stamp.note(), cfg.to_toml()))?;
        write_json(&dir.join(RUN_FILE), &stamp)?;

        let split = ws.split(seed)?;
        let mut plan = cfg.train.clone();
        plan.seed = seed;
        let resume_from = if resume { latest_checkpoint(&dir) } else { None };
        if let Some(p) = &resume_from {
            log::info!("seed {seed}: resuming from {}", p.display());
        }
        log::info!(
            "seed {seed}: {} on {} for {} iterations",
            plan.strategy.label(),
            split.name(),
            plan.iterations
        );
        let ctx = RunContext {
            images: &ws.images,
            prompts: &ws.prompts,
            out_dir: Some(dir.clone()),
            config_hash: ws.hash.clone(),
            resume: resume_from,
        };
        let outcome = run_training(&plan, &split, ws.fresh_model(seed)?, &ctx)
            .with_context(|| format!("training seed {seed}"))?;
        out.push(TrainedSeed {
            seed,
            checkpoint: dir.join(FINAL_CHECKPOINT),
            dir,
            final_loss: outcome.log.last().map(|r| r.l_total),
        });
    }
    Ok(out)
}

/// What `eval` produced.
#[derive(Debug)]
pub struct EvalOutcome {
    pub reports: Vec<MetricReport>,
    pub aggregate: Option<AggregateReport>,
    pub table: Option<String>,
    pub ttest: Option<TTest>,
}

/// Scores the test pool of every seed, writes per-seed reports, and
/// aggregates. `checkpoints` overrides the default
/// `<output_dir>/seed_<s>/final.safetensors`; each is matched to its seed
/// through its manifest.
pub fn cmd_eval(ws: &Workspace, checkpoints: &[PathBuf]) -> Result<EvalOutcome> {
    let cfg = &ws.cfg;
    // Fail before any scoring if the comparison cannot be made.
    if let Some(b) = &cfg.eval.baseline {
        ensure!(b.is_dir(), "baseline directory {} does not exist", b.display());
    }
    let mut given: HashMap<u64, PathBuf> = HashMap::new();
    for path in checkpoints {
        let seed = load_archive(path)?.manifest.seed;
        if given.insert(seed, path.clone()).is_some() {
            bail!("two checkpoints were given for seed {seed}");
        }
    }
    let strategy = cfg.train.strategy;
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let dir = cfg.seed_dir(seed);
        let path = given.remove(&seed).unwrap_or_else(|| dir.join(FINAL_CHECKPOINT));
        let archive = load_archive(&path).with_context(|| format!("seed {seed}"))?;
        let m = &archive.manifest;
        if let Some(tag) = &m.strategy {
            let written: Strategy = tag.parse()?;
            ensure!(
                written == strategy,
                "{} was trained with {}, but the config evaluates {}",
                path.display(),
                written.label(),
                strategy.label()
            );
        }
        if m.config_hash != ws.hash {
            log::warn!("{} was written under a different configuration", path.display());
        }
        let split = ws.split(seed)?;
        let inference = infer_scores(&archive.model, strategy, split.test_samples(), &ws.images, &ws.prompts)?;
        fs::create_dir_all(&dir)?;
        let stamp = ws.stamp(seed);
        inference.scores.save_csv_annotated(&dir.join(SCORES_FILE), &stamp.note())?;
        let meta = RunMeta {
            protocol: stamp.protocol.clone(),
            split: stamp.split.clone(),
            strategy: stamp.strategy.clone(),
            seed,
            config_hash: ws.hash.clone(),
            code_version: CODE_VERSION.to_string(),
        };
        let report = evaluate(&inference.scores, cfg.eval.threshold, cfg.eval.fpr_target, meta)?;
        report.save_json(&dir.join(REPORT_FILE))?;
        if cfg.eval.plots {
            let roc = roc_curve(&inference.scores)?;
            write_roc_csv(&dir.join("roc.csv"), &roc)?;
            let title = format!("{} {} seed {seed}", stamp.strategy, stamp.split);
            fs::write(dir.join("roc.svg"), roc_svg(&roc, &title))?;
            fs::write(dir.join("scores.svg"), histogram_svg(&inference.scores, 20, &title))?;
        }
        log::info!(
            "seed {seed}: HTER {:.2}% AUC {:.2}% TPR@FPR={}% {:.2}%{}",
            100.0 * report.hter,
            100.0 * report.auc,
            100.0 * report.fpr_target,
            100.0 * report.tpr_at_fpr,
            if inference.missing.is_empty() {
                String::new()
            } else {
                format!(" ({} images missing)", inference.missing.len())
            }
        );
        reports.push(report);
    }

    let (aggregate, table) = if reports.len() >= 2 {
        let agg = aggregate_seeds(&reports)?;
        let table = render_table(std::slice::from_ref(&agg));
        write_json(&cfg.output_dir.join("aggregate.json"), &agg)?;
        fs::write(cfg.output_dir.join("table.txt"), &table)?;
        (Some(agg), Some(table))
    } else {
        (None, None)
    };
    let ttest = match &cfg.eval.baseline {
        Some(b) => {
            let t = compare_to_baseline(&reports, b)?;
            write_json(&cfg.output_dir.join("ttest.json"), &t)?;
            Some(t)
        }
        None => None,
    };
    Ok(EvalOutcome {
        reports,
        aggregate,
        table,
        ttest,
    })
}

/// Every `seed_*/report.json` below `dir`, in seed order.
pub fn collect_reports(dir: &Path) -> Result<Vec<MetricReport>> {
    ensure!(dir.is_dir(), "run directory {} does not exist", dir.display());
    let mut reports = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_seed = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("seed_"));
        if is_seed && path.join(REPORT_FILE).is_file() {
            reports.push(MetricReport::load_json(&path.join(REPORT_FILE))?);
        }
    }
    reports.sort_by_key(|r| r.meta.seed);
    Ok(reports)
}

/// One-sided paired t-test that `reports` have lower HTER than the
/// baseline run in `baseline`, pairing by seed.
pub fn compare_to_baseline(reports: &[MetricReport], baseline: &Path) -> Result<TTest> {
    ensure!(baseline.is_dir(), "baseline directory {} does not exist", baseline.display());
    let base: HashMap<u64, f64> = collect_reports(baseline)?
        .into_iter()
        .map(|r| (r.meta.seed, r.hter))
        .collect();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for r in reports {
        let other = base
            .get(&r.meta.seed)
            .with_context(|| format!("baseline has no report for seed {}", r.meta.seed))?;
        a.push(r.hter);
        b.push(*other);
    }
    Ok(paired_ttest(&a, &b)?)
}

/// Aggregates several run directories into one table, with an optional
/// t-test of each against `baseline`.
pub fn cmd_report(runs: &[PathBuf], baseline: Option<&Path>, out: Option<&Path>) -> Result<String> {
    let mut aggs = Vec::new();
    let mut lines = Vec::new();
    for dir in runs {
        let reports = collect_reports(dir)?;
        ensure!(
            reports.len() >= 2,
            "{} has {} seed report(s); at least 2 are needed",
            dir.display(),
            reports.len()
        );
        let agg = aggregate_seeds(&reports)?;
        if let Some(b) = baseline {
            let t = compare_to_baseline(&reports, b)?;
            lines.push(format!(
                "{} {} vs {}: t = {:.3}, p = {:.4} ({} at α = {})",
                agg.strategy,
                agg.split,
                b.display(),
                t.t,
                t.p,
                if t.reject { "significant" } else { "not significant" },
                t.alpha
            ));
        }
        if let Some(o) = out {
            fs::create_dir_all(o)?;
            for r in &reports {
                let scores = dir.join(format!("seed_{}", r.meta.seed)).join(SCORES_FILE);
                if scores.is_file() {
                    let s = fas_core::evaluation::ScoreSet::load_csv(&scores)?;
                    let name = format!("{}_{}_seed{}", agg.strategy, agg.split.replace('→', "-"), r.meta.seed);
                    fs::write(o.join(format!("{name}_roc.svg")), roc_svg(&roc_curve(&s)?, &name))?;
                    fs::write(o.join(format!("{name}_scores.svg")), histogram_svg(&s, 20, &name))?;
                }
            }
        }
        aggs.push(agg);
    }
    let mut text = render_table(&aggs);
    for l in &lines {
        text.push_str(l);
        text.push('\n');
    }
    if let Some(o) = out {
        fs::create_dir_all(o)?;
        fs::write(o.join("table.txt"), &text)?;
        write_json(&o.join("aggregate.json"), &aggs)?;
    }
    Ok(text)
}

/// Real-class probability of a single image.
pub fn cmd_infer(checkpoint: &Path, image: &Path, prompts: Option<&Path>, strategy: Option<Strategy>) -> Result<f64> {
    let archive = load_archive(checkpoint)?;
    let strategy = match (strategy, &archive.manifest.strategy) {
        (Some(s), _) => s,
        (None, Some(tag)) => tag.parse()?,
        (None, None) => bail!("{} records no strategy; pass --strategy", checkpoint.display()),
    };
    let model = &archive.model;
    let store = ImageStore::new(model.config.image_size, false);
    let img = store.get(image)?;
    let score = match strategy {
        Strategy::V => score_image(model, Scorer::Head, &img)?,
        Strategy::IT | Strategy::MCL => {
            let ps = match prompts {
                Some(p) => PromptSet::load(p)?,
                None => PromptSet::default(),
            };
            let emb = embed_prompt_set(&ps, model)?;
            score_image(model, Scorer::Prompts(&emb), &img)?
        }
    };
    Ok(score)
}

/// Split listing, one line per split.
pub fn protocol_listing(id: ProtocolId) -> Vec<String> {
    id.splits().iter().map(|s| format!("{:<8} {}", s.name(), s.describe())).collect()
}

pub fn cmd_synth(root: &Path, cfg: &SyntheticConfig) -> Result<()> {
    write_to_disk(root, &Domain::ALL, cfg)?;
    Ok(())
}
