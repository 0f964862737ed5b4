//! Fixtures and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fas_core::autograd::{Graph, ParamId, Var};
use fas_core::data::synthetic::{in_memory, synth_domain};
use fas_core::data::{
    make_views, AugmentConfig, AugmentedPair, Domain, DomainDataset, ImageStore, ProtocolId, ProtocolSplit,
    SyntheticConfig,
};
use fas_core::encoders::{FaceImage, FasModel, ModelConfig};
use fas_core::evaluation::{compute_auc, infer_scores};
use fas_core::label::Class;
use fas_core::prompts::PromptSet;
use fas_core::training::{run_training, LogRow, RunContext, Strategy, TrainPlan};

// ---------------------------------------------------------------- metrics

/// Accept-as-real decisions counted one by one.
pub fn hter_counts(scores: &[(f64, Class)], threshold: f64) -> (usize, usize, usize, usize) {
    let n_real = scores.iter().filter(|(_, c)| *c == Class::Real).count();
    let n_spoof = scores.len() - n_real;
    let fa = scores
        .iter()
        .filter(|(s, c)| *c == Class::Spoof && *s >= threshold)
        .count();
    let fr = scores
        .iter()
        .filter(|(s, c)| *c == Class::Real && *s < threshold)
        .count();
    (fa, n_spoof, fr, n_real)
}

/// All real/spoof pairs, ties counting one half.
pub fn auc_pairwise(scores: &[(f64, Class)]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (r, _) in scores.iter().filter(|(_, c)| *c == Class::Real) {
        for (s, _) in scores.iter().filter(|(_, c)| *c == Class::Spoof) {
            pairs += 1.0;
            if r > s {
                wins += 1.0;
            } else if r == s {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Sweep of every "accept iff score ≥ t" rule, for t at each sample score
/// and above the maximum.
pub fn tpr_at_fpr_sweep(scores: &[(f64, Class)], target: f64) -> f64 {
    let n_real = scores.iter().filter(|(_, c)| *c == Class::Real).count() as f64;
    let n_spoof = scores.len() as f64 - n_real;
    let mut thresholds: Vec<f64> = scores.iter().map(|(s, _)| *s).collect();
    thresholds.push(f64::INFINITY);
    let mut best = 0.0f64;
    for t in thresholds {
        let tp = scores.iter().filter(|(s, c)| *c == Class::Real && *s >= t).count() as f64;
        let fp = scores.iter().filter(|(s, c)| *c == Class::Spoof && *s >= t).count() as f64;
        if fp / n_spoof <= target {
            best = best.max(tp / n_real);
        }
    }
    best
}

/// Random score set with both classes present and deliberate ties (scores
/// drawn from a coarse grid half of the time).
pub fn random_scores(rng: &mut impl Rng, n: usize) -> Vec<(f64, Class)> {
    let coarse = rng.random_bool(0.5);
    let mut out: Vec<(f64, Class)> = (0..n)
        .map(|_| {
            let s = if coarse {
                rng.random_range(0..=10) as f64 / 10.0
            } else {
                rng.random::<f64>()
            };
            let c = if rng.random_bool(0.5) { Class::Real } else { Class::Spoof };
            (s, c)
        })
        .collect();
    out[0].1 = Class::Real;
    out[1].1 = Class::Spoof;
    out
}

// ----------------------------------------------------------------- losses

/// NT-Xent written out term by term over the 2n views.
pub fn nt_xent_enumerated(h1: &Array2<f64>, h2: &Array2<f64>, tau: f64) -> f64 {
    let n = h1.nrows();
    let views: Vec<Vec<f64>> = h1.rows().into_iter().chain(h2.rows()).map(|r| r.to_vec()).collect();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut total = 0.0;
    for i in 0..2 * n {
        let pos = (i + n) % (2 * n);
        let num = (cos(&views[i], &views[pos]) / tau).exp();
        let den: f64 = (0..2 * n)
            .filter(|&k| k != i)
            .map(|k| (cos(&views[i], &views[k]) / tau).exp())
            .sum();
        total += -(num / den).ln();
    }
    total / (2 * n) as f64
}

// --------------------------------------------------------------- fixtures

pub const TRAIN_DOMAINS: [Domain; 2] = [Domain::Msu, Domain::Casia];

/// Two synthetic source domains for training and a held-out pool drawn
/// from the same two domains with a different generator seed.
pub fn synthetic_split(cfg: &SyntheticConfig, seed: u64) -> (ImageStore, ProtocolSplit) {
    let store = ImageStore::new(cfg.size, true);
    let reg = in_memory(&TRAIN_DOMAINS, cfg, &store).unwrap();
    let sources: Vec<DomainDataset> = TRAIN_DOMAINS.iter().map(|d| reg[d].clone()).collect();
    let held = SyntheticConfig {
        seed: cfg.seed + 1000,
        ..cfg.clone()
    };
    let mut test = Vec::new();
    for (i, d) in TRAIN_DOMAINS.iter().enumerate() {
        for (s, img) in synth_domain(&format!("heldout-{}", d.id()), i, &held) {
            store.insert(s.path.clone(), img);
            test.push(s);
        }
    }
    let split = ProtocolSplit {
        spec: ProtocolId::One.find("M").unwrap(),
        sources,
        target: DomainDataset::new("heldout", test).unwrap(),
        supplementary: None,
        few_shot: None,
        shots: 0,
        seed,
    };
    (store, split)
}

/// A few labeled toy images.
pub fn toy_images(n: usize, seed: u64) -> (Vec<FaceImage>, Vec<Class>) {
    let cfg = SyntheticConfig {
        real: n.div_ceil(2),
        print: n / 2,
        replay: 0,
        seed,
        ..Default::default()
    };
    let (imgs, labels) = synth_domain("toy", 0, &cfg)
        .into_iter()
        .map(|(s, img)| (img, s.label))
        .unzip();
    (imgs, labels)
}

pub fn toy_pairs(n: usize, seed: u64) -> Vec<AugmentedPair> {
    let (imgs, labels) = toy_images(n, seed);
    let ps = PromptSet::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    imgs.iter()
        .zip(labels)
        .map(|(img, c)| make_views(img, c, &ps, &AugmentConfig::default(), &mut rng).unwrap())
        .collect()
}

pub fn toy_model(seed: u64) -> FasModel {
    FasModel::new(ModelConfig::toy(), seed).unwrap()
}

// -------------------------------------------------------- gradient checks

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_REL_TOL: f64 = 1e-2;
/// Denominator floor of the relative error, so coordinates whose true
/// gradient is zero are not judged on round-off.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    /// Coordinates where either gradient exceeds the floor.
    pub nontrivial: usize,
    pub nontrivial_passed: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn pass_rate(&self) -> f64 {
        self.passed as f64 / self.checked.max(1) as f64
    }

    pub fn nontrivial_pass_rate(&self) -> f64 {
        self.nontrivial_passed as f64 / self.nontrivial.max(1) as f64
    }
}

/// Compares analytic gradients of `loss` with central differences on a
/// random `fraction` of each tensor in `ids` (at least one coordinate per
/// tensor).
pub fn grad_check(
    model: &mut FasModel,
    ids: &[ParamId],
    fraction: f64,
    seed: u64,
    loss: impl Fn(&mut Graph, &FasModel) -> Var,
) -> GradCheck {
    let eval = |m: &FasModel| {
        let mut g = Graph::new();
        let v = loss(&mut g, m);
        g.scalar(v)
    };
    let mut g = Graph::new();
    let out = loss(&mut g, model);
    let grads = g.backward(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck::default();
    for &id in ids {
        let numel = model.store.get(id).len();
        let ncols = model.store.get(id).ncols();
        let analytic = grads.param(id).cloned();
        let k = ((numel as f64 * fraction).ceil() as usize).clamp(1, numel);
        for flat in sample(&mut rng, numel, k) {
            let (r, c) = (flat / ncols, flat % ncols);
            let a = analytic.as_ref().map_or(0.0, |t| t[[r, c]]);
            let orig = model.store.get(id)[[r, c]];
            model.store.get_mut(id)[[r, c]] = orig + FD_STEP;
            let fp = eval(model);
            model.store.get_mut(id)[[r, c]] = orig - FD_STEP;
            let fm = eval(model);
            model.store.get_mut(id)[[r, c]] = orig;
            let n = (fp - fm) / (2.0 * FD_STEP);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR);
            let ok = rel <= GRAD_REL_TOL;
            report.checked += 1;
            report.passed += ok as usize;
            if a.abs().max(n.abs()) > GRAD_FLOOR {
                report.nontrivial += 1;
                report.nontrivial_passed += ok as usize;
            }
            report.worst = report.worst.max(rel);
        }
    }
    report
}

// --------------------------------------------------------- smoke training

#[derive(Debug)]
pub struct Smoke {
    pub first: f64,
    pub last: f64,
    pub auc: f64,
    pub log: Vec<LogRow>,
}

impl Smoke {
    pub fn reduction(&self) -> f64 {
        1.0 - self.last / self.first
    }
}

pub const SMOKE_ITERATIONS: usize = 300;
/// Iterations averaged at each end of the run to compare losses.
pub const SMOKE_WINDOW: usize = 20;

pub fn smoke_plan(strategy: Strategy) -> TrainPlan {
    TrainPlan {
        iterations: SMOKE_ITERATIONS,
        lr: 1e-3,
        per_domain_batch: 4,
        checkpoint_every: usize::MAX,
        ..TrainPlan::new(strategy)
    }
}

pub fn smoke_train(strategy: Strategy) -> Smoke {
    let cfg = SyntheticConfig::default();
    let (store, split) = synthetic_split(&cfg, 0);
    let plan = smoke_plan(strategy);
    let prompts = PromptSet::default();
    let ctx = RunContext {
        images: &store,
        prompts: &prompts,
        out_dir: None,
        config_hash: String::new(),
        resume: None,
    };
    let out = run_training(&plan, &split, toy_model(plan.seed), &ctx).unwrap();
    let mean = |rows: &[LogRow]| rows.iter().map(|r| r.l_total).sum::<f64>() / rows.len() as f64;
    let first = mean(&out.log[..SMOKE_WINDOW]);
    let last = mean(&out.log[out.log.len() - SMOKE_WINDOW..]);
    let scores = infer_scores(&out.model, strategy, split.test_samples(), &store, &prompts).unwrap();
    Smoke {
        first,
        last,
        auc: compute_auc(&scores.scores).unwrap(),
        log: out.log,
    }
}

/// Parameter values, for bit-level comparisons.
pub fn snapshot(model: &FasModel) -> Vec<(String, Vec<u64>)> {
    model
        .store
        .ids()
        .map(|id| {
            let bits = model.store.get(id).iter().map(|v| v.to_bits()).collect();
            (model.store.name(id).to_string(), bits)
        })
        .collect()
}

/// Trainable parameter values only; normalization buffers still track batch
/// statistics when the learning rate is zero.
pub fn trainable_snapshot(model: &FasModel) -> Vec<(String, Vec<u64>)> {
    model
        .store
        .ids()
        .filter(|&id| model.store.is_trainable(id))
        .map(|id| {
            let bits = model.store.get(id).iter().map(|v| v.to_bits()).collect();
            (model.store.name(id).to_string(), bits)
        })
        .collect()
}
