//! The three finetuning strategies and the loop that drives them.

mod optim;
mod run;
mod step;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use optim::{AdamW, LrSchedule};
pub use run::{read_log, run_training, LogRow, RunContext, TrainOutcome, CHECKPOINT_DIR, FINAL_CHECKPOINT, LOG_FILE};
pub use step::{
    loss_it, loss_mcl, loss_v, train_step_it, train_step_mcl, train_step_v, trainable_params, LossParts,
    StepLosses,
};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, DEFAULT_SIMCLR_TEMPERATURE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Image encoder plus MLP head, cross-entropy on the head logits.
    V,
    /// Image and text encoders, cross-entropy on image/prompt-ensemble
    /// similarities.
    IT,
    /// `IT` plus view-contrastive and view-consistency losses.
    MCL,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::V, Strategy::IT, Strategy::MCL];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::V => "v",
            Strategy::IT => "it",
            Strategy::MCL => "mcl",
        }
    }

    /// Table label, e.g. `FLIP-MCL`.
    pub fn label(self) -> &'static str {
        match self {
            Strategy::V => "FLIP-V",
            Strategy::IT => "FLIP-IT",
            Strategy::MCL => "FLIP-MCL",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().trim_start_matches("flip-") {
            "v" => Ok(Strategy::V),
            "it" => Ok(Strategy::IT),
            "mcl" => Ok(Strategy::MCL),
            _ => Err(Error::Config(format!("unknown strategy `{s}` (expected v, it or mcl)"))),
        }
    }
}

/// Which image feeds the cross-entropy term of `MCL`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CeView {
    /// The untransformed image (a third encoder pass).
    Original,
    /// The first augmented view.
    View1,
}

/// Everything that controls one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub strategy: Strategy,
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Decay applied directly to the weights (AdamW) rather than through
    /// the gradient.
    pub decoupled_weight_decay: bool,
    pub betas: [f64; 2],
    pub eps: f64,
    pub schedule: LrSchedule,
    /// Maximum global gradient norm; no clipping when absent.
    pub grad_clip: Option<f64>,
    pub per_domain_batch: usize,
    pub weights: LossWeights,
    pub simclr_temperature: f64,
    pub shots: usize,
    pub seed: u64,
    pub freeze_text: bool,
    pub freeze_logit_scale: bool,
    pub freeze_position_embeddings: bool,
    /// Write a checkpoint every this many iterations; 0 writes only the
    /// final one.
    pub checkpoint_every: usize,
    pub mcl_ce_view: CeView,
    pub augment: AugmentConfig,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            strategy: Strategy::MCL,
            iterations: 4000,
            lr: 1e-6,
            weight_decay: 1e-6,
            decoupled_weight_decay: true,
            betas: [0.9, 0.999],
            eps: 1e-8,
            schedule: LrSchedule::Constant,
            grad_clip: None,
            per_domain_batch: 3,
            weights: LossWeights::default(),
            simclr_temperature: DEFAULT_SIMCLR_TEMPERATURE,
            shots: 0,
            seed: 0,
            freeze_text: false,
            freeze_logit_scale: false,
            freeze_position_embeddings: false,
            checkpoint_every: 500,
            mcl_ce_view: CeView::Original,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainPlan {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and nonnegative, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be finite and nonnegative, got {}", self.weight_decay));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if self.per_domain_batch == 0 {
            return bad("per_domain_batch must be positive".into());
        }
        if !(self.simclr_temperature > 0.0) {
            return bad("simclr_temperature must be positive".into());
        }
        self.weights.validate().map_err(|e| Error::Config(format!("weights: {e}")))?;
        self.schedule.validate()?;
        self.augment.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_published_setup() {
        let p = TrainPlan::default();
        assert_eq!(p.iterations, 4000);
        assert_eq!(p.lr, 1e-6);
        assert_eq!(p.weight_decay, 1e-6);
        assert_eq!(p.per_domain_batch, 3);
        assert_eq!(p.betas, [0.9, 0.999]);
        assert_eq!(p.schedule, LrSchedule::Constant);
        assert_eq!(p.grad_clip, None);
        assert_eq!(p.checkpoint_every, 500);
        p.validate().unwrap();
    }

    #[test]
    fn plan_round_trips_and_rejects_unknown_keys() {
        let p = TrainPlan::new(Strategy::IT);
        let text = toml::to_string(&p).unwrap();
        assert_eq!(toml::from_str::<TrainPlan>(&text).unwrap(), p);
        let partial: TrainPlan = toml::from_str("strategy = \"v\"\niterations = 10").unwrap();
        assert_eq!(partial.strategy, Strategy::V);
        assert_eq!(partial.lr, 1e-6);
        assert!(toml::from_str::<TrainPlan>("learning_rate = 1.0").is_err());
    }

    #[test]
    fn strategy_names_parse() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            assert_eq!(s.label().parse::<Strategy>().unwrap(), s);
        }
        assert!("clip".parse::<Strategy>().is_err());
    }
}
