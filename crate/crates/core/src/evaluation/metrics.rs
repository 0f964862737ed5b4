//! Biometric error metrics over a set of liveness scores.
//!
//! A score is the predicted probability that the face is real. A sample is
//! accepted as real when its score is at or above the threshold, so the
//! positive class is `real`: FAR is the fraction of spoofs accepted, FRR
//! the fraction of real faces rejected, and the ROC plots TPR = 1 − FRR
//! against FPR = FAR.

use std::collections::HashSet;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Class;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub sample_id: String,
    /// Probability of the real class.
    pub score: f64,
    pub label: Class,
}

/// Scores of one evaluation run, one per test sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    entries: Vec<ScoreEntry>,
}

impl ScoreSet {
    pub fn new(entries: Vec<ScoreEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !e.score.is_finite() {
                return Err(Error::InvalidInput(format!("score of {} is not finite", e.sample_id)));
            }
            if !seen.insert(e.sample_id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate sample id {}", e.sample_id)));
            }
        }
        Ok(Self { entries })
    }

    /// Builds a set from `(score, label)` pairs with generated identifiers.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (f64, Class)>) -> Result<Self> {
        Self::new(
            pairs
                .into_iter()
                .enumerate()
                .map(|(i, (score, label))| ScoreEntry {
                    sample_id: format!("s{i}"),
                    score,
                    label,
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[ScoreEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scores(&self, class: Class) -> Vec<f64> {
        self.entries.iter().filter(|e| e.label == class).map(|e| e.score).collect()
    }

    pub fn count(&self, class: Class) -> usize {
        self.entries.iter().filter(|e| e.label == class).count()
    }

    fn require_both(&self) -> Result<(usize, usize)> {
        let (r, s) = (self.count(Class::Real), self.count(Class::Spoof));
        match (r, s) {
            (0, _) => Err(Error::SingleClass("spoof")),
            (_, 0) => Err(Error::SingleClass("real")),
            _ => Ok((r, s)),
        }
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.save_csv_annotated(path, "")
    }

    /// Like [`ScoreSet::save_csv`], with `note` written first as `#` comment
    /// lines.
    pub fn save_csv_annotated(&self, path: &Path, note: &str) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for line in note.lines() {
            writeln!(file, "# {line}").map_err(|e| Error::io(path, e))?;
        }
        let mut w = csv::Writer::from_writer(file);
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
        let entries = r.deserialize().collect::<std::result::Result<Vec<ScoreEntry>, _>>()?;
        Self::new(entries)
    }
}

/// How the accept/reject threshold on the real-class probability is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ThresholdPolicy {
    Fixed(f64),
    /// The ROC threshold where FAR and FRR are closest.
    Eer,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Fixed(0.5)
    }
}

impl fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdPolicy::Fixed(t) => write!(f, "fixed:{t}"),
            ThresholdPolicy::Eer => f.write_str("eer"),
        }
    }
}

impl FromStr for ThresholdPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "eer" => Ok(ThresholdPolicy::Eer),
            "fixed" => Ok(ThresholdPolicy::default()),
            _ => {
                let v = s.strip_prefix("fixed:").unwrap_or(&s);
                v.parse::<f64>()
                    .ok()
                    .filter(|t| t.is_finite())
                    .map(ThresholdPolicy::Fixed)
                    .ok_or_else(|| Error::Config(format!("threshold policy `{s}`: use `eer`, `fixed` or `fixed:<t>`")))
            }
        }
    }
}

impl TryFrom<String> for ThresholdPolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ThresholdPolicy> for String {
    fn from(p: ThresholdPolicy) -> String {
        p.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorRates {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
    pub hter: f64,
}

/// FAR, FRR and their mean at `threshold`.
pub fn error_rates(s: &ScoreSet, threshold: f64) -> Result<ErrorRates> {
    let (n_real, n_spoof) = s.require_both()?;
    let mut false_accepts = 0usize;
    let mut false_rejects = 0usize;
    for e in s.entries() {
        let accepted = e.score >= threshold;
        match (e.label, accepted) {
            (Class::Spoof, true) => false_accepts += 1,
            (Class::Real, false) => false_rejects += 1,
            _ => {}
        }
    }
    let far = false_accepts as f64 / n_spoof as f64;
    let frr = false_rejects as f64 / n_real as f64;
    Ok(ErrorRates {
        threshold,
        far,
        frr,
        hter: (far + frr) / 2.0,
    })
}

/// HTER under a threshold policy.
pub fn compute_hter(s: &ScoreSet, policy: ThresholdPolicy) -> Result<ErrorRates> {
    match policy {
        ThresholdPolicy::Fixed(t) => error_rates(s, t),
        ThresholdPolicy::Eer => error_rates(s, eer(s)?.threshold),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC operating points from the strictest threshold to the most lenient:
/// `+∞`, the midpoints between consecutive distinct scores, then `−∞`.
pub fn roc_curve(s: &ScoreSet) -> Result<Vec<RocPoint>> {
    let (n_real, n_spoof) = s.require_both()?;
    let mut sorted: Vec<(f64, Class)> = s.entries().iter().map(|e| (e.score, e.label)).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == score {
            match sorted[i].1 {
                Class::Real => tp += 1,
                Class::Spoof => fp += 1,
            }
            i += 1;
        }
        let threshold = match sorted.get(i) {
            Some(next) => (score + next.0) / 2.0,
            None => f64::NEG_INFINITY,
        };
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / n_spoof as f64,
            tpr: tp as f64 / n_real as f64,
        });
    }
    Ok(points)
}

/// Probability that a random real sample outscores a random spoof, ties
/// counting one half (normalized Mann–Whitney U).
pub fn compute_auc(s: &ScoreSet) -> Result<f64> {
    let (n_real, n_spoof) = s.require_both()?;
    let mut sorted: Vec<(f64, Class)> = s.entries().iter().map(|e| (e.score, e.label)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of (1-based, tie-averaged) ranks of the real samples.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let reals = sorted[i..j].iter().filter(|(_, c)| *c == Class::Real).count();
        rank_sum += avg_rank * reals as f64;
        i = j;
    }
    let (nr, ns) = (n_real as f64, n_spoof as f64);
    Ok((rank_sum - nr * (nr + 1.0) / 2.0) / (nr * ns))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TprAtFpr {
    pub tpr: f64,
    pub threshold: f64,
    pub fpr: f64,
    /// Fewer than `1 / target` spoofs: the FPR grid is coarser than the
    /// target.
    pub quantization_limited: bool,
}

/// Highest TPR over ROC thresholds whose FPR does not exceed `target`.
pub fn compute_tpr_at_fpr(s: &ScoreSet, target: f64) -> Result<TprAtFpr> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::InvalidInput(format!("FPR target {target} outside [0, 1]")));
    }
    let roc = roc_curve(s)?;
    let best = roc
        .iter()
        .filter(|p| p.fpr <= target)
        .max_by(|a, b| a.tpr.total_cmp(&b.tpr).then(b.fpr.total_cmp(&a.fpr)))
        .expect("the +∞ point has zero FPR");
    let limited = (s.count(Class::Spoof) as f64) * target < 1.0;
    if limited {
        log::warn!(
            "TPR@FPR={target} uses only {} spoof samples; the value is quantization-limited",
            s.count(Class::Spoof)
        );
    }
    Ok(TprAtFpr {
        tpr: best.tpr,
        threshold: best.threshold,
        fpr: best.fpr,
        quantization_limited: limited,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eer {
    /// ROC threshold where |FAR − FRR| is smallest.
    pub threshold: f64,
    /// Error rate where the piecewise-linear FAR and FRR curves cross.
    pub rate: f64,
}

/// Equal error rate and the ROC threshold closest to it.
pub fn eer(s: &ScoreSet) -> Result<Eer> {
    let roc = roc_curve(s)?;
    let gap = |p: &RocPoint| (1.0 - p.tpr) - p.fpr;
    let best = roc
        .iter()
        .min_by(|a, b| gap(a).abs().total_cmp(&gap(b).abs()))
        .expect("ROC is never empty");
    // FRR − FAR falls from 1 at +∞ to −1 at −∞; find the crossing segment.
    let mut rate = (best.fpr + 1.0 - best.tpr) / 2.0;
    for w in roc.windows(2) {
        let (g0, g1) = (gap(&w[0]), gap(&w[1]));
        if g0 >= 0.0 && g1 <= 0.0 {
            let f = if g0 == g1 { 0.0 } else { g0 / (g0 - g1) };
            let far = w[0].fpr + f * (w[1].fpr - w[0].fpr);
            let frr = (1.0 - w[0].tpr) + f * ((1.0 - w[1].tpr) - (1.0 - w[0].tpr));
            rate = (far + frr) / 2.0;
            break;
        }
    }
    Ok(Eer {
        threshold: best.threshold,
        rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Class::{Real, Spoof};

    fn set(pairs: &[(f64, Class)]) -> ScoreSet {
        ScoreSet::from_pairs(pairs.iter().copied()).unwrap()
    }

    #[test]
    fn perfect_separation() {
        let s = set(&[(0.9, Real), (0.8, Real), (0.2, Spoof), (0.1, Spoof)]);
        assert_eq!(error_rates(&s, 0.5).unwrap().hter, 0.0);
        assert_eq!(compute_auc(&s).unwrap(), 1.0);
        assert_eq!(compute_tpr_at_fpr(&s, 0.01).unwrap().tpr, 1.0);
    }

    #[test]
    fn hter_is_mean_of_far_and_frr() {
        // 10 real with 1 rejected; 10 spoof with 2 accepted.
        let mut pairs = vec![(0.2, Real)];
        pairs.extend([(0.9, Real); 9]);
        pairs.extend([(0.7, Spoof); 2]);
        pairs.extend([(0.1, Spoof); 8]);
        let r = error_rates(&set(&pairs), 0.5).unwrap();
        assert!((r.far - 0.2).abs() < 1e-15);
        assert!((r.frr - 0.1).abs() < 1e-15);
        assert!((r.hter - 0.15).abs() < 1e-15);
    }

    #[test]
    fn all_ties_give_half_auc() {
        let s = set(&[(0.4, Real), (0.4, Spoof), (0.4, Real), (0.4, Spoof)]);
        assert_eq!(compute_auc(&s).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_rejected() {
        let s = set(&[(0.4, Real), (0.6, Real)]);
        assert!(matches!(compute_auc(&s), Err(Error::SingleClass(_))));
        assert!(compute_hter(&s, ThresholdPolicy::default()).is_err());
        assert!(compute_tpr_at_fpr(&s, 0.01).is_err());
    }

    #[test]
    fn roc_has_sentinels_and_midpoints() {
        let s = set(&[(0.9, Real), (0.5, Spoof), (0.5, Real), (0.1, Spoof)]);
        let roc = roc_curve(&s).unwrap();
        let th: Vec<f64> = roc.iter().map(|p| p.threshold).collect();
        assert_eq!(th, [f64::INFINITY, 0.7, 0.3, f64::NEG_INFINITY]);
        assert_eq!(roc.last().unwrap().fpr, 1.0);
        assert_eq!(roc.last().unwrap().tpr, 1.0);
    }

    #[test]
    fn eer_on_a_symmetric_set() {
        let s = set(&[(0.9, Real), (0.6, Real), (0.4, Spoof), (0.7, Spoof), (0.2, Spoof), (0.3, Real)]);
        let e = eer(&s).unwrap();
        let at = error_rates(&s, e.threshold).unwrap();
        assert!((at.far - at.frr).abs() < 1e-12, "{at:?}");
        assert!((e.rate - at.hter).abs() < 1e-12);
    }

    #[test]
    fn few_spoofs_flag_quantization() {
        let s = set(&[(0.9, Real), (0.1, Spoof)]);
        assert!(compute_tpr_at_fpr(&s, 0.01).unwrap().quantization_limited);
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("eer".parse::<ThresholdPolicy>().unwrap(), ThresholdPolicy::Eer);
        assert_eq!("fixed".parse::<ThresholdPolicy>().unwrap(), ThresholdPolicy::Fixed(0.5));
        assert_eq!("fixed:0.3".parse::<ThresholdPolicy>().unwrap(), ThresholdPolicy::Fixed(0.3));
        assert!("median".parse::<ThresholdPolicy>().is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let s = set(&[(0.25, Real), (0.75, Spoof)]);
        s.save_csv(&path).unwrap();
        assert_eq!(ScoreSet::load_csv(&path).unwrap(), s);
        s.save_csv_annotated(&path, "seed=3\nconfig_hash=ab").unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("# seed=3\n# config_hash=ab\n"));
        assert_eq!(ScoreSet::load_csv(&path).unwrap(), s);
    }
}
