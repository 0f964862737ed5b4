use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{compute_auc, compute_hter, compute_tpr_at_fpr, eer, RocPoint, ScoreSet, ThresholdPolicy};
use super::stats::{mean_std, MeanStd};
use crate::error::{Error, Result};
use crate::label::Class;

/// Provenance of a run's numbers.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub protocol: String,
    pub split: String,
    pub strategy: String,
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
}

/// Metrics of one seed. Rates are fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(flatten)]
    pub meta: RunMeta,
    pub hter: f64,
    pub far: f64,
    pub frr: f64,
    pub auc: f64,
    pub tpr_at_fpr: f64,
    pub fpr_target: f64,
    pub threshold_policy: ThresholdPolicy,
    #[serde(with = "extended_f64")]
    pub threshold: f64,
    pub eer: f64,
    pub n_real: usize,
    pub n_spoof: usize,
    pub tpr_quantization_limited: bool,
}

/// JSON has no infinities; the ROC sentinels are written as strings.
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

impl MetricReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// All metrics of one score set.
pub fn evaluate(scores: &ScoreSet, policy: ThresholdPolicy, fpr_target: f64, meta: RunMeta) -> Result<MetricReport> {
    let rates = compute_hter(scores, policy)?;
    let tpr = compute_tpr_at_fpr(scores, fpr_target)?;
    Ok(MetricReport {
        meta,
        hter: rates.hter,
        far: rates.far,
        frr: rates.frr,
        auc: compute_auc(scores)?,
        tpr_at_fpr: tpr.tpr,
        fpr_target,
        threshold_policy: policy,
        threshold: rates.threshold,
        eer: eer(scores)?.rate,
        n_real: scores.count(Class::Real),
        n_spoof: scores.count(Class::Spoof),
        tpr_quantization_limited: tpr.quantization_limited,
    })
}

/// Per-metric mean and sample standard deviation over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub protocol: String,
    pub split: String,
    pub strategy: String,
    pub seeds: Vec<u64>,
    pub hter: MeanStd,
    pub auc: MeanStd,
    pub tpr_at_fpr: MeanStd,
    pub fpr_target: f64,
}

pub fn aggregate_seeds(reports: &[MetricReport]) -> Result<AggregateReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidInput("no reports to aggregate".into()))?;
    for r in reports {
        let m = &r.meta;
        if (m.protocol.as_str(), m.split.as_str(), m.strategy.as_str())
            != (first.meta.protocol.as_str(), first.meta.split.as_str(), first.meta.strategy.as_str())
        {
            return Err(Error::InvalidInput(format!(
                "cannot aggregate {}/{}/{} with {}/{}/{}",
                first.meta.protocol, first.meta.split, first.meta.strategy, m.protocol, m.split, m.strategy
            )));
        }
        if r.fpr_target != first.fpr_target {
            return Err(Error::InvalidInput("reports use different FPR targets".into()));
        }
    }
    let seeds: BTreeSet<u64> = reports.iter().map(|r| r.meta.seed).collect();
    if seeds.len() != reports.len() {
        return Err(Error::InvalidInput("a seed appears more than once".into()));
    }
    let col = |f: fn(&MetricReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateReport {
        protocol: first.meta.protocol.clone(),
        split: first.meta.split.clone(),
        strategy: first.meta.strategy.clone(),
        seeds: reports.iter().map(|r| r.meta.seed).collect(),
        hter: col(|r| r.hter)?,
        auc: col(|r| r.auc)?,
        tpr_at_fpr: col(|r| r.tpr_at_fpr)?,
        fpr_target: first.fpr_target,
    })
}

fn pct(m: MeanStd) -> String {
    format!("{:.2} ({:.2})", 100.0 * m.mean, 100.0 * m.std)
}

/// Text table with one row per strategy and one HTER/AUC/TPR column group
/// per split, plus the average HTER. Values are percentages, standard
/// deviations in brackets.
pub fn render_table(rows: &[AggregateReport]) -> String {
    let mut splits: Vec<&str> = Vec::new();
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !splits.contains(&r.split.as_str()) {
            splits.push(&r.split);
        }
        if !methods.contains(&r.strategy.as_str()) {
            methods.push(&r.strategy);
        }
    }
    let fpr = rows.first().map_or(0.01, |r| r.fpr_target);
    let cell_w = 16;
    let mut out = String::new();
    let _ = write!(out, "{:<10}", "Method");
    for s in &splits {
        let _ = write!(out, " | {:^w$}", s, w = 3 * cell_w + 2);
    }
    let _ = writeln!(out, " | {:^10}", "Avg.");
    let _ = write!(out, "{:<10}", "");
    for _ in &splits {
        let tpr = format!("TPR@FPR={}%", 100.0 * fpr);
        let _ = write!(out, " | {:<cell_w$} {:<cell_w$} {:<cell_w$}", "HTER", "AUC", tpr);
    }
    let _ = writeln!(out, " | {:^10}", "HTER");
    for m in &methods {
        let _ = write!(out, "{m:<10}");
        let mut hters = Vec::new();
        for s in &splits {
            match rows.iter().find(|r| r.split == *s && r.strategy == *m) {
                Some(r) => {
                    hters.push(r.hter.mean);
                    let _ = write!(
                        out,
                        " | {:<cell_w$} {:<cell_w$} {:<cell_w$}",
                        pct(r.hter),
                        pct(r.auc),
                        pct(r.tpr_at_fpr)
                    );
                }
                None => {
                    let _ = write!(out, " | {:<w$}", "-", w = 3 * cell_w + 2);
                }
            }
        }
        let avg = if hters.len() == splits.len() && !hters.is_empty() {
            format!("{:.2}", 100.0 * hters.iter().sum::<f64>() / hters.len() as f64)
        } else {
            "-".into()
        };
        let _ = writeln!(out, " | {avg:^10}");
    }
    out
}

pub fn write_roc_csv(path: &Path, roc: &[RocPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{other:?}")),
    })?;
    w.write_record(["threshold", "fpr", "tpr"])?;
    for p in roc {
        w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A minimal standalone SVG of the ROC curve.
pub fn roc_svg(roc: &[RocPoint], title: &str) -> String {
    const SIZE: f64 = 320.0;
    const PAD: f64 = 40.0;
    let x = |fpr: f64| PAD + fpr * SIZE;
    let y = |tpr: f64| PAD + (1.0 - tpr) * SIZE;
    let path: Vec<String> = roc.iter().map(|p| format!("{:.2},{:.2}", x(p.fpr), y(p.tpr))).collect();
    let total = SIZE + 2.0 * PAD;
    let title = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" font-family="sans-serif" font-size="12">
<rect x="{PAD}" y="{PAD}" width="{SIZE}" height="{SIZE}" fill="none" stroke="#444"/>
<line x1="{PAD}" y1="{y0}" x2="{x1}" y2="{PAD}" stroke="#bbb" stroke-dasharray="4 4"/>
<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="2"/>
<text x="{cx}" y="{ty}" text-anchor="middle">{title}</text>
<text x="{cx}" y="{bx}" text-anchor="middle">false positive rate</text>
<text x="12" y="{cx}" text-anchor="middle" transform="rotate(-90 12 {cx})">true positive rate</text>
</svg>
"##,
        y0 = PAD + SIZE,
        x1 = PAD + SIZE,
        pts = path.join(" "),
        cx = total / 2.0,
        ty = PAD / 2.0,
        bx = total - 10.0,
    )
}

/// Overlaid real/spoof histograms of the scores on `[0, 1]`.
pub fn histogram_svg(scores: &ScoreSet, bins: usize, title: &str) -> String {
    const W: f64 = 400.0;
    const H: f64 = 240.0;
    const PAD: f64 = 40.0;
    let bins = bins.max(1);
    let counts = |class| {
        let mut c = vec![0usize; bins];
        for v in scores.scores(class) {
            c[((v * bins as f64) as usize).min(bins - 1)] += 1;
        }
        c
    };
    let (real, spoof) = (counts(Class::Real), counts(Class::Spoof));
    let peak = real.iter().chain(&spoof).copied().max().unwrap_or(0).max(1) as f64;
    let bw = W / bins as f64;
    let mut bars = String::new();
    for (c, colour) in [(&real, "#2ca02c"), (&spoof, "#d62728")] {
        for (i, &n) in c.iter().enumerate().filter(|(_, &n)| n > 0) {
            let h = H * n as f64 / peak;
            let _ = writeln!(
                bars,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{colour}" fill-opacity="0.5"/>"#,
                PAD + i as f64 * bw,
                PAD + H - h,
                bw,
                h
            );
        }
    }
    let title = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{tw}" height="{th}" font-family="sans-serif" font-size="12">
<text x="{cx}" y="{ty}" text-anchor="middle">{title} (green: real, red: spoof)</text>
{bars}<line x1="{PAD}" y1="{base}" x2="{x2}" y2="{base}" stroke="#444"/>
<text x="{cx}" y="{lx}" text-anchor="middle">p(real)</text>
</svg>
"##,
        tw = W + 2.0 * PAD,
        th = H + 2.0 * PAD,
        cx = PAD + W / 2.0,
        ty = PAD / 2.0,
        base = PAD + H,
        x2 = PAD + W,
        lx = H + 2.0 * PAD - 10.0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::metrics::roc_curve;

    fn report(seed: u64, hter: f64, split: &str) -> MetricReport {
        MetricReport {
            meta: RunMeta {
                protocol: "1".into(),
                split: split.into(),
                strategy: "FLIP-MCL".into(),
                seed,
                ..Default::default()
            },
            hter,
            far: hter,
            frr: hter,
            auc: 0.9,
            tpr_at_fpr: 0.5,
            fpr_target: 0.01,
            threshold_policy: ThresholdPolicy::default(),
            threshold: 0.5,
            eer: hter,
            n_real: 10,
            n_spoof: 10,
            tpr_quantization_limited: true,
        }
    }

    #[test]
    fn aggregate_of_two_hters() {
        let agg = aggregate_seeds(&[report(0, 2.0, "OCI→M"), report(1, 4.0, "OCI→M")]).unwrap();
        assert_eq!(agg.hter.mean, 3.0);
        assert!((agg.hter.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(agg.auc.std, 0.0);
        assert_eq!(agg.seeds, [0, 1]);
    }

    #[test]
    fn mixed_splits_and_single_reports_are_rejected() {
        assert!(aggregate_seeds(&[report(0, 0.1, "OCI→M"), report(1, 0.1, "OMI→C")]).is_err());
        assert!(aggregate_seeds(&[report(0, 0.1, "OCI→M")]).is_err());
        assert!(aggregate_seeds(&[report(0, 0.1, "OCI→M"), report(0, 0.2, "OCI→M")]).is_err());
    }

    #[test]
    fn json_round_trip_with_infinite_threshold() {
        let mut r = report(3, 0.25, "OCI→M");
        r.threshold = f64::NEG_INFINITY;
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"-inf\""));
        let back: MetricReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn table_lists_every_split_and_the_average() {
        let a = aggregate_seeds(&[report(0, 0.02, "OCI→M"), report(1, 0.04, "OCI→M")]).unwrap();
        let b = aggregate_seeds(&[report(0, 0.06, "OMI→C"), report(1, 0.06, "OMI→C")]).unwrap();
        let table = render_table(&[a, b]);
        assert!(table.contains("OCI→M") && table.contains("OMI→C"));
        assert!(table.contains("3.00 (1.41)"), "{table}");
        assert!(table.contains("4.50"), "{table}");
    }

    #[test]
    fn svg_has_one_vertex_per_roc_point() {
        let s = ScoreSet::from_pairs([(0.9, Class::Real), (0.2, Class::Spoof), (0.4, Class::Real)]).unwrap();
        let roc = roc_curve(&s).unwrap();
        let svg = roc_svg(&roc, "a<b");
        assert!(svg.contains("a&lt;b"));
        let pts = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split(' ').count(), roc.len());
    }

    #[test]
    fn histogram_draws_one_bar_per_occupied_bin() {
        let s = ScoreSet::from_pairs([(0.95, Class::Real), (1.0, Class::Real), (0.05, Class::Spoof)]).unwrap();
        let svg = histogram_svg(&s, 10, "t");
        assert_eq!(svg.matches("<rect").count(), 2);
    }
}
