//! Binary classification metrics: ROC AUC (Mann-Whitney with midranks),
//! confusion counts at a threshold and the rates derived from them.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Area under the ROC curve.
///
/// Equals the probability that a random positive outscores a random
/// negative, ties counting one half. Errors unless both classes occur.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Data(format!("label {l} is not binary")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs at least one positive and one negative".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based midranks over the positives.
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Counts at `threshold`; a score equal to the threshold is positive.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, 1) => c.tp += 1,
            (true, 0) => c.fp += 1,
            (false, 0) => c.tn += 1,
            (false, 1) => c.fn_ += 1,
            (_, other) => return Err(Error::Data(format!("label {other} is not binary"))),
        }
    }
    Ok(c)
}

/// Rates derived from a confusion matrix; `None` where the denominator is 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DerivedMetrics {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn derived_metrics(c: &Confusion) -> DerivedMetrics {
    DerivedMetrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub partition: String,
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// `None` when one class is missing.
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Full report for one partition's predicted probabilities.
pub fn evaluate(partition: &str, scores: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsReport> {
    if scores.is_empty() {
        return Err(Error::Data(format!("{partition}: nothing to evaluate")));
    }
    let auc = match roc_auc(scores, labels) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(msg)) => {
            log::warn!("{partition}: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    let c = confusion(scores, labels, threshold)?;
    let d = derived_metrics(&c);
    Ok(MetricsReport {
        partition: partition.to_string(),
        threshold,
        n_pos: c.tp + c.fn_,
        n_neg: c.tn + c.fp,
        auc,
        accuracy: d.accuracy,
        sensitivity: d.sensitivity,
        specificity: d.specificity,
        f1: d.f1,
        tp: c.tp,
        fp: c.fp,
        tn: c.tn,
        fn_: c.fn_,
    })
}

fn fmt4(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

impl MetricsReport {
    pub fn confusion(&self) -> Confusion {
        Confusion { tp: self.tp, fp: self.fp, tn: self.tn, fn_: self.fn_ }
    }

    /// Flat `key=value` lines, rates to 4 decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "partition={}", self.partition);
        let _ = writeln!(s, "threshold={:.4}", self.threshold);
        let _ = writeln!(s, "n_pos={}", self.n_pos);
        let _ = writeln!(s, "n_neg={}", self.n_neg);
        for (k, v) in [
            ("auc", self.auc),
            ("accuracy", self.accuracy),
            ("sensitivity", self.sensitivity),
            ("specificity", self.specificity),
            ("f1", self.f1),
        ] {
            let _ = writeln!(s, "{k}={}", fmt4(v));
        }
        let _ = writeln!(s, "tp={}\nfp={}\ntn={}\nfn={}", self.tp, self.fp, self.tn, self.fn_);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Writes `<stem>.txt` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, body) in [("txt", self.to_text()), ("json", self.to_json() + "\n")] {
            let path = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
