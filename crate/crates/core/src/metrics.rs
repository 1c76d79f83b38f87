//! Overlap scoring, score aggregation and stage timings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::BinaryMask;

/// Voxelwise agreement counts between a prediction and a reference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Both prediction and reference are empty; scores are then defined as 1.
    pub fn both_empty(&self) -> bool {
        self.tp == 0 && self.fp == 0 && self.fn_ == 0
    }

    /// Dice similarity `2TP / (2TP + FP + FN)`.
    pub fn dsc(&self) -> f64 {
        if self.both_empty() {
            return 1.0;
        }
        2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64
    }

    /// Jaccard similarity `TP / (TP + FP + FN)`.
    pub fn jsc(&self) -> f64 {
        if self.both_empty() {
            return 1.0;
        }
        self.tp as f64 / (self.tp + self.fp + self.fn_) as f64
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// Counts over two equally long bit slices.
pub fn confusion_bits(pred: &[bool], truth: &[bool]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "prediction has {} voxels, reference {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn confusion(pred: &BinaryMask, truth: &BinaryMask) -> Result<ConfusionCounts> {
    if !pred.same_dims(truth) {
        return Err(Error::DimensionMismatch(format!(
            "prediction {:?} vs reference {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    confusion_bits(pred.bits(), truth.bits())
}

pub fn dsc(c: &ConfusionCounts) -> f64 {
    c.dsc()
}

pub fn jsc(c: &ConfusionCounts) -> f64 {
    c.jsc()
}

/// Mean and sample standard deviation of per-slice scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Set when `n == 1` and the deviation is undefined (reported as 0).
    pub single: bool,
}

pub fn aggregate_scores(scores: &[f64]) -> Result<ScoreSummary> {
    if scores.is_empty() {
        return Err(Error::InvalidParameter("no scores to aggregate".into()));
    }
    let n = scores.len();
    let mean = scores.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok(ScoreSummary {
            mean,
            std: 0.0,
            n,
            single: true,
        });
    }
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(ScoreSummary {
        mean,
        std: var.sqrt(),
        n,
        single: false,
    })
}

/// Named pipeline stages, in reporting order.
pub const STAGE_NAMES: [&str; 8] = [
    "segmentation_sample",
    "segmentation_lipid",
    "segmentation_calcification",
    "particle_identification",
    "clustering",
    "topology",
    "colocalization",
    "report",
];

/// Wall-clock seconds per pipeline stage (machine time only).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub stages: Vec<(String, f64)>,
}

impl StageTimings {
    pub fn record(&mut self, name: &str, seconds: f64) {
        let seconds = seconds.max(0.0);
        match self.stages.iter_mut().find(|(n, _)| n == name) {
            Some((_, s)) => *s += seconds,
            None => self.stages.push((name.to_string(), seconds)),
        }
    }

    /// Runs `f`, adding its elapsed monotonic time to `name`.
    pub fn time<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let start = std::time::Instant::now();
        let out = f();
        self.record(name, start.elapsed().as_secs_f64());
        out
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.stages.iter().find(|(n, _)| n == name).map(|(_, s)| *s)
    }

    pub fn total(&self) -> f64 {
        self.stages.iter().map(|(_, s)| s).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub stage: String,
    pub seconds: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub rows: Vec<TimingRow>,
    pub total_seconds: f64,
}

impl TimingReport {
    pub fn table(&self) -> String {
        let mut out = format!("{:<28}{:>12}{:>9}\n", "stage", "seconds", "%");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<28}{:>12.3}{:>8.1}%\n",
                r.stage, r.seconds, r.percent
            ));
        }
        out.push_str(&format!("{:<28}{:>12.3}{:>8.1}%\n", "total", self.total_seconds, 100.0));
        out
    }
}

/// Per-stage seconds and share of the total.
pub fn report_timings(timings: &StageTimings) -> TimingReport {
    let total = timings.total();
    let rows = timings
        .stages
        .iter()
        .map(|(stage, s)| TimingRow {
            stage: stage.clone(),
            seconds: *s,
            percent: if total > 0.0 { 100.0 * s / total } else { 0.0 },
        })
        .collect();
    TimingReport {
        rows,
        total_seconds: total,
    }
}
