//! Scoring detections against manual annotations.
//!
//! Predictions are matched greedily: after dropping those below the
//! confidence threshold, they are visited in rank order and each claims the
//! still-unmatched ground-truth box of highest IoU, provided that IoU reaches
//! the threshold.

use std::ops::{Add, AddAssign};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::PixelBox;
use crate::tiling::rank_order;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("iou threshold {0} outside (0, 1]")]
    IouThreshold(f64),
    #[error("confidence threshold {0} outside [0, 1]")]
    ConfidenceThreshold(f64),
    #[error("count vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 paired counts, got {0}")]
    TooFew(usize),
    #[error("no values to summarize")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub confidence_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.6,
            confidence_threshold: 0.25,
        }
    }
}

impl EvalConfig {
    pub fn new(iou_threshold: f64, confidence_threshold: f64) -> Result<Self, EvalError> {
        if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
            return Err(EvalError::IouThreshold(iou_threshold));
        }
        if !(0.0..=1.0).contains(&confidence_threshold) {
            return Err(EvalError::ConfidenceThreshold(confidence_threshold));
        }
        Ok(Self {
            iou_threshold,
            confidence_threshold,
        })
    }
}

/// A ratio that falls back to 1.0 when its denominator is zero. Such values
/// are flagged `vacuous` so aggregates can skip them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rate {
    pub value: f64,
    pub vacuous: bool,
}

impl Rate {
    pub fn of(num: usize, den: usize) -> Self {
        if den == 0 {
            Self {
                value: 1.0,
                vacuous: true,
            }
        } else {
            Self {
                value: num as f64 / den as f64,
                vacuous: false,
            }
        }
    }
}

/// True/false positive and false negative counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tally {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Tally {
    pub fn precision(&self) -> Rate {
        Rate::of(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Rate {
        Rate::of(self.tp, self.tp + self.fn_)
    }
}

impl Add for Tally {
    type Output = Tally;

    fn add(self, o: Tally) -> Tally {
        Tally {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for Tally {
    fn add_assign(&mut self, o: Tally) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Tally {
    fn sum<I: Iterator<Item = Tally>>(iter: I) -> Tally {
        iter.fold(Tally::default(), Add::add)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    /// Index into the prediction list given to [`match_detections`].
    pub pred: usize,
    /// Index into the ground-truth list.
    pub gt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    pub tally: Tally,
    pub pairs: Vec<MatchPair>,
    pub precision: Rate,
    pub recall: Rate,
}

impl MatchReport {
    pub fn tp(&self) -> usize {
        self.tally.tp
    }

    pub fn fp(&self) -> usize {
        self.tally.fp
    }

    pub fn fn_(&self) -> usize {
        self.tally.fn_
    }
}

pub fn match_detections(preds: &[PixelBox], gts: &[PixelBox], cfg: &EvalConfig) -> MatchReport {
    let mut order: Vec<usize> = (0..preds.len())
        .filter(|&i| preds[i].confidence >= cfg.confidence_threshold)
        .collect();
    order.sort_by(|&a, &b| rank_order(&preds[a], &preds[b]).then(a.cmp(&b)));

    let mut gt_taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    let mut fp = 0;
    for &p in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_taken[g] {
                continue;
            }
            let v = preds[p].iou(gt);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) if v >= cfg.iou_threshold => {
                gt_taken[g] = true;
                pairs.push(MatchPair {
                    pred: p,
                    gt: g,
                    iou: v,
                });
            }
            _ => fp += 1,
        }
    }
    let tally = Tally {
        tp: pairs.len(),
        fp,
        fn_: gts.len() - pairs.len(),
    };
    MatchReport {
        tally,
        pairs,
        precision: tally.precision(),
        recall: tally.recall(),
    }
}

/// Dataset-level precision and recall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub total: Tally,
    /// From the summed tally.
    pub micro_precision: Rate,
    pub micro_recall: Rate,
    /// Mean of per-image values, skipping vacuous ones.
    pub macro_precision: Rate,
    pub macro_recall: Rate,
}

pub fn aggregate<'a>(reports: impl IntoIterator<Item = &'a MatchReport>) -> Aggregate {
    let mut total = Tally::default();
    let (mut p_sum, mut p_n, mut r_sum, mut r_n) = (0.0, 0usize, 0.0, 0usize);
    for r in reports {
        total += r.tally;
        if !r.precision.vacuous {
            p_sum += r.precision.value;
            p_n += 1;
        }
        if !r.recall.vacuous {
            r_sum += r.recall.value;
            r_n += 1;
        }
    }
    let mean = |sum: f64, n: usize| {
        if n == 0 {
            Rate {
                value: 1.0,
                vacuous: true,
            }
        } else {
            Rate {
                value: sum / n as f64,
                vacuous: false,
            }
        }
    };
    Aggregate {
        total,
        micro_precision: total.precision(),
        micro_recall: total.recall(),
        macro_precision: mean(p_sum, p_n),
        macro_recall: mean(r_sum, r_n),
    }
}

/// Agreement between manual and automated counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgreementReport {
    /// Squared Pearson correlation; `None` when either vector has zero variance.
    pub r_squared: Option<f64>,
    pub rmse: f64,
    pub n: usize,
}

pub fn count_agreement(manual: &[f64], auto: &[f64]) -> Result<AgreementReport, EvalError> {
    if manual.len() != auto.len() {
        return Err(EvalError::LengthMismatch(manual.len(), auto.len()));
    }
    let n = manual.len();
    if n < 2 {
        return Err(EvalError::TooFew(n));
    }
    let nf = n as f64;
    let mean_m = manual.iter().sum::<f64>() / nf;
    let mean_a = auto.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy, mut sq) = (0.0, 0.0, 0.0, 0.0);
    for (&m, &a) in manual.iter().zip(auto) {
        let (dm, da) = (m - mean_m, a - mean_a);
        sxy += dm * da;
        sxx += dm * dm;
        syy += da * da;
        sq += (a - m) * (a - m);
    }
    let r_squared = if sxx > 0.0 && syy > 0.0 {
        Some((sxy * sxy / (sxx * syy)).clamp(0.0, 1.0))
    } else {
        None
    };
    Ok(AgreementReport {
        r_squared,
        rmse: (sq / nf).sqrt(),
        n,
    })
}

/// Index lists for repeated calibration-set draws.
///
/// With `n <= pool_size` each replicate samples without replacement; larger
/// `n` samples with replacement. Replicate `k` uses ChaCha stream `k` of
/// `seed`, so replicates are independent and individually reproducible.
pub fn bootstrap_subsets(
    pool_size: usize,
    n: usize,
    replicates: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    (0..replicates)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            if pool_size == 0 {
                Vec::new()
            } else if n <= pool_size {
                sample(&mut rng, pool_size, n).into_vec()
            } else {
                (0..n).map(|_| rng.gen_range(0..pool_size)).collect()
            }
        })
        .collect()
}

pub const SAMPLE_PLAN_HEADER: &str = "replicate,draw,index";

/// Long-format plan CSV, one line per draw.
pub fn sample_plan_csv(plan: &[Vec<usize>]) -> String {
    let mut out = String::from(SAMPLE_PLAN_HEADER);
    out.push('\n');
    for (k, draws) in plan.iter().enumerate() {
        for (i, idx) in draws.iter().enumerate() {
            out.push_str(&format!("{k},{i},{idx}\n"));
        }
    }
    out
}

/// Mean and half-width of a `mean ± 1.96 sd` interval over repeated runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub mean: f64,
    /// 1.96 times the sample standard deviation.
    pub half_width: f64,
    pub n_runs: usize,
}

pub fn summarize_runs(values: &[f64]) -> Result<RunSummary, EvalError> {
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let half_width = if n == 1 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * var.sqrt()
    };
    Ok(RunSummary {
        mean,
        half_width,
        n_runs: n,
    })
}
