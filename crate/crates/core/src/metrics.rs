//! Verification metrics from an exact ROC sweep.
//!
//! A pair is accepted iff `score >= threshold`. The sweep visits a `+inf`
//! sentinel (reject everything) followed by every distinct observed score in
//! descending order, so the last point accepts everything. All rates are
//! exact count ratios.


use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreRecord {
    pub genuine: bool,
    pub score: f64,
}

/// Labeled verification scores: genuine (same identity, label 1) or impostor (label 0).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    pub records: Vec<ScoreRecord>,
}

impl ScoreSet {
    pub fn new() -> Self {
        ScoreSet::default()
    }

    pub fn from_pairs(genuine: &[f64], impostor: &[f64]) -> Self {
        let records = genuine
            .iter()
            .map(|&score| ScoreRecord { genuine: true, score })
            .chain(impostor.iter().map(|&score| ScoreRecord { genuine: false, score }))
            .collect();
        ScoreSet { records }
    }

    pub fn push(&mut self, genuine: bool, score: f64) {
        self.records.push(ScoreRecord { genuine, score });
    }

    pub fn counts(&self) -> (usize, usize) {
        let p = self.records.iter().filter(|r| r.genuine).count();
        (p, self.records.len() - p)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.records.iter().position(|r| !r.score.is_finite()) {
            return Err(Error::contract(format!("score of record {k} is not finite")));
        }
        let (p, n) = self.counts();
        if p == 0 || n == 0 {
            return Err(Error::contract(format!(
                "need both genuine and impostor scores, got {p} genuine and {n} impostor"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    #[serde(serialize_with = "serialize_threshold")]
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tpr: f64,
    pub fpr: f64,
}

impl RocPoint {
    pub fn fnr(&self) -> f64 {
        1.0 - self.tpr
    }
}

/// Operating points ordered by decreasing threshold (non-decreasing FPR).
#[derive(Debug, Clone, PartialEq)]
pub struct Roc {
    pub points: Vec<RocPoint>,
    pub genuine: usize,
    pub impostor: usize,
}

pub fn roc_sweep(scores: &ScoreSet) -> Result<Roc> {
    scores.validate()?;
    let (pos, neg) = scores.counts();
    let mut sorted: Vec<ScoreRecord> = scores.records.clone();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));

    let point = |threshold, tp, fp| RocPoint {
        threshold,
        tp,
        fp,
        tpr: tp as f64 / pos as f64,
        fpr: fp as f64 / neg as f64,
    };
    let mut points = vec![point(f64::INFINITY, 0, 0)];
    let (mut tp, mut fp) = (0, 0);
    let mut k = 0;
    while k < sorted.len() {
        let t = sorted[k].score;
        // `==` rather than total order: -0.0 and 0.0 are one threshold under `>=`
        while k < sorted.len() && sorted[k].score == t {
            if sorted[k].genuine {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push(point(t, tp, fp));
    }
    Ok(Roc {
        points,
        genuine: pos,
        impostor: neg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateAtThreshold {
    pub value: f64,
    #[serde(serialize_with = "serialize_threshold")]
    pub threshold: f64,
}

/// Equal error rate by linear interpolation between the two operating points
/// that bracket `FNR = FPR`. An exact crossing is returned as is.
///
/// The interpolated rate is computed as one exact ratio of integer counts, so
/// it is correctly rounded and depends only on the ranks of the scores. The
/// reported threshold is that of the nearer bracketing point (the larger one
/// on a tie), so it is always an observed score or the sentinel.
pub fn eer(roc: &Roc) -> RateAtThreshold {
    let (pos, neg) = (roc.genuine as i128, roc.impostor as i128);
    // N * P * (FPR - FNR) = fp * P - (P - tp) * N
    let gap = |p: &RocPoint| p.fp as i128 * pos - (pos - p.tp as i128) * neg;
    let pts = &roc.points;
    // the gap is -N P at the sentinel and +N P at the accept-all point
    let k = pts.iter().position(|p| gap(p) >= 0).expect("accept-all point has FPR 1");
    let hi = pts[k];
    if gap(&hi) == 0 || k == 0 {
        return RateAtThreshold {
            value: hi.fpr,
            threshold: hi.threshold,
        };
    }
    let lo = pts[k - 1];
    let (g_lo, g_hi) = (gap(&lo), gap(&hi));
    // FPR at lambda = -g_lo / (g_hi - g_lo) along the segment, over N
    let span = g_hi - g_lo;
    let num = lo.fp as i128 * span - g_lo * (hi.fp as i128 - lo.fp as i128);
    let den = neg * span;
    let threshold = if -2 * g_lo <= span { lo.threshold } else { hi.threshold };
    RateAtThreshold {
        value: ratio_i128(num, den),
        threshold,
    }
}

/// `num / den` in lowest terms. Exact to one rounding while both terms stay
/// below 2^53, i.e. for sweeps of up to tens of millions of pairs.
fn ratio_i128(num: i128, den: i128) -> f64 {
    let g = gcd(num, den);
    (num / g) as f64 / (den / g) as f64
}

fn gcd(mut a: i128, mut b: i128) -> i128 {
    a = a.abs();
    b = b.abs();
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TprAtFpr {
    pub fpr_target: f64,
    pub tpr: f64,
    #[serde(serialize_with = "serialize_threshold")]
    pub threshold: f64,
}

/// Largest TPR among operating points whose exact FPR is at most the target,
/// reported at the largest threshold that reaches it. No interpolation.
pub fn tpr_at_fpr(roc: &Roc, fpr_target: f64) -> Result<TprAtFpr> {
    if !(0.0..=1.0).contains(&fpr_target) {
        return Err(Error::parameter(format!(
            "fpr target must lie in [0, 1], got {fpr_target}"
        )));
    }
    // FPR and TPR are both non-decreasing along the sweep
    let mut best = roc.points[0];
    for p in roc.points.iter().take_while(|p| p.fpr <= fpr_target) {
        if p.tp > best.tp {
            best = *p;
        }
    }
    Ok(TprAtFpr {
        fpr_target,
        tpr: best.tpr,
        threshold: best.threshold,
    })
}

/// Best single-threshold accuracy `(TP + TN) / (P + N)`; ties go to the
/// larger threshold.
pub fn accuracy_best_threshold(roc: &Roc) -> RateAtThreshold {
    let total = (roc.genuine + roc.impostor) as f64;
    let mut best: Option<(usize, f64)> = None;
    for p in &roc.points {
        let correct = p.tp + (roc.impostor - p.fp);
        if best.is_none_or(|(c, _)| correct > c) {
            best = Some((correct, p.threshold));
        }
    }
    let (correct, threshold) = best.expect("sweep is never empty");
    RateAtThreshold {
        value: correct as f64 / total,
        threshold,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: RateAtThreshold,
    pub eer: RateAtThreshold,
    pub tpr_at_fpr: Vec<TprAtFpr>,
    pub genuine: usize,
    pub impostor: usize,
}

impl MetricsReport {
    /// One line per metric, rates as percentages with two decimals.
    pub fn human(&self) -> String {
        let mut s = format!(
            "pairs: {} genuine / {} impostor\naccuracy: {:.2}% (threshold {})\nEER: {:.2}% (threshold {})",
            self.genuine,
            self.impostor,
            100.0 * self.accuracy.value,
            fmt_threshold(self.accuracy.threshold),
            100.0 * self.eer.value,
            fmt_threshold(self.eer.threshold),
        );
        for t in &self.tpr_at_fpr {
            s.push_str(&format!(
                "\nTPR@FPR={}%: {:.2}% (threshold {})",
                100.0 * t.fpr_target,
                100.0 * t.tpr,
                fmt_threshold(t.threshold)
            ));
        }
        s
    }
}

pub fn evaluate(scores: &ScoreSet, fpr_targets: &[f64]) -> Result<MetricsReport> {
    let roc = roc_sweep(scores)?;
    let tpr_at_fpr = fpr_targets
        .iter()
        .map(|&t| tpr_at_fpr(&roc, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        accuracy: accuracy_best_threshold(&roc),
        eer: eer(&roc),
        tpr_at_fpr,
        genuine: roc.genuine,
        impostor: roc.impostor,
    })
}

fn fmt_threshold(t: f64) -> String {
    if t.is_finite() {
        format!("{t:.6}")
    } else {
        "+inf".to_string()
    }
}

/// JSON has no infinities; the reject-all sentinel is written as the string `"+inf"`.
fn serialize_threshold<S: Serializer>(t: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if t.is_finite() {
        s.serialize_f64(*t)
    } else if *t > 0.0 {
        s.serialize_str("+inf")
    } else {
        s.serialize_str("-inf")
    }
}
