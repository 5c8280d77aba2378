//! Brute-force metric oracles shared by the integration tests.
//!
//! Everything here recounts from the raw records for each candidate
//! threshold (quadratic time) and does rate arithmetic in exact fractions.

#![allow(dead_code)]

use gnap::metrics::ScoreSet;
use gnap::tensor::NormalStream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Count {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
}

/// +inf followed by the distinct scores, largest first.
pub fn candidates(scores: &ScoreSet) -> Vec<f64> {
    let mut t: Vec<f64> = scores.records.iter().map(|r| r.score).collect();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t.insert(0, f64::INFINITY);
    t
}

pub fn recount(scores: &ScoreSet, t: f64) -> Count {
    let mut c = Count { threshold: t, tp: 0, fp: 0 };
    for r in &scores.records {
        if r.score >= t {
            if r.genuine {
                c.tp += 1;
            } else {
                c.fp += 1;
            }
        }
    }
    c
}

pub fn brute_roc(scores: &ScoreSet) -> Vec<Count> {
    candidates(scores).into_iter().map(|t| recount(scores, t)).collect()
}

pub fn totals(scores: &ScoreSet) -> (usize, usize) {
    let p = scores.records.iter().filter(|r| r.genuine).count();
    (p, scores.records.len() - p)
}

/// Reduced fraction with a positive denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frac {
    pub num: i128,
    pub den: i128,
}

impl Frac {
    pub fn new(num: i128, den: i128) -> Frac {
        assert!(den != 0);
        let (mut a, mut b) = (num.abs(), den.abs());
        while b != 0 {
            (a, b) = (b, a % b);
        }
        let g = a.max(1) * den.signum();
        Frac { num: num / g, den: den / g }
    }
    pub fn sub(self, o: Frac) -> Frac {
        Frac::new(self.num * o.den - o.num * self.den, self.den * o.den)
    }
    pub fn add(self, o: Frac) -> Frac {
        Frac::new(self.num * o.den + o.num * self.den, self.den * o.den)
    }
    pub fn mul(self, o: Frac) -> Frac {
        Frac::new(self.num * o.num, self.den * o.den)
    }
    pub fn div(self, o: Frac) -> Frac {
        Frac::new(self.num * o.den, self.den * o.num)
    }
    pub fn f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// EER from the recount: the first operating point where FPR = FNR exactly,
/// otherwise the intersection of the segment joining the two points whose
/// `FPR - FNR` changes sign with the line FPR = FNR.
pub fn brute_eer(scores: &ScoreSet) -> (f64, f64) {
    let (p, n) = totals(scores);
    let roc = brute_roc(scores);
    let fpr = |c: &Count| Frac::new(c.fp as i128, n as i128);
    let fnr = |c: &Count| Frac::new((p - c.tp) as i128, p as i128);
    let gap = |c: &Count| fpr(c).sub(fnr(c));
    for i in 0..roc.len() {
        let g = gap(&roc[i]);
        if g.num == 0 {
            return (fpr(&roc[i]).f64(), roc[i].threshold);
        }
        if i > 0 && g.num > 0 {
            let (a, b) = (&roc[i - 1], &roc[i]);
            let (ga, gb) = (gap(a), g);
            let lambda = Frac::new(0, 1).sub(ga).div(gb.sub(ga));
            let value = fpr(a).add(lambda.mul(fpr(b).sub(fpr(a))));
            // nearer endpoint, larger threshold on a tie
            let threshold = if lambda.num * 2 <= lambda.den { a.threshold } else { b.threshold };
            return (value.f64(), threshold);
        }
    }
    unreachable!("accept-all point has FPR 1 and FNR 0")
}

/// Largest TPR with FPR <= target; the largest threshold on ties.
pub fn brute_tpr_at_fpr(scores: &ScoreSet, target: f64) -> (f64, f64) {
    let (p, n) = totals(scores);
    let mut best: Option<Count> = None;
    for c in brute_roc(scores) {
        if c.fp as f64 / n as f64 <= target && best.is_none_or(|b| c.tp > b.tp) {
            best = Some(c);
        }
    }
    let b = best.expect("+inf always qualifies");
    (b.tp as f64 / p as f64, b.threshold)
}

/// Best (TP + TN) / total; the largest threshold on ties.
pub fn brute_accuracy(scores: &ScoreSet) -> (f64, f64) {
    let (p, n) = totals(scores);
    let mut best = (0usize, f64::NAN);
    for t in candidates(scores) {
        let correct = scores
            .records
            .iter()
            .filter(|r| (r.score >= t) == r.genuine)
            .count();
        if correct > best.0 || best.1.is_nan() {
            best = (correct, t);
        }
    }
    (best.0 as f64 / (p + n) as f64, best.1)
}

/// Random score sets with heavy ties (scores on a coarse grid), at least one
/// record of each label, and `2 <= n <= max_len`.
pub fn random_score_set(seed: u64, max_len: usize) -> ScoreSet {
    let mut rng = NormalStream::new(seed);
    let len = 2 + rng.below(max_len - 1);
    let levels = 1 + rng.below(40);
    let bias = rng.uniform_in(0.0, 3.0);
    let mut s = ScoreSet::new();
    for k in 0..len {
        let genuine = match k {
            0 => true,
            1 => false,
            _ => rng.uniform() < 0.5,
        };
        let raw = rng.next() + if genuine { bias } else { 0.0 };
        s.push(genuine, (raw * levels as f64).round() / levels as f64);
    }
    s
}
