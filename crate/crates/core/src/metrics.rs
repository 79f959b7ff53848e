//! Detection metrics: accuracy, average precision, ROC-AUC and equal-error
//! rate, plus whole-split evaluation. Definitions are pinned so small-n
//! brute-force oracles can check every fast path exactly:
//!   - accuracy thresholds at 0.5, ties predicted fake
//!   - AP is the step-wise (non-interpolated) sum over descending-score
//!     thresholds with tied scores grouped
//!   - AUC is the Mann-Whitney pair statistic (ties count ½)
//!   - EER sweeps the empirical operating points and linearly interpolates
//!     where the sign of FPR−FNR flips

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::{normalize, Sample};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Data("empty scored set".into()));
        }
        if scores.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Data("scores must lie in [0,1]".into()));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Data("labels must be 0 or 1".into()));
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Flip scores (1−s); used by the AUC symmetry invariant.
    pub fn negated(&self) -> ScoredSet {
        ScoredSet {
            scores: self.scores.iter().map(|s| 1.0 - s).collect(),
            labels: self.labels.clone(),
        }
    }
}

/// Fraction classified correctly at the threshold; a score equal to the
/// threshold counts as a fake prediction.
pub fn accuracy(set: &ScoredSet, threshold: f64) -> Result<f64> {
    let correct = set
        .scores
        .iter()
        .zip(&set.labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    Ok(correct as f64 / set.len() as f64)
}

/// Descending-score threshold groups: (tp_in_group, fp_in_group).
fn threshold_groups(set: &ScoredSet) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| {
        set.scores[b]
            .partial_cmp(&set.scores[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let s = set.scores[order[i]];
        let mut tp = 0;
        let mut fp = 0;
        while i < order.len() && set.scores[order[i]] == s {
            if set.labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        groups.push((tp, fp));
    }
    groups
}

/// Step-wise average precision: AP = Σ (R_n − R_{n−1})·P_n over the
/// descending-score thresholds, tied scores forming one step.
pub fn average_precision(set: &ScoredSet) -> Result<f64> {
    let pos = set.positives();
    if pos == 0 {
        return Err(Error::Data("average precision needs at least one positive".into()));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (gtp, gfp) in threshold_groups(set) {
        tp += gtp;
        fp += gfp;
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Mann-Whitney AUC via average ranks; exactly the mean over all
/// (positive, negative) pairs of [s_p > s_n] + ½[s_p == s_n].
pub fn roc_auc(set: &ScoredSet) -> Result<f64> {
    let pos = set.positives();
    let neg = set.negatives();
    if pos == 0 || neg == 0 {
        return Err(Error::Data("roc_auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].partial_cmp(&set.scores[b]).expect("finite"));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let s = set.scores[order[i]];
        let start = i;
        while i < order.len() && set.scores[order[i]] == s {
            i += 1;
        }
        // average rank for the tie group, ranks are 1-based
        let avg_rank = (start + 1 + i) as f64 / 2.0;
        for &idx in &order[start..i] {
            if set.labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
    }
    Ok((rank_sum_pos - pos as f64 * (pos as f64 + 1.0) / 2.0) / (pos as f64 * neg as f64))
}

/// Empirical operating points (FPR, FNR) as the decision threshold
/// descends from above the max score to the min score.
fn operating_points(set: &ScoredSet) -> Vec<(f64, f64)> {
    let pos = set.positives() as f64;
    let neg = set.negatives() as f64;
    let mut points = vec![(0.0, 1.0)]; // threshold above every score
    let mut tp = 0usize;
    let mut fp = 0usize;
    for (gtp, gfp) in threshold_groups(set) {
        tp += gtp;
        fp += gfp;
        let fpr = fp as f64 / neg;
        let fnr = (set.positives() - tp) as f64 / pos;
        points.push((fpr, fnr));
    }
    points
}

/// Equal-error rate: the (FPR+FNR)/2 value where FPR meets FNR, linearly
/// interpolated between the adjacent empirical points when the sign of
/// FPR−FNR flips between thresholds.
pub fn eer(set: &ScoredSet) -> Result<f64> {
    if set.positives() == 0 || set.negatives() == 0 {
        return Err(Error::Data("eer needs both classes".into()));
    }
    let points = operating_points(set);
    let mut prev = points[0];
    for &(fpr, fnr) in &points {
        let diff = fpr - fnr;
        if diff == 0.0 {
            return Ok((fpr + fnr) / 2.0);
        }
        if diff > 0.0 {
            // sign flipped between prev (diff < 0) and here
            let d1 = prev.0 - prev.1;
            let d2 = diff;
            let s = -d1 / (d2 - d1);
            let fpr_x = prev.0 + s * (fpr - prev.0);
            let fnr_x = prev.1 + s * (fnr - prev.1);
            return Ok((fpr_x + fnr_x) / 2.0);
        }
        prev = (fpr, fnr);
    }
    // FPR−FNR is non-decreasing and ends at +1, so this is unreachable
    Err(Error::Numeric("no operating point crossed FPR = FNR".into()))
}

#[derive(Clone, Debug, Serialize)]
pub struct GeneratorBreakdown {
    pub count: usize,
    /// Fraction of this generator's fakes scored ≥ 0.5.
    pub acc: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub ap: f64,
    pub auc: f64,
    pub eer: f64,
    pub threshold: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub per_generator: BTreeMap<String, GeneratorBreakdown>,
    /// Mean merge weights over each generator's fakes, in branch order.
    pub router_means: BTreeMap<String, Vec<f64>>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("metrics serialization failed: {e}")))
    }
}

/// Score a test split (normalize only, no augmentation) and compute all
/// metrics plus per-generator breakdowns and mean router weights.
pub fn evaluate(model: &Model<f32>, samples: &[Sample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Data("empty evaluation split".into()));
    }
    let gens = model.generators.clone();
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut per_gen_hits: Vec<(usize, usize)> = vec![(0, 0); gens.len()];
    let mut pi_sums: Vec<Vec<f64>> = vec![vec![0.0; gens.len()]; gens.len()];

    for s in samples {
        let normalized = normalize(&s.image)?;
        let pred = model.predict(&normalized)?;
        scores.push(pred.fake_prob);
        labels.push(s.label);
        if s.generator > 0 {
            let gi = s.generator - 1;
            if gi >= gens.len() {
                return Err(Error::Config(format!(
                    "sample generator id {} exceeds model registry size {}",
                    s.generator,
                    gens.len()
                )));
            }
            per_gen_hits[gi].0 += 1;
            if pred.fake_prob >= 0.5 {
                per_gen_hits[gi].1 += 1;
            }
            for (k, w) in pred.merge_weights.iter().enumerate() {
                pi_sums[gi][k] += w;
            }
        }
    }

    let set = ScoredSet::new(scores, labels)?;
    let mut per_generator = BTreeMap::new();
    let mut router_means = BTreeMap::new();
    for (gi, name) in gens.iter().enumerate() {
        let (count, hits) = per_gen_hits[gi];
        if count == 0 {
            continue;
        }
        per_generator.insert(
            name.clone(),
            GeneratorBreakdown {
                count,
                acc: hits as f64 / count as f64,
            },
        );
        router_means.insert(
            name.clone(),
            pi_sums[gi].iter().map(|s| s / count as f64).collect(),
        );
    }

    Ok(MetricsReport {
        acc: accuracy(&set, 0.5)?,
        ap: average_precision(&set)?,
        auc: roc_auc(&set)?,
        eer: eer(&set)?,
        threshold: 0.5,
        n_real: set.negatives(),
        n_fake: set.positives(),
        per_generator,
        router_means,
    })
}

#[cfg(test)]
pub(crate) mod oracles {
    //! Brute-force reference implementations, deliberately written with a
    //! different computation structure than the fast paths.

    use super::ScoredSet;

    pub fn accuracy_counting(set: &ScoredSet, threshold: f64) -> f64 {
        let mut correct = 0usize;
        for i in 0..set.len() {
            let predicted_fake = set.scores()[i] >= threshold;
            let is_fake = set.labels()[i] == 1;
            if predicted_fake == is_fake {
                correct += 1;
            }
        }
        correct as f64 / set.len() as f64
    }

    /// Recounts tp/fp from scratch at every distinct threshold.
    pub fn ap_threshold_enumeration(set: &ScoredSet) -> f64 {
        let mut thresholds: Vec<f64> = set.scores().to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let pos = set.positives() as f64;
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for &t in &thresholds {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for i in 0..set.len() {
                if set.scores()[i] >= t {
                    if set.labels()[i] == 1 {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
            }
            let recall = tp / pos;
            let precision = tp / (tp + fp);
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        ap
    }

    /// O(n²) pair enumeration.
    pub fn auc_pair_enumeration(set: &ScoredSet) -> f64 {
        let mut wins = 0.0f64;
        let mut pairs = 0.0f64;
        for i in 0..set.len() {
            if set.labels()[i] != 1 {
                continue;
            }
            for j in 0..set.len() {
                if set.labels()[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                if set.scores()[i] > set.scores()[j] {
                    wins += 1.0;
                } else if set.scores()[i] == set.scores()[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    /// Dense scan along the piecewise-linear operating curve (~10⁵ points).
    pub fn eer_grid_sweep(set: &ScoredSet) -> f64 {
        let points = super::operating_points(set);
        let per_segment = 100_000 / (points.len() - 1).max(1);
        let mut best = f64::MAX;
        let mut best_value = 0.0;
        for w in points.windows(2) {
            let (f1, n1) = w[0];
            let (f2, n2) = w[1];
            for step in 0..=per_segment {
                let s = step as f64 / per_segment as f64;
                let fpr = f1 + s * (f2 - f1);
                let fnr = n1 + s * (n2 - n1);
                let gap = (fpr - fnr).abs();
                if gap < best {
                    best = gap;
                    best_value = (fpr + fnr) / 2.0;
                }
            }
        }
        best_value
    }
}
