//! Volume estimates, bootstrap confidence intervals and branch priorities.
//!
//! A leaf's volume is `|I| * f_1 * f_2 * ...` where each `f` is the share of
//! its parent's samples that fell on the leaf's side of a split. Bootstrap
//! replicates follow the same structure: every split resamples the parent's
//! sample set once and both children take their share of that same
//! resample, so sibling factors always add up to the parent's factor.

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 1000,
            level: 0.9,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 100 {
            return Err(Error::Config(format!(
                "bootstrap needs at least 100 replicates, got {}",
                self.replicates
            )));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("confidence level {} not in (0, 1)", self.level)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.high - self.low
    }

    pub fn contains(&self, v: f64) -> bool {
        self.low <= v && v <= self.high
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.low <= other.high && other.low <= self.high
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeEstimate {
    pub v_p: f64,
    pub v_o: f64,
    pub ratio: f64,
    pub ci_p: Option<Interval>,
    pub ci_o: Option<Interval>,
    pub ci_ratio: Option<Interval>,
}

/// `v_p / v_o`, taken as 1 when the preimage estimate is zero (nothing left
/// to approximate).
pub fn ratio(v_p: f64, v_o: f64) -> f64 {
    if v_o > 0.0 {
        v_p / v_o
    } else {
        1.0
    }
}

pub fn priority(v_p: f64, v_o: f64) -> f64 {
    (v_p - v_o).abs()
}

/// Improvement in approximation ratio per second.
pub fn delta_metric(first_ratio: f64, final_ratio: f64, elapsed_seconds: f64) -> Result<f64> {
    if !(elapsed_seconds > 0.0) {
        return Err(Error::Config(format!("elapsed time must be positive, got {elapsed_seconds}")));
    }
    Ok((first_ratio - final_ratio).abs() / elapsed_seconds)
}

/// Weighted share of the samples flagged by `mask`; `None` when the total
/// weight is zero.
pub fn weighted_fraction(weights: ArrayView1<f64>, mask: &[bool]) -> Option<f64> {
    let total: f64 = weights.sum();
    if !(total > 0.0) {
        return None;
    }
    let hit: f64 = weights.iter().zip(mask).filter(|(_, &m)| m).map(|(w, _)| w).sum();
    Some(hit / total)
}

/// For every replicate, resample the set with replacement and return the
/// weighted share of each mask in that one resample. Replicates whose
/// resample has zero weight fall back to the point estimate.
pub fn bootstrap_fractions<R: Rng + ?Sized>(
    weights: ArrayView1<f64>,
    masks: &[&[bool]],
    replicates: usize,
    rng: &mut R,
) -> Vec<Array1<f64>> {
    let n = weights.len();
    let point: Vec<f64> = masks
        .iter()
        .map(|m| weighted_fraction(weights, m).unwrap_or(0.0))
        .collect();
    let mut out: Vec<Array1<f64>> = masks.iter().map(|_| Array1::zeros(replicates)).collect();
    if n == 0 {
        for (o, p) in out.iter_mut().zip(&point) {
            o.fill(*p);
        }
        return out;
    }
    let mut hits = vec![0.0; masks.len()];
    for b in 0..replicates {
        let mut total = 0.0;
        hits.iter_mut().for_each(|h| *h = 0.0);
        for _ in 0..n {
            let j = rng.random_range(0..n);
            let w = weights[j];
            total += w;
            for (h, m) in hits.iter_mut().zip(masks) {
                if m[j] {
                    *h += w;
                }
            }
        }
        for (k, o) in out.iter_mut().enumerate() {
            o[b] = if total > 0.0 { hits[k] / total } else { point[k] };
        }
    }
    out
}

/// Per-replicate shares of the `z < 0` side and the `z >= 0` side of a split
/// computed from one shared resample. The second is `1 - first`.
pub fn split_fractions<R: Rng + ?Sized>(
    weights: ArrayView1<f64>,
    neg: &[bool],
    replicates: usize,
    rng: &mut R,
) -> (Array1<f64>, Array1<f64>) {
    let f_neg = bootstrap_fractions(weights, &[neg], replicates, rng).remove(0);
    let f_pos = f_neg.mapv(|f| 1.0 - f);
    (f_neg, f_pos)
}

/// Percentile interval at `level` with linear interpolation between order
/// statistics.
pub fn percentile_interval(values: &[f64], level: f64) -> Interval {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        if v.is_empty() {
            return f64::NAN;
        }
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    let tail = (1.0 - level) / 2.0;
    Interval {
        low: q(tail),
        high: q(1.0 - tail),
    }
}

/// One leaf's contribution to the totals.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafEstimate {
    /// `|I| * prod f`.
    pub volume: f64,
    /// Weighted share of the leaf's samples inside the approximation.
    pub frac_p: f64,
    /// Weighted share of the leaf's samples inside the preimage.
    pub frac_o: f64,
    /// Replicates of `volume`, `frac_p` and `frac_o`.
    pub volume_reps: Array1<f64>,
    pub frac_p_reps: Array1<f64>,
    pub frac_o_reps: Array1<f64>,
}

impl LeafEstimate {
    pub fn v_p(&self) -> f64 {
        self.volume * self.frac_p
    }

    pub fn v_o(&self) -> f64 {
        self.volume * self.frac_o
    }

    pub fn priority(&self) -> f64 {
        priority(self.v_p(), self.v_o())
    }

    /// Interval on this leaf's own ratio.
    pub fn ratio_interval(&self, level: f64) -> Interval {
        let reps: Vec<f64> = (0..self.frac_p_reps.len())
            .map(|b| ratio(self.frac_p_reps[b], self.frac_o_reps[b]).max(0.0))
            .collect();
        percentile_interval(&reps, level)
    }
}

/// Totals over leaves, summed in the given order, with percentile intervals
/// from element-wise combined replicates.
pub fn aggregate(leaves: &[LeafEstimate], level: f64) -> VolumeEstimate {
    // `+ 0.0` turns the empty sum's -0.0 into 0.0.
    let v_p: f64 = leaves.iter().map(LeafEstimate::v_p).sum::<f64>() + 0.0;
    let v_o: f64 = leaves.iter().map(LeafEstimate::v_o).sum::<f64>() + 0.0;
    let reps = leaves.first().map_or(0, |l| l.volume_reps.len());
    if reps == 0 {
        return VolumeEstimate {
            v_p,
            v_o,
            ratio: ratio(v_p, v_o),
            ci_p: None,
            ci_o: None,
            ci_ratio: None,
        };
    }
    let mut rp = vec![0.0; reps];
    let mut ro = vec![0.0; reps];
    for leaf in leaves {
        for b in 0..reps {
            rp[b] += leaf.volume_reps[b] * leaf.frac_p_reps[b];
            ro[b] += leaf.volume_reps[b] * leaf.frac_o_reps[b];
        }
    }
    let rr: Vec<f64> = rp.iter().zip(&ro).map(|(&p, &o)| ratio(p, o).max(0.0)).collect();
    VolumeEstimate {
        v_p,
        v_o,
        ratio: ratio(v_p, v_o),
        ci_p: Some(percentile_interval(&rp, level)),
        ci_o: Some(percentile_interval(&ro, level)),
        ci_ratio: Some(percentile_interval(&rr, level)),
    }
}
