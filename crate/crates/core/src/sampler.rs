//! Sampling inside subdomains.
//!
//! Points are drawn uniformly from the subdomain's box and kept when their
//! pre-activations agree with every split sign. When that hit rate collapses,
//! a hit-and-run chain over the input-space relaxation of the splits takes
//! over, still followed by the exact sign check.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{InputBox, OuterConstraint, Subdomain};
use crate::error::{Error, Result};
use crate::model::CompiledNet;

/// Input points with weights and everything the engine reads off them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    /// One row per sample.
    pub points: Array2<f64>,
    pub weights: Array1<f64>,
    /// Pre-activations of every ReLU layer, one row per sample.
    pub pre: Vec<Array2<f64>>,
    /// Outputs of the specification network `C f(x) + d`.
    pub outputs: Array2<f64>,
    /// All specification rows are nonnegative.
    pub in_preimage: Vec<bool>,
}

impl SampleSet {
    pub fn empty(net: &CompiledNet) -> Self {
        Self {
            points: Array2::zeros((0, net.input_dim())),
            weights: Array1::zeros(0),
            pre: net.relu_widths().iter().map(|&w| Array2::zeros((0, w))).collect(),
            outputs: Array2::zeros((0, net.output_dim())),
            in_preimage: Vec::new(),
        }
    }

    pub fn evaluate(net: &CompiledNet, points: Array2<f64>, weights: Array1<f64>) -> Self {
        let (pre, outputs) = net.forward_batch(points.view());
        let in_preimage = outputs
            .axis_iter(Axis(0))
            .map(|r| r.iter().all(|&v| v >= 0.0))
            .collect();
        Self {
            points,
            weights,
            pre,
            outputs,
            in_preimage,
        }
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.sum()
    }

    pub fn preimage_weight(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.in_preimage)
            .filter(|(_, &m)| m)
            .map(|(w, _)| w)
            .sum()
    }

    pub fn preimage_count(&self) -> usize {
        self.in_preimage.iter().filter(|&&m| m).count()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            points: self.points.select(Axis(0), idx),
            weights: self.weights.select(Axis(0), idx),
            pre: self.pre.iter().map(|p| p.select(Axis(0), idx)).collect(),
            outputs: self.outputs.select(Axis(0), idx),
            in_preimage: idx.iter().map(|&i| self.in_preimage[i]).collect(),
        }
    }

    /// Split by the sign of the cached pre-activation: `(z < 0, z >= 0)`.
    pub fn partition(&self, layer: usize, neuron: usize) -> (Self, Self) {
        let (neg, pos): (Vec<usize>, Vec<usize>) =
            (0..self.len()).partition(|&j| self.pre[layer][[j, neuron]] < 0.0);
        (self.select(&neg), self.select(&pos))
    }

    pub fn append(&mut self, other: &SampleSet) {
        let cat = |a: &Array2<f64>, b: &Array2<f64>| {
            ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching widths")
        };
        self.points = cat(&self.points, &other.points);
        self.weights = ndarray::concatenate(Axis(0), &[self.weights.view(), other.weights.view()])
            .expect("vectors");
        for (p, q) in self.pre.iter_mut().zip(&other.pre) {
            *p = cat(p, q);
        }
        self.outputs = cat(&self.outputs, &other.outputs);
        self.in_preimage.extend_from_slice(&other.in_preimage);
    }

    /// Drop the cached activations, keeping only what statistics need.
    pub fn strip_activations(&mut self) {
        for p in &mut self.pre {
            *p = Array2::zeros((0, p.ncols()));
        }
    }
}

/// Per-point sampling weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum WeightFunction {
    Uniform,
    /// `prod_p 1 - max(0, b_p - b_max) / (1 - b_max)` over the patch pixels,
    /// where `b_p` is the mean channel value of pixel `p` in the sample and
    /// `b_max` the brightness of the brightest pixel of the original image.
    /// Inputs are images flattened in height, width, channel order.
    Brightness {
        channels: usize,
        pixels: Vec<usize>,
        max_brightness: f64,
    },
    /// Product over the listed coordinates of a piecewise-linear function
    /// given by `(x, w)` knots, constant beyond the end knots.
    PiecewiseLinear { coords: Vec<CoordinateKnots> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateKnots {
    pub index: usize,
    pub knots: Vec<[f64; 2]>,
}

impl Default for WeightFunction {
    fn default() -> Self {
        Self::Uniform
    }
}

impl WeightFunction {
    /// Brightness prior for `pixels` of an `h x w x channels` image.
    pub fn brightness(image: &[f64], channels: usize, pixels: Vec<usize>) -> Result<Self> {
        if channels == 0 || image.len() % channels != 0 {
            return Err(Error::Config("image length is not a multiple of the channel count".into()));
        }
        let count = image.len() / channels;
        if let Some(&p) = pixels.iter().find(|&&p| p >= count) {
            return Err(Error::Config(format!("pixel {p} outside an image of {count} pixels")));
        }
        let max_brightness = image
            .chunks(channels)
            .map(|px| px.iter().sum::<f64>() / channels as f64)
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(Self::Brightness {
            channels,
            pixels,
            max_brightness,
        })
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Self::Uniform => Ok(()),
            Self::Brightness { channels, pixels, .. } => {
                if *channels == 0 || pixels.iter().any(|&p| (p + 1) * channels > dim) {
                    return Err(Error::Config("brightness pixels exceed the input".into()));
                }
                Ok(())
            }
            Self::PiecewiseLinear { coords } => {
                for c in coords {
                    if c.index >= dim {
                        return Err(Error::Config(format!("weight coordinate {} out of range", c.index)));
                    }
                    if c.knots.is_empty() || c.knots.windows(2).any(|w| w[0][0] > w[1][0]) {
                        return Err(Error::Config("knots must be nonempty and sorted".into()));
                    }
                    if c.knots.iter().any(|k| !(k[1] >= 0.0) || !k[0].is_finite()) {
                        return Err(Error::Config("knot weights must be nonnegative".into()));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn weight(&self, x: ArrayView1<f64>) -> f64 {
        match self {
            Self::Uniform => 1.0,
            Self::Brightness {
                channels,
                pixels,
                max_brightness,
            } => {
                let room = 1.0 - max_brightness;
                if room <= 0.0 {
                    return 1.0;
                }
                pixels
                    .iter()
                    .map(|&p| {
                        let px = x.slice(s![p * channels..(p + 1) * channels]);
                        let b = px.sum() / *channels as f64;
                        1.0 - (b - max_brightness).max(0.0) / room
                    })
                    .product::<f64>()
                    .max(0.0)
            }
            Self::PiecewiseLinear { coords } => coords
                .iter()
                .map(|c| interpolate(&c.knots, x[c.index]))
                .product(),
        }
    }

    pub fn weights(&self, points: &Array2<f64>) -> Array1<f64> {
        match self {
            Self::Uniform => Array1::ones(points.nrows()),
            _ => points.axis_iter(Axis(0)).map(|p| self.weight(p)).collect(),
        }
    }
}

fn interpolate(knots: &[[f64; 2]], x: f64) -> f64 {
    let first = knots[0];
    let last = knots[knots.len() - 1];
    if x <= first[0] {
        return first[1];
    }
    if x >= last[0] {
        return last[1];
    }
    for w in knots.windows(2) {
        let ([x0, y0], [x1, y1]) = (w[0], w[1]);
        if x <= x1 {
            if x1 == x0 {
                return y1;
            }
            return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        }
    }
    last[1]
}

/// `(sum w)^2 / sum w^2`.
pub fn effective_sample_size(weights: ArrayView1<f64>) -> Result<f64> {
    let sum: f64 = weights.sum();
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    if !(sum > 0.0) || !(sq > 0.0) {
        return Err(Error::ZeroWeight);
    }
    Ok(sum * sum / sq)
}

/// A 64-bit mixing step (splitmix64 finalizer).
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the random stream of a subdomain, derived from the master seed,
/// the branch path and a purpose tag.
pub fn stream_seed(master: u64, path: &[(usize, usize, bool)], purpose: u64) -> u64 {
    let mut h = mix(master);
    for &(l, i, pos) in path {
        h = mix(h ^ (l as u64).wrapping_mul(0x1000_0000_01b3));
        h = mix(h ^ (i as u64).wrapping_mul(0x0100_0193) ^ u64::from(pos));
    }
    mix(h ^ purpose.wrapping_mul(0xa076_1d64_78bd_642f))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` i.i.d. uniform points in the box; fixed coordinates come out constant.
pub fn sample_uniform<R: Rng + ?Sized>(input: &InputBox, n: usize, rng: &mut R) -> Array2<f64> {
    let d = input.dim();
    let mut out = Array2::zeros((n, d));
    for mut row in out.axis_iter_mut(Axis(0)) {
        for j in 0..d {
            let (l, u) = (input.lower[j], input.upper[j]);
            row[j] = if u > l {
                (l + (u - l) * rng.random::<f64>()).min(u)
            } else {
                l
            };
        }
    }
    out
}

/// Sampling tuning knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Rejection attempts allowed per requested sample before falling back.
    pub attempt_factor: usize,
    /// Hit rate below which hit-and-run takes over.
    pub min_hit_rate: f64,
    pub burn_in: usize,
    pub thinning: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            attempt_factor: 20,
            min_hit_rate: 0.05,
            burn_in: 50,
            thinning: 10,
        }
    }
}

/// Result of rejection sampling.
#[derive(Debug, Clone)]
pub struct Rejection {
    pub samples: SampleSet,
    pub attempts: usize,
    pub hit_rate: f64,
}

/// Draw up to `n` points from the box that satisfy every split sign of
/// `dom`, within `attempt_factor * n` attempts.
pub fn rejection_sample<R: Rng + ?Sized>(
    net: &CompiledNet,
    dom: &Subdomain,
    n: usize,
    weight_fn: &WeightFunction,
    config: &SamplerConfig,
    rng: &mut R,
) -> Rejection {
    let budget = config.attempt_factor.max(1) * n;
    let mut out = SampleSet::empty(net);
    let mut attempts = 0;
    let mut hits = 0;
    while out.len() < n && attempts < budget {
        let need = n - out.len();
        // Oversample by the observed hit rate so a few batches suffice.
        let rate = if attempts > 0 { (hits as f64 / attempts as f64).max(0.01) } else { 1.0 };
        let batch = ((need as f64 / rate).ceil() as usize).clamp(need.min(64), budget - attempts);
        let pts = sample_uniform(&dom.input_box, batch, rng);
        attempts += batch;
        let all = SampleSet::evaluate(net, pts, Array1::zeros(batch));
        let keep: Vec<usize> = (0..batch).filter(|&j| dom.consistent_sample(&all, j)).collect();
        hits += keep.len();
        let take = &keep[..keep.len().min(need)];
        let mut chosen = all.select(take);
        chosen.weights = weight_fn.weights(&chosen.points);
        out.append(&chosen);
    }
    let hit_rate = if attempts == 0 { 1.0 } else { hits as f64 / attempts as f64 };
    Rejection {
        samples: out,
        attempts,
        hit_rate,
    }
}

/// Linear inequalities `a x + b <= 0` plus a box, the state space of the
/// hit-and-run chain.
#[derive(Debug, Clone)]
pub struct Polytope<'a> {
    pub input: &'a InputBox,
    pub constraints: &'a [OuterConstraint],
}

impl Polytope<'_> {
    pub fn contains(&self, x: ArrayView1<f64>) -> bool {
        self.input.contains(x) && self.constraints.iter().all(|c| c.a.dot(&x) + c.b <= 0.0)
    }

    /// Feasible step range `[t_min, t_max]` along `dir` from `x`.
    fn chord(&self, x: ArrayView1<f64>, dir: &Array1<f64>) -> (f64, f64) {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for j in 0..x.len() {
            let d = dir[j];
            if d > 0.0 {
                hi = hi.min((self.input.upper[j] - x[j]) / d);
                lo = lo.max((self.input.lower[j] - x[j]) / d);
            } else if d < 0.0 {
                hi = hi.min((self.input.lower[j] - x[j]) / d);
                lo = lo.max((self.input.upper[j] - x[j]) / d);
            }
        }
        for c in self.constraints {
            let ad = c.a.dot(dir);
            let slack = -(c.a.dot(&x) + c.b);
            if ad > 0.0 {
                hi = hi.min(slack / ad);
            } else if ad < 0.0 {
                lo = lo.max(slack / ad);
            }
        }
        (lo.min(0.0), hi.max(0.0))
    }
}

/// Hit-and-run chain over `poly` started at `start`. Directions are drawn
/// uniformly on the sphere of the box's free coordinates. The first
/// `burn_in` steps are discarded, then every `thinning`-th point is recorded.
pub fn hit_and_run<R: Rng + ?Sized>(
    poly: &Polytope<'_>,
    start: ArrayView1<f64>,
    n: usize,
    burn_in: usize,
    thinning: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if !poly.contains(start) {
        return Err(Error::Config("hit-and-run start point is outside the polytope".into()));
    }
    let free = poly.input.free_coords();
    let d = start.len();
    let mut out = Array2::zeros((n, d));
    if free.is_empty() {
        for mut row in out.axis_iter_mut(Axis(0)) {
            row.assign(&start);
        }
        return Ok(out);
    }
    let mut x = start.to_owned();
    let thinning = thinning.max(1);
    let total = burn_in + n * thinning;
    let mut recorded = 0;
    let mut dir = Array1::zeros(d);
    for step in 1..=total {
        let mut tries = 0;
        let (lo, hi) = loop {
            tries += 1;
            if tries > 100 {
                break (0.0, 0.0);
            }
            let mut norm = 0.0;
            for &j in &free {
                let g: f64 = rng.sample(StandardNormal);
                dir[j] = g;
                norm += g * g;
            }
            if norm == 0.0 {
                continue;
            }
            let (lo, hi) = poly.chord(x.view(), &dir);
            if hi > lo {
                break (lo, hi);
            }
        };
        let t = lo + (hi - lo) * rng.random::<f64>();
        x.scaled_add(t, &dir);
        // Keep rounding drift inside the box.
        for &j in &free {
            x[j] = x[j].clamp(poly.input.lower[j], poly.input.upper[j]);
        }
        if step > burn_in && (step - burn_in) % thinning == 0 {
            out.row_mut(recorded).assign(&x);
            recorded += 1;
        }
    }
    Ok(out)
}

/// How a [`replenish`] call filled its set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReplenishInfo {
    pub rejection_attempts: usize,
    pub used_hit_and_run: bool,
    /// No in-branch point was found at all.
    pub exhausted: bool,
}

/// Top `current` up to `n_target` in-branch samples. Existing points are
/// kept. Rejection sampling runs first; if its hit rate falls below
/// `min_hit_rate` the remainder comes from hit-and-run over the relaxed
/// split constraints, filtered on exact signs.
pub fn replenish<R: Rng + ?Sized>(
    net: &CompiledNet,
    dom: &Subdomain,
    current: SampleSet,
    n_target: usize,
    weight_fn: &WeightFunction,
    config: &SamplerConfig,
    rng: &mut R,
) -> (SampleSet, ReplenishInfo) {
    let mut info = ReplenishInfo::default();
    if current.len() >= n_target {
        return (current, info);
    }
    let mut set = current;
    let need = n_target - set.len();
    let rej = rejection_sample(net, dom, need, weight_fn, config, rng);
    info.rejection_attempts = rej.attempts;
    set.append(&rej.samples);
    if set.len() >= n_target || rej.hit_rate >= config.min_hit_rate {
        info.exhausted = set.is_empty();
        return (set, info);
    }
    if set.is_empty() {
        info.exhausted = true;
        return (set, info);
    }
    info.used_hit_and_run = true;
    let poly = Polytope {
        input: &dom.input_box,
        constraints: &dom.outer,
    };
    let mut start = set.points.row(set.len() - 1).to_owned();
    // Rounding can leave an in-branch point a hair outside the relaxation.
    if !poly.contains(start.view()) {
        if let Some(j) = (0..set.len()).find(|&j| poly.contains(set.points.row(j))) {
            start = set.points.row(j).to_owned();
        } else {
            return (set, info);
        }
    }
    let max_rounds = 50;
    for _ in 0..max_rounds {
        let need = n_target - set.len();
        if need == 0 {
            break;
        }
        let batch = need.max(64);
        let Ok(pts) = hit_and_run(&poly, start.view(), batch, config.burn_in, config.thinning, rng) else {
            break;
        };
        start = pts.row(batch - 1).to_owned();
        let all = SampleSet::evaluate(net, pts, Array1::zeros(batch));
        let keep: Vec<usize> = (0..batch)
            .filter(|&j| dom.consistent_sample(&all, j))
            .take(need)
            .collect();
        let mut chosen = all.select(&keep);
        chosen.weights = weight_fn.weights(&chosen.points);
        set.append(&chosen);
    }
    (set, info)
}
