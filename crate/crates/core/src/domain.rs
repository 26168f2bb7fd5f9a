//! Subdomains: an input box plus a ReLU split history, with cached bounds.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CompiledNet;
use crate::relax::{self, BoundContext, Bounds, Side};
use crate::sampler::SampleSet;

/// Branch of a split: `Neg` is `z < 0`, `Pos` is `z >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sign {
    #[serde(rename = "-")]
    Neg,
    #[serde(rename = "+")]
    Pos,
}

impl Sign {
    pub fn holds(self, z: f64) -> bool {
        match self {
            Sign::Neg => z < 0.0,
            Sign::Pos => z >= 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Split {
    pub layer: usize,
    pub neuron: usize,
    pub sign: Sign,
}

/// Axis-aligned box `lower <= x <= upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lower: Array1<f64>,
    pub upper: Array1<f64>,
}

impl InputBox {
    pub fn new(lower: Array1<f64>, upper: Array1<f64>) -> Result<Self> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() {
            return Err(Error::Dimension {
                expected: self.lower.len(),
                actual: self.upper.len(),
            });
        }
        for (j, (l, u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(l <= u) || !l.is_finite() || !u.is_finite() {
                return Err(Error::InvalidBounds(format!(
                    "coordinate {j}: [{l}, {u}]"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Coordinates with positive width.
    pub fn free_coords(&self) -> Vec<usize> {
        (0..self.dim())
            .filter(|&j| self.upper[j] > self.lower[j])
            .collect()
    }

    /// Product of the widths of the free coordinates; 1 when none are free.
    ///
    /// Fixed coordinates are left out so that a patch inside an image has
    /// the volume of the patch rather than zero.
    pub fn free_volume(&self) -> f64 {
        self.free_coords()
            .iter()
            .map(|&j| self.upper[j] - self.lower[j])
            .product()
    }

    pub fn contains(&self, x: ArrayView1<f64>) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| l <= v && v <= u)
    }
}

/// `{x : a x + b >= 0}` on every row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfSpaceRegion {
    pub a: Array2<f64>,
    pub b: Array1<f64>,
    pub side: Side,
}

impl HalfSpaceRegion {
    pub fn new(a: Array2<f64>, b: Array1<f64>, side: Side) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::Dimension {
                expected: a.nrows(),
                actual: b.len(),
            });
        }
        Ok(Self { a, b, side })
    }

    /// Whole space (no rows).
    pub fn full(dim: usize, side: Side) -> Self {
        Self {
            a: Array2::zeros((0, dim)),
            b: Array1::zeros(0),
            side,
        }
    }

    /// No point satisfies `0 x - 1 >= 0`.
    pub fn empty(dim: usize, side: Side) -> Self {
        Self {
            a: Array2::zeros((1, dim)),
            b: Array1::from_elem(1, -1.0),
            side,
        }
    }

    pub fn is_empty_region(&self) -> bool {
        self.a.iter().all(|&v| v == 0.0) && self.b.iter().any(|&v| v < 0.0)
    }

    pub fn satisfied(&self, x: ArrayView1<f64>) -> bool {
        self.a
            .axis_iter(Axis(0))
            .zip(&self.b)
            .all(|(row, b)| row.dot(&x) + b >= 0.0)
    }

    /// Membership flag per row of `points`.
    pub fn satisfied_batch(&self, points: &Array2<f64>) -> Vec<bool> {
        if self.a.nrows() == 0 {
            return vec![true; points.nrows()];
        }
        let v = points.dot(&self.a.t()) + &self.b;
        v.axis_iter(Axis(0))
            .map(|row| row.iter().all(|&x| x >= 0.0))
            .collect()
    }
}

/// Linear constraint `a x + b <= 0` implied by a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterConstraint {
    pub a: Array1<f64>,
    pub b: f64,
}

/// Outcome of a split or tightening step on one branch.
#[derive(Debug, Clone)]
pub enum Branch {
    Feasible(Subdomain),
    /// Bound reasoning proved that no input satisfies the branch.
    Infeasible(Subdomain),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subdomain {
    pub input_box: InputBox,
    pub splits: Vec<Split>,
    /// Split sign per ReLU layer and neuron, mirroring `splits`.
    #[serde(skip)]
    pub fixed: Vec<Vec<Option<Sign>>>,
    #[serde(skip)]
    pub layer_bounds: Vec<Bounds>,
    pub plane: Option<HalfSpaceRegion>,
    pub volume_chain: Vec<f64>,
    /// Input-space relaxation of each split, used to guide sampling.
    #[serde(skip)]
    pub outer: Vec<OuterConstraint>,
}

impl Subdomain {
    pub fn root(net: &CompiledNet, input_box: InputBox) -> Result<Self> {
        input_box.validate()?;
        if input_box.dim() != net.input_dim() {
            return Err(Error::Dimension {
                expected: net.input_dim(),
                actual: input_box.dim(),
            });
        }
        let fixed: Vec<Vec<Option<Sign>>> = net.relu_widths().iter().map(|&w| vec![None; w]).collect();
        let layer_bounds = relax::compute_layer_bounds(net, &input_box, &fixed, None)
            .ok_or_else(|| Error::InvalidBounds("input box is infeasible".into()))?;
        Ok(Self {
            input_box,
            splits: Vec::new(),
            fixed,
            layer_bounds,
            plane: None,
            volume_chain: Vec::new(),
            outer: Vec::new(),
        })
    }

    pub fn context(&self) -> BoundContext<'_> {
        BoundContext {
            input: &self.input_box,
            layers: &self.layer_bounds,
            fixed: &self.fixed,
        }
    }

    /// Product of the recorded sample-fraction factors.
    pub fn chain_factor(&self) -> f64 {
        self.volume_chain.iter().product()
    }

    pub fn is_unstable(&self, layer: usize, neuron: usize) -> bool {
        self.fixed[layer][neuron].is_none()
            && self.layer_bounds[layer].lower[neuron] < 0.0
            && self.layer_bounds[layer].upper[neuron] > 0.0
    }

    /// Unstable, unsplit neurons ordered by layer then index.
    pub fn unstable_neurons(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (l, b) in self.layer_bounds.iter().enumerate() {
            for i in 0..b.len() {
                if self.is_unstable(l, i) {
                    out.push((l, i));
                }
            }
        }
        out
    }

    /// Whether pre-activations of one input agree with every split sign.
    pub fn consistent(&self, pre: &[ArrayView1<f64>]) -> bool {
        self.splits
            .iter()
            .all(|s| s.sign.holds(pre[s.layer][s.neuron]))
    }

    /// Whether sample `j` of a set evaluated on this network agrees with
    /// every split sign.
    pub fn consistent_sample(&self, samples: &SampleSet, j: usize) -> bool {
        self.splits
            .iter()
            .all(|s| s.sign.holds(samples.pre[s.layer][[j, s.neuron]]))
    }
}

/// `x` lies in the box, satisfies every split sign of `dom` and every row of
/// `region`.
pub fn contains(net: &CompiledNet, region: &HalfSpaceRegion, dom: &Subdomain, x: ArrayView1<f64>) -> bool {
    if !dom.input_box.contains(x) || !region.satisfied(x) {
        return false;
    }
    if dom.splits.is_empty() {
        return true;
    }
    let (pre, _) = net.forward_batch(x.insert_axis(Axis(0)));
    dom.splits
        .iter()
        .all(|s| s.sign.holds(pre[s.layer][[0, s.neuron]]))
}

/// Settings for bound propagation after a split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TightenConfig {
    /// Apply reverse tightening at all.
    pub enabled: bool,
    /// Also tighten the ReLU layer directly below the split layer.
    pub previous_layer: bool,
}

impl Default for TightenConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            previous_layer: true,
        }
    }
}

/// Split `dom` on neuron `(layer, neuron)` and partition its samples by the
/// sign of the cached pre-activation. Each child gains the split, clipped and
/// propagated bounds, and a volume factor equal to its weighted share of the
/// samples. Children whose bounds become empty come back as
/// [`Branch::Infeasible`].
pub fn split_neuron(
    net: &CompiledNet,
    dom: &Subdomain,
    samples: &SampleSet,
    layer: usize,
    neuron: usize,
    tighten: &TightenConfig,
) -> Result<(Branch, SampleSet, Branch, SampleSet)> {
    if layer >= dom.fixed.len() || neuron >= dom.fixed[layer].len() {
        return Err(Error::NotSplittable {
            layer,
            neuron,
            reason: "no such neuron",
        });
    }
    if dom.fixed[layer][neuron].is_some() {
        return Err(Error::NotSplittable {
            layer,
            neuron,
            reason: "already split",
        });
    }
    if !dom.is_unstable(layer, neuron) {
        return Err(Error::NotSplittable {
            layer,
            neuron,
            reason: "neuron is stable",
        });
    }
    let (neg, pos) = samples.partition(layer, neuron);
    let total = samples.total_weight();
    let fraction = |s: &SampleSet| {
        if total > 0.0 {
            s.total_weight() / total
        } else {
            0.0
        }
    };
    let f_neg = fraction(&neg);
    let f_pos = fraction(&pos);
    let child_neg = make_child(net, dom, layer, neuron, Sign::Neg, f_neg, tighten);
    let child_pos = make_child(net, dom, layer, neuron, Sign::Pos, f_pos, tighten);
    Ok((child_neg, neg, child_pos, pos))
}

fn make_child(
    net: &CompiledNet,
    dom: &Subdomain,
    layer: usize,
    neuron: usize,
    sign: Sign,
    factor: f64,
    tighten: &TightenConfig,
) -> Branch {
    let mut child = dom.clone();
    child.splits.push(Split { layer, neuron, sign });
    child.fixed[layer][neuron] = Some(sign);
    child.volume_chain.push(factor);
    child.outer.push(outer_constraint(net, dom, layer, neuron, sign));
    match sign {
        Sign::Neg => child.layer_bounds[layer].upper[neuron] = child.layer_bounds[layer].upper[neuron].min(0.0),
        Sign::Pos => child.layer_bounds[layer].lower[neuron] = child.layer_bounds[layer].lower[neuron].max(0.0),
    }
    if !refresh_forward(net, &mut child) {
        return Branch::Infeasible(child);
    }
    if tighten.enabled {
        let mut targets = vec![None];
        if tighten.previous_layer && layer > 0 {
            targets.push(Some(layer - 1));
        }
        for m in targets {
            if !tighten_reverse(net, dom, &mut child, layer, neuron, sign, m) {
                return Branch::Infeasible(child);
            }
        }
        if !refresh_forward(net, &mut child) {
            return Branch::Infeasible(child);
        }
    }
    Branch::Feasible(child)
}

/// Input-space consequence of a split: `A x + b <= 0` from the lower bound row
/// of `z < 0`, or `-(A x + b) <= 0` from the upper bound row of `z >= 0`.
fn outer_constraint(net: &CompiledNet, dom: &Subdomain, layer: usize, neuron: usize, sign: Sign) -> OuterConstraint {
    let (a, b) = neuron_row(net, dom, layer, neuron, sign, None);
    match sign {
        Sign::Neg => OuterConstraint { a, b },
        Sign::Pos => OuterConstraint { a: -a, b: -b },
    }
}

/// Row bounding `z^layer_neuron` from below (for `Neg`) or above (for `Pos`)
/// in terms of the input (`stop = None`) or of ReLU layer `stop`, using the
/// parent's intervals.
fn neuron_row(
    net: &CompiledNet,
    dom: &Subdomain,
    layer: usize,
    neuron: usize,
    sign: Sign,
    stop: Option<usize>,
) -> (Array1<f64>, f64) {
    let width = dom.layer_bounds[layer].len();
    let mut e = Array2::zeros((1, width));
    e[[0, neuron]] = 1.0;
    let side = match sign {
        Sign::Neg => Side::Lower,
        Sign::Pos => Side::Upper,
    };
    let ctx = dom.context();
    let p = relax::propagate(net, &ctx, layer, e, Array1::zeros(1), stop, side, None, false);
    (p.a.row(0).to_owned(), p.b[0])
}

/// Shrink the bounds of layer `m` (the input box when `m` is `None`) of
/// `child` using the split `z^layer_neuron` has sign `sign`. Rows are built
/// from the parent's intervals, which stay valid for the child. Returns false
/// when an interval becomes empty.
pub fn tighten_reverse(
    net: &CompiledNet,
    parent: &Subdomain,
    child: &mut Subdomain,
    layer: usize,
    neuron: usize,
    sign: Sign,
    m: Option<usize>,
) -> bool {
    let (row, offset) = neuron_row(net, parent, layer, neuron, sign, m);
    let (lo, hi) = match m {
        None => (&mut child.input_box.lower, &mut child.input_box.upper),
        Some(k) => {
            let b = &mut child.layer_bounds[k];
            (&mut b.lower, &mut b.upper)
        }
    };
    tighten_interval(row.view(), offset, sign, lo, hi)
}

/// The interval update for one constraint row. For `Neg` the constraint is
/// `row . v + offset < 0`; for `Pos` it is `row . v + offset >= 0`.
pub fn tighten_interval(
    row: ArrayView1<f64>,
    offset: f64,
    sign: Sign,
    lo: &mut Array1<f64>,
    hi: &mut Array1<f64>,
) -> bool {
    let term = |j: usize| {
        let (a, b) = (row[j] * lo[j], row[j] * hi[j]);
        match sign {
            Sign::Neg => a.min(b),
            Sign::Pos => a.max(b),
        }
    };
    let terms: Vec<f64> = (0..row.len()).map(term).collect();
    let total: f64 = terms.iter().sum();
    for j in 0..row.len() {
        let a = row[j];
        if a == 0.0 {
            continue;
        }
        let c = total - terms[j];
        let bound = -(c + offset) / a;
        if !bound.is_finite() {
            continue;
        }
        let slack = 1e-10 * (1.0 + bound.abs() + c.abs() / a.abs());
        // Neg with a > 0, or Pos with a < 0, caps the coordinate from above.
        let caps_upper = (sign == Sign::Neg) == (a > 0.0);
        if caps_upper {
            hi[j] = hi[j].min(bound + slack);
        } else {
            lo[j] = lo[j].max(bound - slack);
        }
        if lo[j] > hi[j] {
            return false;
        }
    }
    true
}

/// Recompute every layer's intervals from the (possibly tightened) box and
/// earlier intervals, intersected with the current ones. Returns false when
/// an interval becomes empty.
pub fn refresh_forward(net: &CompiledNet, dom: &mut Subdomain) -> bool {
    if dom.input_box.validate().is_err() {
        return false;
    }
    match relax::compute_layer_bounds(net, &dom.input_box, &dom.fixed, Some(&dom.layer_bounds)) {
        Some(bounds) => {
            dom.layer_bounds = bounds;
            true
        }
        None => false,
    }
}
