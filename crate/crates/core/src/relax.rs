//! Backward linear bound propagation (CROWN with optimizable slopes).
//!
//! Every bound is built by pushing a matrix of linear coefficients backwards
//! through the compiled network. Affine maps are exact; each ReLU is replaced
//! by a linear lower or upper relaxation depending on the sign of the incoming
//! coefficient:
//!
//! ```text
//!   inactive (u <= 0):  h = 0
//!   active   (l >= 0):  h = z
//!   unstable:           alpha * z <= h <= u (z - l) / (u - l)
//! ```
//!
//! Split neurons use the exact piece of their branch, and a nonnegative
//! multiplier `beta` folds the split constraint itself into the bound.
//!
//! The sample objective and its gradient with respect to `alpha` and `beta`
//! are computed by a hand-written reverse pass over the same propagation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::domain::{InputBox, Sign, Subdomain};
use crate::error::{Error, Result};
use crate::model::CompiledNet;

/// Concrete per-neuron interval of one ReLU layer's pre-activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Array1<f64>,
    pub upper: Array1<f64>,
}

impl Bounds {
    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    /// Elementwise intersection.
    pub fn intersect(&self, other: &Bounds) -> Bounds {
        Bounds {
            lower: Zip::from(&self.lower)
                .and(&other.lower)
                .map_collect(|a, b| a.max(*b)),
            upper: Zip::from(&self.upper)
                .and(&other.upper)
                .map_collect(|a, b| a.min(*b)),
        }
    }

    pub fn contains(&self, other: &Bounds) -> bool {
        Zip::from(&self.lower)
            .and(&other.lower)
            .all(|a, b| a <= b)
            && Zip::from(&self.upper)
                .and(&other.upper)
                .all(|a, b| a >= b)
    }
}

/// Which side of a bound is being computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeuronState {
    Inactive,
    Active,
    Unstable,
}

/// A layer position for [`backward_bounds`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRef {
    Input,
    /// Pre-activations of the given ReLU layer.
    Relu(usize),
    /// The output of the compiled network (`f_O` once the spec is appended).
    Output,
}

/// `A_lower z + b_lower <= target <= A_upper z + b_upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBounds {
    pub a_lower: Array2<f64>,
    pub b_lower: Array1<f64>,
    pub a_upper: Array2<f64>,
    pub b_upper: Array1<f64>,
}

impl LinearBounds {
    pub fn side(&self, side: Side) -> (&Array2<f64>, &Array1<f64>) {
        match side {
            Side::Lower => (&self.a_lower, &self.b_lower),
            Side::Upper => (&self.a_upper, &self.b_upper),
        }
    }
}

/// Linear pieces bounding a single ReLU over `[lb, ub]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReluRelaxation {
    pub lower_slope: f64,
    pub lower_intercept: f64,
    pub upper_slope: f64,
    pub upper_intercept: f64,
}

pub fn relu_relaxation(lb: f64, ub: f64, alpha: f64) -> Result<ReluRelaxation> {
    if !(lb <= ub) {
        return Err(Error::InvalidBounds(format!("lower {lb} exceeds upper {ub}")));
    }
    Ok(match neuron_state(lb, ub) {
        NeuronState::Inactive => ReluRelaxation {
            lower_slope: 0.0,
            lower_intercept: 0.0,
            upper_slope: 0.0,
            upper_intercept: 0.0,
        },
        NeuronState::Active => ReluRelaxation {
            lower_slope: 1.0,
            lower_intercept: 0.0,
            upper_slope: 1.0,
            upper_intercept: 0.0,
        },
        NeuronState::Unstable => {
            let slope = ub / (ub - lb);
            ReluRelaxation {
                lower_slope: alpha.clamp(0.0, 1.0),
                lower_intercept: 0.0,
                upper_slope: slope,
                upper_intercept: -slope * lb,
            }
        }
    })
}

/// A zero-width interval at zero counts as inactive.
fn neuron_state(lb: f64, ub: f64) -> NeuronState {
    if ub <= 0.0 {
        NeuronState::Inactive
    } else if lb >= 0.0 {
        NeuronState::Active
    } else {
        NeuronState::Unstable
    }
}

/// CROWN's slope choice: identity when the positive part dominates.
fn default_alpha(lb: f64, ub: f64) -> f64 {
    if ub >= -lb {
        1.0
    } else {
        0.0
    }
}

/// Everything bound propagation needs to know about a subdomain.
#[derive(Debug, Clone, Copy)]
pub struct BoundContext<'a> {
    pub input: &'a InputBox,
    /// Intervals of the first `layers.len()` ReLU layers.
    pub layers: &'a [Bounds],
    /// Split sign per ReLU layer and neuron.
    pub fixed: &'a [Vec<Option<Sign>>],
}

impl BoundContext<'_> {
    pub fn state(&self, layer: usize, neuron: usize) -> NeuronState {
        match self.fixed[layer][neuron] {
            Some(Sign::Neg) => NeuronState::Inactive,
            Some(Sign::Pos) => NeuronState::Active,
            None => {
                let b = &self.layers[layer];
                neuron_state(b.lower[neuron], b.upper[neuron])
            }
        }
    }
}

/// Optimizable relaxation parameters for one bound side.
///
/// `alpha[k]` and `beta[k]` have one row per bounded output and one column per
/// neuron of ReLU layer `k`. Only unstable neurons read `alpha`; only split
/// neurons read `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxParams {
    pub alpha: Vec<Array2<f64>>,
    pub beta: Vec<Array2<f64>>,
}

impl RelaxParams {
    /// CROWN slopes and zero multipliers.
    pub fn initial(ctx: &BoundContext<'_>, rows: usize) -> Self {
        let alpha = ctx
            .layers
            .iter()
            .map(|b| {
                let row = Zip::from(&b.lower)
                    .and(&b.upper)
                    .map_collect(|&l, &u| default_alpha(l, u));
                row.broadcast((rows, b.len())).unwrap().to_owned()
            })
            .collect();
        let beta = ctx
            .layers
            .iter()
            .map(|b| Array2::zeros((rows, b.len())))
            .collect();
        Self { alpha, beta }
    }

    fn check(&self, widths: &[usize], rows: usize) -> Result<()> {
        if self.alpha.len() != widths.len() || self.beta.len() != widths.len() {
            return Err(Error::ParamShape(format!(
                "expected {} layers, got {} alpha / {} beta",
                widths.len(),
                self.alpha.len(),
                self.beta.len()
            )));
        }
        for (k, &w) in widths.iter().enumerate() {
            if self.alpha[k].dim() != (rows, w) || self.beta[k].dim() != (rows, w) {
                return Err(Error::ParamShape(format!(
                    "layer {k}: expected {rows}x{w}, got alpha {:?} / beta {:?}",
                    self.alpha[k].dim(),
                    self.beta[k].dim()
                )));
            }
        }
        Ok(())
    }

    /// Clamp `alpha` into `[0, 1]` and `beta` into `[0, inf)`.
    pub fn project(&mut self) {
        for a in &mut self.alpha {
            a.mapv_inplace(|v| v.clamp(0.0, 1.0));
        }
        for b in &mut self.beta {
            b.mapv_inplace(|v| v.max(0.0));
        }
    }

    fn num_values(&self) -> usize {
        self.alpha.iter().chain(&self.beta).map(Array2::len).sum()
    }
}

/// Result of one backward sweep.
pub(crate) struct Propagation {
    /// Coefficients on the stop layer (the input unless stopped early).
    pub a: Array2<f64>,
    pub b: Array1<f64>,
    /// Coefficients on `h^k` before relaxing ReLU layer `k`.
    pub mu: Vec<Option<Array2<f64>>>,
    /// Coefficients on `z^k` after relaxing ReLU layer `k`.
    pub nu: Vec<Option<Array2<f64>>>,
}

/// Push `rows . z^target + offset` backwards. `target` ranges over ReLU layer
/// indices, with `num_relu_layers()` meaning the network output. `stop` halts
/// at the pre-activations of a ReLU layer below `target`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn propagate(
    net: &CompiledNet,
    ctx: &BoundContext<'_>,
    target: usize,
    rows: Array2<f64>,
    offset: Array1<f64>,
    stop: Option<usize>,
    side: Side,
    params: Option<&RelaxParams>,
    record: bool,
) -> Propagation {
    let n_relu = net.num_relu_layers();
    let mut mus = vec![None; n_relu];
    let mut nus = vec![None; n_relu];
    let mut lam = rows;
    let mut off = offset;

    for k in (0..target).rev() {
        let next = &net.affines[k + 1];
        off += &lam.dot(&next.bias);
        let mu = lam.dot(&next.weight);
        let mut nu = Array2::zeros(mu.dim());
        let bounds = &ctx.layers[k];
        for i in 0..mu.ncols() {
            let state = ctx.state(k, i);
            let (l, u) = (bounds.lower[i], bounds.upper[i]);
            for r in 0..mu.nrows() {
                let m = mu[[r, i]];
                let mut v = match state {
                    NeuronState::Inactive => 0.0,
                    NeuronState::Active => m,
                    NeuronState::Unstable => {
                        let slope = u / (u - l);
                        let alpha = params.map_or_else(|| default_alpha(l, u), |p| p.alpha[k][[r, i]]);
                        let use_chord = match side {
                            Side::Lower => m < 0.0,
                            Side::Upper => m >= 0.0,
                        };
                        if use_chord {
                            off[r] -= m * slope * l;
                            m * slope
                        } else {
                            m * alpha
                        }
                    }
                };
                if let (Some(sign), Some(p)) = (ctx.fixed[k][i], params) {
                    v += beta_sign(side, sign) * p.beta[k][[r, i]];
                }
                nu[[r, i]] = v;
            }
        }
        if record {
            mus[k] = Some(mu);
            nus[k] = Some(nu.clone());
        }
        if stop == Some(k) {
            return Propagation {
                a: nu,
                b: off,
                mu: mus,
                nu: nus,
            };
        }
        lam = nu;
    }

    let first = &net.affines[0];
    off += &lam.dot(&first.bias);
    Propagation {
        a: lam.dot(&first.weight),
        b: off,
        mu: mus,
        nu: nus,
    }
}

/// Coefficient of `beta * z` added for a split constraint. For a lower bound
/// on the `z < 0` branch, `f >= f + beta z`; the other cases mirror it.
fn beta_sign(side: Side, sign: Sign) -> f64 {
    match (side, sign) {
        (Side::Lower, Sign::Neg) | (Side::Upper, Sign::Pos) => 1.0,
        (Side::Lower, Sign::Pos) | (Side::Upper, Sign::Neg) => -1.0,
    }
}

/// Minimum (lower side) or maximum (upper side) of `a x + b` over the box.
pub fn concretize(a: ArrayView2<f64>, b: ArrayView1<f64>, input: &InputBox, side: Side) -> Array1<f64> {
    let mut out = b.to_owned();
    for (r, row) in a.axis_iter(Axis(0)).enumerate() {
        let mut acc = 0.0;
        for (j, &c) in row.iter().enumerate() {
            let pick_lower = (c >= 0.0) == (side == Side::Lower);
            acc += c * if pick_lower {
                input.lower[j]
            } else {
                input.upper[j]
            };
        }
        out[r] += acc;
    }
    out
}

/// Sound intervals for every ReLU layer's pre-activations over `input`
/// restricted by the split signs in `fixed`.
///
/// Each layer is bounded by backward propagation to the input (using the
/// intervals of the earlier layers) intersected with interval arithmetic from
/// the previous layer. When `previous` is given the result is also
/// intersected with it, so bounds never widen. Returns `None` when some
/// interval becomes empty, which proves the subdomain infeasible.
pub fn compute_layer_bounds(
    net: &CompiledNet,
    input: &InputBox,
    fixed: &[Vec<Option<Sign>>],
    previous: Option<&[Bounds]>,
) -> Option<Vec<Bounds>> {
    let n_relu = net.num_relu_layers();
    let mut layers: Vec<Bounds> = Vec::with_capacity(n_relu);
    for k in 0..n_relu {
        let width = net.affines[k].out_dim();
        let ctx = BoundContext {
            input,
            layers: &layers,
            fixed,
        };
        let eye = Array2::eye(width);
        let zero = Array1::zeros(width);
        let lo = propagate(net, &ctx, k, eye.clone(), zero.clone(), None, Side::Lower, None, false);
        let hi = propagate(net, &ctx, k, eye, zero, None, Side::Upper, None, false);
        let mut bounds = Bounds {
            lower: concretize(lo.a.view(), lo.b.view(), input, Side::Lower),
            upper: concretize(hi.a.view(), hi.b.view(), input, Side::Upper),
        };
        if k > 0 {
            bounds = bounds.intersect(&interval_step(net, k, &layers[k - 1], &fixed[k - 1]));
        }
        if let Some(prev) = previous {
            bounds = bounds.intersect(&prev[k]);
        }
        for i in 0..width {
            match fixed[k][i] {
                Some(Sign::Neg) => bounds.upper[i] = bounds.upper[i].min(0.0),
                Some(Sign::Pos) => bounds.lower[i] = bounds.lower[i].max(0.0),
                None => {}
            }
            let (l, u) = (bounds.lower[i], bounds.upper[i]);
            if l > u {
                // Differences at rounding level are widened rather than
                // declared infeasible.
                if l - u > 1e-12 * (1.0 + l.abs().max(u.abs())) {
                    return None;
                }
                bounds.lower[i] = u;
                bounds.upper[i] = l;
            }
        }
        layers.push(bounds);
    }
    Some(layers)
}

/// Interval arithmetic through ReLU layer `k - 1` and affine map `k`.
fn interval_step(net: &CompiledNet, k: usize, prev: &Bounds, fixed: &[Option<Sign>]) -> Bounds {
    let n = prev.len();
    let mut h_lo = Array1::zeros(n);
    let mut h_hi = Array1::zeros(n);
    for i in 0..n {
        if fixed[i] != Some(Sign::Neg) {
            h_lo[i] = prev.lower[i].max(0.0);
            h_hi[i] = prev.upper[i].max(0.0);
        }
    }
    let affine = &net.affines[k];
    let w_pos = affine.weight.mapv(|v| v.max(0.0));
    let w_neg = affine.weight.mapv(|v| v.min(0.0));
    Bounds {
        lower: w_pos.dot(&h_lo) + w_neg.dot(&h_hi) + &affine.bias,
        upper: w_pos.dot(&h_hi) + w_neg.dot(&h_lo) + &affine.bias,
    }
}

/// Interval bounds for a subdomain computed from its box and splits alone.
pub fn interval_bounds(net: &CompiledNet, dom: &Subdomain) -> Result<Vec<Bounds>> {
    dom.input_box.validate()?;
    compute_layer_bounds(net, &dom.input_box, &dom.fixed, None)
        .ok_or_else(|| Error::InvalidBounds("subdomain is infeasible".into()))
}

/// Linear bounds of `from` in terms of `to`, using the subdomain's cached
/// intervals and the given parameters (CROWN defaults when `None`).
pub fn backward_bounds(
    net: &CompiledNet,
    dom: &Subdomain,
    lower: Option<&RelaxParams>,
    upper: Option<&RelaxParams>,
    from: LayerRef,
    to: LayerRef,
) -> Result<LinearBounds> {
    let n_relu = net.num_relu_layers();
    let target = match from {
        LayerRef::Output => n_relu,
        LayerRef::Relu(l) if l < n_relu => l,
        _ => return Err(range_error(from, to)),
    };
    let stop = match to {
        LayerRef::Input => None,
        LayerRef::Relu(m) if m < target => Some(m),
        _ => return Err(range_error(from, to)),
    };
    let rows = net.affines[target].out_dim();
    let widths = net.relu_widths();
    for p in [lower, upper].into_iter().flatten() {
        p.check(&widths, rows)?;
    }
    let ctx = dom.context();
    let run = |side, params| {
        propagate(
            net,
            &ctx,
            target,
            Array2::eye(rows),
            Array1::zeros(rows),
            stop,
            side,
            params,
            false,
        )
    };
    let lo = run(Side::Lower, lower);
    let hi = run(Side::Upper, upper);
    Ok(LinearBounds {
        a_lower: lo.a,
        b_lower: lo.b,
        a_upper: hi.a,
        b_upper: hi.b,
    })
}

fn range_error(from: LayerRef, to: LayerRef) -> Error {
    Error::LayerRange {
        from: format!("{from:?}"),
        to: format!("{to:?}"),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weighted mean over samples of `sigmoid(-log sum_r exp(-(a_r x + b_r)))`
/// (lower side), or of `sigmoid(log sum_r exp(-(a_r x + b_r)))` (upper side).
///
/// The lower form rewards samples where every row is positive (inside the
/// under-approximation); the upper form rewards samples where some row is
/// negative (excluded from the over-approximation).
pub fn objective(
    a: ArrayView2<f64>,
    b: ArrayView1<f64>,
    points: ArrayView2<f64>,
    weights: ArrayView1<f64>,
    side: Side,
) -> Result<f64> {
    objective_and_grad(a, b, points, weights, side, false).map(|(v, _, _)| v)
}

pub(crate) fn objective_and_grad(
    a: ArrayView2<f64>,
    b: ArrayView1<f64>,
    points: ArrayView2<f64>,
    weights: ArrayView1<f64>,
    side: Side,
    want_grad: bool,
) -> Result<(f64, Array2<f64>, Array1<f64>)> {
    let total: f64 = weights.sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::ZeroWeight);
    }
    let values = points.dot(&a.t()) + &b;
    let k = a.nrows();
    let mut grad_v = Array2::zeros(if want_grad { values.dim() } else { (0, k) });
    let mut acc = 0.0;
    let mut soft = vec![0.0; k];
    for (j, row) in values.axis_iter(Axis(0)).enumerate() {
        let w = weights[j] / total;
        if w == 0.0 {
            continue;
        }
        // log-sum-exp of -v, shifted for stability
        let shift = row.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        let mut sum = 0.0;
        for (r, &v) in row.iter().enumerate() {
            soft[r] = (shift - v).exp();
            sum += soft[r];
        }
        let lse_neg = -shift + sum.ln();
        let (t, dir) = match side {
            Side::Lower => (-lse_neg, 1.0),
            Side::Upper => (lse_neg, -1.0),
        };
        let sig = sigmoid(t);
        acc += w * sig;
        if want_grad {
            let scale = w * sig * (1.0 - sig) * dir;
            for r in 0..k {
                grad_v[[j, r]] = scale * soft[r] / sum;
            }
        }
    }
    if !want_grad {
        return Ok((acc, Array2::zeros((0, 0)), Array1::zeros(0)));
    }
    let grad_a = grad_v.t().dot(&points);
    let grad_b = grad_v.sum_axis(Axis(0));
    Ok((acc, grad_a, grad_b))
}

/// Reverse pass of [`propagate`] for a full output-to-input sweep.
fn backprop_params(
    net: &CompiledNet,
    ctx: &BoundContext<'_>,
    prop: &Propagation,
    params: &RelaxParams,
    side: Side,
    grad_a: &Array2<f64>,
    grad_b: &Array1<f64>,
) -> RelaxParams {
    let n_relu = net.num_relu_layers();
    let mut g_alpha: Vec<Array2<f64>> = params.alpha.iter().map(|a| Array2::zeros(a.dim())).collect();
    let mut g_beta: Vec<Array2<f64>> = params.beta.iter().map(|a| Array2::zeros(a.dim())).collect();
    if n_relu == 0 {
        return RelaxParams {
            alpha: g_alpha,
            beta: g_beta,
        };
    }
    let outer = |g: &Array1<f64>, bias: &Array1<f64>| {
        let col = g.view().insert_axis(Axis(1));
        let row = bias.view().insert_axis(Axis(0));
        col.dot(&row)
    };
    let first = &net.affines[0];
    let mut nu_bar = grad_a.dot(&first.weight.t()) + outer(grad_b, &first.bias);
    for k in 0..n_relu {
        let mu = prop.mu[k].as_ref().expect("propagation was recorded");
        let bounds = &ctx.layers[k];
        let mut mu_bar = Array2::zeros(mu.dim());
        for i in 0..mu.ncols() {
            let state = ctx.state(k, i);
            let (l, u) = (bounds.lower[i], bounds.upper[i]);
            for r in 0..mu.nrows() {
                let g = nu_bar[[r, i]];
                let m = mu[[r, i]];
                mu_bar[[r, i]] = match state {
                    NeuronState::Inactive => 0.0,
                    NeuronState::Active => g,
                    NeuronState::Unstable => {
                        let slope = u / (u - l);
                        let use_chord = match side {
                            Side::Lower => m < 0.0,
                            Side::Upper => m >= 0.0,
                        };
                        if use_chord {
                            slope * g - grad_b[r] * slope * l
                        } else {
                            g_alpha[k][[r, i]] += m * g;
                            params.alpha[k][[r, i]] * g
                        }
                    }
                };
                if let Some(sign) = ctx.fixed[k][i] {
                    g_beta[k][[r, i]] += beta_sign(side, sign) * g;
                }
            }
        }
        if k + 1 == n_relu {
            break;
        }
        let next = &net.affines[k + 1];
        nu_bar = mu_bar.dot(&next.weight.t()) + outer(grad_b, &next.bias);
    }
    RelaxParams {
        alpha: g_alpha,
        beta: g_beta,
    }
}

/// Objective value and its gradient with respect to `params`.
pub fn objective_gradient(
    net: &CompiledNet,
    ctx: &BoundContext<'_>,
    params: &RelaxParams,
    points: ArrayView2<f64>,
    weights: ArrayView1<f64>,
    side: Side,
) -> Result<(f64, RelaxParams)> {
    let rows = net.output_dim();
    params.check(&net.relu_widths(), rows)?;
    let prop = propagate(
        net,
        ctx,
        net.num_relu_layers(),
        Array2::eye(rows),
        Array1::zeros(rows),
        None,
        side,
        Some(params),
        true,
    );
    let (value, ga, gb) = objective_and_grad(prop.a.view(), prop.b.view(), points, weights, side, true)?;
    Ok((value, backprop_params(net, ctx, &prop, params, side, &ga, &gb)))
}

/// Projected gradient ascent settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub iterations: usize,
    pub step: f64,
    pub decay: f64,
    pub use_beta: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            step: 0.1,
            decay: 0.98,
            use_beta: true,
        }
    }
}

/// Outcome of [`optimize_params`].
#[derive(Debug, Clone)]
pub struct Optimized {
    pub params: RelaxParams,
    /// Output bounds of the optimized side (`a`, `b`), in terms of the input.
    pub a: Array2<f64>,
    pub b: Array1<f64>,
    pub objective: f64,
    pub initial_objective: f64,
    /// Coefficients of every ReLU layer's pre-activations in the optimized
    /// output bound, one `(rows, width)` matrix per layer.
    pub layer_rows: Vec<Array2<f64>>,
}

/// Maximize the sample objective over `alpha` (and `beta` on split neurons)
/// by projected gradient ascent with Adam-scaled steps. The best iterate is
/// returned, so the objective never falls below its initial value.
pub fn optimize_params(
    net: &CompiledNet,
    dom: &Subdomain,
    points: ArrayView2<f64>,
    weights: ArrayView1<f64>,
    side: Side,
    config: &OptimizerConfig,
) -> Result<Optimized> {
    let ctx = dom.context();
    let rows = net.output_dim();
    let mut params = RelaxParams::initial(&ctx, rows);
    let evaluate = |p: &RelaxParams| -> Result<(f64, Propagation)> {
        let prop = propagate(
            net,
            &ctx,
            net.num_relu_layers(),
            Array2::eye(rows),
            Array1::zeros(rows),
            None,
            side,
            Some(p),
            true,
        );
        let v = objective(prop.a.view(), prop.b.view(), points, weights, side)?;
        Ok((v, prop))
    };

    let (initial, mut best_prop) = evaluate(&params)?;
    let mut best = (initial, params.clone());
    let has_unstable = (0..net.num_relu_layers()).any(|k| {
        (0..ctx.layers[k].len()).any(|i| ctx.state(k, i) == NeuronState::Unstable)
    });
    let has_splits = config.use_beta && dom.fixed.iter().flatten().any(Option::is_some);

    if has_unstable || has_splits {
        let n = params.num_values();
        let mut m1 = vec![0.0; n];
        let mut m2 = vec![0.0; n];
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut lr = config.step;
        for t in 1..=config.iterations {
            let (_, mut grad) = objective_gradient(net, &ctx, &params, points, weights, side)?;
            if !config.use_beta {
                grad.beta.iter_mut().for_each(|g| g.fill(0.0));
            }
            let correction1 = 1.0 - b1_pow(b1, t);
            let correction2 = 1.0 - b1_pow(b2, t);
            let values = params.alpha.iter_mut().chain(params.beta.iter_mut());
            let grads = grad.alpha.iter().chain(grad.beta.iter());
            let mut idx = 0;
            for (p, g) in values.zip(grads) {
                Zip::from(p).and(g).for_each(|p, &g| {
                    m1[idx] = b1 * m1[idx] + (1.0 - b1) * g;
                    m2[idx] = b2 * m2[idx] + (1.0 - b2) * g * g;
                    let step = lr * (m1[idx] / correction1) / ((m2[idx] / correction2).sqrt() + eps);
                    *p += step;
                    idx += 1;
                });
            }
            params.project();
            lr *= config.decay;
            let (v, prop) = evaluate(&params)?;
            if v > best.0 {
                best = (v, params.clone());
                best_prop = prop;
            }
        }
    }

    let layer_rows = best_prop
        .nu
        .into_iter()
        .map(|n| n.expect("propagation was recorded"))
        .collect();
    Ok(Optimized {
        params: best.1,
        a: best_prop.a,
        b: best_prop.b,
        objective: best.0,
        initial_objective: initial,
        layer_rows,
    })
}

fn b1_pow(base: f64, t: usize) -> f64 {
    base.powi(t as i32)
}

/// Per-layer coefficients of the output bound on `side` with CROWN default
/// slopes, in the layout of [`Optimized::layer_rows`].
pub fn output_layer_rows(net: &CompiledNet, dom: &Subdomain, side: Side) -> Vec<Array2<f64>> {
    let rows = net.output_dim();
    let ctx = dom.context();
    let params = RelaxParams::initial(&ctx, rows);
    let prop = propagate(
        net,
        &ctx,
        net.num_relu_layers(),
        Array2::eye(rows),
        Array1::zeros(rows),
        None,
        side,
        Some(&params),
        true,
    );
    prop.nu.into_iter().map(|n| n.expect("propagation was recorded")).collect()
}
