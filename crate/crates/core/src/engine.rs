//! The branch-and-refine loop.
//!
//! Leaves of the refinement tree partition the input box. Each round pops the
//! leaves whose approximation is furthest from their preimage estimate, tops
//! up their samples, splits the best-scoring unstable ReLU and re-optimizes a
//! half-space approximation on each child. The union of leaf planes is a
//! valid answer at every point of the run.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::domain::{split_neuron, Branch, HalfSpaceRegion, InputBox, Sign, Subdomain, TightenConfig};
use crate::error::{Error, Result};
use crate::heuristics::{select_neuron, HeuristicConfig, Selection};
use crate::model::{CompiledNet, Network, OutputSpec};
use crate::relax::{self, OptimizerConfig, Side};
use crate::sampler::{self, effective_sample_size, SampleSet, SamplerConfig, WeightFunction};
use crate::stats::{self, BootstrapConfig, Interval, LeafEstimate, VolumeEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Under,
    Over,
}

impl Mode {
    pub fn side(self) -> Side {
        match self {
            Mode::Under => Side::Lower,
            Mode::Over => Side::Upper,
        }
    }

    pub fn default_threshold(self) -> f64 {
        match self {
            Mode::Under => 0.9,
            Mode::Over => 1.1,
        }
    }

    /// Whether `ratio` is good enough to stop.
    pub fn reached(self, ratio: f64, threshold: f64) -> bool {
        match self {
            Mode::Under => ratio >= threshold,
            Mode::Over => ratio <= threshold,
        }
    }

    /// Whether a plane covering `a` of the samples is preferable to one
    /// covering `b`.
    fn better(self, a: f64, b: f64) -> bool {
        match self {
            Mode::Under => a > b,
            Mode::Over => a < b,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "under" => Ok(Mode::Under),
            "over" => Ok(Mode::Over),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub threshold: f64,
    pub samples: usize,
    /// The root is sampled with `root_oversample * samples` points.
    pub root_oversample: usize,
    pub time_limit: Option<f64>,
    pub max_iterations: Option<usize>,
    pub batch: usize,
    pub heuristics: HeuristicConfig,
    pub bootstrap: BootstrapConfig,
    pub weight_fn: WeightFunction,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub tighten: TightenConfig,
    pub sampler: SamplerConfig,
    pub shortcuts: bool,
    /// One-sided neurons stabilized per visit before optimizing.
    pub stabilize_depth: usize,
}

impl RunConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            threshold: mode.default_threshold(),
            samples: 2000,
            root_oversample: 5,
            time_limit: None,
            max_iterations: None,
            batch: 2,
            heuristics: HeuristicConfig::default(),
            bootstrap: BootstrapConfig::default(),
            weight_fn: WeightFunction::Uniform,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            tighten: TightenConfig::default(),
            sampler: SamplerConfig::default(),
            shortcuts: true,
            stabilize_depth: 10,
        }
    }

    /// A threshold of exactly 1 is accepted and means "refine until every
    /// leaf is resolved".
    pub fn validate(&self) -> Result<()> {
        let ok = match self.mode {
            Mode::Under => self.threshold > 0.0 && self.threshold <= 1.0,
            Mode::Over => self.threshold >= 1.0 && self.threshold.is_finite(),
        };
        if !ok {
            return Err(Error::Config(format!(
                "threshold {} is not valid for {:?} mode",
                self.threshold, self.mode
            )));
        }
        if self.samples == 0 || self.batch == 0 || self.root_oversample == 0 {
            return Err(Error::Config("samples, batch and oversampling must be positive".into()));
        }
        if let Some(t) = self.time_limit {
            if !(t >= 0.0) {
                return Err(Error::Config(format!("time limit {t} must be nonnegative")));
            }
        }
        self.bootstrap.validate()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::new(Mode::Under)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Threshold,
    TimeLimit,
    IterationLimit,
    /// No leaf left whose approximation differs from its preimage estimate.
    Exhausted,
}

impl StopReason {
    /// Budget stops still leave a valid, but unfinished, result.
    pub fn is_budget(self) -> bool {
        matches!(self, StopReason::TimeLimit | StopReason::IterationLimit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafStatus {
    Open,
    /// No unstable neuron left; the plane is the exact affine restriction.
    Exact,
    /// Under mode, no sample reached the preimage.
    Discarded,
    /// Over mode, every sample reached the preimage.
    Finalized,
    /// Bound propagation proved the branch empty.
    Infeasible,
    /// The branch received no samples; its estimated volume is zero.
    Empty,
}

impl LeafStatus {
    pub fn is_terminal(self) -> bool {
        self != LeafStatus::Open
    }
}

/// Path of a leaf: `(layer, neuron, positive)` per split.
pub type Path = Vec<(usize, usize, bool)>;

#[derive(Debug, Clone)]
pub struct Leaf {
    /// Creation order, used to break priority ties.
    pub seq: u64,
    pub dom: Subdomain,
    pub plane: HalfSpaceRegion,
    pub status: LeafStatus,
    pub samples: SampleSet,
    /// Samples inside the plane.
    pub in_plane: Vec<bool>,
    pub estimate: LeafEstimate,
    /// Bootstrap replicates of the product of split fractions.
    pub chain_reps: Array1<f64>,
    /// Per-layer coefficients of the last optimized output bound.
    pub layer_rows: Vec<Array2<f64>>,
}

impl Leaf {
    pub fn path(&self) -> Path {
        path_of(&self.dom)
    }

    pub fn priority(&self) -> f64 {
        self.estimate.priority()
    }

    pub fn is_candidate(&self) -> bool {
        self.status == LeafStatus::Open && self.priority() > 0.0
    }
}

fn path_of(dom: &Subdomain) -> Path {
    dom.splits
        .iter()
        .map(|s| (s.layer, s.neuron, s.sign == Sign::Pos))
        .collect()
}

/// One line of the progress trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub elapsed_s: f64,
    pub v_p: f64,
    pub v_o: f64,
    pub ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub leaves: usize,
    /// Approximation volume tracked through paired per-split increments on
    /// shared samples. Non-decreasing in under mode, non-increasing in over
    /// mode.
    pub coverage: f64,
}

/// Final state of a run.
#[derive(Debug, Clone)]
pub struct RefinementTree {
    pub config: RunConfig,
    pub net: CompiledNet,
    pub input_box: InputBox,
    /// Free volume of the input box.
    pub base_volume: f64,
    /// Leaves in branch-path order.
    pub leaves: Vec<Leaf>,
    pub iterations: usize,
    pub stop_reason: StopReason,
    pub estimate: VolumeEstimate,
    pub first_ratio: f64,
    pub elapsed_s: f64,
    pub optimizer_calls: usize,
    /// Effective sample size of the root samples over their count.
    pub root_ess_ratio: f64,
    pub coverage: f64,
    pub trace: Vec<TraceRecord>,
}

impl RefinementTree {
    pub fn estimate(&self) -> VolumeEstimate {
        estimate_leaves(&self.leaves, self.config.bootstrap.level)
    }

    /// Improvement in ratio per second over the run.
    pub fn delta(&self) -> Result<f64> {
        stats::delta_metric(self.first_ratio, self.estimate.ratio, self.elapsed_s)
    }

    /// Membership in the union of leaf approximations. A point belongs to the
    /// leaf whose split signs it satisfies.
    pub fn contains(&self, x: ndarray::ArrayView1<f64>) -> bool {
        if !self.input_box.contains(x) {
            return false;
        }
        let (pre, _) = self.net.forward_batch(x.insert_axis(ndarray::Axis(0)));
        self.leaves.iter().any(|leaf| {
            leaf.dom
                .splits
                .iter()
                .all(|s| s.sign.holds(pre[s.layer][[0, s.neuron]]))
                && leaf.plane.satisfied(x)
        })
    }
}

impl RefinementTree {
    /// [`RefinementTree::contains`] for every row of `points`.
    pub fn contains_batch(&self, points: ndarray::ArrayView2<f64>) -> Vec<bool> {
        let (pre, _) = self.net.forward_batch(points);
        let planes: Vec<Vec<bool>> = self
            .leaves
            .iter()
            .map(|l| l.plane.satisfied_batch(&points.to_owned()))
            .collect();
        (0..points.nrows())
            .map(|j| {
                self.input_box.contains(points.row(j))
                    && self.leaves.iter().zip(&planes).any(|(leaf, inside)| {
                        inside[j]
                            && leaf
                                .dom
                                .splits
                                .iter()
                                .all(|s| s.sign.holds(pre[s.layer][[j, s.neuron]]))
                    })
            })
            .collect()
    }
}

fn estimate_leaves(leaves: &[Leaf], level: f64) -> VolumeEstimate {
    let est: Vec<LeafEstimate> = leaves.iter().map(|l| l.estimate.clone()).collect();
    stats::aggregate(&est, level)
}

const PURPOSE_REPLENISH: u64 = 1;
const PURPOSE_SPLIT: u64 = 2;
const PURPOSE_LEAF: u64 = 3;
const PURPOSE_ROOT: u64 = 4;

/// Shared state for refining leaves.
struct Ctx<'a> {
    net: &'a CompiledNet,
    config: &'a RunConfig,
    base_volume: f64,
}

/// Result of refining one popped leaf.
struct Outcome {
    leaves: Vec<Leaf>,
    coverage_gain: f64,
    optimizer_calls: usize,
}

/// Run the refinement loop. `on_trace` receives one record per round,
/// starting with the root.
pub fn premap2(
    network: &Network,
    input: InputBox,
    spec: &OutputSpec,
    config: &RunConfig,
    mut on_trace: impl FnMut(&TraceRecord),
) -> Result<RefinementTree> {
    config.validate()?;
    let start = Instant::now();
    let net = network.append_output_spec(spec)?.compile();
    input.validate()?;
    if input.dim() != net.input_dim() {
        return Err(Error::Dimension {
            expected: net.input_dim(),
            actual: input.dim(),
        });
    }
    config.weight_fn.validate(input.dim())?;
    let root_dom = Subdomain::root(&net, input.clone())?;
    let base_volume = input.free_volume();
    let ctx = Ctx {
        net: &net,
        config,
        base_volume,
    };

    let n_root = config.samples * config.root_oversample;
    let mut rng = sampler::rng_from_seed(sampler::stream_seed(config.seed, &[], PURPOSE_ROOT));
    let points = sampler::sample_uniform(&root_dom.input_box, n_root, &mut rng);
    let weights = config.weight_fn.weights(&points);
    let root_samples = SampleSet::evaluate(&net, points, weights);
    let ess = effective_sample_size(root_samples.weights.view())?;
    let root_ess_ratio = ess / n_root as f64;
    if ess < 0.01 * n_root as f64 {
        warn!(ess, n = n_root, "effective sample size is below 1% of the sample count");
    }

    let reps = config.bootstrap.replicates;
    let parent_plane = match config.mode {
        Mode::Under => HalfSpaceRegion::empty(net.input_dim(), Side::Lower),
        Mode::Over => HalfSpaceRegion::full(net.input_dim(), Side::Upper),
    };
    let root_outcome = ctx.finish_child(root_dom, root_samples, Array1::ones(reps), &parent_plane, true);
    let mut optimizer_calls = root_outcome.1;
    let mut seq = 0u64;
    let mut leaves = vec![root_outcome.0];
    leaves[0].seq = seq;
    seq += 1;

    let level = config.bootstrap.level;
    let mut estimate = estimate_leaves(&leaves, level);
    let first_ratio = estimate.ratio;
    let mut coverage = estimate.v_p;
    let mut trace = Vec::new();
    let mut iterations = 0;
    let record = |iteration: usize, estimate: &VolumeEstimate, leaves: usize, coverage: f64| {
        let ci = estimate.ci_ratio.unwrap_or(Interval {
            low: estimate.ratio,
            high: estimate.ratio,
        });
        TraceRecord {
            iteration,
            elapsed_s: start.elapsed().as_secs_f64(),
            v_p: estimate.v_p,
            v_o: estimate.v_o,
            ratio: estimate.ratio,
            ci_low: ci.low,
            ci_high: ci.high,
            leaves,
            coverage,
        }
    };
    let rec = record(0, &estimate, leaves.len(), coverage);
    on_trace(&rec);
    trace.push(rec);

    let stop_reason = loop {
        if config.mode.reached(estimate.ratio, config.threshold) {
            break StopReason::Threshold;
        }
        if config.max_iterations.is_some_and(|m| iterations >= m) {
            break StopReason::IterationLimit;
        }
        if config
            .time_limit
            .is_some_and(|t| start.elapsed().as_secs_f64() >= t)
        {
            break StopReason::TimeLimit;
        }
        let mut candidates: Vec<usize> = (0..leaves.len()).filter(|&j| leaves[j].is_candidate()).collect();
        if candidates.is_empty() {
            break StopReason::Exhausted;
        }
        candidates.sort_by(|&a, &b| {
            leaves[b]
                .priority()
                .total_cmp(&leaves[a].priority())
                .then(leaves[a].seq.cmp(&leaves[b].seq))
        });
        candidates.truncate(config.batch);
        // Process in creation order so merges do not depend on the ranking.
        candidates.sort_by_key(|&j| leaves[j].seq);
        let popped: Vec<Leaf> = candidates.iter().map(|&j| leaves[j].clone()).collect();
        let outcomes: Vec<Result<Outcome>> = popped.into_par_iter().map(|leaf| ctx.refine(leaf)).collect();

        let mut replacement: Vec<Option<Vec<Leaf>>> = vec![None; leaves.len()];
        for (&j, outcome) in candidates.iter().zip(outcomes) {
            let mut outcome = outcome?;
            coverage += outcome.coverage_gain;
            optimizer_calls += outcome.optimizer_calls;
            for leaf in &mut outcome.leaves {
                leaf.seq = seq;
                seq += 1;
            }
            replacement[j] = Some(outcome.leaves);
        }
        let old = std::mem::take(&mut leaves);
        for (leaf, rep) in old.into_iter().zip(replacement) {
            match rep {
                Some(children) => leaves.extend(children),
                None => leaves.push(leaf),
            }
        }
        iterations += 1;
        estimate = estimate_leaves(&leaves, level);
        let rec = record(iterations, &estimate, leaves.len(), coverage);
        debug!(iteration = iterations, ratio = rec.ratio, leaves = rec.leaves, "refined");
        on_trace(&rec);
        trace.push(rec);
    };

    Ok(RefinementTree {
        config: config.clone(),
        net,
        input_box: input,
        base_volume,
        leaves,
        iterations,
        stop_reason,
        estimate,
        first_ratio,
        elapsed_s: start.elapsed().as_secs_f64(),
        optimizer_calls,
        root_ess_ratio,
        coverage,
        trace,
    })
}

/// Weighted share of flagged samples, zero for an empty or weightless set.
fn fraction(samples: &SampleSet, mask: &[bool]) -> f64 {
    stats::weighted_fraction(samples.weights.view(), mask).unwrap_or(0.0)
}

impl Ctx<'_> {
    fn rng(&self, path: &Path, purpose: u64) -> rand_chacha::ChaCha8Rng {
        sampler::rng_from_seed(sampler::stream_seed(self.config.seed, path, purpose))
    }

    /// Plane from optimized output bounds, moved inward (under) or outward
    /// (over) by a rounding margin.
    fn approximate(&self, dom: &Subdomain, samples: &SampleSet) -> Result<(HalfSpaceRegion, Vec<Array2<f64>>)> {
        let side = self.config.mode.side();
        let (points, weights) = match self.config.mode {
            Mode::Under => (samples.points.clone(), samples.weights.clone()),
            Mode::Over => {
                let outside: Vec<usize> = (0..samples.len()).filter(|&j| !samples.in_preimage[j]).collect();
                let sel = samples.select(&outside);
                (sel.points, sel.weights)
            }
        };
        let usable = weights.sum() > 0.0;
        let (a, mut b, rows) = if usable {
            let opt = relax::optimize_params(self.net, dom, points.view(), weights.view(), side, &self.config.optimizer)?;
            (opt.a, opt.b, opt.layer_rows)
        } else {
            let lb = relax::backward_bounds(self.net, dom, None, None, relax::LayerRef::Output, relax::LayerRef::Input)?;
            let (a, b) = lb.side(side);
            (a.clone(), b.clone(), Vec::new())
        };
        for r in 0..a.nrows() {
            let scale: f64 = a
                .row(r)
                .iter()
                .enumerate()
                .map(|(j, c)| c.abs() * dom.input_box.lower[j].abs().max(dom.input_box.upper[j].abs()))
                .sum::<f64>()
                + b[r].abs()
                + 1.0;
            let margin = 1e-10 * scale;
            match self.config.mode {
                Mode::Under => b[r] -= margin,
                Mode::Over => b[r] += margin,
            }
        }
        Ok((HalfSpaceRegion::new(a, b, side)?, rows))
    }

    /// Build a leaf for a fresh subdomain with its samples. Applies the
    /// sample shortcuts, otherwise optimizes a plane, and keeps the parent's
    /// plane when it covers the samples better. Returns the leaf, the number
    /// of optimizer runs and the coverage gain over the parent plane.
    fn finish_child(
        &self,
        dom: Subdomain,
        samples: SampleSet,
        chain_reps: Array1<f64>,
        parent_plane: &HalfSpaceRegion,
        optimize_always: bool,
    ) -> (Leaf, usize, f64) {
        let mode = self.config.mode;
        let dim = self.net.input_dim();
        let parent_flags = parent_plane.satisfied_batch(&samples.points);
        let parent_frac = fraction(&samples, &parent_flags);
        let mut calls = 0;
        let (candidate, status, rows) = if samples.is_empty() {
            let plane = match mode {
                Mode::Under => HalfSpaceRegion::empty(dim, Side::Lower),
                Mode::Over => HalfSpaceRegion::full(dim, Side::Upper),
            };
            (plane, LeafStatus::Empty, Vec::new())
        } else if self.config.shortcuts && !optimize_always && mode == Mode::Under && samples.preimage_count() == 0 {
            (HalfSpaceRegion::empty(dim, Side::Lower), LeafStatus::Discarded, Vec::new())
        } else if self.config.shortcuts
            && !optimize_always
            && mode == Mode::Over
            && samples.preimage_count() == samples.len()
        {
            (HalfSpaceRegion::full(dim, Side::Upper), LeafStatus::Finalized, Vec::new())
        } else {
            calls += 1;
            match self.approximate(&dom, &samples) {
                Ok((plane, rows)) => {
                    let status = if dom.unstable_neurons().is_empty() {
                        LeafStatus::Exact
                    } else {
                        LeafStatus::Open
                    };
                    (plane, status, rows)
                }
                Err(e) => {
                    warn!(error = %e, "bound optimization failed, keeping the parent plane");
                    (parent_plane.clone(), LeafStatus::Open, Vec::new())
                }
            }
        };
        let flags = candidate.satisfied_batch(&samples.points);
        let frac = fraction(&samples, &flags);
        let (plane, in_plane, frac_p) = if mode.better(parent_frac, frac) {
            (parent_plane.clone(), parent_flags, parent_frac)
        } else {
            (candidate, flags, frac)
        };
        let volume = self.base_volume * dom.chain_factor();
        let gain = volume * (frac_p - parent_frac);
        let path = path_of(&dom);
        let mut rng = self.rng(&path, PURPOSE_LEAF);
        let reps = chain_reps.len();
        let fr = stats::bootstrap_fractions(samples.weights.view(), &[&in_plane, &samples.in_preimage], reps, &mut rng);
        let estimate = LeafEstimate {
            volume,
            frac_p,
            frac_o: fraction(&samples, &samples.in_preimage),
            volume_reps: chain_reps.mapv(|c| c * self.base_volume),
            frac_p_reps: fr[0].clone(),
            frac_o_reps: fr[1].clone(),
        };
        let mut leaf = Leaf {
            seq: 0,
            dom,
            plane,
            status,
            samples,
            in_plane,
            estimate,
            chain_reps,
            layer_rows: rows,
        };
        if leaf.status.is_terminal() {
            leaf.samples.strip_activations();
            leaf.layer_rows.clear();
        }
        (leaf, calls, gain)
    }

    /// A terminal leaf for a branch proved empty by bound propagation. Any
    /// samples it holds can only be rounding artifacts at the split
    /// boundary; the parent plane is kept for them so coverage never drops.
    fn infeasible_leaf(
        &self,
        dom: Subdomain,
        samples: SampleSet,
        chain_reps: Array1<f64>,
        parent_plane: &HalfSpaceRegion,
    ) -> (Leaf, f64) {
        if !samples.is_empty() {
            let (mut leaf, _, g) = self.finish_child(dom, samples, chain_reps, parent_plane, true);
            leaf.status = LeafStatus::Infeasible;
            return (leaf, g);
        }
        let dim = self.net.input_dim();
        let side = self.config.mode.side();
        let in_plane = vec![false; samples.len()];
        let volume = self.base_volume * dom.chain_factor();
        let reps = chain_reps.len();
        let estimate = LeafEstimate {
            volume,
            frac_p: 0.0,
            frac_o: fraction(&samples, &samples.in_preimage),
            volume_reps: chain_reps.mapv(|c| c * self.base_volume),
            frac_p_reps: Array1::zeros(reps),
            frac_o_reps: Array1::from_elem(reps, fraction(&samples, &samples.in_preimage)),
        };
        let mut samples = samples;
        samples.strip_activations();
        let leaf = Leaf {
            seq: 0,
            dom,
            plane: HalfSpaceRegion::empty(dim, side),
            status: LeafStatus::Infeasible,
            samples,
            in_plane,
            estimate,
            chain_reps,
            layer_rows: Vec::new(),
        };
        (leaf, 0.0)
    }

    /// Shares of a split from the parent's samples, one shared resample per
    /// replicate.
    fn split_reps(&self, path: &Path, samples: &SampleSet, layer: usize, neuron: usize) -> (Array1<f64>, Array1<f64>) {
        let neg: Vec<bool> = (0..samples.len())
            .map(|j| samples.pre[layer][[j, neuron]] < 0.0)
            .collect();
        let mut rng = self.rng(path, PURPOSE_SPLIT);
        stats::split_fractions(samples.weights.view(), &neg, self.config.bootstrap.replicates, &mut rng)
    }

    fn refine(&self, leaf: Leaf) -> Result<Outcome> {
        let config = self.config;
        let mode = config.mode;
        let path = leaf.path();
        let mut rng = self.rng(&path, PURPOSE_REPLENISH);
        let (samples, info) = sampler::replenish(
            self.net,
            &leaf.dom,
            leaf.samples,
            config.samples,
            &config.weight_fn,
            &config.sampler,
            &mut rng,
        );
        if info.used_hit_and_run {
            debug!(depth = path.len(), "hit-and-run fallback");
        }
        let parent_plane = leaf.plane;
        let mut out = Vec::new();
        let mut calls = 0;
        let mut gain = 0.0;
        let mut push = |(leaf, g): (Leaf, f64), out: &mut Vec<Leaf>| {
            gain += g;
            out.push(leaf);
        };

        // Sample shortcuts on the popped leaf.
        if config.shortcuts && self.settled(&samples) {
            let (l, c, g) = self.finish_child(leaf.dom, samples, leaf.chain_reps, &parent_plane, false);
            calls += c;
            push((l, g), &mut out);
            return Ok(self.outcome(out, gain, calls));
        }

        let mut dom = leaf.dom;
        let mut samples = samples;
        let mut chain_reps = leaf.chain_reps;
        let mut rows = leaf.layer_rows;
        let tighten = &config.tighten;
        let mut extra_splits = 0;
        loop {
            // Stabilize neurons whose samples all fall on one side.
            for _ in 0..if config.shortcuts { config.stabilize_depth } else { 0 } {
                let one_sided = dom.unstable_neurons().into_iter().find(|&(l, i)| {
                    let z = samples.pre[l].column(i);
                    !z.is_empty() && (z.iter().all(|&v| v < 0.0) || z.iter().all(|&v| v >= 0.0))
                });
                let Some((l, i)) = one_sided else { break };
                let (neg, xn, pos, xp) = split_neuron(self.net, &dom, &samples, l, i, tighten)?;
                let (keep, kept_samples, empty, empty_samples) = if xn.is_empty() {
                    (pos, xp, neg, xn)
                } else {
                    (neg, xn, pos, xp)
                };
                let empty_dom = match empty {
                    Branch::Feasible(d) | Branch::Infeasible(d) => d,
                };
                let zero_reps = Array1::zeros(chain_reps.len());
                let (l0, _, g) = self.finish_child(empty_dom, empty_samples, zero_reps, &parent_plane, false);
                push((l0, g), &mut out);
                match keep {
                    Branch::Feasible(d) => {
                        dom = d;
                        samples = kept_samples;
                    }
                    Branch::Infeasible(d) => {
                        push(self.infeasible_leaf(d, kept_samples, chain_reps, &parent_plane), &mut out);
                        out.sort_by_key(|l| l.path());
                        return Ok(self.outcome(out, gain, calls));
                    }
                }
                // The stabilized neuron changes the output bound; rows go stale.
                rows.clear();
            }
            if rows.is_empty() && !dom.unstable_neurons().is_empty() {
                rows = relax::output_layer_rows(self.net, &dom, mode.side());
            }

            match select_neuron(&dom, &samples, &rows, &config.heuristics) {
                Selection::Exact => {
                    let (l, c, g) = self.finish_child(dom, samples, chain_reps, &parent_plane, true);
                    calls += c;
                    push((l, g), &mut out);
                }
                Selection::Split { layer, neuron } => {
                    let (f_neg, f_pos) = self.split_reps(&path_of(&dom), &samples, layer, neuron);
                    let (neg, xn, pos, xp) = split_neuron(self.net, &dom, &samples, layer, neuron, tighten)?;
                    let children = [(neg, xn, &chain_reps * &f_neg), (pos, xp, &chain_reps * &f_pos)];
                    // When one side is settled by its samples, split the
                    // other side again before optimizing it.
                    let settled = |b: &Branch, xs: &SampleSet| {
                        matches!(b, Branch::Feasible(_)) && !xs.is_empty() && self.settled(xs)
                    };
                    let open = |b: &Branch, xs: &SampleSet| match b {
                        Branch::Feasible(d) => !xs.is_empty() && !self.settled(xs) && !d.unstable_neurons().is_empty(),
                        Branch::Infeasible(_) => false,
                    };
                    let resplit = if config.shortcuts && extra_splits < config.stabilize_depth {
                        match (&children[0], &children[1]) {
                            ((b0, x0, _), (b1, x1, _)) if settled(b0, x0) && open(b1, x1) => Some(1),
                            ((b0, x0, _), (b1, x1, _)) if settled(b1, x1) && open(b0, x0) => Some(0),
                            _ => None,
                        }
                    } else {
                        None
                    };
                    if let Some(k) = resplit {
                        let [c0, c1] = children;
                        let (done, (next, next_samples, next_reps)) = if k == 0 { (c1, c0) } else { (c0, c1) };
                        let (done_dom, done_samples, done_reps) = done;
                        let Branch::Feasible(d) = done_dom else { unreachable!("settled branches are feasible") };
                        let (l, c, g) = self.finish_child(d, done_samples, done_reps, &parent_plane, false);
                        calls += c;
                        push((l, g), &mut out);
                        let Branch::Feasible(d) = next else { unreachable!("open branches are feasible") };
                        dom = d;
                        samples = next_samples;
                        chain_reps = next_reps;
                        rows.clear();
                        extra_splits += 1;
                        continue;
                    }
                    for (branch, xs, reps) in children {
                        match branch {
                            Branch::Feasible(d) => {
                                let (l, c, g) = self.finish_child(d, xs, reps, &parent_plane, false);
                                calls += c;
                                push((l, g), &mut out);
                            }
                            Branch::Infeasible(d) => push(self.infeasible_leaf(d, xs, reps, &parent_plane), &mut out),
                        }
                    }
                }
            }
            break;
        }
        out.sort_by_key(|l| l.path());
        Ok(self.outcome(out, gain, calls))
    }

    /// The samples alone settle a branch: no preimage sample (under) or only
    /// preimage samples (over).
    fn settled(&self, samples: &SampleSet) -> bool {
        match self.config.mode {
            Mode::Under => samples.preimage_count() == 0,
            Mode::Over => samples.preimage_count() == samples.len(),
        }
    }

    fn outcome(&self, leaves: Vec<Leaf>, coverage_gain: f64, calls: usize) -> Outcome {
        Outcome {
            leaves,
            coverage_gain,
            optimizer_calls: calls,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Layer, Shape};
    use ndarray::array;

    fn linear_net() -> Network {
        Network::new(
            Shape::Flat(2),
            vec![Layer::Dense {
                weight: array![[1.0, -1.0]],
                bias: array![0.25],
            }],
        )
        .unwrap()
    }

    #[test]
    fn linear_net_is_exact_at_the_root() {
        let spec = OutputSpec::new(array![[1.0]], array![0.0]).unwrap();
        let input = InputBox::new(array![-1.0, -1.0], array![1.0, 1.0]).unwrap();
        let mut config = RunConfig::new(Mode::Under);
        config.samples = 500;
        config.bootstrap.replicates = 200;
        let tree = premap2(&linear_net(), input, &spec, &config, |_| {}).unwrap();
        assert!(tree.iterations <= 1);
        assert_eq!(tree.stop_reason, StopReason::Threshold);
        assert!((tree.estimate.ratio - 1.0).abs() < 1e-12);
        assert_eq!(tree.leaves[0].status, LeafStatus::Exact);
    }

    #[test]
    fn invalid_thresholds() {
        let mut c = RunConfig::new(Mode::Under);
        c.threshold = 1.2;
        assert!(c.validate().is_err());
        let mut c = RunConfig::new(Mode::Over);
        c.threshold = 0.9;
        assert!(c.validate().is_err());
        assert!(RunConfig::new(Mode::Over).validate().is_ok());
    }

    #[test]
    fn spec_mismatch_is_an_error() {
        let spec = OutputSpec::new(array![[1.0, 1.0]], array![0.0]).unwrap();
        let input = InputBox::new(array![-1.0, -1.0], array![1.0, 1.0]).unwrap();
        assert!(premap2(&linear_net(), input, &spec, &RunConfig::default(), |_| {}).is_err());
    }
}
