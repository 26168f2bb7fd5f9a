//! The result file: configuration echo, one record per leaf and totals.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use preimage_core::engine::LeafStatus;
use preimage_core::stats::Interval;
use preimage_core::{CompiledNet, Mode, RefinementTree, RunConfig, Split, StopReason};
use serde::{Deserialize, Serialize};

/// Everything needed to replay a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub model: String,
    pub domain: String,
    pub spec: SpecEcho,
    pub run: RunConfig,
}

/// Specification rows `C y + d >= 0`, with the label when built from one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecEcho {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneRecord {
    /// Rows of `a x + b >= 0`.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl PlaneRecord {
    pub fn satisfied(&self, x: ArrayView1<f64>) -> bool {
        self.a
            .iter()
            .zip(&self.b)
            .all(|(row, b)| row.iter().zip(x.iter()).map(|(a, v)| a * v).sum::<f64>() + b >= 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafRecord {
    pub splits: Vec<Split>,
    pub status: LeafStatus,
    pub plane: PlaneRecord,
    /// Sample share of each split along the path.
    pub volume_chain: Vec<f64>,
    pub volume: f64,
    pub samples: usize,
    pub preimage_samples: usize,
    pub frac_p: f64,
    pub frac_o: f64,
    pub v_p: f64,
    pub v_o: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub v_p: f64,
    pub v_o: f64,
    pub ratio: f64,
    pub ci_p: Option<Interval>,
    pub ci_o: Option<Interval>,
    pub ci_ratio: Option<Interval>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub load_s: f64,
    pub run_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub config: ConfigEcho,
    pub mode: Mode,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    pub base_volume: f64,
    pub leaves: Vec<LeafRecord>,
    pub totals: Totals,
    pub first_ratio: f64,
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub optimizer_calls: usize,
    pub root_ess_ratio: f64,
    pub coverage: f64,
    pub timings: Timings,
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.axis_iter(Axis(0)).map(|r| r.to_vec()).collect()
}

impl ResultDocument {
    pub fn from_tree(tree: &RefinementTree, config: ConfigEcho, timings: Timings) -> Self {
        let leaves = tree
            .leaves
            .iter()
            .map(|l| LeafRecord {
                splits: l.dom.splits.clone(),
                status: l.status,
                plane: PlaneRecord {
                    a: rows(&l.plane.a),
                    b: l.plane.b.to_vec(),
                },
                volume_chain: l.dom.volume_chain.clone(),
                volume: l.estimate.volume,
                samples: l.samples.len(),
                preimage_samples: l.samples.preimage_count(),
                frac_p: l.estimate.frac_p,
                frac_o: l.estimate.frac_o,
                v_p: l.estimate.v_p(),
                v_o: l.estimate.v_o(),
            })
            .collect();
        let e = &tree.estimate;
        Self {
            config,
            mode: tree.config.mode,
            input_lower: tree.input_box.lower.to_vec(),
            input_upper: tree.input_box.upper.to_vec(),
            base_volume: tree.base_volume,
            leaves,
            totals: Totals {
                v_p: e.v_p,
                v_o: e.v_o,
                ratio: e.ratio,
                ci_p: e.ci_p,
                ci_o: e.ci_o,
                ci_ratio: e.ci_ratio,
            },
            first_ratio: tree.first_ratio,
            stop_reason: tree.stop_reason,
            iterations: tree.iterations,
            optimizer_calls: tree.optimizer_calls,
            root_ess_ratio: tree.root_ess_ratio,
            coverage: tree.coverage,
            timings,
        }
    }

    /// `(v_p, v_o, ratio)` summed from the leaf records.
    pub fn recompute_totals(&self) -> (f64, f64, f64) {
        let v_p = self.leaves.iter().map(|l| l.volume * l.frac_p).sum::<f64>() + 0.0;
        let v_o = self.leaves.iter().map(|l| l.volume * l.frac_o).sum::<f64>() + 0.0;
        (v_p, v_o, preimage_core::stats::ratio(v_p, v_o))
    }

    /// The same document with timings cleared, for comparing runs.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: Timings::default(),
            ..self.clone()
        }
    }

    /// Membership in the approximation using only the document and the
    /// network: the point is in the input box, and some leaf's split signs
    /// and plane rows hold at it.
    pub fn contains(&self, net: &CompiledNet, x: ArrayView1<f64>) -> bool {
        let in_box = x.len() == self.input_lower.len()
            && x
                .iter()
                .zip(self.input_lower.iter().zip(&self.input_upper))
                .all(|(v, (l, u))| l <= v && v <= u);
        if !in_box {
            return false;
        }
        let (pre, _) = net.forward_batch(x.insert_axis(Axis(0)));
        self.leaves.iter().any(|leaf| {
            leaf.splits
                .iter()
                .all(|s| s.sign.holds(pre[s.layer][[0, s.neuron]]))
                && leaf.plane.satisfied(x)
        })
    }

    /// [`ResultDocument::contains`] for every row of `points`.
    pub fn contains_batch(&self, net: &CompiledNet, points: ArrayView2<f64>) -> Vec<bool> {
        let (pre, _) = net.forward_batch(points);
        (0..points.nrows())
            .map(|j| {
                let x = points.row(j);
                let in_box = x
                    .iter()
                    .zip(self.input_lower.iter().zip(&self.input_upper))
                    .all(|(v, (l, u))| l <= v && v <= u);
                in_box
                    && self.leaves.iter().any(|leaf| {
                        leaf.splits
                            .iter()
                            .all(|s| s.sign.holds(pre[s.layer][[j, s.neuron]]))
                            && leaf.plane.satisfied(x)
                    })
            })
            .collect()
    }
}
