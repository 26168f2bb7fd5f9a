//! Neuron selection: ten scoring heuristics, normalized and combined.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::domain::Subdomain;
use crate::error::{Error, Result};
use crate::sampler::SampleSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heuristic {
    Balance,
    Soft,
    Lower,
    Width,
    Loose,
    Bound,
    Gap,
    Area,
    Under,
    Extra,
}

impl Heuristic {
    pub const ALL: [Heuristic; 10] = [
        Heuristic::Balance,
        Heuristic::Soft,
        Heuristic::Lower,
        Heuristic::Width,
        Heuristic::Loose,
        Heuristic::Bound,
        Heuristic::Gap,
        Heuristic::Area,
        Heuristic::Under,
        Heuristic::Extra,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Heuristic::Balance => "balance",
            Heuristic::Soft => "soft",
            Heuristic::Lower => "lower",
            Heuristic::Width => "width",
            Heuristic::Loose => "loose",
            Heuristic::Bound => "bound",
            Heuristic::Gap => "gap",
            Heuristic::Area => "area",
            Heuristic::Under => "under",
            Heuristic::Extra => "extra",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Heuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Heuristic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Heuristic::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| Error::UnknownHeuristic(s.to_string()))
    }
}

/// Weight per heuristic. Serialized as a JSON object `{"name": weight}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct HeuristicConfig {
    weights: BTreeMap<Heuristic, f64>,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        Self::new([
            (Heuristic::Extra, 1.0),
            (Heuristic::Area, 0.75),
            (Heuristic::Under, 0.5),
            (Heuristic::Gap, 0.25),
        ])
        .expect("default weights are valid")
    }
}

impl HeuristicConfig {
    pub fn new(weights: impl IntoIterator<Item = (Heuristic, f64)>) -> Result<Self> {
        let weights: BTreeMap<_, _> = weights.into_iter().collect();
        if let Some((h, w)) = weights.iter().find(|(_, w)| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("weight of {h} must be finite and nonnegative, got {w}")));
        }
        if !weights.values().any(|&w| w > 0.0) {
            return Err(Error::Config("at least one heuristic weight must be positive".into()));
        }
        Ok(Self { weights })
    }

    /// Parse `{"extra": 1.0, "area": 0.75}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, f64> = serde_json::from_str(text)?;
        let parsed = raw
            .into_iter()
            .map(|(k, w)| Ok((k.parse::<Heuristic>()?, w)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(parsed)
    }

    pub fn weight(&self, h: Heuristic) -> f64 {
        self.weights.get(&h).copied().unwrap_or(0.0)
    }

    pub fn active(&self) -> impl Iterator<Item = (Heuristic, f64)> + '_ {
        self.weights.iter().filter(|(_, &w)| w > 0.0).map(|(&h, &w)| (h, w))
    }

    /// Whether any active heuristic reads the cached output-bound rows.
    fn needs_rows(&self) -> bool {
        self.active()
            .any(|(h, _)| matches!(h, Heuristic::Area | Heuristic::Under | Heuristic::Extra))
    }
}

impl<'de> Deserialize<'de> for HeuristicConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = BTreeMap::<Heuristic, f64>::deserialize(d)?;
        Self::new(raw).map_err(serde::de::Error::custom)
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

/// Raw score of one neuron from its sample pre-activations `z`, its interval
/// `[lower, upper]` and its coefficients `rows` (one per output) in the
/// cached output bound.
pub fn raw_score(h: Heuristic, z: ArrayView1<f64>, lower: f64, upper: f64, rows: ArrayView1<f64>) -> f64 {
    let n = z.len() as f64;
    let sample_range = || {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = z.iter().copied().fold(f64::INFINITY, f64::min);
        if z.is_empty() {
            0.0
        } else {
            max - min
        }
    };
    let width = upper - lower;
    match h {
        Heuristic::Balance => {
            if z.is_empty() {
                return 0.0;
            }
            let pos = z.iter().filter(|&&v| v >= 0.0).count() as f64;
            1.0 - (2.0 * pos / n - 1.0).abs()
        }
        Heuristic::Soft => {
            if z.is_empty() {
                return 0.0;
            }
            let s: f64 = z.iter().map(|&v| sigmoid(v)).sum();
            1.0 - (2.0 * s / n - 1.0).abs()
        }
        Heuristic::Lower => (-lower).max(0.0),
        Heuristic::Width => width,
        Heuristic::Loose => width - sample_range(),
        Heuristic::Bound => {
            if width > 0.0 {
                1.0 - sample_range() / width
            } else {
                0.0
            }
        }
        Heuristic::Gap => {
            if width > 0.0 {
                -lower * upper / width
            } else {
                0.0
            }
        }
        Heuristic::Area => rows.iter().map(|a| (a * lower * lower).abs()).sum(),
        Heuristic::Under => rows.iter().map(|a| (a * lower).abs()).sum(),
        Heuristic::Extra => {
            let neg: Vec<f64> = z.iter().copied().filter(|&v| v < 0.0).collect();
            if neg.is_empty() {
                return 0.0;
            }
            let total: f64 = rows
                .iter()
                .map(|a| neg.iter().map(|v| (a * v).abs()).sum::<f64>())
                .sum();
            total / neg.len() as f64
        }
    }
}

/// Scores of one candidate neuron.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronScore {
    pub layer: usize,
    pub neuron: usize,
    /// Indexed like [`Heuristic::ALL`].
    pub raw: [f64; 10],
    pub normalized: [f64; 10],
    pub combined: f64,
}

/// Divide each active heuristic by its maximum over the candidates (zero
/// when that maximum is not positive) and form the weighted sum.
pub fn combine(scores: &mut [NeuronScore], config: &HeuristicConfig) {
    for s in scores.iter_mut() {
        s.normalized = [0.0; 10];
        s.combined = 0.0;
    }
    for (h, w) in config.active() {
        let k = h.index();
        let max = scores.iter().map(|s| s.raw[k]).fold(f64::NEG_INFINITY, f64::max);
        if !(max > 0.0) {
            continue;
        }
        for s in scores.iter_mut() {
            s.normalized[k] = (s.raw[k] / max).max(0.0);
            s.combined += w * s.normalized[k];
        }
    }
}

/// Index of the highest combined score; ties go to the lowest layer, then
/// lowest neuron index.
pub fn argmax(scores: &[NeuronScore]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, s) in scores.iter().enumerate() {
        best = match best {
            None => Some(j),
            Some(b) => {
                let o = &scores[b];
                let better = s.combined > o.combined
                    || (s.combined == o.combined && (s.layer, s.neuron) < (o.layer, o.neuron));
                Some(if better { j } else { b })
            }
        };
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Split { layer: usize, neuron: usize },
    /// No unstable neuron is left: the branch is resolved exactly.
    Exact,
}

/// Raw scores of every unstable, unsplit neuron of `dom`.
///
/// `layer_rows[l]` holds, per output row, the coefficients of layer `l`'s
/// pre-activations in the cached output bound.
pub fn score_candidates(dom: &Subdomain, samples: &SampleSet, layer_rows: &[Array2<f64>], config: &HeuristicConfig) -> Vec<NeuronScore> {
    let need_rows = config.needs_rows();
    dom.unstable_neurons()
        .into_iter()
        .map(|(l, i)| {
            let z = samples.pre[l].column(i);
            let b = &dom.layer_bounds[l];
            let rows = match layer_rows.get(l) {
                Some(r) if need_rows => r.column(i),
                _ => ArrayView1::from(&[][..]),
            };
            let mut raw = [0.0; 10];
            for (h, _) in config.active() {
                raw[h.index()] = raw_score(h, z, b.lower[i], b.upper[i], rows);
            }
            NeuronScore {
                layer: l,
                neuron: i,
                raw,
                normalized: [0.0; 10],
                combined: 0.0,
            }
        })
        .collect()
}

pub fn select_neuron(dom: &Subdomain, samples: &SampleSet, layer_rows: &[Array2<f64>], config: &HeuristicConfig) -> Selection {
    let mut scores = score_candidates(dom, samples, layer_rows, config);
    combine(&mut scores, config);
    match argmax(&scores) {
        Some(j) => Selection::Split {
            layer: scores[j].layer,
            neuron: scores[j].neuron,
        },
        None => Selection::Exact,
    }
}
