//! Guaranteed under- and over-approximations of neural network preimages.
//!
//! Given a feed-forward ReLU network `f`, an axis-aligned input box and a
//! polytope output specification `{y : C y + d >= 0}`, this crate computes a
//! union of half-space regions, one per subdomain of the input box, that is
//! provably contained in (under mode) or provably contains (over mode) the set
//! of inputs mapped into the specification.
//!
//! The pipeline:
//!
//! - [`model`] loads and evaluates networks and appends the specification as a
//!   final linear layer.
//! - [`relax`] runs backward linear bound propagation with optimizable ReLU
//!   slopes (`alpha`) and split multipliers (`beta`).
//! - [`domain`] represents subdomains, ReLU splits and bound tightening.
//! - [`sampler`] draws uniform, optionally weighted, samples inside subdomains.
//! - [`heuristics`] scores unstable neurons and picks the next split.
//! - [`stats`] turns samples into volume estimates and bootstrap intervals.
//! - [`engine`] drives the prioritized branch-and-refine loop.

pub mod domain;
pub mod engine;
mod error;
#[doc(hidden)]
pub mod fixtures;
pub mod heuristics;
pub mod model;
pub mod relax;
pub mod sampler;
pub mod stats;

pub use domain::{HalfSpaceRegion, InputBox, Sign, Split, Subdomain};
pub use engine::{Mode, RefinementTree, RunConfig, StopReason};
pub use error::{Error, Result};
pub use heuristics::{Heuristic, HeuristicConfig};
pub use model::{CompiledNet, Network, OutputSpec};
pub use relax::{LinearBounds, RelaxParams, Side};
pub use sampler::{SampleSet, WeightFunction};
pub use stats::VolumeEstimate;
