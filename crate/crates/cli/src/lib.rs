//! Command-line front end: reads a model, a domain and a specification,
//! runs the refinement engine and writes a result document and a JSON-lines
//! progress trace.

pub mod document;
pub mod image;
pub mod input;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Parser;
use ndarray::{Array1, Array2};
use preimage_core::engine::{premap2, TraceRecord};
use preimage_core::model::load_model;
use preimage_core::{HeuristicConfig, Mode, OutputSpec, RunConfig, StopReason, WeightFunction};

pub use document::{ConfigEcho, LeafRecord, PlaneRecord, ResultDocument, SpecEcho, Timings, Totals};
pub use image::Image;
pub use input::{build_patch_domain, Domain, DomainSpec, PatchKind, PatchShape};

#[derive(Debug, Clone, Parser)]
#[command(name = "preimage", version, about = "Under- and over-approximate the preimage of a ReLU network")]
pub struct Args {
    /// Model file (JSON layer list).
    #[arg(long, required_unless_present = "replay")]
    pub model: Option<PathBuf>,
    /// Domain file: a box, a patch or a masked patch.
    #[arg(long, required_unless_present = "replay")]
    pub domain: Option<PathBuf>,
    /// Specification file `{"c": [[...]], "d": [...]}` for `C y + d >= 0`.
    #[arg(long, conflicts_with = "label", required_unless_present_any = ["label", "replay"])]
    pub spec: Option<PathBuf>,
    /// Class that must keep the largest output.
    #[arg(long)]
    pub label: Option<usize>,
    #[arg(long, default_value = "under")]
    pub mode: Mode,
    /// Stop once the ratio reaches this value (default 0.9 under, 1.1 over).
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    /// Wall-clock budget in seconds.
    #[arg(long)]
    pub time_limit: Option<f64>,
    /// Maximum refinement rounds.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Leaves refined per round.
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Heuristic weights file `{"extra": 1.0, ...}`.
    #[arg(long)]
    pub heuristics: Option<PathBuf>,
    /// `uniform`, `brightness[:JSON]` or `piecewise_linear:JSON`.
    #[arg(long)]
    pub weight_fn: Option<String>,
    /// Bootstrap replicates.
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    /// Confidence level of the intervals.
    #[arg(long, default_value_t = 0.9)]
    pub level: f64,
    /// Result document; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Progress trace, one JSON object per line.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Rerun the configuration recorded in a result document.
    #[arg(long)]
    pub replay: Option<PathBuf>,
}

#[derive(serde::Deserialize)]
struct SpecFile {
    c: Vec<Vec<f64>>,
    d: Vec<f64>,
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        bail!("matrix rows have different lengths");
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Array2::from_shape_vec((rows.len(), cols), flat)?)
}

impl SpecEcho {
    pub fn to_spec(&self) -> Result<OutputSpec> {
        Ok(OutputSpec::new(to_matrix(&self.c)?, Array1::from(self.d.clone()))?)
    }

    fn from_spec(spec: &OutputSpec, label: Option<usize>) -> Self {
        Self {
            label,
            c: spec.c.rows().into_iter().map(|r| r.to_vec()).collect(),
            d: spec.d.to_vec(),
        }
    }
}

/// Parse `NAME` or `NAME:JSON`. A bare `brightness` takes its pixels and
/// maximum from the domain's image and patch.
pub fn parse_weight_fn(text: &str, domain: &Domain) -> Result<WeightFunction> {
    let (name, params) = match text.split_once(':') {
        Some((n, p)) => (n.trim(), Some(p)),
        None => (text.trim(), None),
    };
    if name == "brightness" && params.is_none_or(|p| p.trim() == "{}") {
        let Some(img) = &domain.image else {
            bail!("brightness weights without parameters need an image domain");
        };
        return Ok(WeightFunction::brightness(&img.data, img.channels, domain.pixels.clone())?);
    }
    let mut value: serde_json::Value = match params {
        Some(p) => serde_json::from_str(p).with_context(|| format!("weight function parameters `{p}`"))?,
        None => serde_json::json!({}),
    };
    let Some(obj) = value.as_object_mut() else {
        bail!("weight function parameters must be a JSON object");
    };
    obj.insert("name".into(), name.into());
    serde_json::from_value(value).with_context(|| format!("unknown or malformed weight function `{name}`"))
}

fn read_model(path: &Path) -> Result<preimage_core::Network> {
    let bytes = std::fs::read(path).with_context(|| format!("reading model {}", path.display()))?;
    Ok(load_model(&bytes)?)
}

fn load_domain(path: &Path) -> Result<Domain> {
    let spec = DomainSpec::load(path)?;
    spec.build(path.parent().unwrap_or(Path::new(".")))
}

/// Turn flags into a full configuration.
pub fn resolve(args: &Args) -> Result<ConfigEcho> {
    if let Some(path) = &args.replay {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let doc: ResultDocument = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        return Ok(doc.config);
    }
    let model_path = args.model.as_ref().context("--model is required")?;
    let domain_path = args.domain.as_ref().context("--domain is required")?;
    let net = read_model(model_path)?;
    let domain = load_domain(domain_path)?;
    let spec = match (&args.spec, args.label) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading spec {}", p.display()))?;
            let f: SpecFile = serde_json::from_str(&text).with_context(|| format!("parsing spec {}", p.display()))?;
            SpecEcho { label: None, c: f.c, d: f.d }
        }
        (None, Some(label)) => SpecEcho::from_spec(&OutputSpec::class_dominance(label, net.output_dim())?, Some(label)),
        (None, None) => bail!("either --spec or --label is required"),
    };
    let mut run = RunConfig::new(args.mode);
    if let Some(t) = args.threshold {
        run.threshold = t;
    }
    run.samples = args.samples;
    run.time_limit = args.time_limit;
    run.max_iterations = args.iterations;
    run.batch = args.batch;
    run.seed = args.seed;
    run.bootstrap.replicates = args.bootstrap;
    run.bootstrap.level = args.level;
    if let Some(p) = &args.heuristics {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading heuristics {}", p.display()))?;
        run.heuristics = HeuristicConfig::from_json(&text)?;
    }
    if let Some(w) = &args.weight_fn {
        run.weight_fn = parse_weight_fn(w, &domain)?;
    }
    run.validate()?;
    Ok(ConfigEcho {
        model: model_path.display().to_string(),
        domain: domain_path.display().to_string(),
        spec,
        run,
    })
}

/// Run a resolved configuration. `on_trace` sees every progress record.
pub fn execute(config: &ConfigEcho, on_trace: impl FnMut(&TraceRecord)) -> Result<ResultDocument> {
    let start = Instant::now();
    let net = read_model(Path::new(&config.model))?;
    let domain = load_domain(Path::new(&config.domain))?;
    let spec = config.spec.to_spec()?;
    let load_s = start.elapsed().as_secs_f64();
    let run_start = Instant::now();
    let tree = premap2(&net, domain.input, &spec, &config.run, on_trace)?;
    let run_s = run_start.elapsed().as_secs_f64();
    let timings = Timings {
        load_s,
        run_s,
        total_s: start.elapsed().as_secs_f64(),
    };
    Ok(ResultDocument::from_tree(&tree, config.clone(), timings))
}

/// 0 when the threshold is met or nothing is left to refine, 2 when a
/// budget ran out first.
pub fn exit_code(stop: StopReason) -> i32 {
    if stop.is_budget() {
        2
    } else {
        0
    }
}

/// Resolve, execute and write the outputs; returns the process exit code.
pub fn run(args: &Args) -> Result<i32> {
    let config = resolve(args)?;
    let mut trace_out = match &args.trace {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("creating trace {}", p.display()))?,
        )),
        None => None,
    };
    let mut trace_err = None;
    let doc = execute(&config, |rec| {
        if let Some(w) = trace_out.as_mut() {
            let line = serde_json::to_string(rec).expect("trace records serialize");
            if let Err(e) = writeln!(w, "{line}") {
                trace_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = trace_err {
        return Err(e).context("writing trace");
    }
    if let Some(mut w) = trace_out {
        w.flush().context("writing trace")?;
    }
    let text = serde_json::to_string_pretty(&doc)?;
    match &args.output {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    tracing::info!(
        ratio = doc.totals.ratio,
        v_p = doc.totals.v_p,
        v_o = doc.totals.v_o,
        leaves = doc.leaves.len(),
        stop = ?doc.stop_reason,
        "done"
    );
    Ok(exit_code(doc.stop_reason))
}
