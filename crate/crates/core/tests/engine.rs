use ndarray::{array, Array2};
use preimage_core::engine::{premap2, LeafStatus, TraceRecord};
use preimage_core::fixtures::{toy_2d, Toy2d};
use preimage_core::{Mode, RefinementTree, RunConfig, StopReason};

fn grid(k: usize) -> Array2<f64> {
    let mut pts = Array2::zeros((k * k, 2));
    for i in 0..k {
        for j in 0..k {
            pts[[i * k + j, 0]] = -1.0 + 2.0 * (i as f64 + 0.5) / k as f64;
            pts[[i * k + j, 1]] = -1.0 + 2.0 * (j as f64 + 0.5) / k as f64;
        }
    }
    pts
}

fn in_preimage(toy: &Toy2d, pts: &Array2<f64>) -> Vec<bool> {
    let (_, out) = toy.net.append_output_spec(&toy.spec).unwrap().compile().forward_batch(pts.view());
    out.rows().into_iter().map(|r| r.iter().all(|&v| v >= 0.0)).collect()
}

fn config(mode: Mode) -> RunConfig {
    let mut c = RunConfig::new(mode);
    c.samples = 500;
    c.root_oversample = 2;
    c.bootstrap.replicates = 200;
    c.seed = 7;
    c
}

fn run(toy: &Toy2d, c: &RunConfig) -> (RefinementTree, Vec<TraceRecord>) {
    let mut trace = Vec::new();
    let tree = premap2(&toy.net, toy.input.clone(), &toy.spec, c, |r| trace.push(*r)).unwrap();
    (tree, trace)
}

/// Count of grid points where the approximation disagrees with soundness.
fn violations(tree: &RefinementTree, toy: &Toy2d, pts: &Array2<f64>) -> usize {
    let truth = in_preimage(toy, pts);
    let approx = tree.contains_batch(pts.view());
    truth
        .iter()
        .zip(&approx)
        .filter(|(&t, &a)| match tree.config.mode {
            Mode::Under => a && !t,
            Mode::Over => t && !a,
        })
        .count()
}

#[test]
fn every_intermediate_approximation_is_sound() {
    let toy = toy_2d(3, &[6, 6]);
    let pts = grid(200);
    for mode in [Mode::Under, Mode::Over] {
        for iters in [0, 1, 3, 6] {
            let mut c = config(mode);
            c.max_iterations = Some(iters);
            let (tree, _) = run(&toy, &c);
            assert_eq!(violations(&tree, &toy, &pts), 0, "{mode:?} after {iters} rounds");
        }
    }
}

#[test]
fn coverage_is_monotone() {
    let toy = toy_2d(1, &[8, 8]);
    for mode in [Mode::Under, Mode::Over] {
        let mut c = config(mode);
        c.max_iterations = Some(12);
        let (_, trace) = run(&toy, &c);
        assert!(trace.len() >= 2);
        for w in trace.windows(2) {
            let ok = match mode {
                Mode::Under => w[1].coverage >= w[0].coverage - 1e-12,
                Mode::Over => w[1].coverage <= w[0].coverage + 1e-12,
            };
            assert!(ok, "{mode:?}: {} then {}", w[0].coverage, w[1].coverage);
        }
    }
}

#[test]
fn same_seed_same_result() {
    let toy = toy_2d(2, &[6, 6]);
    let mut c = config(Mode::Under);
    c.max_iterations = Some(5);
    let (a, ta) = run(&toy, &c);
    let (b, tb) = run(&toy, &c);
    assert_eq!(a.estimate.v_p, b.estimate.v_p);
    assert_eq!(a.estimate.v_o, b.estimate.v_o);
    assert_eq!(a.estimate.ci_ratio, b.estimate.ci_ratio);
    assert_eq!(ta.len(), tb.len());
    let paths = |t: &RefinementTree| t.leaves.iter().map(|l| l.path()).collect::<Vec<_>>();
    assert_eq!(paths(&a), paths(&b));
    c.seed = 8;
    let (d, _) = run(&toy, &c);
    assert_ne!(a.estimate.v_o, d.estimate.v_o);
}

#[test]
fn exhaustive_runs_agree_across_batch_sizes() {
    let toy = toy_2d(5, &[4, 4]);
    let mut c = config(Mode::Under);
    c.threshold = 1.0;
    c.max_iterations = Some(2000);
    let mut results = Vec::new();
    for batch in [1, 2, 4] {
        c.batch = batch;
        let (tree, _) = run(&toy, &c);
        assert!(matches!(tree.stop_reason, StopReason::Exhausted | StopReason::Threshold));
        assert!(tree.leaves.iter().all(|l| !l.is_candidate()));
        results.push(tree);
    }
    let summary = |t: &RefinementTree| {
        t.leaves
            .iter()
            .map(|l| (l.path(), l.status, l.estimate.volume, l.estimate.frac_p, l.estimate.frac_o))
            .collect::<Vec<_>>()
    };
    assert_eq!(summary(&results[0]), summary(&results[1]));
    assert_eq!(summary(&results[0]), summary(&results[2]));
    assert_eq!(results[0].estimate.v_p, results[1].estimate.v_p);
    assert!(results[2].iterations < results[0].iterations);
}

#[test]
fn shortcuts_only_skip_work() {
    let toy = toy_2d(4, &[8, 8]);
    let pts = grid(150);
    for mode in [Mode::Under, Mode::Over] {
        let mut on = config(mode);
        on.max_iterations = Some(300);
        let mut off = on.clone();
        off.shortcuts = false;
        let (a, _) = run(&toy, &on);
        let (b, _) = run(&toy, &off);
        assert_eq!(violations(&a, &toy, &pts), 0);
        assert_eq!(violations(&b, &toy, &pts), 0);
        let marked = |t: &RefinementTree| {
            t.leaves
                .iter()
                .filter(|l| matches!(l.status, LeafStatus::Discarded | LeafStatus::Finalized))
                .count()
        };
        assert_eq!(marked(&b), 0);
        assert_eq!(a.stop_reason, StopReason::Threshold);
        assert_eq!(b.stop_reason, StopReason::Threshold);
        assert!(marked(&a) > 0);
        assert!(a.optimizer_calls < b.optimizer_calls, "{} vs {}", a.optimizer_calls, b.optimizer_calls);
    }
}

#[test]
fn box_inside_the_preimage_needs_no_refinement() {
    // y = relu(x0) + relu(x1) + 1 >= 0 everywhere
    let net = preimage_core::Network::new(
        preimage_core::model::Shape::Flat(2),
        vec![
            preimage_core::model::Layer::Dense { weight: array![[1.0, 0.0], [0.0, 1.0]], bias: array![0.0, 0.0] },
            preimage_core::model::Layer::Relu,
            preimage_core::model::Layer::Dense { weight: array![[1.0, 1.0]], bias: array![1.0] },
        ],
    )
    .unwrap();
    let spec = preimage_core::OutputSpec::new(array![[1.0]], array![0.0]).unwrap();
    let input = preimage_core::InputBox::new(array![-1.0, -1.0], array![1.0, 1.0]).unwrap();
    let tree = premap2(&net, input, &spec, &config(Mode::Over), |_| {}).unwrap();
    assert_eq!(tree.stop_reason, StopReason::Threshold);
    assert_eq!(tree.iterations, 0);
    assert_eq!(tree.estimate.ratio, 1.0);
    assert_eq!(tree.estimate.v_o, 4.0);
}

#[test]
fn under_mode_reaches_its_threshold() {
    let toy = toy_2d(1, &[8, 8]);
    let (tree, trace) = run(&toy, &config(Mode::Under));
    assert_eq!(tree.stop_reason, StopReason::Threshold);
    assert!(tree.estimate.ratio >= 0.9);
    assert_eq!(trace.len(), tree.iterations + 1);
    assert!(tree.delta().unwrap() >= 0.0);
    let est = tree.estimate();
    assert_eq!(est.v_p, tree.estimate.v_p);
}
