use ndarray::{array, Array1, Array2, Axis};
use preimage_core::domain::{split_neuron, Branch, TightenConfig};
use preimage_core::fixtures::{random_conv, random_dense};
use preimage_core::model::{Layer, Network, Shape};
use preimage_core::relax::{
    backward_bounds, concretize, interval_bounds, objective, objective_gradient, optimize_params, LayerRef,
    OptimizerConfig, RelaxParams, Side,
};
use preimage_core::sampler::{rng_from_seed, sample_uniform, SampleSet};
use preimage_core::{InputBox, OutputSpec, Subdomain};
use proptest::prelude::*;

fn unit_box(d: usize) -> InputBox {
    InputBox::new(Array1::from_elem(d, -1.0), Array1::from_elem(d, 1.0)).unwrap()
}

/// Max violation of `lower <= f(x) <= upper` over the rows of `points`.
fn violation(lb: &preimage_core::LinearBounds, points: &Array2<f64>, outputs: &Array2<f64>) -> f64 {
    let lo = points.dot(&lb.a_lower.t()) + &lb.b_lower;
    let hi = points.dot(&lb.a_upper.t()) + &lb.b_upper;
    let mut worst = 0.0f64;
    for ((l, h), y) in lo.iter().zip(hi.iter()).zip(outputs.iter()) {
        worst = worst.max(l - y).max(y - h);
    }
    worst
}

#[test]
fn interval_of_linear_image() {
    let net = Network::new(
        Shape::Flat(1),
        vec![Layer::Dense { weight: array![[2.0]], bias: array![0.0] }, Layer::Relu],
    )
    .unwrap()
    .compile();
    let dom = Subdomain::root(&net, unit_box(1)).unwrap();
    let b = interval_bounds(&net, &dom).unwrap();
    assert_eq!(b[0].lower, array![-2.0]);
    assert_eq!(b[0].upper, array![2.0]);
}

#[test]
fn stabilized_neuron_interval_is_clipped() {
    let net = random_dense(3, 3, &[6, 6], 2).compile();
    let dom = Subdomain::root(&net, unit_box(3)).unwrap();
    let (l, i) = dom.unstable_neurons()[0];
    let pts = sample_uniform(&dom.input_box, 500, &mut rng_from_seed(0));
    let samples = SampleSet::evaluate(&net, pts, Array1::ones(500));
    let (_, _, pos, _) = split_neuron(&net, &dom, &samples, l, i, &TightenConfig::default()).unwrap();
    let Branch::Feasible(pos) = pos else { panic!("positive branch is feasible") };
    assert!(pos.layer_bounds[l].lower[i] >= 0.0);
}

#[test]
fn intervals_hold_on_samples() {
    let net = random_dense(11, 4, &[16, 16, 16], 3).compile();
    let dom = Subdomain::root(&net, unit_box(4)).unwrap();
    let bounds = interval_bounds(&net, &dom).unwrap();
    let pts = sample_uniform(&dom.input_box, 10_000, &mut rng_from_seed(1));
    let (pre, _) = net.forward_batch(pts.view());
    for (z, b) in pre.iter().zip(&bounds) {
        for row in z.axis_iter(Axis(0)) {
            for i in 0..row.len() {
                assert!(row[i] >= b.lower[i] - 1e-9 && row[i] <= b.upper[i] + 1e-9);
            }
        }
    }
}

#[test]
fn intermediate_bounds_hold_on_samples() {
    let net = random_dense(5, 3, &[8, 8, 8], 2).compile();
    let dom = Subdomain::root(&net, unit_box(3)).unwrap();
    let pts = sample_uniform(&dom.input_box, 5000, &mut rng_from_seed(2));
    let (pre, _) = net.forward_batch(pts.view());
    // layer 2 in terms of layer 0 pre-activations
    let lb = backward_bounds(&net, &dom, None, None, LayerRef::Relu(2), LayerRef::Relu(0)).unwrap();
    assert!(violation(&lb, &pre[0], &pre[2]) <= 1e-9);
    let lb = backward_bounds(&net, &dom, None, None, LayerRef::Relu(2), LayerRef::Input).unwrap();
    assert!(violation(&lb, &pts, &pre[2]) <= 1e-9);
}

#[test]
fn conv_net_bounds_hold_on_samples() {
    let net = random_conv(4, 4, 2, 3);
    let spec = OutputSpec::class_dominance(0, 3).unwrap();
    let fo = net.append_output_spec(&spec).unwrap().compile();
    let input = InputBox::new(Array1::zeros(16), Array1::ones(16)).unwrap();
    let dom = Subdomain::root(&fo, input).unwrap();
    let lb = backward_bounds(&fo, &dom, None, None, LayerRef::Output, LayerRef::Input).unwrap();
    let pts = sample_uniform(&dom.input_box, 10_000, &mut rng_from_seed(3));
    let (_, out) = fo.forward_batch(pts.view());
    assert!(violation(&lb, &pts, &out) <= 1e-9);
}

#[test]
fn split_children_are_no_looser_on_their_samples() {
    let net = random_dense(21, 2, &[3, 3], 1).compile();
    let dom = Subdomain::root(&net, unit_box(2)).unwrap();
    let unstable = dom.unstable_neurons();
    assert!(!unstable.is_empty() && unstable.len() <= 6);
    let parent = backward_bounds(&net, &dom, None, None, LayerRef::Output, LayerRef::Input).unwrap();
    let pts = sample_uniform(&dom.input_box, 4000, &mut rng_from_seed(4));
    let samples = SampleSet::evaluate(&net, pts, Array1::ones(4000));
    let no_tighten = TightenConfig { enabled: false, previous_layer: false };
    for &(l, i) in &unstable {
        let (neg, xn, pos, xp) = split_neuron(&net, &dom, &samples, l, i, &no_tighten).unwrap();
        for (branch, xs) in [(neg, xn), (pos, xp)] {
            let Branch::Feasible(child) = branch else { continue };
            let cb = backward_bounds(&net, &child, None, None, LayerRef::Output, LayerRef::Input).unwrap();
            let p_lo = xs.points.dot(&parent.a_lower.t()) + &parent.b_lower;
            let c_lo = xs.points.dot(&cb.a_lower.t()) + &cb.b_lower;
            let p_hi = xs.points.dot(&parent.a_upper.t()) + &parent.b_upper;
            let c_hi = xs.points.dot(&cb.a_upper.t()) + &cb.b_upper;
            assert!(violation(&cb, &xs.points, &xs.outputs) <= 1e-9);
            // Not pointwise dominance of planes in general, but the child's
            // gap to the truth on its samples must not exceed the parent's on
            // average.
            let gap = |lo: &Array2<f64>, hi: &Array2<f64>| (hi - lo).mean().unwrap_or(0.0);
            assert!(gap(&c_lo, &c_hi) <= gap(&p_lo, &p_hi) + 1e-9);
        }
    }
}

#[test]
fn single_relu_optimal_slope_matches_sweep() {
    // f(x) = relu(x), spec y >= 0.2, x in [-1, 1]
    let net = Network::new(Shape::Flat(1), vec![Layer::Relu]).unwrap();
    let spec = OutputSpec::new(array![[1.0]], array![-0.2]).unwrap();
    let fo = net.append_output_spec(&spec).unwrap().compile();
    let dom = Subdomain::root(&fo, unit_box(1)).unwrap();
    let n = 2000;
    let pts = sample_uniform(&dom.input_box, n, &mut rng_from_seed(7));
    let w = Array1::ones(n);
    let opt = optimize_params(&fo, &dom, pts.view(), w.view(), Side::Lower, &OptimizerConfig { iterations: 200, ..Default::default() }).unwrap();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let j = |alpha: f64| pts.column(0).iter().map(|&x| sig(alpha * x - 0.2)).sum::<f64>() / n as f64;
    let best = (0..=1000).map(|k| k as f64 / 1000.0).max_by(|a, b| j(*a).total_cmp(&j(*b))).unwrap();
    let alpha = opt.params.alpha[0][[0, 0]];
    assert!((alpha - best).abs() < 0.02, "optimized {alpha}, sweep {best}");
    assert!(best > 0.99);
    assert!((opt.objective - j(alpha)).abs() < 1e-12);
}

#[test]
fn objective_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let net = random_dense(100 + seed, 3, &[6, 6], 2);
        let spec = OutputSpec::class_dominance(0, 2).unwrap();
        let fo = net.append_output_spec(&spec).unwrap().compile();
        let dom = Subdomain::root(&fo, unit_box(3)).unwrap();
        let pts = sample_uniform(&dom.input_box, 200, &mut rng_from_seed(seed));
        let w = Array1::ones(200);
        let ctx = dom.context();
        for side in [Side::Lower, Side::Upper] {
            let mut params = RelaxParams::initial(&ctx, 1);
            let mut rng = rng_from_seed(seed + 50);
            for a in &mut params.alpha {
                a.mapv_inplace(|_| 0.1 + 0.8 * rand::Rng::random::<f64>(&mut rng));
            }
            let (_, grad) = objective_gradient(&fo, &ctx, &params, pts.view(), w.view(), side).unwrap();
            let value = |p: &RelaxParams| {
                let lb = backward_bounds(&fo, &dom, Some(p), Some(p), LayerRef::Output, LayerRef::Input).unwrap();
                let (a, b) = lb.side(side);
                objective(a.view(), b.view(), pts.view(), w.view(), side).unwrap()
            };
            for k in 0..params.alpha.len() {
                for idx in 0..params.alpha[k].len() {
                    let (r, c) = (idx / params.alpha[k].ncols(), idx % params.alpha[k].ncols());
                    let h = 1e-5;
                    let mut plus = params.clone();
                    plus.alpha[k][[r, c]] += h;
                    let mut minus = params.clone();
                    minus.alpha[k][[r, c]] -= h;
                    let fd = (value(&plus) - value(&minus)) / (2.0 * h);
                    let g = grad.alpha[k][[r, c]];
                    let scale = g.abs().max(fd.abs()).max(1e-6);
                    assert!((g - fd).abs() / scale <= 1e-4, "seed {seed} layer {k} ({r},{c}): {g} vs {fd}");
                }
            }
        }
    }
}

#[test]
fn linear_net_bounds_are_exact_and_tight() {
    let net = random_dense(9, 3, &[], 2).compile();
    let dom = Subdomain::root(&net, unit_box(3)).unwrap();
    let lb = backward_bounds(&net, &dom, None, None, LayerRef::Output, LayerRef::Input).unwrap();
    assert_eq!(lb.a_lower, lb.a_upper);
    assert_eq!(lb.a_lower, net.affines[0].weight);
    let lo = concretize(lb.a_lower.view(), lb.b_lower.view(), &dom.input_box, Side::Lower);
    let hi = concretize(lb.a_upper.view(), lb.b_upper.view(), &dom.input_box, Side::Upper);
    assert!(lo.iter().zip(hi.iter()).all(|(l, h)| l <= h));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_bounds_are_sound(seed in 0u64..10_000, width in 2usize..12, depth in 1usize..3) {
        let hidden = vec![width; depth];
        let net = random_dense(seed, 3, &hidden, 2).compile();
        let dom = Subdomain::root(&net, unit_box(3)).unwrap();
        let lb = backward_bounds(&net, &dom, None, None, LayerRef::Output, LayerRef::Input).unwrap();
        let pts = sample_uniform(&dom.input_box, 1000, &mut rng_from_seed(seed));
        let (_, out) = net.forward_batch(pts.view());
        prop_assert!(violation(&lb, &pts, &out) <= 1e-9);
    }

    #[test]
    fn optimization_never_lowers_the_objective(seed in 0u64..10_000, under in any::<bool>()) {
        let net = random_dense(seed, 2, &[6, 6], 2);
        let spec = OutputSpec::class_dominance(1, 2).unwrap();
        let fo = net.append_output_spec(&spec).unwrap().compile();
        let dom = Subdomain::root(&fo, unit_box(2)).unwrap();
        let pts = sample_uniform(&dom.input_box, 300, &mut rng_from_seed(seed));
        let w = Array1::ones(300);
        let side = if under { Side::Lower } else { Side::Upper };
        let opt = optimize_params(&fo, &dom, pts.view(), w.view(), side, &OptimizerConfig::default()).unwrap();
        prop_assert!(opt.objective >= opt.initial_objective);
        for a in &opt.params.alpha {
            prop_assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // optimized bounds stay sound
        let (_, out) = fo.forward_batch(pts.view());
        let v = pts.dot(&opt.a.t()) + &opt.b;
        for (p, y) in v.iter().zip(out.iter()) {
            if under { prop_assert!(*p <= y + 1e-9) } else { prop_assert!(*p >= y - 1e-9) }
        }
    }
}
