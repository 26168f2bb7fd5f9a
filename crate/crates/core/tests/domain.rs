use ndarray::{array, Array1, Axis};
use preimage_core::domain::{contains, split_neuron, tighten_interval, Branch, Sign, TightenConfig};
use preimage_core::fixtures::random_dense;
use preimage_core::model::CompiledNet;
use preimage_core::sampler::{rng_from_seed, sample_uniform, SampleSet};
use preimage_core::{HalfSpaceRegion, InputBox, Side, Subdomain};
use proptest::prelude::*;

fn unit_box(d: usize) -> InputBox {
    InputBox::new(Array1::from_elem(d, -1.0), Array1::from_elem(d, 1.0)).unwrap()
}

fn evaluated(net: &CompiledNet, dom: &Subdomain, n: usize, seed: u64) -> SampleSet {
    let pts = sample_uniform(&dom.input_box, n, &mut rng_from_seed(seed));
    SampleSet::evaluate(net, pts, Array1::ones(n))
}

/// Every sample of `dense` (drawn from the root box) that satisfies the
/// child's split signs must lie inside the child's box and layer intervals.
fn check_sound(child: &Subdomain, dense: &SampleSet) -> Result<(), String> {
    for j in 0..dense.len() {
        if !child.consistent_sample(dense, j) {
            continue;
        }
        let x = dense.points.row(j);
        for k in 0..x.len() {
            if x[k] < child.input_box.lower[k] || x[k] > child.input_box.upper[k] {
                return Err(format!("input {k} = {} outside [{}, {}]", x[k], child.input_box.lower[k], child.input_box.upper[k]));
            }
        }
        for (l, b) in child.layer_bounds.iter().enumerate() {
            for i in 0..b.len() {
                let z = dense.pre[l][[j, i]];
                if z < b.lower[i] - 1e-9 || z > b.upper[i] + 1e-9 {
                    return Err(format!("z[{l}][{i}] = {z} outside [{}, {}]", b.lower[i], b.upper[i]));
                }
            }
        }
    }
    Ok(())
}

fn check_narrower(child: &Subdomain, parent: &Subdomain) -> Result<(), String> {
    let ok_box = child.input_box.lower.iter().zip(&parent.input_box.lower).all(|(c, p)| c >= p)
        && child.input_box.upper.iter().zip(&parent.input_box.upper).all(|(c, p)| c <= p);
    if !ok_box {
        return Err("box widened".into());
    }
    for (cb, pb) in child.layer_bounds.iter().zip(&parent.layer_bounds) {
        for i in 0..cb.len() {
            if cb.lower[i] < pb.lower[i] || cb.upper[i] > pb.upper[i] {
                return Err(format!("interval {i} widened"));
            }
        }
    }
    Ok(())
}

#[test]
fn scalar_tightening_examples() {
    // x1 + x2 - 1 < 0 on [0, 1]^2 gives nothing; x1 + x2 - 1.5 >= 0 gives x >= 0.5
    let row = array![1.0, 1.0];
    let (mut lo, mut hi) = (array![0.0, 0.0], array![1.0, 1.0]);
    assert!(tighten_interval(row.view(), -1.0, Sign::Neg, &mut lo, &mut hi));
    assert!(hi.iter().all(|&h| h >= 1.0 - 1e-9));
    assert!(tighten_interval(row.view(), -1.5, Sign::Pos, &mut lo, &mut hi));
    assert!(lo.iter().all(|&l| (l - 0.5).abs() < 1e-8));
    // infeasible: x1 + x2 - 3 >= 0
    let (mut lo, mut hi) = (array![0.0, 0.0], array![1.0, 1.0]);
    assert!(!tighten_interval(row.view(), -3.0, Sign::Pos, &mut lo, &mut hi));
}

#[test]
fn two_level_splits_stay_sound() {
    for seed in 0..6 {
        let net = random_dense(seed, 3, &[8, 8, 8], 2).compile();
        let root = Subdomain::root(&net, unit_box(3)).unwrap();
        let dense = evaluated(&net, &root, 20_000, seed + 100);
        let samples = evaluated(&net, &root, 2000, seed);
        let mut frontier = vec![(root, samples)];
        for _ in 0..2 {
            let mut next = Vec::new();
            for (dom, xs) in frontier {
                let Some(&(l, i)) = dom.unstable_neurons().last() else { continue };
                let (neg, xn, pos, xp) = split_neuron(&net, &dom, &xs, l, i, &TightenConfig::default()).unwrap();
                for (branch, xs) in [(neg, xn), (pos, xp)] {
                    match branch {
                        Branch::Feasible(child) => {
                            check_sound(&child, &dense).unwrap();
                            check_narrower(&child, &dom).unwrap();
                            next.push((child, xs));
                        }
                        Branch::Infeasible(child) => {
                            let hits = (0..dense.len()).filter(|&j| child.consistent_sample(&dense, j)).count();
                            assert_eq!(hits, 0, "branch declared infeasible holds {hits} samples");
                        }
                    }
                }
            }
            frontier = next;
        }
    }
}

#[test]
fn split_fractions_partition_the_parent() {
    let net = random_dense(42, 2, &[6, 6], 1).compile();
    let root = Subdomain::root(&net, unit_box(2)).unwrap();
    let mut xs = evaluated(&net, &root, 1000, 1);
    let mut rng = rng_from_seed(9);
    xs.weights = Array1::from_shape_fn(1000, |_| rand::Rng::random::<f64>(&mut rng));
    let (l, i) = root.unstable_neurons()[0];
    let (neg, xn, pos, xp) = split_neuron(&net, &root, &xs, l, i, &TightenConfig::default()).unwrap();
    assert_eq!(xn.len() + xp.len(), 1000);
    assert!((xn.total_weight() + xp.total_weight() - xs.total_weight()).abs() < 1e-9);
    let f = |b: &Branch| match b {
        Branch::Feasible(d) | Branch::Infeasible(d) => d.chain_factor(),
    };
    assert!((f(&neg) + f(&pos) - 1.0).abs() < 1e-12);
    assert!((f(&neg) - xn.total_weight() / xs.total_weight()).abs() < 1e-12);
    for j in 0..xn.len() {
        assert!(xn.pre[l][[j, i]] < 0.0);
    }
    for j in 0..xp.len() {
        assert!(xp.pre[l][[j, i]] >= 0.0);
    }
}

#[test]
fn contains_matches_direct_evaluation() {
    let net = random_dense(8, 2, &[5, 5], 1).compile();
    let root = Subdomain::root(&net, unit_box(2)).unwrap();
    let xs = evaluated(&net, &root, 500, 2);
    let (l, i) = root.unstable_neurons()[0];
    let (_, _, pos, _) = split_neuron(&net, &root, &xs, l, i, &TightenConfig::default()).unwrap();
    let Branch::Feasible(child) = pos else { panic!("feasible") };
    let region = HalfSpaceRegion::new(array![[1.0, 1.0]], array![0.2], Side::Lower).unwrap();
    let probe = sample_uniform(&root.input_box, 2000, &mut rng_from_seed(3));
    let (pre, _) = net.forward_batch(probe.view());
    for (j, x) in probe.axis_iter(Axis(0)).enumerate() {
        let direct = pre[l][[j, i]] >= 0.0 && x[0] + x[1] + 0.2 >= 0.0 && child.input_box.contains(x);
        assert_eq!(contains(&net, &region, &child, x), direct);
    }
    // an empty region contains nothing, a full one everything in the box
    let empty = HalfSpaceRegion::empty(2, Side::Lower);
    let full = HalfSpaceRegion::full(2, Side::Lower);
    let x = probe.row(0);
    assert!(!contains(&net, &empty, &root, x));
    assert!(contains(&net, &full, &root, x));
}

#[test]
fn degenerate_box_free_volume() {
    let b = InputBox::new(array![0.0, 0.5, -1.0], array![2.0, 0.5, 1.0]).unwrap();
    assert_eq!(b.free_coords(), vec![0, 2]);
    assert_eq!(b.free_volume(), 4.0);
    assert!(InputBox::new(array![1.0], array![0.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn random_splits_are_sound(seed in 0u64..5000, pick in 0usize..1000, prev in any::<bool>()) {
        let net = random_dense(seed, 2, &[6, 6], 1).compile();
        let root = Subdomain::root(&net, unit_box(2)).unwrap();
        let unstable = root.unstable_neurons();
        prop_assume!(!unstable.is_empty());
        let (l, i) = unstable[pick % unstable.len()];
        let dense = evaluated(&net, &root, 5000, seed + 1);
        let xs = evaluated(&net, &root, 300, seed);
        let cfg = TightenConfig { enabled: true, previous_layer: prev };
        let (neg, _, pos, _) = split_neuron(&net, &root, &xs, l, i, &cfg).unwrap();
        for b in [neg, pos] {
            if let Branch::Feasible(child) = b {
                prop_assert!(check_sound(&child, &dense).is_ok());
                prop_assert!(check_narrower(&child, &root).is_ok());
            }
        }
    }
}
