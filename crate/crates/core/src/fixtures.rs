//! Seeded networks and domains shared by tests and benchmarks.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::domain::InputBox;
use crate::model::{Layer, Network, OutputSpec, Shape};
use crate::sampler::rng_from_seed;

fn gaussian<R: Rng>(rng: &mut R, shape: (usize, usize), std: f64) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn(shape, |_| n.sample(rng))
}

fn gaussian_vec<R: Rng>(rng: &mut R, len: usize, std: f64) -> Array1<f64> {
    let n = Normal::new(0.0, std).expect("positive std");
    Array1::from_shape_fn(len, |_| n.sample(rng))
}

/// Dense ReLU network with He-scaled Gaussian weights.
pub fn random_dense(seed: u64, input_dim: usize, hidden: &[usize], output_dim: usize) -> Network {
    let mut rng = rng_from_seed(seed);
    let mut layers = Vec::new();
    let mut fan_in = input_dim;
    for &width in hidden {
        layers.push(Layer::Dense {
            weight: gaussian(&mut rng, (width, fan_in), (2.0 / fan_in as f64).sqrt()),
            bias: gaussian_vec(&mut rng, width, 0.1),
        });
        layers.push(Layer::Relu);
        fan_in = width;
    }
    layers.push(Layer::Dense {
        weight: gaussian(&mut rng, (output_dim, fan_in), (1.0 / fan_in as f64).sqrt()),
        bias: gaussian_vec(&mut rng, output_dim, 0.1),
    });
    Network::new(Shape::Flat(input_dim), layers).expect("consistent shapes")
}

/// Conv, ReLU, pool, flatten, dense, ReLU, dense on a `side x side x 1` image.
pub fn random_conv(seed: u64, side: usize, channels: usize, outputs: usize) -> Network {
    let mut rng = rng_from_seed(seed);
    let n = Normal::new(0.0, (2.0f64 / 9.0).sqrt()).expect("positive std");
    let kernel = Array4::from_shape_fn((channels, 1, 3, 3), |_| n.sample(&mut rng));
    let pooled = side / 2;
    let flat = pooled * pooled * channels;
    let layers = vec![
        Layer::Conv2d {
            kernel,
            bias: gaussian_vec(&mut rng, channels, 0.1),
            stride: 1,
            padding: 1,
        },
        Layer::Relu,
        Layer::AvgPool2d { window: 2 },
        Layer::Flatten,
        Layer::Dense {
            weight: gaussian(&mut rng, (8, flat), (2.0 / flat as f64).sqrt()),
            bias: gaussian_vec(&mut rng, 8, 0.1),
        },
        Layer::Relu,
        Layer::Dense {
            weight: gaussian(&mut rng, (outputs, 8), (1.0f64 / 8.0).sqrt()),
            bias: gaussian_vec(&mut rng, outputs, 0.1),
        },
    ];
    Network::new(Shape::Image { h: side, w: side, c: 1 }, layers).expect("consistent shapes")
}

/// A two-input problem: a small two-class network on `[-1, 1]^2` and the
/// specification "class 0 beats class 1 by at least `d`", with `d` chosen so
/// that roughly half of the box is in the preimage.
#[derive(Debug, Clone)]
pub struct Toy2d {
    pub net: Network,
    pub spec: OutputSpec,
    pub input: InputBox,
}

pub fn toy_2d(seed: u64, hidden: &[usize]) -> Toy2d {
    let net = random_dense(seed, 2, hidden, 2);
    let compiled = net.compile();
    let grid = 101;
    let mut margins = Vec::with_capacity(grid * grid);
    let mut pts = Array2::zeros((grid * grid, 2));
    for i in 0..grid {
        for j in 0..grid {
            pts[[i * grid + j, 0]] = -1.0 + 2.0 * i as f64 / (grid - 1) as f64;
            pts[[i * grid + j, 1]] = -1.0 + 2.0 * j as f64 / (grid - 1) as f64;
        }
    }
    let (_, out) = compiled.forward_batch(pts.view());
    for r in out.rows() {
        margins.push(r[0] - r[1]);
    }
    margins.sort_by(f64::total_cmp);
    let median = margins[margins.len() / 2];
    let spec = OutputSpec::new(ndarray::array![[1.0, -1.0]], ndarray::array![-median]).expect("one row");
    let input = InputBox::new(Array1::from_elem(2, -1.0), Array1::from_elem(2, 1.0)).expect("valid box");
    Toy2d { net, spec, input }
}

/// Box `[center - radius, center + radius]` clipped to `[lo, hi]`.
pub fn box_around(center: &Array1<f64>, radius: f64, lo: f64, hi: f64) -> InputBox {
    InputBox::new(
        center.mapv(|c| (c - radius).max(lo)),
        center.mapv(|c| (c + radius).min(hi)),
    )
    .expect("valid box")
}
