//! Feed-forward ReLU networks: loading, validation and evaluation.
//!
//! A [`Network`] keeps the layer structure of the model file (dense,
//! convolution, average pooling, ReLU, flatten). Image tensors are stored
//! row-major in height, width, channel order. For bound propagation the
//! network is lowered into a [`CompiledNet`]: an alternating sequence of affine
//! maps and ReLUs where every run of linear layers is folded into one explicit
//! matrix.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the tensor flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Flat(usize),
    Image { h: usize, w: usize, c: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Flat(d) => d,
            Shape::Image { h, w, c } => h * w * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn from_dims(dims: &[usize]) -> Result<Self> {
        match *dims {
            [d] if d > 0 => Ok(Shape::Flat(d)),
            [h, w, c] if h > 0 && w > 0 && c > 0 => Ok(Shape::Image { h, w, c }),
            _ => Err(Error::Malformed(format!(
                "input_shape must be [d] or [h, w, c] with positive entries, got {dims:?}"
            ))),
        }
    }

    fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Flat(d) => vec![d],
            Shape::Image { h, w, c } => vec![h, w, c],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense {
        weight: Array2<f64>,
        bias: Array1<f64>,
    },
    /// Kernel indexed as (output channel, input channel, row, column).
    Conv2d {
        kernel: Array4<f64>,
        bias: Array1<f64>,
        stride: usize,
        padding: usize,
    },
    /// Non-overlapping average pooling with a square window.
    AvgPool2d {
        window: usize,
    },
    Relu,
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::AvgPool2d { .. } => "avgpool2d",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
        }
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self, Layer::Relu)
    }

    fn output_shape(&self, index: usize, input: Shape) -> Result<Shape> {
        let err = |message: String| Error::Layer {
            layer: index,
            message,
        };
        match self {
            Layer::Dense { weight, bias } => {
                let Shape::Flat(d) = input else {
                    return Err(err(format!(
                        "dense layer needs a flat input, got {:?}; add a flatten layer",
                        input.dims()
                    )));
                };
                if weight.ncols() != d {
                    return Err(err(format!(
                        "dense weight has {} columns but the input has {d} values",
                        weight.ncols()
                    )));
                }
                if weight.nrows() != bias.len() {
                    return Err(err(format!(
                        "dense weight has {} rows but the bias has {} entries",
                        weight.nrows(),
                        bias.len()
                    )));
                }
                if weight.nrows() == 0 {
                    return Err(err("dense layer has no outputs".into()));
                }
                Ok(Shape::Flat(weight.nrows()))
            }
            Layer::Conv2d {
                kernel,
                bias,
                stride,
                padding,
            } => {
                let Shape::Image { h, w, c } = input else {
                    return Err(err("conv2d needs an image input [h, w, c]".into()));
                };
                let (oc, ic, kh, kw) = kernel.dim();
                if ic != c {
                    return Err(err(format!(
                        "conv2d kernel expects {ic} input channels, got {c}"
                    )));
                }
                if bias.len() != oc {
                    return Err(err(format!(
                        "conv2d has {oc} output channels but {} biases",
                        bias.len()
                    )));
                }
                if *stride == 0 || kh == 0 || kw == 0 || oc == 0 {
                    return Err(err("conv2d stride and kernel sizes must be positive".into()));
                }
                if h + 2 * padding < kh || w + 2 * padding < kw {
                    return Err(err("conv2d kernel larger than the padded input".into()));
                }
                Ok(Shape::Image {
                    h: (h + 2 * padding - kh) / stride + 1,
                    w: (w + 2 * padding - kw) / stride + 1,
                    c: oc,
                })
            }
            Layer::AvgPool2d { window } => {
                let Shape::Image { h, w, c } = input else {
                    return Err(err("avgpool2d needs an image input [h, w, c]".into()));
                };
                if *window == 0 || *window > h || *window > w {
                    return Err(err(format!(
                        "avgpool2d window {window} does not fit a {h}x{w} input"
                    )));
                }
                Ok(Shape::Image {
                    h: h / window,
                    w: w / window,
                    c,
                })
            }
            Layer::Relu => Ok(input),
            Layer::Flatten => Ok(Shape::Flat(input.len())),
        }
    }

    /// Structured evaluation on a single flattened tensor.
    fn apply(&self, input: Shape, x: ArrayView1<f64>) -> Array1<f64> {
        match self {
            Layer::Dense { weight, bias } => weight.dot(&x) + bias,
            Layer::Conv2d {
                kernel,
                bias,
                stride,
                padding,
            } => {
                let Shape::Image { h, w, c } = input else {
                    unreachable!("validated at load")
                };
                let (oc, _, kh, kw) = kernel.dim();
                let oh = (h + 2 * padding - kh) / stride + 1;
                let ow = (w + 2 * padding - kw) / stride + 1;
                let mut out = Array1::zeros(oh * ow * oc);
                for oy in 0..oh {
                    for ox in 0..ow {
                        for o in 0..oc {
                            let mut acc = bias[o];
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - *padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - *padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let base = (iy as usize * w + ix as usize) * c;
                                    for ch in 0..c {
                                        acc += kernel[[o, ch, ky, kx]] * x[base + ch];
                                    }
                                }
                            }
                            out[(oy * ow + ox) * oc + o] = acc;
                        }
                    }
                }
                out
            }
            Layer::AvgPool2d { window } => {
                let Shape::Image { h, w, c } = input else {
                    unreachable!("validated at load")
                };
                let (oh, ow) = (h / window, w / window);
                let scale = 1.0 / (window * window) as f64;
                let mut out = Array1::zeros(oh * ow * c);
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let mut acc = 0.0;
                            for dy in 0..*window {
                                for dx in 0..*window {
                                    let iy = oy * window + dy;
                                    let ix = ox * window + dx;
                                    acc += x[(iy * w + ix) * c + ch];
                                }
                            }
                            out[(oy * ow + ox) * c + ch] = acc * scale;
                        }
                    }
                }
                out
            }
            Layer::Relu => x.mapv(|v| v.max(0.0)),
            Layer::Flatten => x.to_owned(),
        }
    }

    /// Explicit matrix form `(W, b)` of a linear layer, `W` of shape (out, in).
    ///
    /// Column `j` of `W` is the layer's response to the `j`-th unit vector
    /// minus the bias, so the expansion is exact for every linear kind.
    pub fn matrix_form(&self, input: Shape) -> Option<(Array2<f64>, Array1<f64>)> {
        match self {
            Layer::Relu => None,
            Layer::Dense { weight, bias } => Some((weight.clone(), bias.clone())),
            Layer::Flatten => Some((Array2::eye(input.len()), Array1::zeros(input.len()))),
            Layer::Conv2d { .. } | Layer::AvgPool2d { .. } => {
                let n_in = input.len();
                let bias = self.apply(input, Array1::zeros(n_in).view());
                let mut weight = Array2::zeros((bias.len(), n_in));
                let mut unit = Array1::zeros(n_in);
                for j in 0..n_in {
                    unit[j] = 1.0;
                    let col = self.apply(input, unit.view()) - &bias;
                    weight.column_mut(j).assign(&col);
                    unit[j] = 0.0;
                }
                Some((weight, bias))
            }
        }
    }
}

/// A validated feed-forward ReLU network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Shape,
    layers: Vec<Layer>,
    shapes: Vec<Shape>,
}

impl Network {
    pub fn new(input_shape: Shape, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() {
            return Err(Error::Malformed("empty input shape".into()));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut current = input_shape;
        for (i, layer) in layers.iter().enumerate() {
            current = layer.output_shape(i, current)?;
            shapes.push(current);
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.len()
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().copied().unwrap_or(self.input_shape).len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    fn input_shape_of(&self, layer: usize) -> Shape {
        if layer == 0 {
            self.input_shape
        } else {
            self.shapes[layer - 1]
        }
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                actual: len,
            });
        }
        Ok(())
    }

    /// Exact network output for one input.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_input(x.len())?;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(self.input_shape_of(i), h.view());
        }
        Ok(h)
    }

    /// Pre-activation values feeding every ReLU layer, layer-by-layer in the
    /// structured form. Entry `k` has shape (batch, width of the `k`-th ReLU).
    pub fn pre_activations(&self, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        self.check_input(x.ncols())?;
        if x.nrows() == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        let widths: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Relu))
            .map(|(i, _)| self.shapes[i].len())
            .collect();
        let mut out: Vec<Array2<f64>> = widths
            .iter()
            .map(|&w| Array2::zeros((x.nrows(), w)))
            .collect();
        for (row, sample) in x.axis_iter(Axis(0)).enumerate() {
            let mut h = sample.to_owned();
            let mut k = 0;
            for (i, layer) in self.layers.iter().enumerate() {
                if matches!(layer, Layer::Relu) {
                    out[k].row_mut(row).assign(&h);
                    k += 1;
                }
                h = layer.apply(self.input_shape_of(i), h.view());
            }
        }
        Ok(out)
    }

    /// The network `f_O` with `f_O(x)_j = c_j . f(x) + d_j`.
    pub fn append_output_spec(&self, spec: &OutputSpec) -> Result<Network> {
        spec.validate()?;
        if spec.c.ncols() != self.output_dim() {
            return Err(Error::Dimension {
                expected: self.output_dim(),
                actual: spec.c.ncols(),
            });
        }
        let mut layers = self.layers.clone();
        if matches!(self.shapes.last(), Some(Shape::Image { .. }))
            || (self.layers.is_empty() && matches!(self.input_shape, Shape::Image { .. }))
        {
            layers.push(Layer::Flatten);
        }
        layers.push(Layer::Dense {
            weight: spec.c.clone(),
            bias: spec.d.clone(),
        });
        Network::new(self.input_shape, layers)
    }

    /// Lower into alternating affine maps and ReLUs.
    pub fn compile(&self) -> CompiledNet {
        let mut affines = Vec::new();
        let mut current: Option<Affine> = None;
        let mut dim = self.input_dim();
        for (i, layer) in self.layers.iter().enumerate() {
            let input = self.input_shape_of(i);
            match layer.matrix_form(input) {
                Some((w, b)) => {
                    current = Some(match current.take() {
                        None => Affine { weight: w, bias: b },
                        Some(prev) => Affine {
                            bias: w.dot(&prev.bias) + &b,
                            weight: w.dot(&prev.weight),
                        },
                    });
                    dim = self.shapes[i].len();
                }
                None => {
                    affines.push(current.take().unwrap_or_else(|| Affine::identity(dim)));
                }
            }
        }
        affines.push(current.unwrap_or_else(|| Affine::identity(dim)));
        CompiledNet { affines }
    }

    pub fn to_model_file(&self) -> ModelFile {
        ModelFile {
            input_shape: self.input_shape.dims(),
            layers: self.layers.iter().map(LayerSpec::from).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_model_file()).expect("model serialization is infallible")
    }
}

/// Parse and validate a JSON model file.
pub fn load_model(bytes: &[u8]) -> Result<Network> {
    let file: ModelFile =
        serde_json::from_slice(bytes).map_err(|e| Error::Malformed(e.to_string()))?;
    file.into_network()
}

/// On-disk model layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        weight: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    Conv2d {
        kernel: Vec<Vec<Vec<Vec<f64>>>>,
        bias: Vec<f64>,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Avgpool2d {
        window: usize,
    },
    Relu,
    Flatten,
}

fn one() -> usize {
    1
}

impl ModelFile {
    pub fn into_network(self) -> Result<Network> {
        let shape = Shape::from_dims(&self.input_shape)?;
        let layers = self
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, spec)| spec.into_layer(i))
            .collect::<Result<Vec<_>>>()?;
        Network::new(shape, layers)
    }
}

fn dense_matrix(rows: &[Vec<f64>], layer: usize, what: &str) -> Result<Array2<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Layer {
            layer,
            message: format!("{what} rows have inconsistent lengths"),
        });
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), ncols), flat).map_err(|e| Error::Layer {
        layer,
        message: e.to_string(),
    })
}

impl LayerSpec {
    fn into_layer(self, index: usize) -> Result<Layer> {
        Ok(match self {
            LayerSpec::Dense { weight, bias } => Layer::Dense {
                weight: dense_matrix(&weight, index, "dense weight")?,
                bias: Array1::from(bias),
            },
            LayerSpec::Conv2d {
                kernel,
                bias,
                stride,
                padding,
            } => {
                let oc = kernel.len();
                let ic = kernel.first().map_or(0, Vec::len);
                let kh = kernel.first().and_then(|k| k.first()).map_or(0, Vec::len);
                let kw = kernel
                    .first()
                    .and_then(|k| k.first())
                    .and_then(|k| k.first())
                    .map_or(0, Vec::len);
                let mut flat = Vec::with_capacity(oc * ic * kh * kw);
                for per_out in &kernel {
                    if per_out.len() != ic {
                        return Err(Error::Layer {
                            layer: index,
                            message: "conv2d kernel has ragged input-channel dimension".into(),
                        });
                    }
                    for per_in in per_out {
                        if per_in.len() != kh || per_in.iter().any(|r| r.len() != kw) {
                            return Err(Error::Layer {
                                layer: index,
                                message: "conv2d kernel has ragged spatial dimensions".into(),
                            });
                        }
                        flat.extend(per_in.iter().flatten());
                    }
                }
                Layer::Conv2d {
                    kernel: Array4::from_shape_vec((oc, ic, kh, kw), flat).map_err(|e| {
                        Error::Layer {
                            layer: index,
                            message: e.to_string(),
                        }
                    })?,
                    bias: Array1::from(bias),
                    stride,
                    padding,
                }
            }
            LayerSpec::Avgpool2d { window } => Layer::AvgPool2d { window },
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Flatten => Layer::Flatten,
        })
    }
}

impl From<&Layer> for LayerSpec {
    fn from(layer: &Layer) -> Self {
        match layer {
            Layer::Dense { weight, bias } => LayerSpec::Dense {
                weight: weight.outer_iter().map(|r| r.to_vec()).collect(),
                bias: bias.to_vec(),
            },
            Layer::Conv2d {
                kernel,
                bias,
                stride,
                padding,
            } => LayerSpec::Conv2d {
                kernel: kernel
                    .outer_iter()
                    .map(|o| {
                        o.outer_iter()
                            .map(|i| i.outer_iter().map(|r| r.to_vec()).collect())
                            .collect()
                    })
                    .collect(),
                bias: bias.to_vec(),
                stride: *stride,
                padding: *padding,
            },
            Layer::AvgPool2d { window } => LayerSpec::Avgpool2d { window: *window },
            Layer::Relu => LayerSpec::Relu,
            Layer::Flatten => LayerSpec::Flatten,
        }
    }
}

/// Output specification `{y : C y + d >= 0}` with one row per constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSpec {
    pub c: Array2<f64>,
    pub d: Array1<f64>,
}

impl OutputSpec {
    pub fn new(c: Array2<f64>, d: Array1<f64>) -> Result<Self> {
        let spec = Self { c, d };
        spec.validate()?;
        Ok(spec)
    }

    /// Rows `e_label - e_j` for every other class `j`: the label keeps the
    /// highest logit.
    pub fn class_dominance(label: usize, num_classes: usize) -> Result<Self> {
        if label >= num_classes || num_classes < 2 {
            return Err(Error::Config(format!(
                "label {label} out of range for {num_classes} classes"
            )));
        }
        let mut c = Array2::zeros((num_classes - 1, num_classes));
        for (row, j) in (0..num_classes).filter(|&j| j != label).enumerate() {
            c[[row, label]] = 1.0;
            c[[row, j]] = -1.0;
        }
        Self::new(c, Array1::zeros(num_classes - 1))
    }

    pub fn num_constraints(&self) -> usize {
        self.c.nrows()
    }

    pub fn contains(&self, y: ArrayView1<f64>) -> bool {
        (self.c.dot(&y) + &self.d).iter().all(|&v| v >= 0.0)
    }

    fn validate(&self) -> Result<()> {
        if self.c.nrows() == 0 {
            return Err(Error::Config("output specification needs at least one row".into()));
        }
        if self.c.nrows() != self.d.len() {
            return Err(Error::Config(format!(
                "specification has {} rows but {} offsets",
                self.c.nrows(),
                self.d.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// `y = A_R relu(A_{R-1} relu(... relu(A_0 x)))`.
///
/// ReLU layer `k` acts on `z^k = A_k(h^{k-1})`; the final affine map produces
/// the output.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledNet {
    pub affines: Vec<Affine>,
}

impl CompiledNet {
    pub fn num_relu_layers(&self) -> usize {
        self.affines.len() - 1
    }

    pub fn relu_widths(&self) -> Vec<usize> {
        self.affines[..self.affines.len() - 1]
            .iter()
            .map(Affine::out_dim)
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.affines[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.affines.last().expect("at least one affine").out_dim()
    }

    /// Pre-activations of every ReLU layer and the outputs, rows are samples.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        let mut pre = Vec::with_capacity(self.num_relu_layers());
        let mut h = x.to_owned();
        for (k, affine) in self.affines.iter().enumerate() {
            let z = h.dot(&affine.weight.t()) + &affine.bias;
            if k + 1 == self.affines.len() {
                return (pre, z);
            }
            h = z.mapv(|v| v.max(0.0));
            pre.push(z);
        }
        unreachable!("affines is never empty")
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let mut h = x.to_owned();
        let last = self.affines.len() - 1;
        for (k, affine) in self.affines.iter().enumerate() {
            let z = affine.weight.dot(&h) + &affine.bias;
            h = if k == last { z } else { z.mapv(|v| v.max(0.0)) };
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_layer_json() -> &'static str {
        r#"{"input_shape": [2], "layers": [
            {"kind": "flatten"},
            {"kind": "dense", "weight": [[1,0],[0,1],[1,1],[1,-1]], "bias": [0,0,-1,0.5]},
            {"kind": "relu"},
            {"kind": "dense", "weight": [[1,0,0,1],[0,1,1,0]], "bias": [0,0]},
            {"kind": "relu"}
        ]}"#
    }

    #[test]
    fn loads_dense_fixture() {
        let net = load_model(two_layer_json().as_bytes()).unwrap();
        assert_eq!(net.layers().len(), 5);
        assert_eq!(net.input_dim(), 2);
        assert_eq!(net.output_dim(), 2);
        assert_eq!(net.compile().num_relu_layers(), 2);
    }

    #[test]
    fn relu_on_raw_input_is_accepted() {
        let json = r#"{"input_shape": [3], "layers": [{"kind": "relu"},
            {"kind": "dense", "weight": [[1,2,3]], "bias": [0]}]}"#;
        let net = load_model(json.as_bytes()).unwrap();
        let y = net.forward(array![-1.0, 1.0, 2.0].view()).unwrap();
        assert_eq!(y, array![8.0]);
        let compiled = net.compile();
        assert_eq!(compiled.affines[0].weight, Array2::<f64>::eye(3));
    }

    #[test]
    fn wrong_row_count_names_the_layer() {
        let json = r#"{"input_shape": [2], "layers": [
            {"kind": "dense", "weight": [[1,0],[0,1]], "bias": [0,0]},
            {"kind": "relu"},
            {"kind": "dense", "weight": [[1,0,0]], "bias": [0]}]}"#;
        let err = load_model(json.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Layer { layer: 2, .. }), "{err}");
    }

    #[test]
    fn unsupported_kind_is_rejected() {
        let json = r#"{"input_shape": [2], "layers": [{"kind": "sigmoid"}]}"#;
        assert!(matches!(
            load_model(json.as_bytes()),
            Err(Error::Malformed(_))
        ));
    }

    #[test]
    fn identity_and_relu_forward() {
        let id = Network::new(
            Shape::Flat(2),
            vec![Layer::Dense {
                weight: Array2::eye(2),
                bias: Array1::zeros(2),
            }],
        )
        .unwrap();
        assert_eq!(id.forward(array![1.0, -2.0].view()).unwrap(), array![1.0, -2.0]);

        let relu = Network::new(Shape::Flat(1), vec![Layer::Relu]).unwrap();
        assert_eq!(relu.forward(array![-3.0].view()).unwrap(), array![0.0]);
        assert!(matches!(
            relu.forward(array![1.0, 2.0].view()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn pre_activations_scalar() {
        let net = Network::new(
            Shape::Flat(1),
            vec![
                Layer::Dense {
                    weight: array![[2.0]],
                    bias: array![0.0],
                },
                Layer::Relu,
            ],
        )
        .unwrap();
        let z = net.pre_activations(array![[-1.0], [1.0]].view()).unwrap();
        assert_eq!(z[0], array![[-2.0], [2.0]]);
    }

    #[test]
    fn output_spec_appends_linear_layer() {
        let net = load_model(two_layer_json().as_bytes()).unwrap();
        let spec = OutputSpec::new(array![[1.0, -1.0]], array![0.0]).unwrap();
        let fo = net.append_output_spec(&spec).unwrap();
        let x = array![0.3, -0.7];
        let y = net.forward(x.view()).unwrap();
        assert_eq!(fo.forward(x.view()).unwrap(), array![y[0] - y[1]]);
        assert_eq!(net.layers().len(), 5);

        let bad = OutputSpec::new(array![[1.0, 0.0, 0.0]], array![0.0]).unwrap();
        assert!(net.append_output_spec(&bad).is_err());
    }

    #[test]
    fn class_dominance_rows() {
        let spec = OutputSpec::class_dominance(1, 3).unwrap();
        assert_eq!(spec.c, array![[-1.0, 1.0, 0.0], [0.0, 1.0, -1.0]]);
        assert!(spec.contains(array![0.0, 2.0, 1.0].view()));
        assert!(!spec.contains(array![3.0, 2.0, 1.0].view()));
    }

    #[test]
    fn model_file_roundtrip() {
        let net = load_model(two_layer_json().as_bytes()).unwrap();
        let again = load_model(net.to_json().as_bytes()).unwrap();
        assert_eq!(net, again);
    }
}
