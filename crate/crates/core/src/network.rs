//! Feed-forward ReLU networks: dense and conv2d layers, JSON model loading,
//! property encoding, and the linear-map plumbing the rest of the crate
//! builds on.
//!
//! Layer `i` maps the post-activations of layer `i-1` to the pre-activations
//! of layer `i`; a ReLU sits between consecutive affine layers and never
//! after the last one. Conv activations are flattened channel-major, so unit
//! `(c, y, x)` of a `(channels, height, width)` volume has flat index
//! `c * height * width + y * width + x`.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("failed to read model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse model JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("model has no layers")]
    Empty,
    #[error("layer {layer}: expected input size {expected}, found {found}")]
    ShapeMismatch {
        layer: usize,
        expected: usize,
        found: usize,
    },
    #[error("layer {layer}: {what}")]
    BadLayer { layer: usize, what: String },
    #[error("layer {layer}: non-finite weight or bias")]
    NonFinite { layer: usize },
    #[error("label {label} out of range for output size {outputs}")]
    BadLabel { label: usize, outputs: usize },
    #[error("input has size {found}, network expects {expected}")]
    BadInput { expected: usize, found: usize },
}

/// One affine layer. Weights are stored exactly as loaded; conv kernels are
/// `out_channels x in_channels x kernel_h x kernel_w`.
#[derive(Debug, Clone)]
pub enum Layer {
    Dense {
        weight: Array2<f64>,
        bias: Array1<f64>,
    },
    Conv2d {
        weight: Array4<f64>,
        bias: Array1<f64>,
        stride: (usize, usize),
        padding: (usize, usize),
        /// `(channels, height, width)` of the incoming volume.
        input_shape: (usize, usize, usize),
    },
}

impl Layer {
    pub fn in_size(&self) -> usize {
        match self {
            Layer::Dense { weight, .. } => weight.ncols(),
            Layer::Conv2d { input_shape, .. } => input_shape.0 * input_shape.1 * input_shape.2,
        }
    }

    pub fn out_size(&self) -> usize {
        match self {
            Layer::Dense { weight, .. } => weight.nrows(),
            Layer::Conv2d { .. } => {
                let (c, h, w) = self.conv_output_shape().expect("conv layer");
                c * h * w
            }
        }
    }

    /// Output volume of a conv layer: each spatial extent is
    /// `floor((in + 2 * pad - kernel) / stride) + 1`.
    pub fn conv_output_shape(&self) -> Option<(usize, usize, usize)> {
        match self {
            Layer::Dense { .. } => None,
            Layer::Conv2d {
                weight,
                stride,
                padding,
                input_shape,
                ..
            } => {
                let (kh, kw) = (weight.shape()[2], weight.shape()[3]);
                let oh = (input_shape.1 + 2 * padding.0).checked_sub(kh)? / stride.0 + 1;
                let ow = (input_shape.2 + 2 * padding.1).checked_sub(kw)? / stride.1 + 1;
                Some((weight.shape()[0], oh, ow))
            }
        }
    }

    /// Per-unit bias over the flattened output: conv biases repeat across
    /// spatial positions of their channel.
    pub fn bias_flat(&self) -> Array1<f64> {
        match self {
            Layer::Dense { bias, .. } => bias.clone(),
            Layer::Conv2d { bias, .. } => {
                let (c, h, w) = self.conv_output_shape().expect("conv layer");
                let mut out = Array1::zeros(c * h * w);
                for ch in 0..c {
                    for p in 0..h * w {
                        out[ch * h * w + p] = bias[ch];
                    }
                }
                out
            }
        }
    }

    /// Applies the layer's linear part (no bias) to one flattened vector.
    pub fn apply_vec(&self, v: ArrayView1<f64>) -> Array1<f64> {
        self.map_vec(v, MapKind::Forward)
    }

    /// Adjoint of [`Layer::apply_vec`]: multiplies by the transposed weight
    /// matrix, mapping a vector over outputs back onto the inputs.
    pub fn apply_transpose_vec(&self, v: ArrayView1<f64>) -> Array1<f64> {
        self.map_vec(v, MapKind::Transpose)
    }

    /// Like [`Layer::apply_vec`] with every coefficient replaced by its
    /// absolute value; used for interval radius propagation.
    pub fn apply_abs_vec(&self, v: ArrayView1<f64>) -> Array1<f64> {
        self.map_vec(v, MapKind::ForwardAbs)
    }

    fn map_vec(&self, v: ArrayView1<f64>, kind: MapKind) -> Array1<f64> {
        match self {
            Layer::Dense { weight, .. } => match kind {
                MapKind::Forward => weight.dot(&v),
                MapKind::Transpose => weight.t().dot(&v),
                MapKind::ForwardAbs => weight.mapv(f64::abs).dot(&v),
            },
            Layer::Conv2d {
                weight,
                stride,
                padding,
                input_shape,
                ..
            } => {
                let (ic, ih, iw) = *input_shape;
                let (oc, oh, ow) = self.conv_output_shape().expect("conv layer");
                let (kh, kw) = (weight.shape()[2], weight.shape()[3]);
                let mut out = Array1::zeros(match kind {
                    MapKind::Transpose => ic * ih * iw,
                    _ => oc * oh * ow,
                });
                for o in 0..oc {
                    for y in 0..oh {
                        for x in 0..ow {
                            let oidx = o * oh * ow + y * ow + x;
                            for i in 0..ic {
                                for ky in 0..kh {
                                    let iy = (y * stride.0 + ky) as isize - padding.0 as isize;
                                    if iy < 0 || iy >= ih as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (x * stride.1 + kx) as isize - padding.1 as isize;
                                        if ix < 0 || ix >= iw as isize {
                                            continue;
                                        }
                                        let iidx =
                                            i * ih * iw + iy as usize * iw + ix as usize;
                                        let w = weight[[o, i, ky, kx]];
                                        match kind {
                                            MapKind::Forward => out[oidx] += w * v[iidx],
                                            MapKind::ForwardAbs => out[oidx] += w.abs() * v[iidx],
                                            MapKind::Transpose => out[iidx] += w * v[oidx],
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                out
            }
        }
    }

    /// Nonzero coefficients of one output unit's row of the (virtual)
    /// unrolled weight matrix, as `(input_unit, coefficient)` pairs.
    pub fn row_coeffs(&self, out_unit: usize) -> Vec<(usize, f64)> {
        match self {
            Layer::Dense { weight, .. } => weight
                .row(out_unit)
                .iter()
                .enumerate()
                .filter(|(_, &w)| w != 0.0)
                .map(|(j, &w)| (j, w))
                .collect(),
            Layer::Conv2d {
                weight,
                stride,
                padding,
                input_shape,
                ..
            } => {
                let (ic, ih, iw) = *input_shape;
                let (_, oh, ow) = self.conv_output_shape().expect("conv layer");
                let (kh, kw) = (weight.shape()[2], weight.shape()[3]);
                let o = out_unit / (oh * ow);
                let y = (out_unit / ow) % oh;
                let x = out_unit % ow;
                let mut coeffs = Vec::new();
                for i in 0..ic {
                    for ky in 0..kh {
                        let iy = (y * stride.0 + ky) as isize - padding.0 as isize;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (x * stride.1 + kx) as isize - padding.1 as isize;
                            if ix < 0 || ix >= iw as isize {
                                continue;
                            }
                            let w = weight[[o, i, ky, kx]];
                            if w != 0.0 {
                                coeffs.push((i * ih * iw + iy as usize * iw + ix as usize, w));
                            }
                        }
                    }
                }
                coeffs
            }
        }
    }

    /// How many output units each input unit feeds. Dense layers connect
    /// every input to every output; for conv layers this counts the kernel
    /// placements (output spatial positions) covering the input position,
    /// which is what the backward message mean uses.
    pub fn fanout_counts(&self) -> Array1<f64> {
        match self {
            Layer::Dense { weight, .. } => {
                Array1::from_elem(weight.ncols(), weight.nrows() as f64)
            }
            Layer::Conv2d {
                weight,
                stride,
                padding,
                input_shape,
                ..
            } => {
                let (ic, ih, iw) = *input_shape;
                let (_, oh, ow) = self.conv_output_shape().expect("conv layer");
                let (kh, kw) = (weight.shape()[2], weight.shape()[3]);
                let mut counts = Array1::zeros(ic * ih * iw);
                for y in 0..oh {
                    for x in 0..ow {
                        for ky in 0..kh {
                            let iy = (y * stride.0 + ky) as isize - padding.0 as isize;
                            if iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (x * stride.1 + kx) as isize - padding.1 as isize;
                                if ix < 0 || ix >= iw as isize {
                                    continue;
                                }
                                for i in 0..ic {
                                    counts[i * ih * iw + iy as usize * iw + ix as usize] += 1.0;
                                }
                            }
                        }
                    }
                }
                counts
            }
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Layer::Dense { weight, bias } => {
                weight.iter().all(|w| w.is_finite()) && bias.iter().all(|b| b.is_finite())
            }
            Layer::Conv2d { weight, bias, .. } => {
                weight.iter().all(|w| w.is_finite()) && bias.iter().all(|b| b.is_finite())
            }
        }
    }
}

enum MapKind {
    Forward,
    ForwardAbs,
    Transpose,
}

/// Applies the layer's linear part (no bias) independently to each column of
/// `m`, e.g. to a stack of embedding dimensions.
pub fn linear_map(layer: &Layer, m: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((layer.out_size(), m.ncols()));
    for (j, col) in m.columns().into_iter().enumerate() {
        out.column_mut(j).assign(&layer.apply_vec(col));
    }
    out
}

/// Column-wise adjoint of [`linear_map`].
pub fn linear_map_transpose(layer: &Layer, m: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((layer.in_size(), m.ncols()));
    for (j, col) in m.columns().into_iter().enumerate() {
        out.column_mut(j).assign(&layer.apply_transpose_vec(col));
    }
    out
}

/// A stack of affine layers with ReLUs in between (none after the last).
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    /// Validates layer chaining: each layer's input size must match the
    /// previous layer's output size.
    pub fn new(layers: Vec<Layer>) -> Result<Self, NetworkError> {
        if layers.is_empty() {
            return Err(NetworkError::Empty);
        }
        for (i, layer) in layers.iter().enumerate() {
            if !layer.is_finite() {
                return Err(NetworkError::NonFinite { layer: i });
            }
            if let Layer::Conv2d { weight, .. } = layer {
                if layer.conv_output_shape().is_none() {
                    return Err(NetworkError::BadLayer {
                        layer: i,
                        what: format!(
                            "kernel {}x{} larger than padded input",
                            weight.shape()[2],
                            weight.shape()[3]
                        ),
                    });
                }
            }
            if i > 0 {
                let expected = layers[i - 1].out_size();
                let found = layer.in_size();
                if expected != found {
                    return Err(NetworkError::ShapeMismatch {
                        layer: i,
                        expected,
                        found,
                    });
                }
            }
        }
        Ok(Network { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Number of affine layers.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Number of hidden ReLU layers (one fewer than the affine depth).
    pub fn num_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].in_size()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().unwrap().out_size()
    }

    /// Width of the pre-activation vector produced by affine layer `i`
    /// (0-based).
    pub fn layer_out_size(&self, i: usize) -> usize {
        self.layers[i].out_size()
    }

    /// Full forward pass.
    pub fn eval(&self, x: ArrayView1<f64>) -> Result<Array1<f64>, NetworkError> {
        if x.len() != self.input_size() {
            return Err(NetworkError::BadInput {
                expected: self.input_size(),
                found: x.len(),
            });
        }
        let mut cur = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.apply_vec(cur.view()) + layer.bias_flat();
            if i + 1 < self.layers.len() {
                cur.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(cur)
    }

    /// Scalar forward pass for property networks.
    pub fn eval_scalar(&self, x: ArrayView1<f64>) -> Result<f64, NetworkError> {
        let out = self.eval(x)?;
        Ok(out[0])
    }
}

/// Axis-aligned input region `[lower, upper]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBox {
    pub lower: Array1<f64>,
    pub upper: Array1<f64>,
}

impl InputBox {
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: ArrayView1<f64>, tol: f64) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(&v, (&l, &u))| v >= l - tol && v <= u + tol)
    }

    /// Clamps a point onto the box, coordinate by coordinate.
    pub fn project(&self, x: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_iter(
            x.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(&v, (&l, &u))| v.clamp(l, u)),
        )
    }
}

/// Perturbation box `[center - eps, center + eps]`, optionally clamped to
/// the unit hypercube as image domains are.
pub fn make_box(center: ArrayView1<f64>, eps: f64, clamp: bool) -> InputBox {
    let (mut lower, mut upper) = (center.to_owned() - eps, center.to_owned() + eps);
    if clamp {
        lower.mapv_inplace(|v| v.clamp(0.0, 1.0));
        upper.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    InputBox { lower, upper }
}

/// A scalar-output network together with the input box it is checked over.
/// The property holds when the output is nonnegative on the whole box.
#[derive(Debug, Clone)]
pub struct VerificationProblem {
    pub network: Network,
    pub input_box: InputBox,
}

/// Rewrites a `k`-class network into a scalar property network whose output
/// is `out[label] - out[rival]`. The difference row is folded into the final
/// affine layer, so no ReLU separates it from the rest of the network.
pub fn encode_property(
    net: &Network,
    label: usize,
    rival: usize,
) -> Result<Network, NetworkError> {
    let outputs = net.output_size();
    if label >= outputs || rival >= outputs || label == rival {
        return Err(NetworkError::BadLabel {
            label: label.max(rival),
            outputs,
        });
    }
    let last = net.layers.last().unwrap();
    let in_size = last.in_size();
    let mut row = Array2::zeros((1, in_size));
    for (j, w) in last.row_coeffs(label) {
        row[[0, j]] += w;
    }
    for (j, w) in last.row_coeffs(rival) {
        row[[0, j]] -= w;
    }
    let bias_flat = last.bias_flat();
    let bias = Array1::from_elem(1, bias_flat[label] - bias_flat[rival]);
    let mut layers: Vec<Layer> = net.layers[..net.layers.len() - 1].to_vec();
    layers.push(Layer::Dense { weight: row, bias });
    Network::new(layers)
}

#[derive(Deserialize, Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LayerSpec {
    Dense {
        weight: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    Conv2d {
        weight: Vec<Vec<Vec<Vec<f64>>>>,
        bias: Vec<f64>,
        stride: [usize; 2],
        padding: [usize; 2],
        input_shape: [usize; 3],
    },
}

#[derive(Deserialize, Serialize)]
struct NetworkSpec {
    layers: Vec<LayerSpec>,
}

fn layer_from_spec(idx: usize, spec: LayerSpec) -> Result<Layer, NetworkError> {
    match spec {
        LayerSpec::Dense { weight, bias } => {
            let rows = weight.len();
            let cols = weight.first().map_or(0, Vec::len);
            if rows == 0 || cols == 0 || weight.iter().any(|r| r.len() != cols) {
                return Err(NetworkError::BadLayer {
                    layer: idx,
                    what: "dense weight matrix is empty or ragged".into(),
                });
            }
            if bias.len() != rows {
                return Err(NetworkError::BadLayer {
                    layer: idx,
                    what: format!("bias length {} does not match {} rows", bias.len(), rows),
                });
            }
            let weight =
                Array2::from_shape_vec((rows, cols), weight.into_iter().flatten().collect())
                    .expect("dimensions checked above");
            Ok(Layer::Dense {
                weight,
                bias: Array1::from_vec(bias),
            })
        }
        LayerSpec::Conv2d {
            weight,
            bias,
            stride,
            padding,
            input_shape,
        } => {
            let oc = weight.len();
            let ic = weight.first().map_or(0, Vec::len);
            let kh = weight.first().and_then(|w| w.first()).map_or(0, Vec::len);
            let kw = weight
                .first()
                .and_then(|w| w.first())
                .and_then(|w| w.first())
                .map_or(0, Vec::len);
            let mut flat = Vec::with_capacity(oc * ic * kh * kw);
            for per_out in &weight {
                if per_out.len() != ic {
                    return Err(NetworkError::BadLayer {
                        layer: idx,
                        what: "ragged conv kernel".into(),
                    });
                }
                for per_in in per_out {
                    if per_in.len() != kh || per_in.iter().any(|r| r.len() != kw) {
                        return Err(NetworkError::BadLayer {
                            layer: idx,
                            what: "ragged conv kernel".into(),
                        });
                    }
                    for r in per_in {
                        flat.extend_from_slice(r);
                    }
                }
            }
            if oc == 0 || ic == 0 || kh == 0 || kw == 0 {
                return Err(NetworkError::BadLayer {
                    layer: idx,
                    what: "empty conv kernel".into(),
                });
            }
            if bias.len() != oc {
                return Err(NetworkError::BadLayer {
                    layer: idx,
                    what: format!(
                        "bias length {} does not match {} output channels",
                        bias.len(),
                        oc
                    ),
                });
            }
            if ic != input_shape[0] {
                return Err(NetworkError::BadLayer {
                    layer: idx,
                    what: format!(
                        "kernel expects {} input channels, input_shape has {}",
                        ic, input_shape[0]
                    ),
                });
            }
            if stride[0] == 0 || stride[1] == 0 {
                return Err(NetworkError::BadLayer {
                    layer: idx,
                    what: "stride must be positive".into(),
                });
            }
            Ok(Layer::Conv2d {
                weight: Array4::from_shape_vec((oc, ic, kh, kw), flat)
                    .expect("dimensions checked above"),
                bias: Array1::from_vec(bias),
                stride: (stride[0], stride[1]),
                padding: (padding[0], padding[1]),
                input_shape: (input_shape[0], input_shape[1], input_shape[2]),
            })
        }
    }
}

/// Loads a model from its JSON description and validates layer chaining.
pub fn load_network(path: &Path) -> Result<Network, NetworkError> {
    let text = std::fs::read_to_string(path)?;
    parse_network(&text)
}

/// Parses a model from JSON text; see the README for the schema.
pub fn parse_network(text: &str) -> Result<Network, NetworkError> {
    let spec: NetworkSpec = serde_json::from_str(text)?;
    let layers = spec
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, s)| layer_from_spec(i, s))
        .collect::<Result<Vec<_>, _>>()?;
    Network::new(layers)
}

/// Serialises a model back to the JSON schema accepted by [`load_network`].
pub fn network_to_json(net: &Network) -> String {
    let layers = net
        .layers
        .iter()
        .map(|layer| match layer {
            Layer::Dense { weight, bias } => LayerSpec::Dense {
                weight: weight
                    .rows()
                    .into_iter()
                    .map(|r| r.to_vec())
                    .collect(),
                bias: bias.to_vec(),
            },
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
                input_shape,
            } => LayerSpec::Conv2d {
                weight: (0..weight.shape()[0])
                    .map(|o| {
                        (0..weight.shape()[1])
                            .map(|i| {
                                (0..weight.shape()[2])
                                    .map(|ky| {
                                        (0..weight.shape()[3])
                                            .map(|kx| weight[[o, i, ky, kx]])
                                            .collect()
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect(),
                bias: bias.to_vec(),
                stride: [stride.0, stride.1],
                padding: [padding.0, padding.1],
                input_shape: [input_shape.0, input_shape.1, input_shape.2],
            },
        })
        .collect();
    serde_json::to_string_pretty(&NetworkSpec { layers }).expect("model serialisation")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_dense() -> Network {
        Network::new(vec![
            Layer::Dense {
                weight: array![[1.0, -1.0], [0.5, 2.0]],
                bias: array![0.0, -1.0],
            },
            Layer::Dense {
                weight: array![[1.0, 1.0]],
                bias: array![0.25],
            },
        ])
        .unwrap()
    }

    #[test]
    fn eval_applies_relu_between_but_not_after() {
        let net = toy_dense();
        let out = net.eval(array![1.0, 2.0].view()).unwrap();
        // pre1 = (-1.0, 3.5) -> post (0.0, 3.5) -> 3.5 + 0.25
        assert_eq!(out[0], 3.75);
        let out = net.eval(array![-4.0, 0.0].view()).unwrap();
        // pre1 = (-4, -3) -> post (0, 0) -> 0.25, no final ReLU clamp
        assert_eq!(out[0], 0.25);
        let net_neg = Network::new(vec![Layer::Dense {
            weight: array![[1.0]],
            bias: array![-2.0],
        }])
        .unwrap();
        assert_eq!(net_neg.eval(array![0.0].view()).unwrap()[0], -2.0);
    }

    #[test]
    fn conv_output_shape_matches_formula() {
        let layer = Layer::Conv2d {
            weight: Array4::zeros((8, 3, 4, 4)),
            bias: Array1::zeros(8),
            stride: (2, 2),
            padding: (1, 1),
            input_shape: (3, 32, 32),
        };
        assert_eq!(layer.conv_output_shape(), Some((8, 16, 16)));
        assert_eq!(layer.out_size(), 8 * 16 * 16);
    }

    #[test]
    fn shape_mismatch_names_offending_layer() {
        let err = Network::new(vec![
            Layer::Dense {
                weight: array![[1.0, 0.0]],
                bias: array![0.0],
            },
            Layer::Dense {
                weight: array![[1.0, 1.0]],
                bias: array![0.0],
            },
        ])
        .unwrap_err();
        match err {
            NetworkError::ShapeMismatch {
                layer,
                expected,
                found,
            } => {
                assert_eq!((layer, expected, found), (1, 1, 2));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn non_finite_weights_rejected() {
        let err = parse_network(
            r#"{"layers":[{"type":"dense","weight":[[1.0,null]],"bias":[0.0]}]}"#,
        );
        assert!(err.is_err());
        let err = Network::new(vec![Layer::Dense {
            weight: array![[f64::NAN]],
            bias: array![0.0],
        }]);
        assert!(matches!(err, Err(NetworkError::NonFinite { layer: 0 })));
    }

    #[test]
    fn clamped_box_stays_in_unit_cube() {
        let b = make_box(array![0.1, 0.95].view(), 0.2, true);
        assert!((b.lower[0] - 0.0).abs() < 1e-15);
        assert!((b.lower[1] - 0.75).abs() < 1e-15);
        assert!((b.upper[0] - 0.3).abs() < 1e-15);
        assert!((b.upper[1] - 1.0).abs() < 1e-15);
        let b = make_box(array![0.1, 0.95].view(), 0.2, false);
        assert!((b.lower[0] - -0.1).abs() < 1e-15);
        assert!((b.upper[1] - 1.15).abs() < 1e-15);
    }

    #[test]
    fn property_encoding_matches_output_difference() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Network::new(vec![
            Layer::Dense {
                weight: Array2::from_shape_fn((5, 3), |_| rng.gen_range(-1.0..1.0)),
                bias: Array1::from_shape_fn(5, |_| rng.gen_range(-0.5..0.5)),
            },
            Layer::Dense {
                weight: Array2::from_shape_fn((4, 5), |_| rng.gen_range(-1.0..1.0)),
                bias: Array1::from_shape_fn(4, |_| rng.gen_range(-0.5..0.5)),
            },
        ])
        .unwrap();
        let prop = encode_property(&net, 2, 0).unwrap();
        assert_eq!(prop.output_size(), 1);
        assert_eq!(prop.depth(), net.depth());
        for _ in 0..20 {
            let x = Array1::from_shape_fn(3, |_| rng.gen_range(-2.0..2.0));
            let full = net.eval(x.view()).unwrap();
            let merged = prop.eval_scalar(x.view()).unwrap();
            assert!((merged - (full[2] - full[0])).abs() < 1e-12);
        }
    }

    #[test]
    fn property_encoding_rejects_bad_labels() {
        let net = toy_dense();
        assert!(encode_property(&net, 0, 0).is_err());
        assert!(encode_property(&net, 1, 0).is_err());
    }
}
