//! The fixed VGG-19 convolutional trunk, truncated after `relu5_1`.
//!
//! [`ARCHITECTURE`] is the one table every constructor validates against:
//! [`load_weights`], [`make_test_network`] and the forward pass all read it.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvSpec, PoolIndices, Tensor, KERNEL};

/// Tap name for the preprocessed image itself.
pub const INPUT_TAP: &str = "input";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Full-width output channel count.
    Conv(usize),
    Relu,
    Pool,
}

/// VGG-19 through `relu5_1`.
pub const ARCHITECTURE: &[(&str, LayerKind)] = &[
    ("conv1_1", LayerKind::Conv(64)),
    ("relu1_1", LayerKind::Relu),
    ("conv1_2", LayerKind::Conv(64)),
    ("relu1_2", LayerKind::Relu),
    ("pool1", LayerKind::Pool),
    ("conv2_1", LayerKind::Conv(128)),
    ("relu2_1", LayerKind::Relu),
    ("conv2_2", LayerKind::Conv(128)),
    ("relu2_2", LayerKind::Relu),
    ("pool2", LayerKind::Pool),
    ("conv3_1", LayerKind::Conv(256)),
    ("relu3_1", LayerKind::Relu),
    ("conv3_2", LayerKind::Conv(256)),
    ("relu3_2", LayerKind::Relu),
    ("conv3_3", LayerKind::Conv(256)),
    ("relu3_3", LayerKind::Relu),
    ("conv3_4", LayerKind::Conv(256)),
    ("relu3_4", LayerKind::Relu),
    ("pool3", LayerKind::Pool),
    ("conv4_1", LayerKind::Conv(512)),
    ("relu4_1", LayerKind::Relu),
    ("conv4_2", LayerKind::Conv(512)),
    ("relu4_2", LayerKind::Relu),
    ("conv4_3", LayerKind::Conv(512)),
    ("relu4_3", LayerKind::Relu),
    ("conv4_4", LayerKind::Conv(512)),
    ("relu4_4", LayerKind::Relu),
    ("pool4", LayerKind::Pool),
    ("conv5_1", LayerKind::Conv(512)),
    ("relu5_1", LayerKind::Relu),
];

/// Convolutions of the full VGG-19 network beyond the trunk. Weight files
/// converted from the complete checkpoint may carry them; they are
/// shape-checked and dropped.
const TRAILING_CONVS: &[&str] = &["conv5_2", "conv5_3", "conv5_4"];

/// Standard VGG per-channel means, in B, G, R order.
pub const VGG_MEAN_BGR: [f32; 3] = [103.939, 116.779, 123.68];

/// Channel-width divisor relative to the released network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WidthScale {
    Full,
    Half,
    Quarter,
    Eighth,
}

impl WidthScale {
    pub fn divisor(self) -> usize {
        match self {
            WidthScale::Full => 1,
            WidthScale::Half => 2,
            WidthScale::Quarter => 4,
            WidthScale::Eighth => 8,
        }
    }

    pub fn from_divisor(d: usize) -> Option<Self> {
        match d {
            1 => Some(WidthScale::Full),
            2 => Some(WidthScale::Half),
            4 => Some(WidthScale::Quarter),
            8 => Some(WidthScale::Eighth),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerOp {
    Conv(ConvSpec),
    Relu,
    Pool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub op: LayerOp,
}

/// An immutable, fully populated trunk.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkDef {
    layers: Vec<Layer>,
    width_scale: WidthScale,
}

/// Expected `(out, in)` channels for each conv of the trunk at a width scale.
fn conv_shapes(scale: WidthScale) -> Vec<(&'static str, usize, usize)> {
    let mut prev = 3;
    let mut shapes = Vec::new();
    for &(name, kind) in ARCHITECTURE {
        if let LayerKind::Conv(out) = kind {
            let out = out / scale.divisor();
            shapes.push((name, out, prev));
            prev = out;
        }
    }
    shapes
}

impl NetworkDef {
    /// Assembles a network from conv specs listed in architecture order.
    fn from_convs(convs: Vec<ConvSpec>, width_scale: WidthScale) -> Result<Self> {
        let shapes = conv_shapes(width_scale);
        if convs.len() != shapes.len() {
            return Err(Error::config(format!(
                "expected {} conv layers, got {}",
                shapes.len(),
                convs.len()
            )));
        }
        let mut convs = convs.into_iter();
        let mut layers = Vec::with_capacity(ARCHITECTURE.len());
        for &(name, kind) in ARCHITECTURE {
            let op = match kind {
                LayerKind::Conv(_) => LayerOp::Conv(convs.next().expect("counted above")),
                LayerKind::Relu => LayerOp::Relu,
                LayerKind::Pool => LayerOp::Pool,
            };
            layers.push(Layer {
                name: name.to_owned(),
                op,
            });
        }
        Ok(NetworkDef {
            layers,
            width_scale,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn width_scale(&self) -> WidthScale {
        self.width_scale
    }

    pub fn conv(&self, name: &str) -> Option<&ConvSpec> {
        self.layers.iter().find_map(|l| match &l.op {
            LayerOp::Conv(spec) if l.name == name => Some(spec),
            _ => None,
        })
    }

    /// Position of a layer in the trunk. `input` has no position.
    fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn has_tap(&self, name: &str) -> bool {
        name == INPUT_TAP || self.layer_index(name).is_some()
    }

    fn check_tap(&self, name: &str) -> Result<()> {
        if self.has_tap(name) {
            Ok(())
        } else {
            Err(Error::config(format!("unknown tap layer '{name}'")))
        }
    }

    /// Output channel count at a tap.
    pub fn tap_channels(&self, name: &str) -> Result<usize> {
        self.check_tap(name)?;
        let mut channels = 3;
        for layer in &self.layers {
            if let LayerOp::Conv(spec) = &layer.op {
                channels = spec.out_channels();
            }
            if layer.name == name {
                break;
            }
        }
        Ok(channels)
    }

    /// Pixel distance between neighbouring cells of a tap's feature map
    /// (product of the pooling factors before it).
    pub fn cumulative_stride(&self, name: &str) -> Result<usize> {
        self.check_tap(name)?;
        if name == INPUT_TAP {
            return Ok(1);
        }
        let idx = self.layer_index(name).expect("checked");
        let pools = self.layers[..=idx]
            .iter()
            .filter(|l| l.op == LayerOp::Pool)
            .count();
        Ok(1 << pools)
    }

    /// Spatial size of a tap's feature map for an `h×w` image.
    pub fn tap_dims(&self, name: &str, h: usize, w: usize) -> Result<(usize, usize)> {
        self.check_tap(name)?;
        if name == INPUT_TAP {
            return Ok((h, w));
        }
        let idx = self.layer_index(name).expect("checked");
        let (mut h, mut w) = (h, w);
        for l in &self.layers[..=idx] {
            if l.op == LayerOp::Pool {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
        }
        Ok((h, w))
    }
}

/// Network-side input: RGB pixels reordered to BGR with the VGG means
/// removed. The Jacobian is a channel permutation.
pub fn preprocess(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.shape();
    if c != 3 {
        return Err(Error::config(format!(
            "network input must have 3 channels, got {c}"
        )));
    }
    let mut out = Vec::with_capacity(image.len());
    for (bgr, mean) in VGG_MEAN_BGR.iter().enumerate() {
        out.extend(image.channel(2 - bgr).iter().map(|v| v - mean));
    }
    Tensor::new(3, h, w, out)
}

/// Maps a gradient w.r.t. the preprocessed input back to RGB pixels.
fn preprocess_backward(grad: &Tensor) -> Tensor {
    let (_, h, w) = grad.shape();
    let mut out = Vec::with_capacity(grad.len());
    for rgb in 0..3 {
        out.extend_from_slice(grad.channel(2 - rgb));
    }
    Tensor::new(3, h, w, out).expect("three channels")
}

/// Activations from one forward pass, with everything backward needs.
#[derive(Clone, Debug)]
pub struct LayerActivations {
    input: Tensor,
    /// Output of every evaluated layer, in trunk order.
    outputs: Vec<Tensor>,
    pool_indices: BTreeMap<usize, PoolIndices>,
    taps: BTreeSet<String>,
}

impl LayerActivations {
    /// The preprocessed input image.
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn tap_names(&self) -> impl Iterator<Item = &str> {
        self.taps.iter().map(String::as_str)
    }

    /// Activation at a requested tap.
    pub fn get(&self, net: &NetworkDef, name: &str) -> Option<&Tensor> {
        if !self.taps.contains(name) {
            return None;
        }
        if name == INPUT_TAP {
            return Some(&self.input);
        }
        net.layer_index(name).and_then(|i| self.outputs.get(i))
    }

    /// Requested taps and their activations.
    pub fn taps<'a>(&'a self, net: &'a NetworkDef) -> BTreeMap<&'a str, &'a Tensor> {
        self.tap_names()
            .filter_map(|n| self.get(net, n).map(|t| (n, t)))
            .collect()
    }
}

/// Forward pass collecting activations at `taps`. Only layers up to the
/// deepest tap are evaluated; all intermediate outputs are cached.
pub fn forward_tapped<S: AsRef<str>>(
    net: &NetworkDef,
    image: &Tensor,
    taps: &[S],
) -> Result<LayerActivations> {
    let mut depth = None;
    let mut names = BTreeSet::new();
    for tap in taps {
        let tap = tap.as_ref();
        net.check_tap(tap)?;
        if let Some(i) = net.layer_index(tap) {
            depth = Some(depth.map_or(i, |d: usize| d.max(i)));
        }
        names.insert(tap.to_owned());
    }
    let input = preprocess(image)?;
    let mut outputs: Vec<Tensor> = Vec::new();
    let mut pool_indices = BTreeMap::new();
    if let Some(depth) = depth {
        for (i, layer) in net.layers[..=depth].iter().enumerate() {
            let prev = outputs.last().unwrap_or(&input);
            let out = match &layer.op {
                LayerOp::Conv(spec) => tensor::conv2d_forward(prev, spec)?,
                LayerOp::Relu => tensor::relu_forward(prev),
                LayerOp::Pool => {
                    let (out, idx) = tensor::maxpool2_forward(prev);
                    pool_indices.insert(i, idx);
                    out
                }
            };
            outputs.push(out);
        }
    }
    Ok(LayerActivations {
        input,
        outputs,
        pool_indices,
        taps: names,
    })
}

/// Backpropagates gradients injected at any number of taps down to the raw
/// RGB pixels, summing contributions where paths merge.
pub fn backward_multi_tap(
    net: &NetworkDef,
    cached: &LayerActivations,
    tap_grads: &BTreeMap<String, Tensor>,
) -> Result<Tensor> {
    let mut deepest = None;
    for (name, grad) in tap_grads {
        let act = cached.get(net, name).ok_or_else(|| {
            Error::config(format!("gradient given for '{name}', which was not tapped"))
        })?;
        if !act.same_shape(grad) {
            return Err(Error::config(format!(
                "gradient for '{name}' has shape {:?}, activation has {:?}",
                grad.shape(),
                act.shape()
            )));
        }
        if let Some(i) = net.layer_index(name) {
            deepest = Some(deepest.map_or(i, |d: usize| d.max(i)));
        }
    }

    let mut grad: Option<Tensor> = None;
    if let Some(deepest) = deepest {
        for i in (0..=deepest).rev() {
            let layer = &net.layers[i];
            if let Some(g) = tap_grads.get(&layer.name) {
                match grad.as_mut() {
                    Some(acc) => acc.add_scaled(g, 1.0),
                    None => grad = Some(g.clone()),
                }
            }
            let Some(g_out) = grad.take() else { continue };
            let layer_input = if i == 0 {
                &cached.input
            } else {
                &cached.outputs[i - 1]
            };
            grad = Some(match &layer.op {
                LayerOp::Conv(spec) => tensor::conv2d_backward(layer_input, spec, &g_out)?,
                LayerOp::Relu => tensor::relu_backward(layer_input, &g_out),
                LayerOp::Pool => tensor::maxpool2_backward(&cached.pool_indices[&i], &g_out),
            });
        }
    }
    let mut grad = grad.unwrap_or_else(|| {
        let (c, h, w) = cached.input.shape();
        Tensor::zeros(c, h, w)
    });
    if let Some(g) = tap_grads.get(INPUT_TAP) {
        grad.add_scaled(g, 1.0);
    }
    Ok(preprocess_backward(&grad))
}

/// Deterministic random trunk with reduced widths, for running the whole
/// pipeline without external weights.
///
/// Weights are uniform with variance `2 / fan_in`, which keeps activation
/// magnitudes roughly constant through ReLU layers; the first layer is
/// further divided by the typical pixel spread so activations are O(1).
pub fn make_test_network(seed: u64, width_scale: WidthScale) -> NetworkDef {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let convs = conv_shapes(width_scale)
        .into_iter()
        .enumerate()
        .map(|(i, (_, out, inp))| {
            let fan_in = (inp * KERNEL * KERNEL) as f32;
            let mut bound = (6.0 / fan_in).sqrt();
            if i == 0 {
                bound /= 64.0;
            }
            let weights = (0..out * inp * KERNEL * KERNEL)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let bias = (0..out).map(|_| rng.random_range(-0.05f32..0.05)).collect();
            ConvSpec::new(inp, out, weights, bias).expect("shapes from table")
        })
        .collect();
    NetworkDef::from_convs(convs, width_scale).expect("shapes from table")
}

const MAGIC: &[u8; 4] = b"NMRF";
const VERSION: u32 = 1;

/// Serializes the conv layers in the binary weight format.
pub fn encode_weights(net: &NetworkDef) -> Vec<u8> {
    let convs: Vec<(&str, &ConvSpec)> = net
        .layers
        .iter()
        .filter_map(|l| match &l.op {
            LayerOp::Conv(spec) => Some((l.name.as_str(), spec)),
            _ => None,
        })
        .collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(convs.len() as u32).to_le_bytes());
    for (name, spec) in convs {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        for d in [spec.out_channels(), spec.in_channels(), KERNEL, KERNEL] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in spec.weights().iter().chain(spec.bias()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save_weights(net: &NetworkDef, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_weights(net))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, layer: Option<&str>, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::load(
                layer,
                format!("file truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, layer: Option<&str>, what: &str) -> Result<u32> {
        let b = self.take(4, layer, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize, layer: Option<&str>, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.saturating_mul(4), layer, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Parses the binary weight format, validating every layer against the
/// architecture table. The width scale is inferred from `conv1_1`.
pub fn decode_weights(bytes: &[u8]) -> Result<NetworkDef> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, None, "magic")? != MAGIC {
        return Err(Error::load(None, "bad magic bytes (expected \"NMRF\")"));
    }
    let version = r.u32(None, "version")?;
    if version != VERSION {
        return Err(Error::load(None, format!("unsupported version {version}")));
    }
    let count = r.u32(None, "layer count")? as usize;
    let trunk = conv_shapes(WidthScale::Full).len();
    if count != trunk && count != trunk + TRAILING_CONVS.len() {
        return Err(Error::load(
            None,
            format!("file declares {count} conv layers, expected {trunk}"),
        ));
    }

    let mut scale = None;
    let mut convs = Vec::with_capacity(trunk);
    for i in 0..count {
        let name_len = r.u32(None, "layer name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, None, "layer name")?)
            .map_err(|_| Error::load(None, format!("layer {i} name is not UTF-8")))?
            .to_owned();
        let layer = Some(name.as_str());
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = r.u32(layer, "dims")? as usize;
        }
        let [out, inp, kh, kw] = dims;

        let (expected_name, full_out, full_in) = if i < trunk {
            conv_shapes(WidthScale::Full)[i]
        } else {
            (TRAILING_CONVS[i - trunk], 512, 512)
        };
        if name != expected_name {
            return Err(Error::load(
                layer,
                format!("expected layer '{expected_name}' at position {i}"),
            ));
        }
        let scale = *scale.get_or_insert_with(|| {
            WidthScale::from_divisor(full_out / out.max(1))
                .filter(|s| full_out / s.divisor() == out)
        });
        let Some(scale) = scale else {
            return Err(Error::load(
                layer,
                format!("{out} output channels does not match any supported width"),
            ));
        };
        let expect = (
            full_out / scale.divisor(),
            if i == 0 { 3 } else { full_in / scale.divisor() },
        );
        if (out, inp, kh, kw) != (expect.0, expect.1, KERNEL, KERNEL) {
            return Err(Error::load(
                layer,
                format!(
                    "shape {out}x{inp}x{kh}x{kw}, expected {}x{}x{KERNEL}x{KERNEL}",
                    expect.0, expect.1
                ),
            ));
        }
        let weights = r.f32s(out * inp * kh * kw, layer, "weights")?;
        let bias = r.f32s(out, layer, "bias")?;
        if i < trunk {
            convs.push(
                ConvSpec::new(inp, out, weights, bias)
                    .map_err(|e| Error::load(layer, e.to_string()))?,
            );
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::load(
            None,
            format!(
                "{} trailing bytes after the last layer",
                bytes.len() - r.pos
            ),
        ));
    }
    NetworkDef::from_convs(convs, scale.flatten().expect("at least one layer"))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NetworkDef> {
    let bytes = std::fs::read(path)?;
    decode_weights(&bytes)
}
