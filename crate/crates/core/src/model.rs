//! Portable chain models.
//!
//! A model is an ordered list of layers plus an input shape. It is stored as
//! two files: a TOML manifest (`.netm`) that lists the layers and, for every
//! weighted layer, the name, shape and byte offset of each tensor; and a raw
//! little-endian `f32` blob (`.netw`) holding those tensors back to back in
//! manifest order, row-major, with no header.
//!
//! ```toml
//! format_version = 1
//! input_shape = [1, 128, 128]
//! input_norm = "standardize"
//!
//! [[layers]]
//! id = "conv1"
//! kind = "conv"
//!
//! [layers.conv]
//! kernel_h = 3
//! kernel_w = 3
//! stride = 1
//! padding = 1
//! in_channels = 1
//! out_channels = 8
//!
//! [[layers.weights]]
//! name = "weight"
//! shape = [8, 1, 3, 3]
//! offset = 0
//! ```

use std::borrow::Cow;
use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormParams, ConvSpec, PoolIndices};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// Number of output classes every model must produce (negative, positive).
pub const CLASS_COUNT: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Relu,
    Maxpool2,
    GlobalAvgpool,
    Fc,
    Batchnorm,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Relu => "relu",
            LayerKind::Maxpool2 => "maxpool2",
            LayerKind::GlobalAvgpool => "global_avgpool",
            LayerKind::Fc => "fc",
            LayerKind::Batchnorm => "batchnorm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Conv {
        spec: ConvSpec,
        weight: Tensor,
        bias: Tensor,
    },
    Relu,
    MaxPool2,
    GlobalAvgPool,
    Fc {
        weight: Tensor,
        bias: Tensor,
    },
    BatchNorm(BatchNormParams),
}

impl LayerOp {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerOp::Conv { .. } => LayerKind::Conv,
            LayerOp::Relu => LayerKind::Relu,
            LayerOp::MaxPool2 => LayerKind::Maxpool2,
            LayerOp::GlobalAvgPool => LayerKind::GlobalAvgpool,
            LayerOp::Fc { .. } => LayerKind::Fc,
            LayerOp::BatchNorm(_) => LayerKind::Batchnorm,
        }
    }

    /// Named tensors in serialization order.
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            LayerOp::Conv { weight, bias, .. } | LayerOp::Fc { weight, bias } => {
                vec![("weight", weight), ("bias", bias)]
            }
            LayerOp::BatchNorm(p) => vec![
                ("mean", &p.mean),
                ("var", &p.var),
                ("gamma", &p.gamma),
                ("beta", &p.beta),
            ],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub id: String,
    pub op: LayerOp,
}

impl Layer {
    pub fn new(id: impl Into<String>, op: LayerOp) -> Self {
        Self { id: id.into(), op }
    }
}

/// Activation shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Map { c: usize, h: usize, w: usize },
    Vector(usize),
}

impl ActShape {
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Map { c, h, w } => vec![c, h, w],
            ActShape::Vector(n) => vec![n],
        }
    }

    fn len(&self) -> usize {
        self.dims().iter().product()
    }
}

/// Preprocessing applied to every input before the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputNorm {
    /// Inputs are fed unchanged.
    #[default]
    None,
    /// Each input is shifted to zero mean and scaled to unit standard
    /// deviation over all of its elements. Near-constant inputs are only
    /// centered.
    Standardize,
}

/// Standard deviations below this leave the input unscaled.
const MIN_INPUT_STD: f64 = 1e-6;

impl InputNorm {
    fn apply(self, input: &Tensor) -> Tensor {
        match self {
            InputNorm::None => input.clone(),
            InputNorm::Standardize => {
                let d = input.data();
                let n = d.len() as f64;
                let mean = d.iter().map(|&v| v as f64).sum::<f64>() / n;
                let var = d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                let scale = if sd < MIN_INPUT_STD { 1.0 } else { 1.0 / sd };
                let data = d.iter().map(|&v| ((v as f64 - mean) * scale) as f32).collect();
                Tensor::from_parts(input.shape().to_vec(), data)
            }
        }
    }
}

/// A validated chain model. Immutable except through [`Model::params_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: [usize; 3],
    input_norm: InputNorm,
    layers: Vec<Layer>,
    shapes: Vec<ActShape>,
}

/// A copy of one layer's output taken during [`Model::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCapture {
    pub layer_id: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub captures: Vec<ActivationCapture>,
}

/// Per-layer inputs retained for the backward pass.
#[derive(Debug)]
pub struct Trace {
    inputs: Vec<Tensor>,
    pool_indices: Vec<Option<PoolIndices>>,
    pub logits: Tensor,
}

impl Model {
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model has no layers, so no output layer".into()));
        }
        if input_shape.contains(&0) {
            return Err(Error::Shape(format!("input shape {input_shape:?} has a zero dimension")));
        }
        let mut seen = HashSet::new();
        for l in &layers {
            if l.id.is_empty() {
                return Err(Error::InvalidArgument("layer id must be non-empty".into()));
            }
            if !seen.insert(l.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate layer id `{}`", l.id)));
            }
        }
        let [c, h, w] = input_shape;
        let mut cur = ActShape::Map { c, h, w };
        let mut shapes = Vec::with_capacity(layers.len());
        for l in &layers {
            cur = layer_output_shape(l, cur)?;
            shapes.push(cur);
        }
        if cur != ActShape::Vector(CLASS_COUNT) {
            return Err(Error::Shape(format!(
                "model output must be a vector of {CLASS_COUNT} logits, final layer `{}` yields {:?}",
                layers.last().map(|l| l.id.as_str()).unwrap_or_default(),
                cur.dims()
            )));
        }
        Ok(Self {
            input_shape,
            input_norm: InputNorm::None,
            layers,
            shapes,
        })
    }

    pub fn with_input_norm(mut self, norm: InputNorm) -> Self {
        self.input_norm = norm;
        self
    }

    pub fn input_norm(&self) -> InputNorm {
        self.input_norm
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn class_count(&self) -> usize {
        CLASS_COUNT
    }

    pub fn layer(&self, id: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.id == id)
    }

    /// Output shape of the layer with the given id.
    pub fn output_shape(&self, id: &str) -> Option<ActShape> {
        let i = self.layers.iter().position(|l| l.id == id)?;
        Some(self.shapes[i])
    }

    /// Number of layers that carry tensors.
    pub fn weighted_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| !l.op.tensors().is_empty()).count()
    }

    /// Trainable parameters in a fixed order: weight then bias for each conv
    /// and fc layer. Batchnorm statistics are frozen and not included.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let LayerOp::Conv { weight, bias, .. } | LayerOp::Fc { weight, bias } = &l.op {
                out.push((format!("{}.weight", l.id), weight));
                out.push((format!("{}.bias", l.id), bias));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let LayerOp::Conv { weight, bias, .. } | LayerOp::Fc { weight, bias } = &mut l.op {
                out.push(weight);
                out.push(bias);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Applies the model's input normalization and adapts a `[1, H, W]`
    /// grayscale input to a model expecting more channels by replicating
    /// the single channel.
    pub fn prepare_input<'a>(&self, input: &'a Tensor) -> Result<Cow<'a, Tensor>> {
        let shaped = self.shape_input(input)?;
        Ok(match self.input_norm {
            InputNorm::None => shaped,
            norm => Cow::Owned(norm.apply(&shaped)),
        })
    }

    fn shape_input<'a>(&self, input: &'a Tensor) -> Result<Cow<'a, Tensor>> {
        let want = self.input_shape;
        if input.shape() == want {
            return Ok(Cow::Borrowed(input));
        }
        if input.shape() == [1, want[1], want[2]] && want[0] > 1 {
            let plane = input.data();
            let mut data = Vec::with_capacity(plane.len() * want[0]);
            for _ in 0..want[0] {
                data.extend_from_slice(plane);
            }
            return Ok(Cow::Owned(Tensor::from_parts(want.to_vec(), data)));
        }
        Err(Error::Shape(format!(
            "input shape {:?} does not match model input {want:?}",
            input.shape()
        )))
    }

    /// Runs the chain, copying the outputs of the requested layers.
    ///
    /// Unknown capture ids are rejected before any computation.
    pub fn forward(&self, input: &Tensor, capture_ids: &[&str]) -> Result<ForwardOutput> {
        let mut wanted: Vec<&str> = Vec::new();
        for &id in capture_ids {
            if self.layer(id).is_none() {
                return Err(Error::UnknownLayer(id.to_string()));
            }
            if !wanted.contains(&id) {
                wanted.push(id);
            }
        }
        let input = self.prepare_input(input)?;
        let mut slots: Vec<Option<Tensor>> = vec![None; wanted.len()];
        let mut cur = input.into_owned();
        for layer in &self.layers {
            cur = apply_layer(layer, &cur)?.0;
            if let Some(slot) = wanted.iter().position(|&id| id == layer.id) {
                slots[slot] = Some(cur.clone());
            }
        }
        let captures = wanted
            .iter()
            .zip(slots)
            .map(|(id, t)| ActivationCapture {
                layer_id: id.to_string(),
                tensor: t.expect("every layer ran"),
            })
            .collect();
        Ok(ForwardOutput { logits: cur, captures })
    }

    /// Forward pass retaining each layer's input for [`Model::backward`].
    pub fn forward_trace(&self, input: &Tensor) -> Result<Trace> {
        let mut cur = self.prepare_input(input)?.into_owned();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pool_indices = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, idx) = apply_layer(layer, &cur)?;
            inputs.push(cur);
            pool_indices.push(idx);
            cur = out;
        }
        Ok(Trace {
            inputs,
            pool_indices,
            logits: cur,
        })
    }

    /// Gradients of the loss with respect to [`Model::params`], given the
    /// gradient with respect to the logits.
    pub fn backward(&self, trace: &Trace, grad_logits: &Tensor) -> Result<Vec<Tensor>> {
        let mut grads: Vec<Tensor> = Vec::new();
        let mut g = grad_logits.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.inputs[i];
            let first = i == 0;
            g = match &layer.op {
                LayerOp::Conv { spec, weight, .. } => {
                    if first {
                        let (gw, gb) = ops::conv2d_backward_params(&g, x, weight, spec)?;
                        grads.push(gb);
                        grads.push(gw);
                        break;
                    }
                    let cg = ops::conv2d_backward(&g, x, weight, spec)?;
                    grads.push(cg.bias);
                    grads.push(cg.weights);
                    cg.input
                }
                LayerOp::Fc { weight, .. } => {
                    let fg = ops::fc_backward(&g, x, weight)?;
                    grads.push(fg.bias);
                    grads.push(fg.weights);
                    fg.input
                }
                LayerOp::Relu => ops::relu_backward(&g, x)?,
                LayerOp::MaxPool2 => {
                    let idx = trace.pool_indices[i].as_ref().expect("maxpool records indices");
                    ops::maxpool2_backward(&g, idx)?
                }
                LayerOp::GlobalAvgPool => ops::global_avgpool_backward(&g, x.shape())?,
                LayerOp::BatchNorm(p) => ops::batchnorm_backward(&g, p)?,
            };
        }
        grads.reverse();
        Ok(grads)
    }
}

fn layer_output_shape(layer: &Layer, input: ActShape) -> Result<ActShape> {
    let mismatch = |msg: String| Error::Shape(format!("layer `{}`: {msg}", layer.id));
    match (&layer.op, input) {
        (LayerOp::Conv { spec, weight, bias }, ActShape::Map { c, h, w }) => {
            spec.validate().map_err(|e| mismatch(e.to_string()))?;
            if c != spec.in_channels {
                return Err(mismatch(format!("expects {} input channels, gets {c}", spec.in_channels)));
            }
            if weight.shape() != spec.weight_shape() {
                return Err(mismatch(format!(
                    "weight shape {:?} != {:?}",
                    weight.shape(),
                    spec.weight_shape()
                )));
            }
            if bias.shape() != [spec.out_channels] {
                return Err(mismatch(format!("bias shape {:?} != [{}]", bias.shape(), spec.out_channels)));
            }
            let (oh, ow) = spec.output_hw(h, w).map_err(|e| mismatch(e.to_string()))?;
            Ok(ActShape::Map {
                c: spec.out_channels,
                h: oh,
                w: ow,
            })
        }
        (LayerOp::Relu, s) => Ok(s),
        (LayerOp::MaxPool2, ActShape::Map { c, h, w }) => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(mismatch(format!("maxpool2 needs even spatial dims, gets {h}x{w}")));
            }
            Ok(ActShape::Map { c, h: h / 2, w: w / 2 })
        }
        (LayerOp::GlobalAvgPool, ActShape::Map { c, .. }) => Ok(ActShape::Vector(c)),
        (LayerOp::Fc { weight, bias }, s) => {
            let [m, n] = weight.dims::<2>("fc weight").map_err(|e| mismatch(e.to_string()))?;
            if n != s.len() {
                return Err(mismatch(format!("fc expects {n} inputs, gets {}", s.len())));
            }
            if bias.shape() != [m] {
                return Err(mismatch(format!("bias shape {:?} != [{m}]", bias.shape())));
            }
            Ok(ActShape::Vector(m))
        }
        (LayerOp::BatchNorm(p), ActShape::Map { c, h, w }) => {
            p.validate().map_err(|e| mismatch(e.to_string()))?;
            if p.channels() != c {
                return Err(mismatch(format!("batchnorm has {} channels, input has {c}", p.channels())));
            }
            Ok(ActShape::Map { c, h, w })
        }
        (op, s) => Err(mismatch(format!(
            "{} cannot consume a {:?} activation",
            op.kind().as_str(),
            s.dims()
        ))),
    }
}

fn apply_layer(layer: &Layer, x: &Tensor) -> Result<(Tensor, Option<PoolIndices>)> {
    Ok(match &layer.op {
        LayerOp::Conv { spec, weight, bias } => (ops::conv2d_forward(x, weight, bias, spec)?, None),
        LayerOp::Relu => (ops::relu(x), None),
        LayerOp::MaxPool2 => {
            let (out, idx) = ops::maxpool2(x)?;
            (out, Some(idx))
        }
        LayerOp::GlobalAvgPool => (ops::global_avgpool(x)?, None),
        LayerOp::Fc { weight, bias } => (ops::fc_forward(x, weight, bias)?, None),
        LayerOp::BatchNorm(p) => (ops::batchnorm_inference(x, p)?, None),
    })
}

// ---- serialization ----

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    format_version: u32,
    input_shape: Vec<usize>,
    #[serde(default)]
    input_norm: InputNorm,
    #[serde(default)]
    layers: Vec<LayerRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    id: String,
    kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    conv: Option<ConvSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    weights: Vec<WeightRef>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightRef {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Serialized form of a model: manifest text and weight blob.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SavedModel {
    pub manifest: String,
    pub blob: Vec<u8>,
}

pub fn save_model(model: &Model) -> SavedModel {
    let mut blob = Vec::new();
    let mut layers = Vec::with_capacity(model.layers.len());
    for l in &model.layers {
        let mut weights = Vec::new();
        for (name, t) in l.op.tensors() {
            weights.push(WeightRef {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset: blob.len(),
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let (conv, eps) = match &l.op {
            LayerOp::Conv { spec, .. } => (Some(*spec), None),
            LayerOp::BatchNorm(p) => (None, Some(p.eps)),
            _ => (None, None),
        };
        layers.push(LayerRecord {
            id: l.id.clone(),
            kind: l.op.kind(),
            eps,
            conv,
            weights,
        });
    }
    let doc = ManifestDoc {
        format_version: FORMAT_VERSION,
        input_shape: model.input_shape.to_vec(),
        input_norm: model.input_norm,
        layers,
    };
    let manifest = toml::to_string(&doc).expect("manifest types always serialize");
    SavedModel { manifest, blob }
}

pub fn load_model(manifest_text: &str, blob: &[u8]) -> Result<Model> {
    let doc: ManifestDoc = toml::from_str(manifest_text).map_err(|e| Error::ManifestParse(e.to_string()))?;
    if doc.format_version != FORMAT_VERSION {
        return Err(Error::ManifestParse(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            doc.format_version
        )));
    }
    let input_shape: [usize; 3] = doc
        .input_shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::ManifestParse(format!("input_shape must have 3 entries, got {:?}", doc.input_shape)))?;

    let mut cursor = 0usize;
    let mut layers = Vec::with_capacity(doc.layers.len());
    for rec in doc.layers {
        let mut reader = TensorReader {
            layer: &rec.id,
            refs: &rec.weights,
            used: 0,
            blob,
            cursor: &mut cursor,
        };
        let op = match rec.kind {
            LayerKind::Conv => {
                let spec = rec
                    .conv
                    .ok_or_else(|| Error::ManifestParse(format!("conv layer `{}` lacks a [conv] table", rec.id)))?;
                LayerOp::Conv {
                    spec,
                    weight: reader.take("weight")?,
                    bias: reader.take("bias")?,
                }
            }
            LayerKind::Fc => LayerOp::Fc {
                weight: reader.take("weight")?,
                bias: reader.take("bias")?,
            },
            LayerKind::Batchnorm => LayerOp::BatchNorm(BatchNormParams {
                mean: reader.take("mean")?,
                var: reader.take("var")?,
                gamma: reader.take("gamma")?,
                beta: reader.take("beta")?,
                eps: rec
                    .eps
                    .ok_or_else(|| Error::ManifestParse(format!("batchnorm layer `{}` lacks eps", rec.id)))?,
            }),
            LayerKind::Relu => LayerOp::Relu,
            LayerKind::Maxpool2 => LayerOp::MaxPool2,
            LayerKind::GlobalAvgpool => LayerOp::GlobalAvgPool,
        };
        reader.finish()?;
        layers.push(Layer { id: rec.id, op });
    }
    if cursor != blob.len() {
        return Err(Error::BlobTrailing {
            consumed: cursor,
            trailing: blob.len() - cursor,
        });
    }
    Ok(Model::new(input_shape, layers)?.with_input_norm(doc.input_norm))
}

struct TensorReader<'a> {
    layer: &'a str,
    refs: &'a [WeightRef],
    used: usize,
    blob: &'a [u8],
    cursor: &'a mut usize,
}

impl TensorReader<'_> {
    fn take(&mut self, name: &str) -> Result<Tensor> {
        let r = self.refs.get(self.used).ok_or_else(|| {
            Error::ManifestParse(format!("layer `{}` is missing weight `{name}`", self.layer))
        })?;
        if r.name != name {
            return Err(Error::ManifestParse(format!(
                "layer `{}`: expected weight `{name}` at position {}, found `{}`",
                self.layer, self.used, r.name
            )));
        }
        self.used += 1;
        let label = format!("{}.{}", self.layer, name);
        if r.offset != *self.cursor {
            return Err(Error::ManifestParse(format!(
                "tensor `{label}` declares byte offset {} but tensors must be contiguous (expected {})",
                r.offset, self.cursor
            )));
        }
        let n: usize = r.shape.iter().product();
        let end = r.offset + 4 * n;
        if end > self.blob.len() {
            return Err(Error::BlobTruncated {
                tensor: label,
                offset: r.offset,
                end,
                len: self.blob.len(),
            });
        }
        let data: Vec<f32> = self.blob[r.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        *self.cursor = end;
        Tensor::new(r.shape.clone(), data).map_err(|e| Error::ManifestParse(format!("tensor `{label}`: {e}")))
    }

    fn finish(self) -> Result<()> {
        if self.used != self.refs.len() {
            return Err(Error::ManifestParse(format!(
                "layer `{}` declares unexpected weight `{}`",
                self.layer, self.refs[self.used].name
            )));
        }
        Ok(())
    }
}

/// Path of the weight blob paired with a manifest path.
pub fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("netw")
}

/// Writes `<stem>.netm` and `<stem>.netw`.
pub fn save_model_files(model: &Model, manifest_path: &Path) -> Result<()> {
    let saved = save_model(model);
    std::fs::write(manifest_path, &saved.manifest).map_err(|e| Error::io(manifest_path, e))?;
    let bp = blob_path(manifest_path);
    std::fs::write(&bp, &saved.blob).map_err(|e| Error::io(&bp, e))?;
    Ok(())
}

pub fn load_model_files(manifest_path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let bp = blob_path(manifest_path);
    let blob = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    load_model(&text, &blob)
}
