//! Declarative model descriptions and their executor.
//!
//! A [`ModelSpec`] is a plain list of [`LayerNode`]s with an input shape.
//! [`ModelSpec::plan`] runs static shape inference and lays out every
//! parameter and buffer, so parameter counts are known without allocating
//! weights. [`Network`] owns the tensors for one spec and records forward
//! passes onto a [`Tape`].

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;
use core::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::capsule::{diagnosis_caps, primary_caps, CapsVariant, CapsuleConfig};
use crate::error::{Error, Result};
use crate::kernels::{Padding, Window2d};
use crate::layers::{
    activate, check_dropout_rate, dense, dropout, glorot_uniform, kaiming_uniform, update_running_stats, Activation,
    Mode, BN_EPSILON, BN_MOMENTUM,
};
use crate::scalar::Real;
use crate::stn::{locnet_param_shapes, spatial_transformer, IDENTITY_THETA, LAMBDA_OFFSET, LOCNET_FILTERS, LOCNET_KERNEL};
use crate::tape::{Tape, Var};
use crate::tensor::{numel, Tensor};

/// Number of patient metadata features fused by VDSNet.
pub const METADATA_WIDTH: usize = 5;
/// Default input resolution.
pub const INPUT_EXTENT: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerNode {
    LambdaScale {
        offset: f64,
    },
    BatchNorm,
    SpatialTransformer,
    Conv2d {
        filters: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: Padding,
        activation: Activation,
    },
    MaxPool {
        window: [usize; 2],
        stride: [usize; 2],
        padding: Padding,
    },
    Flatten,
    GlobalAvgPool,
    Dense {
        units: usize,
        activation: Activation,
    },
    Dropout {
        rate: f64,
    },
    ConcatMetadata {
        width: usize,
    },
    PrimaryCaps {
        dim: usize,
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    DiagnosisCaps {
        classes: usize,
        dim: usize,
        routings: usize,
    },
    CapsuleLength,
}

impl LayerNode {
    /// Square-kernel, stride-1, 'same' convolution.
    pub fn conv(filters: usize, kernel: usize, activation: Activation) -> Self {
        LayerNode::Conv2d {
            filters,
            kernel: [kernel, kernel],
            stride: [1, 1],
            padding: Padding::Same,
            activation,
        }
    }

    pub fn pool2(padding: Padding) -> Self {
        LayerNode::MaxPool {
            window: [2, 2],
            stride: [2, 2],
            padding,
        }
    }

    pub fn dense(units: usize, activation: Activation) -> Self {
        LayerNode::Dense { units, activation }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerNode::LambdaScale { .. } => "lambda_scale",
            LayerNode::BatchNorm => "batch_norm",
            LayerNode::SpatialTransformer => "spatial_transformer",
            LayerNode::Conv2d { .. } => "conv2d",
            LayerNode::MaxPool { .. } => "max_pool",
            LayerNode::Flatten => "flatten",
            LayerNode::GlobalAvgPool => "global_avg_pool",
            LayerNode::Dense { .. } => "dense",
            LayerNode::Dropout { .. } => "dropout",
            LayerNode::ConcatMetadata { .. } => "concat_metadata",
            LayerNode::PrimaryCaps { .. } => "primary_caps",
            LayerNode::DiagnosisCaps { .. } => "diagnosis_caps",
            LayerNode::CapsuleLength => "capsule_length",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// One sigmoid unit; binary cross-entropy.
    SigmoidBinary,
    /// Two-way softmax; categorical cross-entropy.
    Softmax2,
    /// Lengths of two class capsules; margin loss.
    CapsuleLength2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub metadata_width: usize,
    pub nodes: Vec<LayerNode>,
    pub output_kind: OutputKind,
}

/// Per-sample activation shape between nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeShape {
    Image { c: usize, h: usize, w: usize },
    Flat(usize),
    Caps { count: usize, dim: usize },
}

impl NodeShape {
    pub fn numel(&self) -> usize {
        match *self {
            NodeShape::Image { c, h, w } => c * h * w,
            NodeShape::Flat(d) => d,
            NodeShape::Caps { count, dim } => count * dim,
        }
    }

    /// Batched tensor shape.
    pub fn batched(&self, n: usize) -> Vec<usize> {
        match *self {
            NodeShape::Image { c, h, w } => vec![n, c, h, w],
            NodeShape::Flat(d) => vec![n, d],
            NodeShape::Caps { count, dim } => vec![n, count, dim],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Kaiming { fan_in: usize },
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
    Values(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl Slot {
    fn new(node: usize, kind: &str, what: &str, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name: format!("{node:02}.{kind}.{what}"),
            shape,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    fn materialize<T: Real>(&self, rng: &mut dyn RngCore) -> Result<Tensor<T>> {
        Ok(match &self.init {
            Init::Kaiming { fan_in } => kaiming_uniform(&self.shape, *fan_in, rng),
            Init::Glorot { fan_in, fan_out } => glorot_uniform(&self.shape, *fan_in, *fan_out, rng),
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::ones(&self.shape),
            Init::Values(v) => Tensor::from_f64(&self.shape, v)?,
        })
    }
}

/// Result of static shape inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub input: NodeShape,
    /// Output shape of each node.
    pub shapes: Vec<NodeShape>,
    pub params: Vec<Slot>,
    pub buffers: Vec<Slot>,
    pub node_params: Vec<Range<usize>>,
    pub node_buffers: Vec<Range<usize>>,
}

impl Plan {
    pub fn output(&self) -> NodeShape {
        *self.shapes.last().unwrap_or(&self.input)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Slot::numel).sum()
    }

    pub fn node_param_count(&self, node: usize) -> usize {
        self.params[self.node_params[node].clone()].iter().map(Slot::numel).sum()
    }
}

fn weight_init(activation: Activation, fan_in: usize, fan_out: usize) -> Init {
    if activation == Activation::Relu {
        Init::Kaiming { fan_in }
    } else {
        Init::Glorot { fan_in, fan_out }
    }
}

fn expect_image(i: usize, node: &LayerNode, shape: NodeShape) -> Result<(usize, usize, usize)> {
    match shape {
        NodeShape::Image { c, h, w } => Ok((c, h, w)),
        other => Err(Error::Invalid(format!(
            "layer {i} ({}) needs an image input, got {other:?}",
            node.kind()
        ))),
    }
}

fn expect_flat(i: usize, node: &LayerNode, shape: NodeShape) -> Result<usize> {
    match shape {
        NodeShape::Flat(d) => Ok(d),
        other => Err(Error::Invalid(format!(
            "layer {i} ({}) needs a flat input, got {other:?}",
            node.kind()
        ))),
    }
}

fn expect_caps(i: usize, node: &LayerNode, shape: NodeShape) -> Result<(usize, usize)> {
    match shape {
        NodeShape::Caps { count, dim } => Ok((count, dim)),
        other => Err(Error::Invalid(format!(
            "layer {i} ({}) needs capsule input, got {other:?}",
            node.kind()
        ))),
    }
}

impl ModelSpec {
    /// Static shape inference and parameter layout.
    pub fn plan(&self) -> Result<Plan> {
        let [c0, h0, w0] = self.input_shape;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return Err(Error::InvalidShape {
                op: "model input",
                shape: self.input_shape.to_vec(),
                reason: "extents must be positive",
            });
        }
        let input = NodeShape::Image { c: c0, h: h0, w: w0 };
        let mut cur = input;
        let mut plan = Plan {
            input,
            shapes: Vec::with_capacity(self.nodes.len()),
            params: Vec::new(),
            buffers: Vec::new(),
            node_params: Vec::with_capacity(self.nodes.len()),
            node_buffers: Vec::with_capacity(self.nodes.len()),
        };
        for (i, node) in self.nodes.iter().enumerate() {
            let p0 = plan.params.len();
            let b0 = plan.buffers.len();
            let kind = node.kind();
            let mut param = |what: &str, shape: Vec<usize>, init: Init| {
                plan.params.push(Slot::new(i, kind, what, shape, init));
            };
            cur = match *node {
                LayerNode::LambdaScale { .. } | LayerNode::Dropout { .. } => {
                    if let LayerNode::Dropout { rate } = *node {
                        check_dropout_rate(rate)?;
                    }
                    cur
                }
                LayerNode::BatchNorm => {
                    let ch = match cur {
                        NodeShape::Image { c, .. } => c,
                        NodeShape::Flat(d) => d,
                        NodeShape::Caps { .. } => {
                            return Err(Error::Invalid(format!("layer {i} (batch_norm) cannot follow capsules")))
                        }
                    };
                    param("gamma", vec![ch], Init::Ones);
                    param("beta", vec![ch], Init::Zeros);
                    plan.buffers.push(Slot::new(i, kind, "running_mean", vec![ch], Init::Zeros));
                    plan.buffers.push(Slot::new(i, kind, "running_var", vec![ch], Init::Ones));
                    cur
                }
                LayerNode::SpatialTransformer => {
                    let (c, h, w) = expect_image(i, node, cur)?;
                    let shapes = locnet_param_shapes(c, h, w)?;
                    let k2 = LOCNET_KERNEL * LOCNET_KERNEL;
                    let inits = [
                        Init::Kaiming { fan_in: c * k2 },
                        Init::Zeros,
                        Init::Kaiming {
                            fan_in: LOCNET_FILTERS * k2,
                        },
                        Init::Zeros,
                        Init::Kaiming { fan_in: shapes[4][0] },
                        Init::Zeros,
                        Init::Zeros,
                        Init::Values(IDENTITY_THETA.to_vec()),
                    ];
                    let names = [
                        "conv1.weight",
                        "conv1.bias",
                        "conv2.weight",
                        "conv2.bias",
                        "fc1.weight",
                        "fc1.bias",
                        "fc2.weight",
                        "fc2.bias",
                    ];
                    for ((name, shape), init) in names.iter().zip(shapes).zip(inits) {
                        param(name, shape, init);
                    }
                    cur
                }
                LayerNode::Conv2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                    activation,
                } => {
                    let (c, h, w) = expect_image(i, node, cur)?;
                    let g = Window2d::new(
                        "conv2d",
                        (h, w),
                        (kernel[0], kernel[1]),
                        (stride[0], stride[1]),
                        padding,
                    )?;
                    let area = kernel[0] * kernel[1];
                    param(
                        "weight",
                        vec![filters, c, kernel[0], kernel[1]],
                        weight_init(activation, c * area, filters * area),
                    );
                    param("bias", vec![filters], Init::Zeros);
                    NodeShape::Image {
                        c: filters,
                        h: g.out_h,
                        w: g.out_w,
                    }
                }
                LayerNode::MaxPool {
                    window,
                    stride,
                    padding,
                } => {
                    let (c, h, w) = expect_image(i, node, cur)?;
                    let g = Window2d::new(
                        "maxpool2d",
                        (h, w),
                        (window[0], window[1]),
                        (stride[0], stride[1]),
                        padding,
                    )?;
                    NodeShape::Image {
                        c,
                        h: g.out_h,
                        w: g.out_w,
                    }
                }
                LayerNode::Flatten => NodeShape::Flat(cur.numel()),
                LayerNode::GlobalAvgPool => {
                    let (c, _, _) = expect_image(i, node, cur)?;
                    NodeShape::Flat(c)
                }
                LayerNode::Dense { units, activation } => {
                    let d = expect_flat(i, node, cur)?;
                    param("weight", vec![d, units], weight_init(activation, d, units));
                    param("bias", vec![units], Init::Zeros);
                    NodeShape::Flat(units)
                }
                LayerNode::ConcatMetadata { width } => {
                    let d = expect_flat(i, node, cur)?;
                    if width != self.metadata_width || width == 0 {
                        return Err(Error::Invalid(format!(
                            "layer {i} concatenates {width} metadata features but the model declares {}",
                            self.metadata_width
                        )));
                    }
                    NodeShape::Flat(d + width)
                }
                LayerNode::PrimaryCaps {
                    dim,
                    channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (c, h, w) = expect_image(i, node, cur)?;
                    let g = Window2d::new("primary_caps", (h, w), (kernel, kernel), (stride, stride), padding)?;
                    let maps = dim * channels;
                    let area = kernel * kernel;
                    param(
                        "weight",
                        vec![maps, c, kernel, kernel],
                        Init::Glorot {
                            fan_in: c * area,
                            fan_out: maps * area,
                        },
                    );
                    param("bias", vec![maps], Init::Zeros);
                    NodeShape::Caps {
                        count: g.out_h * g.out_w * channels,
                        dim,
                    }
                }
                LayerNode::DiagnosisCaps { classes, dim, routings } => {
                    let (count, din) = expect_caps(i, node, cur)?;
                    if routings < 1 {
                        return Err(Error::out_of_range("routings", routings as f64, ">= 1"));
                    }
                    let rf = count * classes;
                    param(
                        "weight",
                        vec![count, classes, dim, din],
                        Init::Glorot {
                            fan_in: dim * rf,
                            fan_out: din * rf,
                        },
                    );
                    NodeShape::Caps { count: classes, dim }
                }
                LayerNode::CapsuleLength => {
                    let (count, _) = expect_caps(i, node, cur)?;
                    NodeShape::Flat(count)
                }
            };
            plan.shapes.push(cur);
            plan.node_params.push(p0..plan.params.len());
            plan.node_buffers.push(b0..plan.buffers.len());
        }
        Ok(plan)
    }

    /// Shape inference plus a check that the head matches `output_kind`.
    pub fn validate(&self) -> Result<Plan> {
        let plan = self.plan()?;
        let last = self.nodes.last();
        let ok = match self.output_kind {
            OutputKind::SigmoidBinary => matches!(
                last,
                Some(LayerNode::Dense {
                    units: 1,
                    activation: Activation::Sigmoid
                })
            ),
            OutputKind::Softmax2 => matches!(
                last,
                Some(LayerNode::Dense {
                    units: 2,
                    activation: Activation::Softmax
                })
            ),
            OutputKind::CapsuleLength2 => {
                matches!(last, Some(LayerNode::CapsuleLength)) && plan.output() == NodeShape::Flat(2)
            }
        };
        if !ok {
            return Err(Error::Invalid(format!(
                "model {} does not end in a {:?} head",
                self.name, self.output_kind
            )));
        }
        let concat = self
            .nodes
            .iter()
            .any(|n| matches!(n, LayerNode::ConcatMetadata { .. }));
        if concat != (self.metadata_width > 0) {
            return Err(Error::Invalid(format!(
                "model {} declares metadata width {} but {} a metadata layer",
                self.name,
                self.metadata_width,
                if concat { "has" } else { "lacks" }
            )));
        }
        Ok(plan)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.plan()?.param_count())
    }

    pub fn with_input_extent(mut self, h: usize, w: usize) -> Self {
        self.input_shape[1] = h;
        self.input_shape[2] = w;
        self
    }
}

// ----- builders -------------------------------------------------------

/// Identifier of a zoo architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelId {
    VanillaGray,
    VanillaRgb,
    Vgg16Head(u8),
    Vdsnet,
    CapsnetBasic,
    CapsnetModified,
}

impl ModelId {
    pub fn all() -> Vec<ModelId> {
        let mut v = vec![ModelId::VanillaGray, ModelId::VanillaRgb];
        v.extend((1..=5).map(ModelId::Vgg16Head));
        v.extend([ModelId::Vdsnet, ModelId::CapsnetBasic, ModelId::CapsnetModified]);
        v
    }

    /// Channels expected by the input pipeline.
    pub fn input_channels(self) -> usize {
        match self {
            ModelId::VanillaGray => 1,
            _ => 3,
        }
    }

    pub fn spec(self) -> Result<ModelSpec> {
        self.spec_at(INPUT_EXTENT)
    }

    /// Spec at a square input resolution other than the default.
    pub fn spec_at(self, extent: usize) -> Result<ModelSpec> {
        match self {
            ModelId::VanillaGray => Ok(vanilla_cnn(1, extent)),
            ModelId::VanillaRgb => Ok(vanilla_cnn(3, extent)),
            ModelId::Vgg16Head(h) => vgg16(h, 3, extent),
            ModelId::Vdsnet => Ok(vdsnet(extent)),
            ModelId::CapsnetBasic => Ok(capsnet(CapsuleConfig::new(CapsVariant::Basic), 3, extent)),
            ModelId::CapsnetModified => Ok(capsnet(CapsuleConfig::new(CapsVariant::Modified), 3, extent)),
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelId::VanillaGray => f.write_str("vanilla_gray"),
            ModelId::VanillaRgb => f.write_str("vanilla_rgb"),
            ModelId::Vgg16Head(h) => write!(f, "vgg16_head{h}"),
            ModelId::Vdsnet => f.write_str("vdsnet"),
            ModelId::CapsnetBasic => f.write_str("capsnet_basic"),
            ModelId::CapsnetModified => f.write_str("capsnet_modified"),
        }
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelId::all()
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown model id {s:?}")))
    }
}

impl Serialize for ModelId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Four conv/pool stages growing 16 → 128 filters, then a small dense head.
pub fn vanilla_cnn(channels: usize, extent: usize) -> ModelSpec {
    let mut nodes = Vec::new();
    for (filters, kernel) in [(16, 7), (32, 3), (64, 3), (128, 3)] {
        nodes.push(LayerNode::conv(filters, kernel, Activation::Relu));
        nodes.push(LayerNode::pool2(Padding::Valid));
    }
    nodes.extend([
        LayerNode::Flatten,
        LayerNode::dense(128, Activation::Relu),
        LayerNode::dense(1, Activation::Sigmoid),
    ]);
    ModelSpec {
        name: String::from(if channels == 1 { "vanilla_gray" } else { "vanilla_rgb" }),
        input_shape: [channels, extent, extent],
        metadata_width: 0,
        nodes,
        output_kind: OutputKind::SigmoidBinary,
    }
}

/// The 13 convolutions and 5 pools of VGG16.
pub fn vgg16_backbone() -> Vec<LayerNode> {
    let mut nodes = Vec::new();
    for (filters, reps) in [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)] {
        for _ in 0..reps {
            nodes.push(LayerNode::conv(filters, 3, Activation::Relu));
        }
        nodes.push(LayerNode::pool2(Padding::Same));
    }
    nodes
}

/// Layers following the backbone for each of the five classifier heads.
pub fn vgg16_head(head: u8) -> Result<Vec<LayerNode>> {
    use Activation::Relu;
    let fc = |u| LayerNode::dense(u, Relu);
    let drop = || LayerNode::Dropout { rate: 0.5 };
    let mut nodes = vec![LayerNode::GlobalAvgPool];
    match head {
        1 => nodes.extend([fc(4096), fc(4096)]),
        2 => {}
        3 => nodes.extend([fc(512), drop(), fc(256), drop(), fc(128), drop()]),
        4 => nodes.extend([fc(512), drop()]),
        5 => nodes.extend([fc(512), drop(), fc(512), drop(), fc(256), drop()]),
        other => return Err(Error::Invalid(format!("unknown VGG16 head {other}; expected 1..=5"))),
    }
    nodes.push(LayerNode::dense(2, Activation::Softmax));
    Ok(nodes)
}

pub fn vgg16(head: u8, channels: usize, extent: usize) -> Result<ModelSpec> {
    let mut nodes = vgg16_backbone();
    nodes.extend(vgg16_head(head)?);
    Ok(ModelSpec {
        name: format!("vgg16_head{head}"),
        input_shape: [channels, extent, extent],
        metadata_width: 0,
        nodes,
        output_kind: OutputKind::Softmax2,
    })
}

/// Lambda re-centering, batch norm and spatial transformer.
pub fn stn_front() -> Vec<LayerNode> {
    vec![
        LayerNode::LambdaScale { offset: LAMBDA_OFFSET },
        LayerNode::BatchNorm,
        LayerNode::SpatialTransformer,
    ]
}

pub fn vdsnet(extent: usize) -> ModelSpec {
    use Activation::Relu;
    let mut nodes = stn_front();
    nodes.extend(vgg16_backbone());
    nodes.extend([
        LayerNode::Flatten,
        LayerNode::ConcatMetadata { width: METADATA_WIDTH },
        LayerNode::Dropout { rate: 0.5 },
        LayerNode::dense(512, Relu),
        LayerNode::Dropout { rate: 0.5 },
        LayerNode::dense(128, Relu),
        LayerNode::dense(1, Activation::Sigmoid),
    ]);
    ModelSpec {
        name: String::from("vdsnet"),
        input_shape: [3, extent, extent],
        metadata_width: METADATA_WIDTH,
        nodes,
        output_kind: OutputKind::SigmoidBinary,
    }
}

pub fn capsnet(cfg: CapsuleConfig, channels: usize, extent: usize) -> ModelSpec {
    let basic = cfg.conv_stride == 1;
    ModelSpec {
        name: String::from(if basic { "capsnet_basic" } else { "capsnet_modified" }),
        input_shape: [channels, extent, extent],
        metadata_width: 0,
        nodes: vec![
            LayerNode::Conv2d {
                filters: cfg.conv_filters,
                kernel: [cfg.conv_kernel; 2],
                stride: [cfg.conv_stride; 2],
                padding: cfg.conv_padding,
                activation: Activation::Relu,
            },
            LayerNode::PrimaryCaps {
                dim: cfg.primary_dim,
                channels: cfg.primary_channels,
                kernel: cfg.primary_kernel,
                stride: cfg.primary_stride,
                padding: cfg.primary_padding,
            },
            LayerNode::DiagnosisCaps {
                classes: cfg.n_class,
                dim: cfg.digit_dim,
                routings: cfg.routings,
            },
            LayerNode::CapsuleLength,
        ],
        output_kind: OutputKind::CapsuleLength2,
    }
}

// ----- executor -------------------------------------------------------

/// Batch statistics observed by one batch-norm layer in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    /// Index of the running-mean buffer; the variance follows it.
    pub buffer: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct ForwardPass<T> {
    pub output: Var,
    pub params: Vec<Var>,
    pub batch_stats: Vec<BatchStats<T>>,
    /// Coupling coefficients of every routing layer, per iteration.
    pub couplings: Vec<Vec<Tensor<T>>>,
    /// Affine transforms predicted by every spatial transformer.
    pub thetas: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    spec: ModelSpec,
    plan: Plan,
    params: Vec<Tensor<T>>,
    buffers: Vec<Tensor<T>>,
}

impl<T: Real> Network<T> {
    pub fn new(spec: ModelSpec, rng: &mut dyn RngCore) -> Result<Self> {
        let plan = spec.validate()?;
        let params = plan
            .params
            .iter()
            .map(|s| s.materialize(rng))
            .collect::<Result<Vec<_>>>()?;
        let buffers = plan
            .buffers
            .iter()
            .map(|s| s.materialize(rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            plan,
            params,
            buffers,
        })
    }

    /// Rebuild from stored tensors, checking every shape against the plan.
    pub fn from_parts(spec: ModelSpec, params: Vec<Tensor<T>>, buffers: Vec<Tensor<T>>) -> Result<Self> {
        let plan = spec.validate()?;
        for (slots, tensors) in [(&plan.params, &params), (&plan.buffers, &buffers)] {
            if slots.len() != tensors.len() {
                return Err(Error::Invalid(format!(
                    "expected {} tensors, got {}",
                    slots.len(),
                    tensors.len()
                )));
            }
            for (slot, t) in slots.iter().zip(tensors.iter()) {
                if slot.shape != t.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "load parameters",
                        lhs: slot.shape.clone(),
                        rhs: t.shape().to_vec(),
                    });
                }
            }
        }
        Ok(Self {
            spec,
            plan,
            params,
            buffers,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            plan: self.plan.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            buffers: self.buffers.iter().map(Tensor::cast).collect(),
        }
    }

    /// Record every parameter on the tape as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        image: Var,
        meta: Option<Var>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardPass<T>> {
        let params = self.register(tape);
        self.forward_with(tape, &params, image, meta, mode, rng)
    }

    /// Forward pass using caller-registered parameter variables (one per
    /// parameter, in plan order).
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        image: Var,
        meta: Option<Var>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardPass<T>> {
        if params.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter variables, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let shape = tape.shape(image).to_vec();
        let [c, h, w] = self.spec.input_shape;
        if shape.len() != 4 || shape[1..] != [c, h, w] || shape[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: vec![0, c, h, w],
                rhs: shape,
            });
        }
        let n = shape[0];
        match (self.spec.metadata_width, meta) {
            (0, Some(_)) => {
                return Err(Error::Invalid(format!("model {} takes no metadata", self.spec.name)));
            }
            (width, None) if width > 0 => {
                return Err(Error::Invalid(format!(
                    "model {} requires a {width}-feature metadata vector per sample",
                    self.spec.name
                )));
            }
            (width, Some(m)) if tape.shape(m) != [n, width] => {
                return Err(Error::ShapeMismatch {
                    op: "metadata",
                    lhs: vec![n, width],
                    rhs: tape.shape(m).to_vec(),
                });
            }
            _ => {}
        }

        let mut pass = ForwardPass {
            output: image,
            params: params.to_vec(),
            batch_stats: Vec::new(),
            couplings: Vec::new(),
            thetas: Vec::new(),
        };
        let mut x = image;
        for (i, node) in self.spec.nodes.iter().enumerate() {
            let p = &params[self.plan.node_params[i].clone()];
            x = match *node {
                LayerNode::LambdaScale { offset } => tape.sub_scalar(x, T::of(offset))?,
                LayerNode::BatchNorm => {
                    let b = self.plan.node_buffers[i].start;
                    let eps = T::of(BN_EPSILON);
                    match mode {
                        Mode::Train => {
                            let (y, mean, var) = tape.batch_norm_train(x, p[0], p[1], eps)?;
                            pass.batch_stats.push(BatchStats { buffer: b, mean, var });
                            y
                        }
                        Mode::Infer => tape.batch_norm_infer(
                            x,
                            p[0],
                            p[1],
                            self.buffers[b].data(),
                            self.buffers[b + 1].data(),
                            eps,
                        )?,
                    }
                }
                LayerNode::SpatialTransformer => {
                    let (y, theta) = spatial_transformer(tape, x, p)?;
                    pass.thetas.push(theta);
                    y
                }
                LayerNode::Conv2d {
                    stride,
                    padding,
                    activation,
                    ..
                } => {
                    let y = tape.conv2d(x, p[0], Some(p[1]), (stride[0], stride[1]), padding)?;
                    activate(tape, y, activation)?
                }
                LayerNode::MaxPool {
                    window,
                    stride,
                    padding,
                } => tape.maxpool2d(x, (window[0], window[1]), (stride[0], stride[1]), padding)?,
                LayerNode::Flatten => tape.flatten(x)?,
                LayerNode::GlobalAvgPool => tape.global_avg_pool(x)?,
                LayerNode::Dense { activation, .. } => {
                    let y = dense(tape, x, p[0], p[1])?;
                    activate(tape, y, activation)?
                }
                LayerNode::Dropout { rate } => dropout(tape, x, rate, mode, rng)?,
                LayerNode::ConcatMetadata { .. } => {
                    let m = meta.expect("checked above");
                    tape.concat_features(x, m)?
                }
                LayerNode::PrimaryCaps {
                    dim,
                    channels,
                    stride,
                    padding,
                    ..
                } => primary_caps(tape, x, p[0], p[1], dim, channels, stride, padding)?,
                LayerNode::DiagnosisCaps { routings, .. } => {
                    let r = diagnosis_caps(tape, x, p[0], routings)?;
                    pass.couplings.push(r.couplings);
                    r.output
                }
                LayerNode::CapsuleLength => tape.vector_norm(x)?,
            };
        }
        pass.output = x;
        Ok(pass)
    }

    /// Fold training-mode batch statistics into the running buffers.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats<T>]) {
        for s in stats {
            let (lo, hi) = self.buffers.split_at_mut(s.buffer + 1);
            update_running_stats(lo[s.buffer].data_mut(), hi[0].data_mut(), &s.mean, &s.var, BN_MOMENTUM);
        }
    }
}
