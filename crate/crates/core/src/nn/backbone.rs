//! Backbone families, spec validation and model construction.
//!
//! Two families are built in: a VGG16-style stack (13 convs, 3 dense layers,
//! optionally width-scaled for desk-scale work) and a ResNet18-style stack
//! (20 convs with batch norm, global average pooling, 1 dense layer). Other
//! families can be plugged in through [`register_plugin`].

use super::graph::{Layer, LayerGroup, Model, Node, Param, ParamKind};
use super::ModelError;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock, RwLock};

/// Total downsampling factor of both built-in families.
pub const DOWNSAMPLE_FACTOR: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Family {
    Vgg16,
    Vgg16Tiny,
    ResNet18,
    Plugin(String),
}

impl Family {
    pub fn as_str(&self) -> String {
        match self {
            Family::Vgg16 => "vgg16".into(),
            Family::Vgg16Tiny => "vgg16_tiny".into(),
            Family::ResNet18 => "resnet18".into(),
            Family::Plugin(name) => format!("plugin:{name}"),
        }
    }

    pub fn parse(s: &str) -> Result<Family, ModelError> {
        match s {
            "vgg16" => Ok(Family::Vgg16),
            "vgg16_tiny" => Ok(Family::Vgg16Tiny),
            "resnet18" => Ok(Family::ResNet18),
            other => {
                if let Some(name) = other.strip_prefix("plugin:") {
                    Ok(Family::Plugin(name.to_string()))
                } else {
                    Err(ModelError::Spec(format!("unknown backbone family {other:?}")))
                }
            }
        }
    }
}

impl Serialize for Family {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.as_str())
    }
}

impl<'de> Deserialize<'de> for Family {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Family, D::Error> {
        let s = String::deserialize(d)?;
        Family::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub family: Family,
    pub input_hw: (usize, usize),
    pub input_channels: usize,
    pub width_multiplier: f64,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let (h, w) = self.input_hw;
        if !(self.input_channels == 1 || self.input_channels == 3) {
            return Err(ModelError::Spec(format!(
                "input_channels must be 1 or 3, got {}",
                self.input_channels
            )));
        }
        if !(self.width_multiplier > 0.0) {
            return Err(ModelError::Spec(format!(
                "width_multiplier must be > 0, got {}",
                self.width_multiplier
            )));
        }
        match self.family {
            Family::Vgg16 | Family::ResNet18 => {
                if (self.width_multiplier - 1.0).abs() > 1e-12 {
                    return Err(ModelError::Spec(format!(
                        "{} is fixed-width; width_multiplier must be 1.0",
                        self.family.as_str()
                    )));
                }
            }
            _ => {}
        }
        if matches!(self.family, Family::Vgg16 | Family::Vgg16Tiny) && (h < 32 || w < 32) {
            return Err(ModelError::Spec(format!(
                "VGG16-family input must be at least 32x32, got {h}x{w}"
            )));
        }
        if matches!(
            self.family,
            Family::Vgg16 | Family::Vgg16Tiny | Family::ResNet18
        ) && (h % DOWNSAMPLE_FACTOR != 0 || w % DOWNSAMPLE_FACTOR != 0)
        {
            return Err(ModelError::Spec(format!(
                "input dims must be divisible by {DOWNSAMPLE_FACTOR}, got {h}x{w}"
            )));
        }
        Ok(())
    }
}

/// Weight initialization strategy for [`build_model`].
#[derive(Debug, Clone)]
pub enum Init {
    /// He/Kaiming initialization from an explicit seed.
    Random { seed: u64 },
    /// External pretrained weights (checkpoint directory layout). Requires a
    /// 3-channel spec; conv-stack tensors must all match, the classifier head
    /// is freshly initialized when its shapes differ.
    PretrainedAsset { dir: PathBuf, head_seed: u64 },
    /// Restore every tensor from a saved checkpoint directory.
    Checkpoint { dir: PathBuf },
}

/// Declarative layer plan; structure mirrors the runtime node tree.
#[derive(Debug, Clone)]
pub enum PlanNode {
    Conv {
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        with_bn: bool,
    },
    Dense {
        out: usize,
    },
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool,
    Flatten,
    Residual {
        body: Vec<PlanNode>,
        shortcut: Vec<PlanNode>,
    },
}

/// Plugin hook: supply a layer plan for a custom family.
pub trait BackbonePlugin: Send + Sync {
    fn plan(&self, spec: &BackboneSpec) -> Result<Vec<PlanNode>, ModelError>;
}

fn registry() -> &'static RwLock<HashMap<String, Arc<dyn BackbonePlugin>>> {
    static REGISTRY: OnceLock<RwLock<HashMap<String, Arc<dyn BackbonePlugin>>>> = OnceLock::new();
    REGISTRY.get_or_init(|| RwLock::new(HashMap::new()))
}

/// Register a plugin family under `name` (addressed as `plugin:<name>`).
pub fn register_plugin(name: &str, plugin: Arc<dyn BackbonePlugin>) {
    registry()
        .write()
        .expect("registry lock")
        .insert(name.to_string(), plugin);
}

fn scaled(ch: usize, w: f64) -> usize {
    ((ch as f64 * w).round() as usize).max(1)
}

/// The layer plan for a spec.
pub fn family_plan(spec: &BackboneSpec) -> Result<Vec<PlanNode>, ModelError> {
    spec.validate()?;
    match &spec.family {
        Family::Vgg16 | Family::Vgg16Tiny => Ok(vgg16_plan(spec.width_multiplier)),
        Family::ResNet18 => Ok(resnet18_plan()),
        Family::Plugin(name) => {
            let reg = registry().read().expect("registry lock");
            let plugin = reg.get(name).ok_or_else(|| {
                ModelError::Spec(format!("no registered backbone plugin {name:?}"))
            })?;
            plugin.plan(spec)
        }
    }
}

fn vgg16_plan(width: f64) -> Vec<PlanNode> {
    let blocks: [&[usize]; 5] = [
        &[64, 64],
        &[128, 128],
        &[256, 256, 256],
        &[512, 512, 512],
        &[512, 512, 512],
    ];
    let mut plan = Vec::new();
    for block in blocks {
        for &ch in block {
            plan.push(PlanNode::Conv {
                out_ch: scaled(ch, width),
                k: 3,
                stride: 1,
                pad: 1,
                with_bn: false,
            });
            plan.push(PlanNode::Relu);
        }
        plan.push(PlanNode::MaxPool {
            k: 2,
            stride: 2,
            pad: 0,
        });
    }
    let hidden = scaled(4096, width);
    plan.push(PlanNode::Flatten);
    plan.push(PlanNode::Dense { out: hidden });
    plan.push(PlanNode::Relu);
    plan.push(PlanNode::Dense { out: hidden });
    plan.push(PlanNode::Relu);
    plan.push(PlanNode::Dense { out: 1 });
    plan
}

fn resnet18_plan() -> Vec<PlanNode> {
    fn basic_block(ch: usize, stride: usize, project: bool) -> Vec<PlanNode> {
        let body = vec![
            PlanNode::Conv {
                out_ch: ch,
                k: 3,
                stride,
                pad: 1,
                with_bn: true,
            },
            PlanNode::Relu,
            PlanNode::Conv {
                out_ch: ch,
                k: 3,
                stride: 1,
                pad: 1,
                with_bn: true,
            },
        ];
        let shortcut = if project {
            vec![PlanNode::Conv {
                out_ch: ch,
                k: 1,
                stride,
                pad: 0,
                with_bn: true,
            }]
        } else {
            Vec::new()
        };
        vec![PlanNode::Residual { body, shortcut }, PlanNode::Relu]
    }

    let mut plan = vec![
        PlanNode::Conv {
            out_ch: 64,
            k: 7,
            stride: 2,
            pad: 3,
            with_bn: true,
        },
        PlanNode::Relu,
        PlanNode::MaxPool {
            k: 3,
            stride: 2,
            pad: 1,
        },
    ];
    for (i, ch) in [64usize, 128, 256, 512].into_iter().enumerate() {
        let first_stride = if i == 0 { 1 } else { 2 };
        plan.extend(basic_block(ch, first_stride, i > 0));
        plan.extend(basic_block(ch, 1, false));
    }
    plan.push(PlanNode::GlobalAvgPool);
    plan.push(PlanNode::Dense { out: 1 });
    plan
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dims {
    Spatial(usize, usize, usize),
    Flat(usize),
}

/// Enumerate `(name, shape)` of every parameter without allocating weights.
pub fn parameter_shapes(spec: &BackboneSpec) -> Result<Vec<(String, Vec<usize>)>, ModelError> {
    let plan = family_plan(spec)?;
    let mut shapes = Vec::new();
    let mut next_idx = 1usize;
    let dims = Dims::Spatial(spec.input_channels, spec.input_hw.0, spec.input_hw.1);
    shapes_walk(&plan, dims, &mut next_idx, &mut shapes)?;
    Ok(shapes)
}

fn shapes_walk(
    plan: &[PlanNode],
    mut dims: Dims,
    next_idx: &mut usize,
    out: &mut Vec<(String, Vec<usize>)>,
) -> Result<Dims, ModelError> {
    for node in plan {
        dims = match node {
            PlanNode::Conv {
                out_ch,
                k,
                stride,
                pad,
                with_bn,
            } => {
                let (c, h, w) = spatial(dims)?;
                let idx = *next_idx;
                *next_idx += 1;
                out.push((format!("conv{idx:02}.weight"), vec![*out_ch, c, *k, *k]));
                out.push((format!("conv{idx:02}.bias"), vec![*out_ch]));
                if *with_bn {
                    for suffix in ["gamma", "beta", "running_mean", "running_var"] {
                        out.push((format!("bn{idx:02}.{suffix}"), vec![*out_ch]));
                    }
                }
                Dims::Spatial(
                    *out_ch,
                    super::ops::out_size(h, *k, *stride, *pad),
                    super::ops::out_size(w, *k, *stride, *pad),
                )
            }
            PlanNode::Dense { out: o } => {
                let f = flat(dims)?;
                let idx = *next_idx;
                *next_idx += 1;
                out.push((format!("fc{idx:02}.weight"), vec![*o, f]));
                out.push((format!("fc{idx:02}.bias"), vec![*o]));
                Dims::Flat(*o)
            }
            PlanNode::Relu => dims,
            PlanNode::MaxPool { k, stride, pad } => {
                let (c, h, w) = spatial(dims)?;
                Dims::Spatial(
                    c,
                    super::ops::out_size(h, *k, *stride, *pad),
                    super::ops::out_size(w, *k, *stride, *pad),
                )
            }
            PlanNode::GlobalAvgPool => {
                let (c, _, _) = spatial(dims)?;
                Dims::Flat(c)
            }
            PlanNode::Flatten => {
                let (c, h, w) = spatial(dims)?;
                Dims::Flat(c * h * w)
            }
            PlanNode::Residual { body, shortcut } => {
                let d_body = shapes_walk(body, dims, next_idx, out)?;
                let d_short = if shortcut.is_empty() {
                    dims
                } else {
                    shapes_walk(shortcut, dims, next_idx, out)?
                };
                if d_body != d_short {
                    return Err(ModelError::Spec(
                        "residual branches disagree on output dims".into(),
                    ));
                }
                d_body
            }
        };
    }
    Ok(dims)
}

fn spatial(d: Dims) -> Result<(usize, usize, usize), ModelError> {
    match d {
        Dims::Spatial(c, h, w) => Ok((c, h, w)),
        Dims::Flat(_) => Err(ModelError::Spec("expected spatial activation".into())),
    }
}

fn flat(d: Dims) -> Result<usize, ModelError> {
    match d {
        Dims::Flat(f) => Ok(f),
        Dims::Spatial(..) => Err(ModelError::Spec("expected flattened activation".into())),
    }
}

struct GraphBuilder {
    params: Vec<Param>,
    layer_groups: Vec<LayerGroup>,
    next_idx: usize,
    rng: ChaCha8Rng,
}

impl GraphBuilder {
    /// Draw from N(0, std) via Box-Muller; ChaCha keeps it reproducible.
    fn normal(&mut self, std: f64) -> f32 {
        let u1: f64 = self.rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = self.rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        (z * std) as f32
    }

    fn add_param(&mut self, name: String, kind: ParamKind, value: ArrayD<f32>) -> usize {
        self.params.push(Param::new(name, kind, value));
        self.params.len() - 1
    }

    fn build(&mut self, plan: &[PlanNode], mut dims: Dims) -> Result<(Vec<Node>, Dims), ModelError> {
        let mut nodes = Vec::new();
        for node in plan {
            match node {
                PlanNode::Conv {
                    out_ch,
                    k,
                    stride,
                    pad,
                    with_bn,
                } => {
                    let (c, h, w) = spatial(dims)?;
                    let idx = self.next_idx;
                    self.next_idx += 1;
                    let fan_in = (c * k * k) as f64;
                    let std = (2.0 / fan_in).sqrt();
                    let wv = ArrayD::from_shape_fn(IxDyn(&[*out_ch, c, *k, *k]), |_| {
                        self.normal(std)
                    });
                    let w_id = self.add_param(format!("conv{idx:02}.weight"), ParamKind::Kernel, wv);
                    let b_id = self.add_param(
                        format!("conv{idx:02}.bias"),
                        ParamKind::Bias,
                        ArrayD::zeros(IxDyn(&[*out_ch])),
                    );
                    let mut group = vec![w_id, b_id];
                    nodes.push(Node::L(Layer::Conv {
                        w: w_id,
                        b: b_id,
                        stride: *stride,
                        pad: *pad,
                    }));
                    if *with_bn {
                        let gamma = self.add_param(
                            format!("bn{idx:02}.gamma"),
                            ParamKind::BnScale,
                            ArrayD::ones(IxDyn(&[*out_ch])),
                        );
                        let beta = self.add_param(
                            format!("bn{idx:02}.beta"),
                            ParamKind::BnShift,
                            ArrayD::zeros(IxDyn(&[*out_ch])),
                        );
                        let mean = self.add_param(
                            format!("bn{idx:02}.running_mean"),
                            ParamKind::BnBuffer,
                            ArrayD::zeros(IxDyn(&[*out_ch])),
                        );
                        let var = self.add_param(
                            format!("bn{idx:02}.running_var"),
                            ParamKind::BnBuffer,
                            ArrayD::ones(IxDyn(&[*out_ch])),
                        );
                        group.extend([gamma, beta, mean, var]);
                        nodes.push(Node::L(Layer::BatchNorm {
                            gamma,
                            beta,
                            mean,
                            var,
                            eps: 1e-5,
                            momentum: 0.1,
                        }));
                    }
                    self.layer_groups.push(LayerGroup { param_ids: group });
                    dims = Dims::Spatial(
                        *out_ch,
                        super::ops::out_size(h, *k, *stride, *pad),
                        super::ops::out_size(w, *k, *stride, *pad),
                    );
                }
                PlanNode::Dense { out } => {
                    let f = flat(dims)?;
                    let idx = self.next_idx;
                    self.next_idx += 1;
                    let std = (2.0 / f as f64).sqrt();
                    let wv = ArrayD::from_shape_fn(IxDyn(&[*out, f]), |_| self.normal(std));
                    let w_id = self.add_param(format!("fc{idx:02}.weight"), ParamKind::Kernel, wv);
                    let b_id = self.add_param(
                        format!("fc{idx:02}.bias"),
                        ParamKind::Bias,
                        ArrayD::zeros(IxDyn(&[*out])),
                    );
                    self.layer_groups.push(LayerGroup {
                        param_ids: vec![w_id, b_id],
                    });
                    nodes.push(Node::L(Layer::Dense { w: w_id, b: b_id }));
                    dims = Dims::Flat(*out);
                }
                PlanNode::Relu => nodes.push(Node::L(Layer::Relu)),
                PlanNode::MaxPool { k, stride, pad } => {
                    let (c, h, w) = spatial(dims)?;
                    nodes.push(Node::L(Layer::MaxPool {
                        k: *k,
                        stride: *stride,
                        pad: *pad,
                    }));
                    dims = Dims::Spatial(
                        c,
                        super::ops::out_size(h, *k, *stride, *pad),
                        super::ops::out_size(w, *k, *stride, *pad),
                    );
                }
                PlanNode::GlobalAvgPool => {
                    let (c, _, _) = spatial(dims)?;
                    nodes.push(Node::L(Layer::GlobalAvgPool));
                    dims = Dims::Flat(c);
                }
                PlanNode::Flatten => {
                    let (c, h, w) = spatial(dims)?;
                    nodes.push(Node::L(Layer::Flatten));
                    dims = Dims::Flat(c * h * w);
                }
                PlanNode::Residual { body, shortcut } => {
                    let (body_nodes, d_body) = self.build(body, dims)?;
                    let (shortcut_nodes, d_short) = if shortcut.is_empty() {
                        (Vec::new(), dims)
                    } else {
                        self.build(shortcut, dims)?
                    };
                    if d_body != d_short {
                        return Err(ModelError::Spec(
                            "residual branches disagree on output dims".into(),
                        ));
                    }
                    nodes.push(Node::Residual {
                        body: body_nodes,
                        shortcut: shortcut_nodes,
                    });
                    dims = d_body;
                }
            }
        }
        Ok((nodes, dims))
    }
}

/// Build a model with the requested initialization.
pub fn build_model(spec: &BackboneSpec, init: Init) -> Result<Model, ModelError> {
    let plan = family_plan(spec)?;
    let seed = match &init {
        Init::Random { seed } => *seed,
        Init::PretrainedAsset { head_seed, .. } => *head_seed,
        Init::Checkpoint { .. } => 0,
    };
    let mut builder = GraphBuilder {
        params: Vec::new(),
        layer_groups: Vec::new(),
        next_idx: 1,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let dims = Dims::Spatial(spec.input_channels, spec.input_hw.0, spec.input_hw.1);
    let (nodes, final_dims) = builder.build(&plan, dims)?;
    if final_dims != Dims::Flat(1) {
        return Err(ModelError::Spec(format!(
            "model must end in a single-logit head, got {final_dims:?}"
        )));
    }
    let head_start = nodes
        .iter()
        .position(|n| matches!(n, Node::L(Layer::Flatten) | Node::L(Layer::GlobalAvgPool)))
        .ok_or_else(|| ModelError::Spec("model has no head boundary".into()))?;

    let mut model = Model {
        spec: spec.clone(),
        nodes,
        params: builder.params,
        layer_groups: builder.layer_groups,
        head_start,
    };

    match init {
        Init::Random { .. } => {}
        Init::PretrainedAsset { dir, .. } => {
            if spec.input_channels != 3 {
                return Err(ModelError::Init(
                    "pretrained assets require a 3-channel spec (replicate channels upstream)"
                        .into(),
                ));
            }
            let ckpt = super::checkpoint::Checkpoint::load(&dir)
                .map_err(|e| ModelError::Init(format!("cannot load asset: {e}")))?;
            load_asset_weights(&mut model, &ckpt.weights)?;
        }
        Init::Checkpoint { dir } => {
            let ckpt = super::checkpoint::Checkpoint::load(&dir)?;
            if ckpt.meta.backbone != *spec {
                return Err(ModelError::Init(format!(
                    "checkpoint spec {:?} does not match requested spec {:?}",
                    ckpt.meta.backbone, spec
                )));
            }
            model.load_weights_map(&ckpt.weights)?;
        }
    }
    Ok(model)
}

/// Copy every conv-stack tensor from an external asset; the classifier head
/// keeps its fresh initialization when absent or shape-mismatched.
fn load_asset_weights(
    model: &mut Model,
    weights: &std::collections::BTreeMap<String, ArrayD<f32>>,
) -> Result<(), ModelError> {
    for p in &mut model.params {
        let is_head = p.name.starts_with("fc");
        match weights.get(&p.name) {
            Some(v) if v.shape() == p.value.shape() => p.value.assign(v),
            Some(v) if is_head => {
                log::warn!(
                    "asset head tensor {} has shape {:?}, expected {:?}; keeping fresh init",
                    p.name,
                    v.shape(),
                    p.value.shape()
                );
            }
            Some(v) => {
                return Err(ModelError::Init(format!(
                    "asset tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            None if is_head => {}
            None => {
                return Err(ModelError::Init(format!(
                    "asset is missing conv-stack tensor {:?}",
                    p.name
                )));
            }
        }
    }
    Ok(())
}
