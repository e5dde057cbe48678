//! Model graph: parameter store, layer/node tree, forward and backward
//! execution, and freeze plans.
//!
//! A model is a sequence of nodes; residual nodes wrap a body and an optional
//! projection shortcut. Parameterized layers (every conv and dense layer) are
//! enumerated input-to-output; normalization layers belong to the group of
//! their preceding conv, so a freeze plan over `k` layers freezes exactly the
//! first `k` conv/dense layers plus their attached normalization.

use super::ops;
use super::ModelError;
use ndarray::{Array1, Array2, Array4, ArrayD};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Conv or dense kernel; participates in the L2 penalty.
    Kernel,
    Bias,
    BnScale,
    BnShift,
    /// Running statistic; never touched by the optimizer. Its `trainable`
    /// flag means "running stats may update during training".
    BnBuffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: String, kind: ParamKind, value: ArrayD<f32>) -> Param {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            name,
            kind,
            value,
            grad,
            trainable: true,
        }
    }

    /// Optimizer-visible: kernels, biases and BN affine parameters.
    pub fn is_weight(&self) -> bool {
        !matches!(self.kind, ParamKind::BnBuffer)
    }
}

/// A primitive layer; parameterized layers hold indices into the param store.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv {
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        mean: usize,
        var: usize,
        eps: f64,
        momentum: f64,
    },
    Dense {
        w: usize,
        b: usize,
    },
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool,
    Flatten,
}

#[derive(Debug, Clone)]
pub enum Node {
    L(Layer),
    Residual {
        body: Vec<Node>,
        shortcut: Vec<Node>,
    },
}

/// One parameterized layer (conv or dense) plus attached normalization.
#[derive(Debug, Clone)]
pub struct LayerGroup {
    /// All param ids of the group (kernel, bias, bn affine, bn buffers).
    pub param_ids: Vec<usize>,
}

/// Number of leading parameterized layers excluded from gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FreezePlan {
    pub frozen_prefix_len: usize,
}

/// Activation flowing between nodes.
#[derive(Debug, Clone)]
pub enum Act {
    A4(Array4<f32>),
    A2(Array2<f32>),
}

impl Act {
    fn a4(self) -> Result<Array4<f32>, ModelError> {
        match self {
            Act::A4(a) => Ok(a),
            Act::A2(a) => Err(ModelError::Shape(format!(
                "expected 4D activation, got 2D {:?}",
                a.dim()
            ))),
        }
    }

    fn a2(self) -> Result<Array2<f32>, ModelError> {
        match self {
            Act::A2(a) => Ok(a),
            Act::A4(a) => Err(ModelError::Shape(format!(
                "expected 2D activation, got 4D {:?}",
                a.dim()
            ))),
        }
    }
}

/// Per-layer state saved by a training forward pass for the backward pass.
pub enum LayerCache {
    None,
    Conv {
        x: Array4<f32>,
    },
    Bn {
        xhat: Array4<f32>,
        inv_std: Array1<f32>,
        used_batch_stats: bool,
    },
    Dense {
        x: Array2<f32>,
    },
    Relu4 {
        y: Array4<f32>,
    },
    Relu2 {
        y: Array2<f32>,
    },
    Pool {
        argmax: Vec<u32>,
        in_dim: (usize, usize, usize, usize),
    },
    Gap {
        in_dim: (usize, usize, usize, usize),
    },
    Flatten {
        in_dim: (usize, usize, usize, usize),
    },
}

pub enum NodeCache {
    L(LayerCache),
    Residual {
        body: Vec<NodeCache>,
        shortcut: Vec<NodeCache>,
    },
}

/// A built model: spec, node tree, flat parameter store and the canonical
/// parameterized-layer enumeration.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: super::backbone::BackboneSpec,
    pub nodes: Vec<Node>,
    pub params: Vec<Param>,
    pub layer_groups: Vec<LayerGroup>,
    /// Index of the first top-level head node (Flatten or GlobalAvgPool);
    /// everything before it is the convolutional stack.
    pub head_start: usize,
}

impl Model {
    pub fn n_params(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.is_weight())
            .map(|p| p.value.len())
            .sum()
    }

    pub fn n_parameterized_layers(&self) -> usize {
        self.layer_groups.len()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Sum of squared kernel entries (the L2 penalty term, without the
    /// coefficient). Biases and normalization parameters are excluded.
    pub fn l2_penalty(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Kernel)
            .map(|p| p.value.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
            .sum()
    }

    /// Freeze the first `plan.frozen_prefix_len` parameterized layers.
    ///
    /// Resets all parameters to trainable first, so plans are absolute, not
    /// cumulative. When `freeze_norm_stats` is set, running statistics of
    /// frozen normalization layers stop updating as well (the layer then
    /// normalizes with its stored statistics even in training mode).
    pub fn apply_freeze(
        &mut self,
        plan: FreezePlan,
        freeze_norm_stats: bool,
    ) -> Result<(), ModelError> {
        if plan.frozen_prefix_len > self.layer_groups.len() {
            return Err(ModelError::Config(format!(
                "freeze plan {} exceeds {} parameterized layers",
                plan.frozen_prefix_len,
                self.layer_groups.len()
            )));
        }
        for p in &mut self.params {
            p.trainable = true;
        }
        for g in &self.layer_groups[..plan.frozen_prefix_len] {
            for &id in &g.param_ids {
                let p = &mut self.params[id];
                if p.kind == ParamKind::BnBuffer {
                    p.trainable = !freeze_norm_stats;
                } else {
                    p.trainable = false;
                }
            }
        }
        Ok(())
    }

    /// Param ids of the frozen prefix under `plan` (weights only).
    pub fn frozen_param_ids(&self, plan: FreezePlan) -> Vec<usize> {
        self.layer_groups[..plan.frozen_prefix_len.min(self.layer_groups.len())]
            .iter()
            .flat_map(|g| g.param_ids.iter().copied())
            .filter(|&id| self.params[id].kind != ParamKind::BnBuffer)
            .collect()
    }

    /// Forward to logits, one per batch item.
    pub fn forward_logits(
        &mut self,
        x: Array4<f32>,
        training: bool,
        mut caches: Option<&mut Vec<NodeCache>>,
    ) -> Result<Array1<f32>, ModelError> {
        self.check_input(&x)?;
        let Model { nodes, params, .. } = self;
        let mut act = Act::A4(x);
        for node in nodes.iter() {
            act = node_forward(node, params, act, training, caches.as_deref_mut())?;
        }
        let out = act.a2()?;
        if out.dim().1 != 1 {
            return Err(ModelError::Shape(format!(
                "expected single-logit head, got {:?}",
                out.dim()
            )));
        }
        Ok(out.column(0).to_owned())
    }

    /// Eval-mode probabilities via the terminal sigmoid, clamped to (0, 1).
    pub fn predict_probs(&mut self, x: Array4<f32>) -> Result<Vec<f64>, ModelError> {
        let logits = self.forward_logits(x, false, None)?;
        Ok(logits
            .iter()
            .map(|&z| super::loss::sigmoid_clamped(z as f64))
            .collect())
    }

    /// Forward through the convolutional stack only (eval mode).
    ///
    /// Conv stacks are size-agnostic, so any input with the right channel
    /// count is accepted; this is what makes activations comparable across
    /// models built for different input sizes.
    pub fn conv_features(&mut self, x: Array4<f32>) -> Result<Array4<f32>, ModelError> {
        if x.dim().1 != self.spec.input_channels {
            return Err(ModelError::Shape(format!(
                "expected {} input channels, got {}",
                self.spec.input_channels,
                x.dim().1
            )));
        }
        let head_start = self.head_start;
        let Model { nodes, params, .. } = self;
        let mut act = Act::A4(x);
        for node in nodes.iter().take(head_start) {
            act = node_forward(node, params, act, false, None)?;
        }
        act.a4()
    }

    /// Backward from per-item logit gradients; accumulates into `param.grad`.
    pub fn backward(
        &mut self,
        dlogits: &Array1<f32>,
        caches: Vec<NodeCache>,
    ) -> Result<(), ModelError> {
        let n = dlogits.len();
        let dy = Array2::from_shape_fn((n, 1), |(i, _)| dlogits[i]);
        let Model { nodes, params, .. } = self;
        let mut grad = Act::A2(dy);
        for (node, cache) in nodes.iter().zip(caches.into_iter()).rev() {
            grad = node_backward(node, params, cache, grad)?;
        }
        Ok(())
    }

    pub fn weights_map(&self) -> BTreeMap<String, ArrayD<f32>> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Load values by name; every model parameter must be present with the
    /// right shape.
    pub fn load_weights_map(
        &mut self,
        weights: &BTreeMap<String, ArrayD<f32>>,
    ) -> Result<(), ModelError> {
        for p in &mut self.params {
            let v = weights.get(&p.name).ok_or_else(|| {
                ModelError::Init(format!("missing weight tensor {:?}", p.name))
            })?;
            if v.shape() != p.value.shape() {
                return Err(ModelError::Init(format!(
                    "tensor {:?} has shape {:?}, expected {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value.assign(v);
        }
        Ok(())
    }

    pub fn snapshot_weights(&self) -> Vec<ArrayD<f32>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore_weights(&mut self, snapshot: &[ArrayD<f32>]) {
        assert_eq!(snapshot.len(), self.params.len());
        for (p, v) in self.params.iter_mut().zip(snapshot.iter()) {
            p.value.assign(v);
        }
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<(), ModelError> {
        let (_, c, h, w) = x.dim();
        if c != self.spec.input_channels || (h, w) != self.spec.input_hw {
            return Err(ModelError::Shape(format!(
                "input {:?} does not match spec {}x{}x{:?}",
                x.dim(),
                self.spec.input_channels,
                "",
                self.spec.input_hw
            )));
        }
        Ok(())
    }
}

fn node_forward(
    node: &Node,
    params: &mut [Param],
    act: Act,
    training: bool,
    mut caches: Option<&mut Vec<NodeCache>>,
) -> Result<Act, ModelError> {
    match node {
        Node::L(layer) => {
            let (out, cache) = layer_forward(layer, params, act, training, caches.is_some())?;
            if let Some(c) = caches.as_deref_mut() {
                c.push(NodeCache::L(cache));
            }
            Ok(out)
        }
        Node::Residual { body, shortcut } => {
            let x = act.a4()?;
            let mut body_caches = caches.as_deref_mut().map(|_| Vec::new());
            let mut shortcut_caches = caches.as_deref_mut().map(|_| Vec::new());
            let mut b = Act::A4(x.clone());
            for n in body {
                b = node_forward(n, params, b, training, body_caches.as_mut())?;
            }
            let mut s = Act::A4(x);
            for n in shortcut {
                s = node_forward(n, params, s, training, shortcut_caches.as_mut())?;
            }
            let mut y = b.a4()?;
            let sv = s.a4()?;
            if y.dim() != sv.dim() {
                return Err(ModelError::Shape(format!(
                    "residual branch mismatch: {:?} vs {:?}",
                    y.dim(),
                    sv.dim()
                )));
            }
            y += &sv;
            if let Some(c) = caches.as_deref_mut() {
                c.push(NodeCache::Residual {
                    body: body_caches.unwrap(),
                    shortcut: shortcut_caches.unwrap(),
                });
            }
            Ok(Act::A4(y))
        }
    }
}

fn layer_forward(
    layer: &Layer,
    params: &mut [Param],
    act: Act,
    training: bool,
    want_cache: bool,
) -> Result<(Act, LayerCache), ModelError> {
    match layer {
        Layer::Conv { w, b, stride, pad } => {
            let x = act.a4()?;
            let wv = params[*w].value.view().into_dimensionality().unwrap();
            let bv = params[*b].value.view().into_dimensionality().unwrap();
            let y = ops::conv2d_forward(&x.view(), &wv, &bv, *stride, *pad);
            let cache = if want_cache {
                LayerCache::Conv { x }
            } else {
                LayerCache::None
            };
            Ok((Act::A4(y), cache))
        }
        Layer::BatchNorm {
            gamma,
            beta,
            mean,
            var,
            eps,
            momentum,
        } => {
            let x = act.a4()?;
            // Frozen statistics force eval-mode normalization even in training.
            let stats_update_allowed = params[*mean].trainable;
            let use_batch = training && stats_update_allowed;
            let g = params[*gamma].value.clone();
            let bt = params[*beta].value.clone();
            let rm = params[*mean].value.clone();
            let rv = params[*var].value.clone();
            let (y, xhat, inv_std, batch_mean, batch_var) = ops::batchnorm_forward(
                &x.view(),
                &g.view().into_dimensionality().unwrap(),
                &bt.view().into_dimensionality().unwrap(),
                &rm.view().into_dimensionality().unwrap(),
                &rv.view().into_dimensionality().unwrap(),
                *eps,
                use_batch,
            );
            if use_batch {
                let m = *momentum as f32;
                params[*mean]
                    .value
                    .zip_mut_with(&batch_mean.into_dyn(), |r, &b| *r = (1.0 - m) * *r + m * b);
                params[*var]
                    .value
                    .zip_mut_with(&batch_var.into_dyn(), |r, &b| *r = (1.0 - m) * *r + m * b);
            }
            let cache = if want_cache {
                LayerCache::Bn {
                    xhat,
                    inv_std,
                    used_batch_stats: use_batch,
                }
            } else {
                LayerCache::None
            };
            Ok((Act::A4(y), cache))
        }
        Layer::Dense { w, b } => {
            let x = act.a2()?;
            let wv = params[*w].value.view().into_dimensionality().unwrap();
            let bv = params[*b].value.view().into_dimensionality().unwrap();
            let y = ops::dense_forward(&x.view(), &wv, &bv);
            let cache = if want_cache {
                LayerCache::Dense { x }
            } else {
                LayerCache::None
            };
            Ok((Act::A2(y), cache))
        }
        Layer::Relu => match act {
            Act::A4(mut a) => {
                ops::relu4(&mut a);
                let cache = if want_cache {
                    LayerCache::Relu4 { y: a.clone() }
                } else {
                    LayerCache::None
                };
                Ok((Act::A4(a), cache))
            }
            Act::A2(mut a) => {
                ops::relu2(&mut a);
                let cache = if want_cache {
                    LayerCache::Relu2 { y: a.clone() }
                } else {
                    LayerCache::None
                };
                Ok((Act::A2(a), cache))
            }
        },
        Layer::MaxPool { k, stride, pad } => {
            let x = act.a4()?;
            let in_dim = x.dim();
            let (y, argmax) = ops::maxpool_forward(&x.view(), *k, *stride, *pad);
            let cache = if want_cache {
                LayerCache::Pool { argmax, in_dim }
            } else {
                LayerCache::None
            };
            Ok((Act::A4(y), cache))
        }
        Layer::GlobalAvgPool => {
            let x = act.a4()?;
            let in_dim = x.dim();
            let y = ops::global_avg_pool(&x.view());
            let cache = if want_cache {
                LayerCache::Gap { in_dim }
            } else {
                LayerCache::None
            };
            Ok((Act::A2(y), cache))
        }
        Layer::Flatten => {
            let x = act.a4()?;
            let in_dim = x.dim();
            let (n, c, h, w) = in_dim;
            let y = x
                .into_shape_with_order((n, c * h * w))
                .expect("contiguous activation");
            let cache = if want_cache {
                LayerCache::Flatten { in_dim }
            } else {
                LayerCache::None
            };
            Ok((Act::A2(y), cache))
        }
    }
}

fn node_backward(
    node: &Node,
    params: &mut [Param],
    cache: NodeCache,
    dy: Act,
) -> Result<Act, ModelError> {
    match (node, cache) {
        (Node::L(layer), NodeCache::L(cache)) => layer_backward(layer, params, cache, dy),
        (
            Node::Residual { body, shortcut },
            NodeCache::Residual {
                body: bc,
                shortcut: sc,
            },
        ) => {
            let d = dy.a4()?;
            let mut db = Act::A4(d.clone());
            for (n, c) in body.iter().zip(bc.into_iter()).rev() {
                db = node_backward(n, params, c, db)?;
            }
            let mut ds = Act::A4(d);
            for (n, c) in shortcut.iter().zip(sc.into_iter()).rev() {
                ds = node_backward(n, params, c, ds)?;
            }
            let mut dx = db.a4()?;
            dx += &ds.a4()?;
            Ok(Act::A4(dx))
        }
        _ => Err(ModelError::Shape("cache/node structure mismatch".into())),
    }
}

fn layer_backward(
    layer: &Layer,
    params: &mut [Param],
    cache: LayerCache,
    dy: Act,
) -> Result<Act, ModelError> {
    match (layer, cache) {
        (Layer::Conv { w, b, stride, pad }, LayerCache::Conv { x }) => {
            let d = dy.a4()?;
            let wv = params[*w].value.view().into_dimensionality().unwrap();
            let (dx, dw, db) = ops::conv2d_backward(&x.view(), &wv, &d.view(), *stride, *pad);
            accumulate(&mut params[*w].grad, dw.into_dyn());
            accumulate(&mut params[*b].grad, db.into_dyn());
            Ok(Act::A4(dx))
        }
        (
            Layer::BatchNorm { gamma, beta, .. },
            LayerCache::Bn {
                xhat,
                inv_std,
                used_batch_stats,
            },
        ) => {
            let d = dy.a4()?;
            let g = params[*gamma].value.clone();
            let (dx, dgamma, dbeta) = ops::batchnorm_backward(
                &d.view(),
                &xhat.view(),
                &inv_std.view(),
                &g.view().into_dimensionality().unwrap(),
                used_batch_stats,
            );
            accumulate(&mut params[*gamma].grad, dgamma.into_dyn());
            accumulate(&mut params[*beta].grad, dbeta.into_dyn());
            Ok(Act::A4(dx))
        }
        (Layer::Dense { w, b }, LayerCache::Dense { x }) => {
            let d = dy.a2()?;
            let wv = params[*w].value.view().into_dimensionality().unwrap();
            let (dx, dw, db) = ops::dense_backward(&x.view(), &wv, &d.view());
            accumulate(&mut params[*w].grad, dw.into_dyn());
            accumulate(&mut params[*b].grad, db.into_dyn());
            Ok(Act::A2(dx))
        }
        (Layer::Relu, LayerCache::Relu4 { y }) => {
            let mut d = dy.a4()?;
            ndarray::Zip::from(&mut d).and(&y).for_each(|g, &v| {
                if v <= 0.0 {
                    *g = 0.0;
                }
            });
            Ok(Act::A4(d))
        }
        (Layer::Relu, LayerCache::Relu2 { y }) => {
            let mut d = dy.a2()?;
            ndarray::Zip::from(&mut d).and(&y).for_each(|g, &v| {
                if v <= 0.0 {
                    *g = 0.0;
                }
            });
            Ok(Act::A2(d))
        }
        (Layer::MaxPool { .. }, LayerCache::Pool { argmax, in_dim }) => {
            let d = dy.a4()?;
            Ok(Act::A4(ops::maxpool_backward(&d.view(), &argmax, in_dim)))
        }
        (Layer::GlobalAvgPool, LayerCache::Gap { in_dim }) => {
            let d = dy.a2()?;
            Ok(Act::A4(ops::global_avg_pool_backward(&d.view(), in_dim)))
        }
        (Layer::Flatten, LayerCache::Flatten { in_dim }) => {
            let d = dy.a2()?;
            let dx = d
                .into_shape_with_order(in_dim)
                .expect("contiguous gradient");
            Ok(Act::A4(dx))
        }
        _ => Err(ModelError::Shape("cache/layer mismatch in backward".into())),
    }
}

fn accumulate(grad: &mut ArrayD<f32>, delta: ArrayD<f32>) {
    grad.zip_mut_with(&delta, |g, &d| *g += d);
}
