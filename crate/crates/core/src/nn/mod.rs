//! CNN backbones, losses, optimizer and checkpoints.
//!
//! The differentiable backend is self-contained: `f32` tensors, im2col
//! convolutions through a single-threaded GEMM, fixed accumulation orders.
//! Given a seed, every forward, backward and optimizer step is bitwise
//! reproducible.

pub mod backbone;
pub mod checkpoint;
pub mod graph;
pub mod loss;
pub mod ops;
pub mod optim;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("spec error: {0}")]
    Spec(String),
    #[error("initialization error: {0}")]
    Init(String),
    #[error("transplant error: {0}")]
    Transplant(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] crate::io::TensorIoError),
}

pub use backbone::{build_model, parameter_shapes, BackboneSpec, Family, Init};
pub use checkpoint::{transplant_conv_stack, Checkpoint, CheckpointMeta, Domain};
pub use graph::{FreezePlan, Model};
pub use loss::{binary_cross_entropy, focal_loss, LossConfig, LossKind};
pub use optim::{Adam, AdamParams};

#[cfg(test)]
mod tests {
    use super::backbone::*;
    use super::checkpoint::*;
    use super::graph::FreezePlan;
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec(hw: usize, width: f64) -> BackboneSpec {
        BackboneSpec {
            family: Family::Vgg16Tiny,
            input_hw: (hw, hw),
            input_channels: 1,
            width_multiplier: width,
        }
    }

    fn random_batch(n: usize, c: usize, hw: usize, seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((n, c, hw, hw), |_| rng.gen_range(0.0f32..1.0))
    }

    #[test]
    fn seeded_build_is_reproducible() {
        let spec = tiny_spec(32, 0.25);
        let a = build_model(&spec, Init::Random { seed: 5 }).unwrap();
        let b = build_model(&spec, Init::Random { seed: 5 }).unwrap();
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value, pb.value);
        }
        let c = build_model(&spec, Init::Random { seed: 6 }).unwrap();
        let differs = a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|(x, y)| x.value != y.value);
        assert!(differs);
    }

    #[test]
    fn forward_probs_in_open_unit_interval() {
        let spec = tiny_spec(32, 0.125);
        let mut model = build_model(&spec, Init::Random { seed: 1 }).unwrap();
        let probs = model.predict_probs(random_batch(8, 1, 32, 2)).unwrap();
        assert_eq!(probs.len(), 8);
        for p in probs {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn resnet18_builds_and_runs() {
        let spec = BackboneSpec {
            family: Family::ResNet18,
            input_hw: (32, 32),
            input_channels: 1,
            width_multiplier: 1.0,
        };
        let mut model = build_model(&spec, Init::Random { seed: 3 }).unwrap();
        // 20 convs + 1 fc.
        assert_eq!(model.n_parameterized_layers(), 21);
        let probs = model.predict_probs(random_batch(2, 1, 32, 4)).unwrap();
        assert_eq!(probs.len(), 2);
        for p in probs {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn vgg16_shapes_conv_equal_head_differs() {
        let big = BackboneSpec {
            family: Family::Vgg16,
            input_hw: (320, 320),
            input_channels: 3,
            width_multiplier: 1.0,
        };
        let small = BackboneSpec {
            family: Family::Vgg16,
            input_hw: (32, 32),
            input_channels: 3,
            width_multiplier: 1.0,
        };
        let a = parameter_shapes(&big).unwrap();
        let b = parameter_shapes(&small).unwrap();
        assert_eq!(a.len(), b.len());
        let mut head_diff = 0;
        for ((na, sa), (nb, sb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            if na.starts_with("conv") {
                assert_eq!(sa, sb, "conv stack shape must not depend on input size");
            } else if sa != sb {
                head_diff += 1;
            }
        }
        // First dense kernel depends on the flatten size.
        assert_eq!(head_diff, 1);
        assert_eq!(a.iter().filter(|(n, _)| n.starts_with("conv")).count(), 26);
        // 320/32 = 10 -> 10*10*512 inputs to the first dense layer.
        let fc14 = a.iter().find(|(n, _)| n == "fc14.weight").unwrap();
        assert_eq!(fc14.1, vec![4096, 51200]);
    }

    #[test]
    fn parameter_shapes_match_built_model() {
        let spec = tiny_spec(64, 0.25);
        let shapes = parameter_shapes(&spec).unwrap();
        let model = build_model(&spec, Init::Random { seed: 0 }).unwrap();
        assert_eq!(shapes.len(), model.params.len());
        for ((name, shape), p) in shapes.iter().zip(model.params.iter()) {
            assert_eq!(name, &p.name);
            assert_eq!(shape.as_slice(), p.value.shape());
        }

        let rspec = BackboneSpec {
            family: Family::ResNet18,
            input_hw: (32, 32),
            input_channels: 3,
            width_multiplier: 1.0,
        };
        let shapes = parameter_shapes(&rspec).unwrap();
        let model = build_model(&rspec, Init::Random { seed: 0 }).unwrap();
        assert_eq!(shapes.len(), model.params.len());
        for ((name, shape), p) in shapes.iter().zip(model.params.iter()) {
            assert_eq!(name, &p.name);
            assert_eq!(shape.as_slice(), p.value.shape());
        }
    }

    #[test]
    fn spec_validation_rejects_bad_inputs() {
        let mut spec = tiny_spec(48, 0.25);
        assert!(spec.validate().is_err()); // not divisible by 32
        spec.input_hw = (32, 32);
        spec.input_channels = 2;
        assert!(spec.validate().is_err());
        spec.input_channels = 1;
        spec.width_multiplier = 0.0;
        assert!(spec.validate().is_err());
        let full = BackboneSpec {
            family: Family::Vgg16,
            input_hw: (64, 64),
            input_channels: 1,
            width_multiplier: 0.5,
        };
        assert!(full.validate().is_err()); // full family is fixed-width
    }

    #[test]
    fn freeze_plan_marks_prefix_non_trainable() {
        let spec = tiny_spec(32, 0.125);
        let mut model = build_model(&spec, Init::Random { seed: 1 }).unwrap();
        assert_eq!(model.n_parameterized_layers(), 16);
        model.apply_freeze(FreezePlan { frozen_prefix_len: 15 }, true).unwrap();
        let trainable: Vec<&str> = model
            .params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.as_str())
            .collect();
        assert_eq!(trainable, vec!["fc16.weight", "fc16.bias"]);
        assert!(model
            .apply_freeze(FreezePlan { frozen_prefix_len: 17 }, true)
            .is_err());
        // Plan 0 -> everything trainable again.
        model.apply_freeze(FreezePlan::default(), true).unwrap();
        assert!(model.params.iter().all(|p| p.trainable));
    }

    #[test]
    fn graph_gradient_matches_finite_differences() {
        // Whole-graph wiring check on a small composite net covering conv,
        // batch norm, a residual connection, pooling, GAP, dense and the
        // focal logit gradient. Shallow on purpose: f32 finite differences
        // stay meaningful.
        struct GradNet;
        impl BackbonePlugin for GradNet {
            fn plan(&self, _spec: &BackboneSpec) -> Result<Vec<PlanNode>, ModelError> {
                let conv = |bn: bool| PlanNode::Conv {
                    out_ch: 4,
                    k: 3,
                    stride: 1,
                    pad: 1,
                    with_bn: bn,
                };
                Ok(vec![
                    conv(true),
                    PlanNode::Relu,
                    PlanNode::MaxPool {
                        k: 2,
                        stride: 2,
                        pad: 0,
                    },
                    PlanNode::Residual {
                        body: vec![conv(true), PlanNode::Relu, conv(true)],
                        shortcut: vec![],
                    },
                    PlanNode::Relu,
                    PlanNode::GlobalAvgPool,
                    PlanNode::Dense { out: 1 },
                ])
            }
        }
        register_plugin("gradcheck", std::sync::Arc::new(GradNet));
        let spec = BackboneSpec {
            family: Family::Plugin("gradcheck".into()),
            input_hw: (8, 8),
            input_channels: 1,
            width_multiplier: 1.0,
        };
        let mut model = build_model(&spec, Init::Random { seed: 11 }).unwrap();
        let x = random_batch(3, 1, 8, 12);
        let labels = [1u8, 0, 1];
        let cfg = loss::LossConfig::focal(2.0, 0.25);

        // Training-mode loss; batch-norm uses batch statistics, matching the
        // analytic backward path. Running-stat drift does not feed it.
        let loss_at = |model: &mut graph::Model| -> f64 {
            let logits = model.forward_logits(x.clone(), true, None).unwrap();
            let probs: Vec<f64> = logits
                .iter()
                .map(|&z| loss::sigmoid_clamped(z as f64))
                .collect();
            loss::batch_loss(&cfg, &probs, &labels)
        };

        let mut caches = Vec::new();
        let logits = model
            .forward_logits(x.clone(), true, Some(&mut caches))
            .unwrap();
        let n = logits.len() as f64;
        let dlogits = ndarray::Array1::from_shape_fn(3, |i| {
            (loss::grad_wrt_logit(&cfg, logits[i] as f64, labels[i]) / n) as f32
        });
        model.zero_grads();
        model.backward(&dlogits, caches).unwrap();

        // Per-tensor relative L2 comparison; element-wise checks are too
        // brittle near ReLU kinks, which a perturbation can flip.
        let h = 1e-3f32;
        for pid in 0..model.params.len() {
            if model.params[pid].kind == graph::ParamKind::BnBuffer {
                continue;
            }
            let mut diff2 = 0.0f64;
            let mut norm2 = 0.0f64;
            for eid in 0..model.params[pid].value.len() {
                let analytic = model.params[pid].grad.as_slice().unwrap()[eid] as f64;
                let orig = model.params[pid].value.as_slice().unwrap()[eid];
                model.params[pid].value.as_slice_mut().unwrap()[eid] = orig + h;
                let lp = loss_at(&mut model);
                model.params[pid].value.as_slice_mut().unwrap()[eid] = orig - h;
                let lm = loss_at(&mut model);
                model.params[pid].value.as_slice_mut().unwrap()[eid] = orig;
                let numeric = (lp - lm) / (2.0 * h as f64);
                diff2 += (numeric - analytic).powi(2);
                norm2 += numeric.powi(2).max(analytic.powi(2));
            }
            // A bias feeding a batch norm has true gradient 0 (the batch
            // mean absorbs it); both estimates are then pure f32 noise.
            let rel = (diff2 / norm2.max(1e-12)).sqrt();
            assert!(
                rel < 2e-2 || norm2.sqrt() < 1e-4,
                "param {}: relative gradient error {rel} (norm {})",
                model.params[pid].name,
                norm2.sqrt()
            );
        }
    }

    #[test]
    fn l2_penalty_sums_squared_kernels() {
        let spec = tiny_spec(32, 0.125);
        let model = build_model(&spec, Init::Random { seed: 2 }).unwrap();
        let manual: f64 = model
            .params
            .iter()
            .filter(|p| p.name.ends_with(".weight"))
            .flat_map(|p| p.value.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum();
        assert!((model.l2_penalty() - manual).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec(32, 0.125);
        let model = build_model(&spec, Init::Random { seed: 21 }).unwrap();
        let meta = CheckpointMeta {
            domain: Domain::Patch,
            modality: crate::types::Modality::T2w,
            backbone: spec.clone(),
            input_hw: spec.input_hw,
            config_hash: "deadbeef".into(),
            best_val_auc: 0.5,
            epoch: 3,
            source_checkpoint: None,
        };
        let ckpt = Checkpoint::from_model(&model, meta);
        ckpt.save(dir.path()).unwrap();
        let loaded = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(loaded.meta, ckpt.meta);
        assert_eq!(loaded.weights, ckpt.weights);
        let restored = loaded.restore_model().unwrap();
        for (a, b) in restored.params.iter().zip(model.params.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn transplant_preserves_conv_activations() {
        let src_spec = tiny_spec(32, 0.25);
        let mut src_model = build_model(&src_spec, Init::Random { seed: 30 }).unwrap();
        let meta = CheckpointMeta {
            domain: Domain::Patch,
            modality: crate::types::Modality::T2w,
            backbone: src_spec.clone(),
            input_hw: src_spec.input_hw,
            config_hash: String::new(),
            best_val_auc: 0.0,
            epoch: 0,
            source_checkpoint: None,
        };
        let ckpt = Checkpoint::from_model(&src_model, meta);

        let target_spec = tiny_spec(128, 0.25);
        let mut target = transplant_conv_stack(&ckpt, &target_spec, 31).unwrap();

        let tile = random_batch(2, 1, 32, 32);
        let fa = src_model.conv_features(tile.clone()).unwrap();
        let fb = target.conv_features(tile).unwrap();
        let max_abs = fa
            .iter()
            .zip(fb.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_abs <= 1e-6, "conv activations differ by {max_abs}");
    }

    #[test]
    fn transplant_same_spec_copies_conv_reinits_head() {
        let spec = tiny_spec(32, 0.25);
        let model = build_model(&spec, Init::Random { seed: 40 }).unwrap();
        let meta = CheckpointMeta {
            domain: Domain::Patch,
            modality: crate::types::Modality::Adc,
            backbone: spec.clone(),
            input_hw: spec.input_hw,
            config_hash: String::new(),
            best_val_auc: 0.0,
            epoch: 0,
            source_checkpoint: None,
        };
        let ckpt = Checkpoint::from_model(&model, meta);
        let target = transplant_conv_stack(&ckpt, &spec, 41).unwrap();
        let mut head_changed = false;
        for (a, b) in target.params.iter().zip(model.params.iter()) {
            if a.name.starts_with("conv") {
                assert_eq!(a.value, b.value, "{} must be copied", a.name);
            } else if a.name.ends_with(".weight") && a.value != b.value {
                head_changed = true;
            }
        }
        assert!(head_changed, "head must be re-initialized");
    }

    #[test]
    fn transplant_family_mismatch_rejected() {
        let spec = tiny_spec(32, 0.25);
        let model = build_model(&spec, Init::Random { seed: 50 }).unwrap();
        let meta = CheckpointMeta {
            domain: Domain::Patch,
            modality: crate::types::Modality::T2w,
            backbone: spec.clone(),
            input_hw: spec.input_hw,
            config_hash: String::new(),
            best_val_auc: 0.0,
            epoch: 0,
            source_checkpoint: None,
        };
        let ckpt = Checkpoint::from_model(&model, meta);
        let resnet = BackboneSpec {
            family: Family::ResNet18,
            input_hw: (32, 32),
            input_channels: 1,
            width_multiplier: 1.0,
        };
        assert!(matches!(
            transplant_conv_stack(&ckpt, &resnet, 0),
            Err(ModelError::Transplant(_))
        ));
    }

    #[test]
    fn frozen_weights_unchanged_by_optimizer_steps() {
        let spec = tiny_spec(32, 0.125);
        let mut model = build_model(&spec, Init::Random { seed: 60 }).unwrap();
        let plan = FreezePlan { frozen_prefix_len: 15 };
        model.apply_freeze(plan, true).unwrap();
        let frozen_ids = model.frozen_param_ids(plan);
        let before: Vec<_> = frozen_ids
            .iter()
            .map(|&i| model.params[i].value.clone())
            .collect();

        let mut opt = optim::Adam::new(&model, optim::AdamParams::default());
        let cfg = loss::LossConfig::ce();
        let x = random_batch(4, 1, 32, 61);
        let labels = [1u8, 0, 1, 0];
        for _ in 0..3 {
            let mut caches = Vec::new();
            let logits = model.forward_logits(x.clone(), true, Some(&mut caches)).unwrap();
            let dlogits = ndarray::Array1::from_shape_fn(4, |i| {
                (loss::grad_wrt_logit(&cfg, logits[i] as f64, labels[i]) / 4.0) as f32
            });
            model.zero_grads();
            model.backward(&dlogits, caches).unwrap();
            opt.step(&mut model, 1e-3, 1e-4);
        }
        for (&i, snapshot) in frozen_ids.iter().zip(before.iter()) {
            assert_eq!(
                model.params[i].value, *snapshot,
                "{} must be bitwise unchanged",
                model.params[i].name
            );
        }
        // And something did train.
        let fc16 = model.params.iter().find(|p| p.name == "fc16.weight").unwrap();
        let fresh = build_model(&spec, Init::Random { seed: 60 }).unwrap();
        let fc16_fresh = fresh.params.iter().find(|p| p.name == "fc16.weight").unwrap();
        assert_ne!(fc16.value, fc16_fresh.value);
    }

    #[test]
    fn plugin_family_registers_and_builds() {
        struct Linearish;
        impl BackbonePlugin for Linearish {
            fn plan(&self, _spec: &BackboneSpec) -> Result<Vec<PlanNode>, ModelError> {
                Ok(vec![
                    PlanNode::Conv {
                        out_ch: 4,
                        k: 3,
                        stride: 1,
                        pad: 1,
                        with_bn: false,
                    },
                    PlanNode::Relu,
                    PlanNode::GlobalAvgPool,
                    PlanNode::Dense { out: 1 },
                ])
            }
        }
        register_plugin("linearish", std::sync::Arc::new(Linearish));
        let spec = BackboneSpec {
            family: Family::Plugin("linearish".into()),
            input_hw: (16, 16),
            input_channels: 1,
            width_multiplier: 1.0,
        };
        let mut model = build_model(&spec, Init::Random { seed: 0 }).unwrap();
        let probs = model.predict_probs(random_batch(2, 1, 16, 1)).unwrap();
        assert_eq!(probs.len(), 2);
        assert!(matches!(
            build_model(
                &BackboneSpec {
                    family: Family::Plugin("missing".into()),
                    ..spec
                },
                Init::Random { seed: 0 }
            ),
            Err(ModelError::Spec(_))
        ));
    }

    #[test]
    fn pretrained_asset_requires_three_channels_and_loads_convs() {
        let dir = tempfile::tempdir().unwrap();
        // Fabricate an "asset": a trained 3-channel tiny model saved to disk.
        let asset_spec = BackboneSpec {
            family: Family::Vgg16Tiny,
            input_hw: (64, 64),
            input_channels: 3,
            width_multiplier: 0.125,
        };
        let asset_model = build_model(&asset_spec, Init::Random { seed: 70 }).unwrap();
        let meta = CheckpointMeta {
            domain: Domain::Slice,
            modality: crate::types::Modality::T2w,
            backbone: asset_spec.clone(),
            input_hw: asset_spec.input_hw,
            config_hash: String::new(),
            best_val_auc: 0.0,
            epoch: 0,
            source_checkpoint: None,
        };
        Checkpoint::from_model(&asset_model, meta).save(dir.path()).unwrap();

        // 1-channel spec is refused.
        let one_ch = BackboneSpec {
            input_channels: 1,
            ..asset_spec.clone()
        };
        assert!(build_model(
            &one_ch,
            Init::PretrainedAsset {
                dir: dir.path().to_path_buf(),
                head_seed: 1,
            },
        )
        .is_err());

        // Different input size reuses the conv stack, head differs in shape.
        let target = BackboneSpec {
            input_hw: (32, 32),
            ..asset_spec
        };
        let model = build_model(
            &target,
            Init::PretrainedAsset {
                dir: dir.path().to_path_buf(),
                head_seed: 1,
            },
        )
        .unwrap();
        for p in &model.params {
            if p.name.starts_with("conv") {
                let src = asset_model
                    .params
                    .iter()
                    .find(|q| q.name == p.name)
                    .unwrap();
                assert_eq!(p.value, src.value);
            }
        }
    }
}
