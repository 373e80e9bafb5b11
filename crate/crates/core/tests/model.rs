use modalfuse::backbone::{Backbone, BackboneConfig, ResidualBlock};
use modalfuse::checkpoint;
use modalfuse::gradcheck::check_leaves;
use modalfuse::layers::{Mode, Module};
use modalfuse::model::{ModelConfig, Scale, TransMed, Variant};
use modalfuse::rng::seeded;
use modalfuse::synth::{generate_dataset, SynthSpec, Task};
use modalfuse::training::{sample_extents, train_run, ExperimentConfig};
use modalfuse::Tensor;

#[test]
fn checkpoint_round_trip_gives_bit_identical_logits() {
    let data = generate_dataset(&SynthSpec::new(Task::CrossmodalXor, 8, 1).with_extents(6, 8, 8)).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.experiment.epochs = 2;
    let (_, trained) = train_run::<f64>(&cfg, &data, None, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &trained).unwrap();

    let fresh = TransMed::<f64>::new(&trained.config, sample_extents(&data), &mut seeded(99)).unwrap();
    let batch = data.select(&[0, 3, 5]);
    let before = fresh.forward(&batch, Mode::Eval).unwrap().to_vec();
    checkpoint::load(&path, &fresh).unwrap();
    let expected = trained.forward(&batch, Mode::Eval).unwrap().to_vec();
    let got = fresh.forward(&batch, Mode::Eval).unwrap().to_vec();
    assert_ne!(before, expected);
    assert_eq!(
        got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        expected.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn checkpoint_rejects_mismatched_model() {
    let data = generate_dataset(&SynthSpec::new(Task::CrossmodalXor, 2, 1).with_extents(6, 8, 8)).unwrap();
    let e = sample_extents(&data);
    let full = TransMed::<f64>::new(&ModelConfig::preset(Scale::Tiny, Variant::Full, 2, 2), e, &mut seeded(0)).unwrap();
    let pooled =
        TransMed::<f64>::new(&ModelConfig::preset(Scale::Tiny, Variant::NoTransformer, 2, 2), e, &mut seeded(0)).unwrap();
    let bytes = checkpoint::encode(&full);
    assert!(checkpoint::restore(&pooled, checkpoint::decode(&bytes).unwrap()).is_err());
    assert!(checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn residual_block_gradients() {
    for (input, output, stride) in [(4, 4, 1), (3, 5, 2)] {
        let block = ResidualBlock::<f64>::new(input, output, stride, &mut seeded(1));
        let x = Tensor::randn(&[3, input, 5, 5], 1.0, &mut seeded(2)).into_param();
        let w = Tensor::randn(&[3, output, 5usize.div_ceil(stride), 5usize.div_ceil(stride)], 1.0, &mut seeded(3));
        let loss = || Ok(block.forward(&x, Mode::Train)?.mul(&w)?.sum());
        let mut leaves: Vec<(String, Tensor<f64>)> = vec![("input".into(), x.clone())];
        leaves.extend(
            block
                .named_tensors("block")
                .into_iter()
                .filter(|n| n.trainable)
                .map(|n| (n.name, n.tensor)),
        );
        let checks = check_leaves(loss, &leaves, 1e-4, 8, &mut seeded(4)).unwrap();
        for c in checks {
            assert!(c.coords_checked > 0, "{} had no settled coordinate", c.name);
            assert!(c.max_rel_error <= 1e-4, "{}: {}", c.name, c.max_rel_error);
        }
    }
}

#[test]
fn backbone_parameter_counts_agree_and_stay_small() {
    for scale in [Scale::Tiny, Scale::Small] {
        let config = match scale {
            Scale::Tiny => BackboneConfig::tiny(64),
            Scale::Small => BackboneConfig::small(128),
        };
        let built = Backbone::<f64>::new(&config, &mut seeded(0)).unwrap();
        assert_eq!(built.param_count(), config.param_count());
    }
    assert!(BackboneConfig::tiny(64).param_count() < 1_000_000);
}

#[test]
fn configured_and_built_parameter_counts_agree() {
    let data = generate_dataset(&SynthSpec::new(Task::CrossmodalXor, 1, 0).with_extents(6, 16, 16)).unwrap();
    let e = sample_extents(&data);
    for scale in [Scale::Tiny, Scale::Small] {
        for variant in Variant::ALL {
            let cfg = ModelConfig::preset(scale, variant, 2, 2);
            let model = TransMed::<f64>::new(&cfg, e, &mut seeded(0)).unwrap();
            assert_eq!(model.param_count(), cfg.param_count(e).unwrap(), "{scale} {variant}");
        }
    }
}

#[test]
fn f32_and_f64_models_agree_at_initialization() {
    let data = generate_dataset(&SynthSpec::new(Task::Unimodal, 3, 5).with_extents(3, 8, 8)).unwrap();
    let cfg = ModelConfig::preset(Scale::Tiny, Variant::Full, 2, 5);
    let a = TransMed::<f64>::new(&cfg, sample_extents(&data), &mut seeded(6)).unwrap();
    let b = TransMed::<f32>::new(&cfg, sample_extents(&data), &mut seeded(6)).unwrap();
    let la = a.forward(&data, Mode::Eval).unwrap().to_vec();
    let lb = b.forward(&data, Mode::Eval).unwrap().to_vec();
    for (x, y) in la.iter().zip(&lb) {
        assert!((x - *y as f64).abs() < 1e-3, "{x} vs {y}");
    }
}
