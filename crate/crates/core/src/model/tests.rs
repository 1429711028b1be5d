use rand::Rng;

use super::*;
use crate::data::Origin;
use crate::numerics::check_gradients;

fn small() -> ModelConfig {
    ModelConfig { hidden: 4, embed_dim: 4, spatial_size: 3, ..ModelConfig::new(2, 3) }
}

fn windows(config: &ModelConfig, n: usize, seed: u64) -> Vec<WindowedSample> {
    let mut r = rng::stream(seed, &[1234]);
    (0..n)
        .map(|i| WindowedSample {
            data: (0..config.height * config.width).map(|_| r.random_range(-2.0..2.0)).collect(),
            height: config.height,
            width: config.width,
            label: i % 2,
            origin: Origin { series: 0, start: i },
        })
        .collect()
}

/// One training-mode pass, which populates the running moments.
fn warmed(config: ModelConfig, seed: u64) -> EncoderParams {
    let mut enc = EncoderParams::init(config, seed).unwrap();
    let ws = windows(&enc.config, 8, seed);
    let refs: Vec<&WindowedSample> = ws.iter().collect();
    let mut tape = Tape::new();
    let input = tape.constant(batch_tensor(&enc.config, &refs).unwrap());
    let vars = enc.bind(&mut tape, false);
    enc.forward(&mut tape, &vars, input, true).unwrap();
    enc
}

#[test]
fn config_validation() {
    assert!(ModelConfig::new(5, 10).validate().is_ok());
    assert!(ModelConfig { reduction: 3, ..ModelConfig::new(5, 10) }.validate().is_err());
    assert!(ModelConfig { spatial_size: 4, ..ModelConfig::new(5, 10) }.validate().is_err());
    assert!(ModelConfig { embed_dim: 1, ..ModelConfig::new(5, 10) }.validate().is_err());
    assert!(ModelConfig::new(0, 10).validate().is_err());
}

#[test]
fn refined_map_keeps_window_geometry() {
    let config = ModelConfig { hidden: 8, embed_dim: 4, ..ModelConfig::new(5, 20) };
    let enc = warmed(config, 1);
    let ws = windows(&enc.config, 3, 2);
    let refs: Vec<&WindowedSample> = ws.iter().collect();
    for a in enc.infer(&refs, Execution::Sequential).unwrap() {
        assert_eq!(a.refined.shape(), &[CONV2, 5, 20]);
        assert_eq!(a.spatial.shape(), &[1, 5, 20]);
        assert_eq!(a.channel.len(), CONV2);
        let norm = a.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-10);
    }
}

#[test]
fn untrained_encoder_refuses_inference() {
    let enc = EncoderParams::init(small(), 0).unwrap();
    let ws = windows(&enc.config, 1, 0);
    let err = enc.infer(&[&ws[0]], Execution::Sequential).unwrap_err();
    assert!(matches!(err, ModelError::Numerics(NumericsError::UninitializedState)));
    assert!(!enc.is_trained());
}

#[test]
fn zero_network_collapses_to_one_point() {
    let mut enc = EncoderParams::zeros(small()).unwrap();
    let ws = windows(&enc.config, 5, 3);
    let refs: Vec<&WindowedSample> = ws.iter().collect();
    let mut tape = Tape::new();
    let input = tape.constant(batch_tensor(&enc.config, &refs).unwrap());
    let vars = enc.bind(&mut tape, false);
    let nodes = enc.forward(&mut tape, &vars, input, true).unwrap();
    let z = tape.value(nodes.embedding);
    for b in 1..5 {
        assert_eq!(z.outer(b), z.outer(0));
    }
    let inferred = enc.embed(&refs, Execution::Sequential).unwrap();
    assert!(inferred.iter().all(|e| e == &inferred[0]));
}

#[test]
fn inference_is_per_sample_and_deterministic() {
    let enc = warmed(small(), 4);
    let ws = windows(&enc.config, 150, 5);
    let refs: Vec<&WindowedSample> = ws.iter().collect();
    let batch = enc.infer(&refs, Execution::Parallel).unwrap();
    assert_eq!(batch, enc.infer(&refs, Execution::Sequential).unwrap());
    for i in [0, 63, 64, 149] {
        let single = enc.infer(&refs[i..=i], Execution::Sequential).unwrap();
        assert_eq!(single[0], batch[i]);
    }
}

#[test]
fn window_shape_mismatch_is_rejected() {
    let enc = warmed(small(), 0);
    let wrong = windows(&ModelConfig::new(3, 3), 1, 0);
    assert!(matches!(enc.infer(&[&wrong[0]], Execution::Sequential), Err(ModelError::Dimension { .. })));
}

#[test]
fn classifier_examples() {
    let zero = ClassifierParams::zeros(3, 4).unwrap();
    let c = zero.classify(&[1.0, -2.0, 0.5, 3.0]).unwrap();
    assert_eq!(c.label, 0);
    assert!(c.probabilities.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));

    let eye = ClassifierParams::from_weight(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    let c = eye.classify(&[3.0, 1.0]).unwrap();
    let e2 = 2f64.exp();
    assert_eq!(c.label, 0);
    assert!((c.probabilities[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
    assert!((c.probabilities[1] - 1.0 / (e2 + 1.0)).abs() < 1e-15);

    assert!(eye.classify(&[1.0]).is_err());
    assert!(ClassifierParams::zeros(1, 4).is_err());
    assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
}

#[test]
fn argmax_ignores_common_shift() {
    let mut r = rng::stream(8, &[]);
    for _ in 0..100 {
        let logits: Vec<f64> = (0..5).map(|_| r.random_range(-3.0..3.0)).collect();
        let shift = r.random_range(-50.0..50.0);
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        assert_eq!(argmax(&logits), argmax(&shifted));
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let enc = warmed(small(), 6);
    let ck = Checkpoint { encoder: enc, classifier: Some(ClassifierParams::init(3, 4, 6).unwrap()) };
    let bytes = serialize(&ck);
    let back = deserialize(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(serialize(&back), bytes);
    let bare = Checkpoint { encoder: ck.encoder.clone(), classifier: None };
    assert_eq!(deserialize(&serialize(&bare)).unwrap(), bare);
}

#[test]
fn trained_checkpoint_serves_inference() {
    let enc = warmed(small(), 7);
    let back = deserialize(&serialize(&Checkpoint { encoder: enc.clone(), classifier: None })).unwrap().encoder;
    assert!(back.is_trained());
    let ws = windows(&back.config, 4, 9);
    let refs: Vec<&WindowedSample> = ws.iter().collect();
    assert_eq!(back.infer(&refs, Execution::Sequential).unwrap(), enc.infer(&refs, Execution::Sequential).unwrap());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = serialize(&Checkpoint { encoder: warmed(small(), 1), classifier: None });
    for cut in [bytes.len() - 1, bytes.len() / 2, 13] {
        assert!(matches!(deserialize(&bytes[..cut]), Err(ModelError::Checksum)), "cut at {cut}");
    }
    let mut flipped = bytes.clone();
    flipped[100] ^= 0x10;
    assert!(matches!(deserialize(&flipped), Err(ModelError::Checksum)));
    let mut versioned = bytes.clone();
    versioned[8] = 2;
    assert!(matches!(deserialize(&versioned), Err(ModelError::Version { found: 2, expected: 1 })));
    assert!(matches!(deserialize(b"PNG....."), Err(ModelError::Checkpoint(_))));
}

#[test]
fn contrastive_gradient_reaches_every_encoder_tensor() {
    let config = small();
    for seed in 0..3 {
        let enc = EncoderParams::init(config.clone(), seed).unwrap();
        let ws = windows(&config, 4, seed + 100);
        let refs: Vec<&WindowedSample> = ws.iter().collect();
        let x = batch_tensor(&config, &refs).unwrap();
        let positives = vec![vec![2], vec![3], vec![0], vec![1]];
        let err = check_gradients(
            &enc.tensors,
            |tape, vars| {
                let input = tape.constant(x.clone());
                let vars = EncoderVars::from_slice(vars);
                let mut m = enc.moments.clone();
                let [m1, m2] = &mut m;
                let nodes = encode(tape, &config, &vars, input, BnMode::Train(m1), BnMode::Train(m2))
                    .map_err(|e| match e {
                        ModelError::Numerics(n) => n,
                        other => NumericsError::Contract(other.to_string()),
                    })?;
                tape.contrastive(nodes.embedding, &positives, 0.5)
            },
            1e-5,
            seed,
            Execution::Parallel,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

