use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vtrans_core::audio::{
    featurize_with_stats, preprocess, MelDb, MelFeatures, MelSegment, NormStats, Waveform,
    HOP_LENGTH, N_MELS, SAMPLE_RATE,
};
use vtrans_core::checkpoint::Checkpoint;
use vtrans_core::dataset::Preprocessing;
use vtrans_core::inference::{convert_features, convert_utterance, ConvertOptions};
use vtrans_core::models::{project_unit_ball, ModelConfig, Networks};
use vtrans_core::synth::{tone_complex, ToneSpec};
use vtrans_core::training::{NoHook, Trainer, TrainingConfig};

const SEG: usize = 16;

fn small_config() -> TrainingConfig {
    TrainingConfig {
        model: ModelConfig {
            seg_frames: SEG,
            cond_dim: 8,
            widths: vec![4, 8],
            kernel: 3,
            ..ModelConfig::default()
        },
        batch_size: 2,
        gl_iters: 3,
        ..TrainingConfig::default()
    }
}

fn stats() -> NormStats {
    NormStats {
        mean: (0..N_MELS).map(|b| -40.0 - b as f64 * 0.1).collect(),
        std: vec![12.0; N_MELS],
    }
}

fn checkpoint() -> Checkpoint {
    let config = small_config();
    Checkpoint {
        nets: Networks::new(config.effective_model(), 3).unwrap(),
        stats: stats(),
        config,
        iteration: 0,
    }
}

fn random_features(frames: usize, seed: u64) -> MelFeatures {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let db = MelDb {
        frames,
        values: (0..frames * N_MELS).map(|_| rng.gen_range(-80.0..-10.0)).collect(),
    };
    MelFeatures::from_db(&db, &stats())
}

fn utterance(seed: u64, secs: f64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ToneSpec::random(&mut rng, secs);
    tone_complex(&spec, 0.0, &mut rng)
}

#[test]
fn exact_segment_length_gives_one_segment() {
    let ckpt = checkpoint();
    let (out, conds, padding) = convert_features(&random_features(SEG, 1), &ckpt, 0).unwrap();
    assert_eq!(conds.len(), 1);
    assert_eq!(padding, 0);
    assert_eq!(out.frames, SEG);
    let (_, conds, padding) = convert_features(&random_features(SEG + 1, 1), &ckpt, 0).unwrap();
    assert_eq!((conds.len(), padding), (2, SEG - 1));
}

#[test]
fn segments_are_converted_independently() {
    let ckpt = checkpoint();
    let f = random_features(3 * SEG - 5, 2);
    let (out, conds, _) = convert_features(&f, &ckpt, 0).unwrap();
    for (i, cond) in conds.iter().enumerate() {
        let start = i * SEG * N_MELS;
        let end = ((i + 1) * SEG).min(f.frames) * N_MELS;
        let mut values = f.values[start..end].to_vec();
        values.resize(SEG * N_MELS, 0.0);
        let alone = MelSegment::new(SEG, values).unwrap();
        let c = project_unit_ball(&ckpt.nets.controller.encode(&alone).unwrap()).unwrap();
        assert_eq!(&c, cond);
        let gen = ckpt.nets.generator.generate(&c).unwrap();
        assert_eq!(&out.values[start..end], &gen.values[..end - start]);
    }
}

#[test]
fn conversion_is_deterministic_and_keeps_duration() {
    let ckpt = checkpoint();
    let opts = ConvertOptions::from_checkpoint(&ckpt);
    let w = utterance(4, 0.7);
    let a = convert_utterance(&w, &ckpt, &opts).unwrap();
    let b = convert_utterance(&w, &ckpt, &opts).unwrap();
    assert_eq!(a, b);
    let pre = Preprocessing::default();
    let trimmed = preprocess(&w, pre.trim_db, pre.target_peak).unwrap();
    let diff = trimmed.len() as i64 - a.waveform.len() as i64;
    assert!(diff.unsigned_abs() as usize <= HOP_LENGTH, "{} vs {}", trimmed.len(), a.waveform.len());
    assert_eq!(a.waveform.sample_rate, SAMPLE_RATE);
    assert_eq!(a.source_frames, a.features.frames);
}

#[test]
fn conditions_stay_in_the_unit_ball_for_large_controller_outputs() {
    let mut ckpt = checkpoint();
    for t in ckpt.nets.controller.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= 50.0);
    }
    let f = featurize_with_stats(&utterance(5, 0.6), &ckpt.stats).unwrap();
    let raw = ckpt.nets.controller.encode(&MelSegment::new(SEG, f.values[..SEG * N_MELS].to_vec()).unwrap()).unwrap();
    assert!(raw.norm() > 1.0, "controller output norm {}", raw.norm());
    let (_, conds, _) = convert_features(&f, &ckpt, 0).unwrap();
    assert!(conds.iter().all(|c| c.norm() <= 1.0 + 1e-6));
}

#[test]
fn saved_checkpoint_converts_identically() {
    let ckpt = checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let opts = ConvertOptions::from_checkpoint(&ckpt);
    let w = utterance(6, 0.5);
    assert_eq!(
        convert_utterance(&w, &ckpt, &opts).unwrap(),
        convert_utterance(&w, &loaded, &opts).unwrap()
    );
}

#[test]
fn discriminator_real_batch_is_the_normal_batch() {
    let mut trainer = Trainer::new(small_config()).unwrap();
    let seg = |seed| {
        let f = random_features(SEG, seed);
        MelSegment::new(SEG, f.values).unwrap()
    };
    let normal = [seg(10), seg(11)];
    let impaired = [seg(20), seg(21)];
    let n: Vec<&MelSegment> = normal.iter().collect();
    let i: Vec<&MelSegment> = impaired.iter().collect();
    for _ in 0..3 {
        let report = trainer.train_step(&n, &i, &mut NoHook).unwrap();
        assert_eq!(report.real_fingerprint, MelSegment::batch_tensor(&n).unwrap().fingerprint());
        assert_ne!(report.real_fingerprint, MelSegment::batch_tensor(&i).unwrap().fingerprint());
    }
}
