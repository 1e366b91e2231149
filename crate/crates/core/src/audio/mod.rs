//! Waveform ingestion, mel featurization and Griffin-Lim inversion.

pub mod deltas;
pub mod features;
pub mod griffin_lim;
pub mod mel;
pub mod stft;

use std::path::Path;

use crate::error::{Error, Result};

pub use features::{
    compute_deltas, featurize, featurize_with_stats, invert_features, segment, AugmentedSegment,
    FeatureExtractor, MelDb, MelFeatures, MelSegment, NormStats, Segmentation,
};

pub const SAMPLE_RATE: u32 = 16_000;
/// 50 ms analysis window.
pub const WIN_LENGTH: usize = 800;
/// 12.5 ms hop.
pub const HOP_LENGTH: usize = 200;
pub const FFT_SIZE: usize = 1024;
pub const N_BINS: usize = FFT_SIZE / 2 + 1;
pub const N_MELS: usize = 128;
pub const MEL_FMIN: f64 = 55.0;
pub const MEL_FMAX: f64 = 7600.0;
/// Features are clipped to `[-CLIP, CLIP]` and the generator emits `CLIP·tanh`.
pub const CLIP: f64 = 3.0;
/// dB floor below the per-utterance maximum.
pub const DB_FLOOR: f64 = 100.0;
pub const DEFAULT_TRIM_DB: f64 = 40.0;
pub const DEFAULT_TARGET_PEAK: f64 = 0.95;
pub const DEFAULT_GL_ITERS: usize = 60;

/// Mono audio samples, nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Reads a PCM WAV (8/16/24/32-bit int or 32-bit float), mixes to mono and
/// resamples to 16 kHz.
pub fn load_audio(path: &Path) -> Result<Waveform> {
    let wav_err = |reason: String| Error::Wav {
        path: path.to_path_buf(),
        reason,
    };
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => wav_err(other.to_string()),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(wav_err("zero channels".into()));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>(),
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
        }
    }
    .map_err(|e| wav_err(e.to_string()))?;

    if interleaved.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no samples", path.display())));
    }
    let mono: Vec<f64> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    if mono.iter().any(|v| !v.is_finite()) {
        return Err(wav_err("non-finite samples".into()));
    }
    Ok(resample(&Waveform::new(mono, spec.sample_rate), SAMPLE_RATE))
}

/// Writes 16-bit PCM; samples outside `[-1, 1]` are clipped.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        writer.write_sample(v).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)
}

/// Band-limited resampling with a Blackman-windowed sinc kernel.
/// Output length is `round(len · to / from)`.
pub fn resample(w: &Waveform, to: u32) -> Waveform {
    if w.sample_rate == to || w.is_empty() {
        return Waveform::new(w.samples.clone(), to);
    }
    const ZERO_CROSSINGS: f64 = 16.0;
    let ratio = to as f64 / w.sample_rate as f64;
    let cutoff = 0.5 * ratio.min(1.0) * 0.97;
    let half_width = ZERO_CROSSINGS / (2.0 * cutoff);
    let out_len = (w.len() as f64 * ratio).round() as usize;
    let n = w.len() as isize;
    let samples = (0..out_len)
        .map(|j| {
            let t = j as f64 / ratio;
            let lo = (t - half_width).ceil() as isize;
            let hi = (t + half_width).floor() as isize;
            let mut acc = 0.0;
            for i in lo.max(0)..=hi.min(n - 1) {
                let d = t - i as f64;
                let x = 2.0 * cutoff * d;
                let sinc = if x.abs() < 1e-12 {
                    1.0
                } else {
                    (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
                };
                let p = (d / half_width + 1.0) * 0.5;
                let win = 0.42 - 0.5 * (2.0 * std::f64::consts::PI * p).cos()
                    + 0.08 * (4.0 * std::f64::consts::PI * p).cos();
                acc += w.samples[i as usize] * 2.0 * cutoff * sinc * win;
            }
            acc
        })
        .collect();
    Waveform::new(samples, to)
}

/// Frame-wise RMS level in dB over `WIN_LENGTH`/`HOP_LENGTH` framing.
/// Signals shorter than one window form a single frame.
pub fn frame_rms_db(samples: &[f64]) -> Vec<f64> {
    let frame_starts: Vec<usize> = if samples.len() <= WIN_LENGTH {
        vec![0]
    } else {
        (0..=(samples.len() - WIN_LENGTH) / HOP_LENGTH)
            .map(|f| f * HOP_LENGTH)
            .collect()
    };
    frame_starts
        .into_iter()
        .map(|s| {
            let frame = &samples[s..(s + WIN_LENGTH).min(samples.len())];
            let ms = frame.iter().map(|v| v * v).sum::<f64>() / frame.len() as f64;
            10.0 * ms.log10()
        })
        .collect()
}

/// Trims leading/trailing frames quieter than `max_db - trim_threshold_db`
/// and peak-normalizes to `target_peak`.
pub fn preprocess(w: &Waveform, trim_threshold_db: f64, target_peak: f64) -> Result<Waveform> {
    if w.is_empty() {
        return Err(Error::EmptyInput("waveform has no samples".into()));
    }
    let levels = frame_rms_db(&w.samples);
    let max_db = levels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max_db.is_finite() {
        return Err(Error::EmptyAfterTrim);
    }
    let floor = max_db - trim_threshold_db;
    let first = levels.iter().position(|&d| d >= floor).expect("max frame qualifies");
    let last = levels.iter().rposition(|&d| d >= floor).expect("max frame qualifies");
    let start = first * HOP_LENGTH;
    let end = if last + 1 == levels.len() {
        w.len()
    } else {
        (last * HOP_LENGTH + WIN_LENGTH).min(w.len())
    };
    let mut samples = w.samples[start..end].to_vec();
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::EmptyAfterTrim);
    }
    let gain = target_peak / peak;
    samples.iter_mut().for_each(|s| *s *= gain);
    Ok(Waveform::new(samples, w.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::stft::Stft;

    fn sine(freq: f64, sr: u32, secs: f64, amp: f64) -> Vec<f64> {
        let n = (sr as f64 * secs) as usize;
        (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect()
    }

    fn write_i16(path: &Path, samples: &[f64], sr: u32, channels: u16) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: sr,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            for _ in 0..channels {
                w.write_sample((s * 32767.0) as i16).unwrap();
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn silent_second_at_16k_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        write_i16(&p, &vec![0.0; 16000], 16000, 1);
        let w = load_audio(&p).unwrap();
        assert_eq!(w.sample_rate, 16000);
        assert_eq!(w.samples, vec![0.0; 16000]);
    }

    #[test]
    fn resampling_48k_keeps_duration_and_pitch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_i16(&p, &sine(440.0, 48000, 1.0, 0.5), 48000, 2);
        let w = load_audio(&p).unwrap();
        assert_eq!(w.len(), 16000);
        // Oracle: peak-pick the averaged STFT magnitude of the result.
        let spec = Stft::new().magnitude(&w.samples).unwrap();
        let mut avg = vec![0.0; N_BINS];
        for f in 0..spec.frames {
            for (a, m) in avg.iter_mut().zip(spec.frame(f)) {
                *a += m;
            }
        }
        let peak = (0..N_BINS).max_by(|&a, &b| avg[a].total_cmp(&avg[b])).unwrap();
        let expected = 440.0 / (SAMPLE_RATE as f64 / FFT_SIZE as f64);
        assert!((peak as f64 - expected).abs() <= 1.0, "peak bin {peak}");
    }

    #[test]
    fn empty_and_corrupt_files_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.wav");
        write_i16(&p, &[], 16000, 1);
        assert!(matches!(load_audio(&p), Err(Error::EmptyInput(_))));
        let bad = dir.path().join("bad.wav");
        std::fs::write(&bad, b"RIFF....not a wave").unwrap();
        assert!(matches!(load_audio(&bad), Err(Error::Wav { .. })));
        assert!(matches!(
            load_audio(&dir.path().join("missing.wav")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn float_wav_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for s in [0.25f32, -0.5, 1.0] {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        assert_eq!(load_audio(&p).unwrap().samples, vec![0.25, -0.5, 1.0]);
    }

    #[test]
    fn zero_padding_is_trimmed() {
        let mut s = vec![0.0; 4800];
        s.extend(sine(300.0, 16000, 1.0, 0.4));
        s.extend(vec![0.0; 4800]);
        let w = Waveform::new(s, 16000);
        let out = preprocess(&w, DEFAULT_TRIM_DB, DEFAULT_TARGET_PEAK).unwrap();
        let shrink = w.duration_secs() - out.duration_secs();
        assert!((shrink - 0.6).abs() < 0.1, "shrink {shrink}");
    }

    #[test]
    fn peak_normalization() {
        let w = Waveform::new(sine(200.0, 16000, 0.5, 0.5), 16000);
        let out = preprocess(&w, DEFAULT_TRIM_DB, 0.95).unwrap();
        assert!((out.peak() - 0.95).abs() < 1e-12);
    }

    #[test]
    fn all_silence_fails() {
        let w = Waveform::new(vec![0.0; 5000], 16000);
        assert!(matches!(preprocess(&w, 40.0, 0.95), Err(Error::EmptyAfterTrim)));
        let empty = Waveform::new(vec![], 16000);
        assert!(matches!(preprocess(&empty, 40.0, 0.95), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn trim_matches_brute_force_frame_scan() {
        // chirp with a -60 dB noise floor on both sides
        let mut rng_state = 12345u64;
        let mut noise = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 2e-3
        };
        let mut s: Vec<f64> = (0..3000).map(|_| noise()).collect();
        let n = 12000;
        for i in 0..n {
            let t = i as f64 / 16000.0;
            let f = 150.0 + 900.0 * t;
            s.push(0.6 * (2.0 * std::f64::consts::PI * f * t).sin() + noise());
        }
        s.extend((0..5000).map(|_| noise()));
        let w = Waveform::new(s.clone(), 16000);
        let out = preprocess(&w, 40.0, 0.95).unwrap();

        // Brute force: explicit loops over frames.
        let mut db = Vec::new();
        let mut start = 0;
        while start + WIN_LENGTH <= s.len() {
            let mut e = 0.0;
            for v in &s[start..start + WIN_LENGTH] {
                e += v * v;
            }
            db.push(10.0 * (e / WIN_LENGTH as f64).log10());
            start += HOP_LENGTH;
        }
        let max = db.iter().cloned().fold(f64::MIN, f64::max);
        let mut first = None;
        let mut last = 0;
        for (i, d) in db.iter().enumerate() {
            if *d >= max - 40.0 {
                first.get_or_insert(i);
                last = i;
            }
        }
        let lo = first.unwrap() * HOP_LENGTH;
        let hi = last * HOP_LENGTH + WIN_LENGTH;
        assert_eq!(out.len(), hi - lo);
        // The noise floor itself never survives more than one window per side.
        assert!(out.len() <= n + 2 * WIN_LENGTH);
    }

    #[test]
    fn wav_roundtrip_16bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.wav");
        let w = Waveform::new(vec![0.0, 0.5, -0.5, 1.5], 16000);
        write_wav(&p, &w).unwrap();
        let back = load_audio(&p).unwrap();
        assert_eq!(back.len(), 4);
        assert!((back.samples[1] - 0.5).abs() < 1e-4);
        assert!((back.samples[3] - 32767.0 / 32768.0).abs() < 1e-9);
    }
}
