//! Synthetic stand-in corpora: gliding harmonic tone complexes as "normal"
//! speech and noisy, muffled, jittery, clipped variants of them as
//! "impaired" speech.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{write_wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Amplitude of the broadband breath noise under every voice, relative to
/// a unit-amplitude harmonic.
pub const BREATH_LEVEL: f64 = 0.01;

/// Parameters of one synthetic utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct ToneSpec {
    pub secs: f64,
    pub f0_start: f64,
    pub f0_end: f64,
    pub harmonics: usize,
    /// Syllable-rate amplitude modulation, Hz.
    pub syllable_rate: f64,
    /// Centre of the single spectral-envelope peak, Hz.
    pub formant: f64,
}

impl ToneSpec {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, secs: f64) -> Self {
        let f0 = rng.gen_range(110.0..220.0);
        Self {
            secs,
            f0_start: f0,
            f0_end: f0 * rng.gen_range(0.8..1.25),
            harmonics: rng.gen_range(8..20),
            syllable_rate: rng.gen_range(2.5..5.0),
            formant: rng.gen_range(500.0..1500.0),
        }
    }
}

/// Harmonic complex with an exponential f0 glide, a resonant envelope, a
/// faint breath-noise floor and a raised-cosine syllable modulation.
pub fn tone_complex(spec: &ToneSpec, jitter: f64, rng: &mut impl Rng) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    let n = (spec.secs * sr).round() as usize;
    let mut phase = 0.0;
    let mut wobble = 0.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let frac = t / spec.secs.max(1e-9);
        if jitter > 0.0 {
            wobble = 0.995 * wobble + jitter * rng.gen_range(-1.0..1.0);
        }
        let f0 = spec.f0_start * (spec.f0_end / spec.f0_start).powf(frac) * (1.0 + wobble);
        phase += 2.0 * PI * f0 / sr;
        let mut s = 0.0;
        for k in 1..=spec.harmonics {
            let fk = k as f64 * f0;
            if fk > 7000.0 {
                break;
            }
            let env = 1.0 / (1.0 + ((fk - spec.formant) / 400.0).powi(2)) + 0.05 / k as f64;
            s += env * (k as f64 * phase).sin();
        }
        let am = 0.55 - 0.45 * (2.0 * PI * spec.syllable_rate * t).cos();
        let breath = BREATH_LEVEL * rng.gen_range(-1.0..1.0);
        out.push((s + breath) * am);
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    out.iter_mut().for_each(|v| *v *= 0.8 / peak);
    Waveform::new(out, SAMPLE_RATE)
}

/// Impairment applied to a clean utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Distortion {
    /// Signal-to-noise ratio of added white noise, dB.
    pub snr_db: f64,
    /// One-pole low-pass coefficient in `[0, 1)`; larger is more muffled.
    pub muffle: f64,
    /// Random-walk f0 perturbation step.
    pub jitter: f64,
    /// Hard-clip level relative to the peak.
    pub clip: f64,
}

impl Distortion {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            snr_db: rng.gen_range(5.0..15.0),
            muffle: rng.gen_range(0.6..0.85),
            jitter: rng.gen_range(2e-4..6e-4),
            clip: rng.gen_range(0.3..0.6),
        }
    }
}

pub fn distorted(spec: &ToneSpec, d: &Distortion, rng: &mut impl Rng) -> Waveform {
    let mut w = tone_complex(spec, d.jitter, rng);
    let peak = w.peak();
    let level = d.clip * peak;
    let mut y = 0.0;
    for s in &mut w.samples {
        y = d.muffle * y + (1.0 - d.muffle) * *s;
        *s = y.clamp(-level, level);
    }
    let power = w.samples.iter().map(|v| v * v).sum::<f64>() / w.len().max(1) as f64;
    let noise_amp = (3.0 * power / 10f64.powf(d.snr_db / 10.0)).sqrt();
    for s in &mut w.samples {
        *s += noise_amp * rng.gen_range(-1.0..1.0);
    }
    let peak = w.peak().max(1e-12);
    w.samples.iter_mut().for_each(|v| *v *= 0.8 / peak);
    w
}

/// File lists of a corpus written by [`write_corpus`].
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub normal: Vec<PathBuf>,
    pub impaired: Vec<PathBuf>,
}

/// Writes `normal/NNNN.wav` and `impaired/NNNN.wav` under `dir`. Impaired
/// utterances are distortions of fresh tone complexes, not of the normal
/// files.
pub fn write_corpus(
    dir: &Path,
    normal: usize,
    impaired: usize,
    secs: f64,
    seed: u64,
) -> Result<SynthCorpus> {
    if normal == 0 || impaired == 0 {
        return Err(Error::Config("synthetic corpora need at least one utterance each".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SynthCorpus {
        normal: Vec::new(),
        impaired: Vec::new(),
    };
    for (sub, count, list) in [
        ("normal", normal, &mut out.normal),
        ("impaired", impaired, &mut out.impaired),
    ] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        for i in 0..count {
            let spec = ToneSpec::random(&mut rng, secs);
            let w = if sub == "normal" {
                tone_complex(&spec, 0.0, &mut rng)
            } else {
                let dist = Distortion::random(&mut rng);
                distorted(&spec, &dist, &mut rng)
            };
            let p = d.join(format!("{i:04}.wav"));
            write_wav(&p, &w)?;
            list.push(p);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tone_has_requested_length_and_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = ToneSpec::random(&mut rng, 0.5);
        let w = tone_complex(&spec, 0.0, &mut rng);
        assert_eq!(w.len(), 8000);
        assert!((w.peak() - 0.8).abs() < 1e-12);
        let d = distorted(&spec, &Distortion::random(&mut rng), &mut rng);
        assert_eq!(d.len(), 8000);
        assert!(d.samples.iter().all(|v| v.is_finite() && v.abs() <= 0.8 + 1e-12));
    }

    #[test]
    fn corpus_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ca = write_corpus(a.path(), 2, 1, 0.3, 9).unwrap();
        let cb = write_corpus(b.path(), 2, 1, 0.3, 9).unwrap();
        assert_eq!(ca.normal.len(), 2);
        for (x, y) in ca.normal.iter().chain(&ca.impaired).zip(cb.normal.iter().chain(&cb.impaired)) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
    }
}
