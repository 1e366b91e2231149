//! Waveform ⇄ standardized mel features, fixed-length segmentation and delta
//! augmentation.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::deltas::{augment_plane, AUGMENTED_CHANNELS};
use super::griffin_lim::{griffin_lim, Reconstruction};
use super::mel;
use super::stft::{LinearSpectrogram, Stft};
use super::{Waveform, CLIP, DB_FLOOR, N_BINS, N_MELS, SAMPLE_RATE, WIN_LENGTH};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mel power in dB, `frames × N_MELS`, before standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct MelDb {
    pub frames: usize,
    pub values: Vec<f64>,
}

impl MelDb {
    pub fn frame(&self, f: usize) -> &[f64] {
        &self.values[f * N_MELS..(f + 1) * N_MELS]
    }

    /// Standardized values without clipping.
    pub fn standardized(&self, stats: &NormStats) -> Vec<f64> {
        let mut out = self.values.clone();
        for row in out.chunks_mut(N_MELS) {
            for ((v, m), s) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

/// Per-band mean and standard deviation (dB).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population statistics pooled over every frame of every utterance.
    /// Bands with zero variance get `std = 1`.
    pub fn from_corpus<'a>(utterances: impl IntoIterator<Item = &'a MelDb>) -> Result<Self> {
        let utts: Vec<&MelDb> = utterances.into_iter().collect();
        let count: usize = utts.iter().map(|u| u.frames).sum();
        if count == 0 {
            return Err(Error::EmptyInput("no frames for normalization statistics".into()));
        }
        let mut mean = vec![0.0; N_MELS];
        for u in &utts {
            for row in u.values.chunks(N_MELS) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; N_MELS];
        for u in &utts {
            for row in u.values.chunks(N_MELS) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != N_MELS || self.std.len() != N_MELS {
            return Err(Error::Shape(format!(
                "normalization stats need {N_MELS} bands, got {}/{}",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0))
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::Numeric("normalization stats".into()));
        }
        Ok(())
    }
}

/// Standardized, clipped mel features: `frames × bands`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFeatures {
    pub frames: usize,
    pub bands: usize,
    pub values: Vec<f64>,
    pub stats: NormStats,
}

impl MelFeatures {
    pub fn from_db(db: &MelDb, stats: &NormStats) -> Self {
        let mut values = db.standardized(stats);
        values.iter_mut().for_each(|v| *v = v.clamp(-CLIP, CLIP));
        Self {
            frames: db.frames,
            bands: N_MELS,
            values,
            stats: stats.clone(),
        }
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        &self.values[f * self.bands..(f + 1) * self.bands]
    }
}

/// A `frames × N_MELS` slice of features.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSegment {
    pub frames: usize,
    pub values: Vec<f64>,
}

impl MelSegment {
    pub fn new(frames: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != frames * N_MELS {
            return Err(Error::Shape(format!(
                "segment of {frames} frames needs {} values, got {}",
                frames * N_MELS,
                values.len()
            )));
        }
        Ok(Self { frames, values })
    }

    /// `[1, 1, frames, N_MELS]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, 1, self.frames, N_MELS], self.values.clone())
            .expect("segment shape")
    }

    pub fn batch_tensor(segments: &[&MelSegment]) -> Result<Tensor> {
        let frames = segments
            .first()
            .ok_or_else(|| Error::EmptyInput("empty segment batch".into()))?
            .frames;
        let mut data = Vec::with_capacity(segments.len() * frames * N_MELS);
        for s in segments {
            if s.frames != frames {
                return Err(Error::Shape("segments in a batch differ in length".into()));
            }
            data.extend_from_slice(&s.values);
        }
        Tensor::from_vec(&[segments.len(), 1, frames, N_MELS], data)
    }
}

/// `5 × frames × N_MELS` with channels
/// `(original, Δ_time, Δ²_time, Δ_freq, Δ²_freq)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSegment {
    pub frames: usize,
    pub values: Vec<f64>,
}

impl AugmentedSegment {
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.frames * N_MELS;
        &self.values[c * n..(c + 1) * n]
    }
}

pub fn compute_deltas(s: &MelSegment) -> AugmentedSegment {
    let mut values = vec![0.0; AUGMENTED_CHANNELS * s.frames * N_MELS];
    augment_plane(&s.values, s.frames, N_MELS, &mut values);
    AugmentedSegment {
        frames: s.frames,
        values,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub segments: Vec<MelSegment>,
    pub source_frames: usize,
    /// Zero frames appended to the final segment.
    pub padding: usize,
}

impl Segmentation {
    /// Concatenation of all segments with the padding removed.
    pub fn concatenate(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .segments
            .iter()
            .flat_map(|s| s.values.iter().copied())
            .collect();
        out.truncate(self.source_frames * N_MELS);
        out
    }
}

/// Consecutive non-overlapping windows of `seg_frames`; the last one is
/// zero-padded.
pub fn segment(f: &MelFeatures, seg_frames: usize) -> Result<Segmentation> {
    if f.frames == 0 {
        return Err(Error::EmptyInput("features have no frames".into()));
    }
    if seg_frames == 0 {
        return Err(Error::Config("segment length must be positive".into()));
    }
    if f.bands != N_MELS {
        return Err(Error::Shape(format!("expected {N_MELS} bands, got {}", f.bands)));
    }
    let count = f.frames.div_ceil(seg_frames);
    let padding = count * seg_frames - f.frames;
    let segments = (0..count)
        .map(|i| {
            let start = i * seg_frames * N_MELS;
            let end = ((i + 1) * seg_frames * N_MELS).min(f.values.len());
            let mut values = f.values[start..end].to_vec();
            values.resize(seg_frames * N_MELS, 0.0);
            MelSegment {
                frames: seg_frames,
                values,
            }
        })
        .collect();
    Ok(Segmentation {
        segments,
        source_frames: f.frames,
        padding,
    })
}

/// Analysis/synthesis state shared by featurization and inversion.
pub struct FeatureExtractor {
    stft: Stft,
    filterbank: Vec<f64>,
    pinv: Vec<f64>,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureExtractor {
    pub fn new() -> Self {
        let filterbank = mel::filterbank();
        let pinv = mel::pseudo_inverse(&filterbank);
        Self {
            stft: Stft::new(),
            filterbank,
            pinv,
        }
    }

    pub fn shared() -> &'static FeatureExtractor {
        static SHARED: OnceLock<FeatureExtractor> = OnceLock::new();
        SHARED.get_or_init(FeatureExtractor::new)
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn filterbank(&self) -> &[f64] {
        &self.filterbank
    }

    /// STFT → |·|² → mel → 10·log10, floored `DB_FLOOR` below the maximum.
    pub fn mel_db(&self, w: &Waveform) -> Result<MelDb> {
        if w.sample_rate != SAMPLE_RATE {
            return Err(Error::Config(format!(
                "featurization expects {SAMPLE_RATE} Hz, got {}",
                w.sample_rate
            )));
        }
        if w.len() < WIN_LENGTH {
            return Err(Error::TooShort {
                samples: w.len(),
                needed: WIN_LENGTH,
            });
        }
        if w.samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("waveform".into()));
        }
        let spec = self.stft.magnitude(&w.samples)?;
        let mut values = vec![0.0; spec.frames * N_MELS];
        for f in 0..spec.frames {
            let power: Vec<f64> = spec.frame(f).iter().map(|m| m * m).collect();
            for m in 0..N_MELS {
                let row = &self.filterbank[m * N_BINS..(m + 1) * N_BINS];
                let p: f64 = row.iter().zip(&power).map(|(a, b)| a * b).sum();
                values[f * N_MELS + m] = 10.0 * p.max(1e-30).log10();
            }
        }
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let floor = max - DB_FLOOR;
        values.iter_mut().for_each(|v| *v = v.max(floor));
        Ok(MelDb {
            frames: spec.frames,
            values,
        })
    }

    /// Undo standardization, map mel power back to linear magnitudes
    /// through the pseudo-inverse, and estimate phase with Griffin-Lim.
    pub fn invert(
        &self,
        f: &MelFeatures,
        stats: &NormStats,
        gl_iters: usize,
    ) -> Result<Reconstruction> {
        if f.bands != N_MELS {
            return Err(Error::Shape(format!("expected {N_MELS} bands, got {}", f.bands)));
        }
        if f.values.len() != f.frames * f.bands {
            return Err(Error::Shape("feature buffer length".into()));
        }
        if f.frames == 0 {
            return Err(Error::EmptyInput("features have no frames".into()));
        }
        stats.validate()?;
        let mut magnitudes = vec![0.0; f.frames * N_BINS];
        let mut power = vec![0.0; N_MELS];
        for t in 0..f.frames {
            for (m, p) in power.iter_mut().enumerate() {
                let db = f.values[t * N_MELS + m] * stats.std[m] + stats.mean[m];
                *p = 10f64.powf(db / 10.0);
            }
            for k in 0..N_BINS {
                let row = &self.pinv[k * N_MELS..(k + 1) * N_MELS];
                let lin: f64 = row.iter().zip(&power).map(|(a, b)| a * b).sum();
                magnitudes[t * N_BINS + k] = lin.max(0.0).sqrt();
            }
        }
        let target = LinearSpectrogram {
            frames: f.frames,
            magnitudes,
        };
        Ok(griffin_lim(&self.stft, &target, gl_iters))
    }
}

/// Featurize with statistics of this utterance alone.
pub fn featurize(w: &Waveform) -> Result<MelFeatures> {
    let db = FeatureExtractor::shared().mel_db(w)?;
    let stats = NormStats::from_corpus([&db])?;
    Ok(MelFeatures::from_db(&db, &stats))
}

/// Featurize with externally supplied (corpus) statistics.
pub fn featurize_with_stats(w: &Waveform, stats: &NormStats) -> Result<MelFeatures> {
    stats.validate()?;
    let db = FeatureExtractor::shared().mel_db(w)?;
    Ok(MelFeatures::from_db(&db, stats))
}

pub fn invert_features(f: &MelFeatures, stats: &NormStats, gl_iters: usize) -> Result<Waveform> {
    let rec = FeatureExtractor::shared().invert(f, stats, gl_iters)?;
    Ok(Waveform::new(rec.samples, SAMPLE_RATE))
}
