//! Short-time Fourier transform with a periodic Hann window of
//! `WIN_LENGTH` samples zero-padded to `FFT_SIZE`, and its least-squares
//! inverse.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{FFT_SIZE, HOP_LENGTH, N_BINS, WIN_LENGTH};
use crate::error::{Error, Result};

/// Magnitudes, `frames × N_BINS`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSpectrogram {
    pub frames: usize,
    pub magnitudes: Vec<f64>,
}

impl LinearSpectrogram {
    pub fn frame(&self, f: usize) -> &[f64] {
        &self.magnitudes[f * N_BINS..(f + 1) * N_BINS]
    }
}

pub fn frame_count(samples: usize) -> usize {
    if samples < WIN_LENGTH {
        0
    } else {
        1 + (samples - WIN_LENGTH) / HOP_LENGTH
    }
}

pub fn signal_length(frames: usize) -> usize {
    if frames == 0 {
        0
    } else {
        (frames - 1) * HOP_LENGTH + WIN_LENGTH
    }
}

pub struct Stft {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl Default for Stft {
    fn default() -> Self {
        Self::new()
    }
}

impl Stft {
    pub fn new() -> Self {
        let mut planner = FftPlanner::new();
        let window = (0..WIN_LENGTH)
            .map(|i| {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / WIN_LENGTH as f64).cos()
            })
            .collect();
        Self {
            forward: planner.plan_fft_forward(FFT_SIZE),
            inverse: planner.plan_fft_inverse(FFT_SIZE),
            window,
        }
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Complex spectrum, `frames × N_BINS`.
    pub fn analyze(&self, samples: &[f64]) -> Result<(usize, Vec<Complex<f64>>)> {
        let frames = frame_count(samples.len());
        if frames == 0 {
            return Err(Error::TooShort {
                samples: samples.len(),
                needed: WIN_LENGTH,
            });
        }
        let mut out = Vec::with_capacity(frames * N_BINS);
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        for f in 0..frames {
            let s = &samples[f * HOP_LENGTH..f * HOP_LENGTH + WIN_LENGTH];
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < WIN_LENGTH {
                    Complex::new(s[i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.forward.process(&mut buf);
            out.extend_from_slice(&buf[..N_BINS]);
        }
        Ok((frames, out))
    }

    pub fn magnitude(&self, samples: &[f64]) -> Result<LinearSpectrogram> {
        let (frames, spec) = self.analyze(samples)?;
        Ok(LinearSpectrogram {
            frames,
            magnitudes: spec.iter().map(|c| c.norm()).collect(),
        })
    }

    /// Least-squares inverse: windowed overlap-add divided by the summed
    /// squared window. Samples no window covers come out as zero.
    pub fn synthesize(&self, frames: usize, spec: &[Complex<f64>]) -> Vec<f64> {
        let len = signal_length(frames);
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let scale = 1.0 / FFT_SIZE as f64;
        for f in 0..frames {
            let bins = &spec[f * N_BINS..(f + 1) * N_BINS];
            buf[..N_BINS].copy_from_slice(bins);
            for k in N_BINS..FFT_SIZE {
                buf[k] = bins[FFT_SIZE - k].conj();
            }
            // The DC and Nyquist bins of a real signal are real.
            buf[0].im = 0.0;
            buf[N_BINS - 1].im = 0.0;
            self.inverse.process(&mut buf);
            let base = f * HOP_LENGTH;
            for i in 0..WIN_LENGTH {
                let w = self.window[i];
                out[base + i] += w * buf[i].re * scale;
                norm[base + i] += w * w;
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            if *n > 1e-12 {
                *o /= n;
            } else {
                *o = 0.0;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framing_arithmetic() {
        assert_eq!(frame_count(16000), 77);
        assert_eq!(frame_count(799), 0);
        assert_eq!(frame_count(800), 1);
        assert_eq!(signal_length(77), 16000);
    }

    #[test]
    fn analysis_synthesis_is_identity_on_covered_samples() {
        let x: Vec<f64> = (0..4000).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let stft = Stft::new();
        let (frames, spec) = stft.analyze(&x).unwrap();
        let y = stft.synthesize(frames, &spec);
        assert_eq!(y.len(), signal_length(frames));
        for i in 1..y.len() - 1 {
            assert!((x[i] - y[i]).abs() < 1e-9, "sample {i}");
        }
    }

    #[test]
    fn too_short_errors() {
        assert!(matches!(
            Stft::new().magnitude(&[0.0; 10]),
            Err(Error::TooShort { .. })
        ));
    }
}
