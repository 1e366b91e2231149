//! Griffin-Lim phase reconstruction.

use rustfft::num_complex::Complex;

use super::stft::{LinearSpectrogram, Stft};
use super::N_BINS;

pub struct Reconstruction {
    pub samples: Vec<f64>,
    /// Spectral-convergence residual `‖|STFT(x_i)| − S‖ / ‖S‖` measured
    /// before each of the `iters` phase updates.
    pub residuals: Vec<f64>,
}

/// Bins 1..N_BINS-1 stand for two conjugate bins of the full spectrum.
fn bin_weight(k: usize) -> f64 {
    if k == 0 || k == N_BINS - 1 {
        1.0
    } else {
        2.0
    }
}

/// Starts from zero phase and alternates magnitude replacement with
/// least-squares resynthesis.
pub fn griffin_lim(stft: &Stft, target: &LinearSpectrogram, iters: usize) -> Reconstruction {
    let frames = target.frames;
    let mut spec: Vec<Complex<f64>> = target
        .magnitudes
        .iter()
        .map(|&m| Complex::new(m, 0.0))
        .collect();
    let mut samples = stft.synthesize(frames, &spec);
    let target_norm = weighted_norm(target.magnitudes.iter().copied());
    let mut residuals = Vec::with_capacity(iters);
    for _ in 0..iters {
        let (f, est) = stft
            .analyze(&samples)
            .expect("resynthesized signal spans the original frames");
        debug_assert_eq!(f, frames);
        let diff = est
            .iter()
            .zip(&target.magnitudes)
            .map(|(c, &m)| c.norm() - m);
        residuals.push(weighted_norm(diff) / target_norm.max(f64::MIN_POSITIVE));
        for ((s, e), &m) in spec.iter_mut().zip(&est).zip(&target.magnitudes) {
            let n = e.norm();
            *s = if n > 0.0 {
                e * (m / n)
            } else {
                Complex::new(m, 0.0)
            };
        }
        samples = stft.synthesize(frames, &spec);
    }
    Reconstruction { samples, residuals }
}

fn weighted_norm(values: impl Iterator<Item = f64>) -> f64 {
    values
        .enumerate()
        .map(|(i, v)| bin_weight(i % N_BINS) * v * v)
        .sum::<f64>()
        .sqrt()
}
