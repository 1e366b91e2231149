//! Triangular mel filterbank (HTK mel scale) and its Moore–Penrose inverse.

use nalgebra::DMatrix;

use super::{FFT_SIZE, MEL_FMAX, MEL_FMIN, N_BINS, N_MELS, SAMPLE_RATE};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

pub fn bin_frequency(bin: usize) -> f64 {
    bin as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64
}

/// The `N_MELS + 2` band edge frequencies; band `m` peaks at `edges[m + 1]`.
pub fn band_edges() -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(MEL_FMIN), hz_to_mel(MEL_FMAX));
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

pub fn center_frequencies() -> Vec<f64> {
    band_edges()[1..=N_MELS].to_vec()
}

/// `N_MELS × N_BINS` row-major filterbank with unit-peak triangles.
pub fn filterbank() -> Vec<f64> {
    let edges = band_edges();
    let mut fb = vec![0.0; N_MELS * N_BINS];
    for m in 0..N_MELS {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..N_BINS {
            let f = bin_frequency(k);
            let w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            fb[m * N_BINS + k] = w;
        }
    }
    fb
}

/// `N_BINS × N_MELS` Moore–Penrose pseudo-inverse of [`filterbank`].
pub fn pseudo_inverse(fb: &[f64]) -> Vec<f64> {
    let m = DMatrix::from_row_slice(N_MELS, N_BINS, fb);
    let pinv = m
        .pseudo_inverse(1e-10)
        .expect("SVD of a finite filterbank succeeds");
    let mut out = vec![0.0; N_BINS * N_MELS];
    for r in 0..N_BINS {
        for c in 0..N_MELS {
            out[r * N_MELS + c] = pinv[(r, c)];
        }
    }
    out
}
