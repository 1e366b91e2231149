//! Centered first differences with edge replication, and their adjoints.
//!
//! A plane is a row-major `frames × bands` block. Along time,
//! `d[t] = (x[min(t+1, T-1)] - x[max(t-1, 0)]) / 2`, and likewise along
//! frequency. The augmented layout stacks five planes in the order
//! `(original, Δ_time, Δ²_time, Δ_freq, Δ²_freq)`.

pub const AUGMENTED_CHANNELS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Time,
    Freq,
}

pub fn centered_diff(src: &[f64], frames: usize, bands: usize, axis: Axis, out: &mut [f64]) {
    match axis {
        Axis::Time => {
            for t in 0..frames {
                let next = (t + 1).min(frames - 1);
                let prev = t.saturating_sub(1);
                for f in 0..bands {
                    out[t * bands + f] = 0.5 * (src[next * bands + f] - src[prev * bands + f]);
                }
            }
        }
        Axis::Freq => {
            for t in 0..frames {
                let row = &src[t * bands..(t + 1) * bands];
                let dst = &mut out[t * bands..(t + 1) * bands];
                for f in 0..bands {
                    let next = (f + 1).min(bands - 1);
                    let prev = f.saturating_sub(1);
                    dst[f] = 0.5 * (row[next] - row[prev]);
                }
            }
        }
    }
}

/// Accumulates the transpose of [`centered_diff`] applied to `grad` into `out`.
pub fn centered_diff_adjoint(
    grad: &[f64],
    frames: usize,
    bands: usize,
    axis: Axis,
    out: &mut [f64],
) {
    match axis {
        Axis::Time => {
            for t in 0..frames {
                let next = (t + 1).min(frames - 1);
                let prev = t.saturating_sub(1);
                for f in 0..bands {
                    let g = 0.5 * grad[t * bands + f];
                    out[next * bands + f] += g;
                    out[prev * bands + f] -= g;
                }
            }
        }
        Axis::Freq => {
            for t in 0..frames {
                for f in 0..bands {
                    let next = (f + 1).min(bands - 1);
                    let prev = f.saturating_sub(1);
                    let g = 0.5 * grad[t * bands + f];
                    out[t * bands + next] += g;
                    out[t * bands + prev] -= g;
                }
            }
        }
    }
}

/// Writes the five augmented planes for one `frames × bands` plane.
pub fn augment_plane(src: &[f64], frames: usize, bands: usize, out: &mut [f64]) {
    let n = frames * bands;
    debug_assert_eq!(out.len(), AUGMENTED_CHANNELS * n);
    let (orig, rest) = out.split_at_mut(n);
    orig.copy_from_slice(src);
    let (dt, rest) = rest.split_at_mut(n);
    let (dt2, rest) = rest.split_at_mut(n);
    let (df, df2) = rest.split_at_mut(n);
    centered_diff(src, frames, bands, Axis::Time, dt);
    centered_diff(dt, frames, bands, Axis::Time, dt2);
    centered_diff(src, frames, bands, Axis::Freq, df);
    centered_diff(df, frames, bands, Axis::Freq, df2);
}

/// Accumulates the gradient of [`augment_plane`] with respect to its source.
pub fn augment_plane_adjoint(grad: &[f64], frames: usize, bands: usize, out: &mut [f64]) {
    let n = frames * bands;
    for (o, g) in out.iter_mut().zip(&grad[..n]) {
        *o += g;
    }
    let mut tmp = vec![0.0; n];
    for (axis, first, second) in [
        (Axis::Time, &grad[n..2 * n], &grad[2 * n..3 * n]),
        (Axis::Freq, &grad[3 * n..4 * n], &grad[4 * n..5 * n]),
    ] {
        // Δ² = Δ∘Δ, so its adjoint is Δᵀ∘Δᵀ.
        tmp.iter_mut().for_each(|v| *v = 0.0);
        centered_diff_adjoint(second, frames, bands, axis, &mut tmp);
        for (t, g) in tmp.iter_mut().zip(first) {
            *t += g;
        }
        centered_diff_adjoint(&tmp, frames, bands, axis, out);
    }
}
