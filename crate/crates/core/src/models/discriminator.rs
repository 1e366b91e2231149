use rand::Rng;

use super::params::{Bound, Params};
use super::{ModelConfig, Mode, SPECTRAL_WARMUP_ITERS};
use crate::audio::deltas::AUGMENTED_CHANNELS;
use crate::audio::{AugmentedSegment, N_MELS};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Left/right singular-vector estimates for one spectrally normalized weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Strided conv stack with ReLU and dropout. Hidden layer `l` is
/// `concat(dropout(relu(conv_l(h_{l-1}))), maxpool_l(x))` when the input skip
/// is enabled, and the score head is a linear map of the last layer.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: Params,
    /// One entry per weight tensor (convs then head) when spectral
    /// normalization is enabled.
    pub spectral: Vec<SpectralState>,
    config: ModelConfig,
}

/// Graph handles produced by [`Discriminator::forward`].
pub struct DiscriminatorOutput {
    /// `[N, 1]`.
    pub score: Var,
    /// `D_1 … D_L`, shallowest first.
    pub layers: Vec<Var>,
}

/// Materialized response for a single input.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorResponse {
    pub score: f64,
    pub layer_activations: Vec<Tensor>,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let mut params = Params::default();
        let k = config.kernel;
        let skip = if config.input_skip { AUGMENTED_CHANNELS } else { 0 };
        let mut cin = AUGMENTED_CHANNELS;
        for (l, &w) in config.widths.iter().enumerate() {
            let fan = cin * k * k;
            params.push_uniform(format!("conv{l}.weight"), &[w, cin, k, k], fan, rng);
            params.push_uniform(format!("conv{l}.bias"), &[w], fan, rng);
            cin = w + skip;
        }
        let (t, f) = config.bottleneck();
        let head_in = cin * t * f;
        params.push_uniform("head.weight", &[1, head_in], head_in, rng);
        params.push_uniform("head.bias", &[1], head_in, rng);

        let spectral = if config.spectral_norm {
            Self::weight_indices(config.layers())
                .map(|i| {
                    let t = params.get(i);
                    let rows = t.shape()[0];
                    let cols = t.len() / rows;
                    let u = normalized((0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect());
                    SpectralState {
                        u,
                        v: vec![0.0; cols],
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut d = Self {
            params,
            spectral,
            config: config.clone(),
        };
        d.power_iteration(SPECTRAL_WARMUP_ITERS);
        d
    }

    fn weight_indices(layers: usize) -> impl Iterator<Item = usize> {
        (0..=layers).map(|l| 2 * l)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Advances every spectral-norm estimate by `steps` power iterations on
    /// the current weights.
    pub fn power_iteration(&mut self, steps: usize) {
        let idx: Vec<usize> = Self::weight_indices(self.config.layers()).collect();
        for (state, &i) in self.spectral.iter_mut().zip(&idx) {
            let w = self.params.get(i);
            let rows = w.shape()[0];
            let cols = w.len() / rows;
            let wd = w.data();
            for _ in 0..steps {
                let mut v = vec![0.0; cols];
                for r in 0..rows {
                    let row = &wd[r * cols..(r + 1) * cols];
                    for (vv, x) in v.iter_mut().zip(row) {
                        *vv += state.u[r] * x;
                    }
                }
                state.v = normalized(v);
                let u = (0..rows)
                    .map(|r| {
                        wd[r * cols..(r + 1) * cols]
                            .iter()
                            .zip(&state.v)
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect();
                state.u = normalized(u);
            }
        }
    }

    /// Exact top singular value of every normalized weight `W / σ̂`,
    /// computed by SVD (diagnostics and tests).
    pub fn normalized_top_singular_values(&self) -> Vec<f64> {
        Self::weight_indices(self.config.layers())
            .zip(&self.spectral)
            .map(|(i, s)| {
                let w = self.params.get(i);
                let rows = w.shape()[0];
                let cols = w.len() / rows;
                let sigma_hat = crate::autograd::bilinear(w.data(), rows, cols, &s.u, &s.v);
                let m = nalgebra::DMatrix::from_row_slice(rows, cols, w.data());
                let top = m.singular_values().max();
                top / sigma_hat
            })
            .collect()
    }

    /// Pool window `(frames, bands)` applied to the input for each layer.
    pub fn skip_pooling(&self) -> Vec<(usize, usize)> {
        (1..=self.config.layers()).map(|l| (1 << l, 1 << l)).collect()
    }

    fn weight(&self, g: &mut Graph, p: &Bound, param: usize, sn: usize) -> Result<Var> {
        if self.config.spectral_norm {
            let s = &self.spectral[sn];
            g.spectral_norm(p.var(param), &s.u, &s.v)
        } else {
            Ok(p.var(param))
        }
    }

    /// `x: [N, 5, seg_frames, N_MELS]` (delta-augmented input).
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        mut mode: Mode<'_>,
    ) -> Result<DiscriminatorOutput> {
        let (n, c, t, f) = g.value(x).dims4()?;
        if c != AUGMENTED_CHANNELS || t != self.config.seg_frames || f != N_MELS {
            return Err(Error::Shape(format!(
                "discriminator expects [N, {AUGMENTED_CHANNELS}, {}, {N_MELS}], got {:?}",
                self.config.seg_frames,
                g.value(x).shape()
            )));
        }
        let pad = self.config.kernel / 2;
        let mut h = x;
        let mut layers = Vec::with_capacity(self.config.layers());
        for l in 0..self.config.layers() {
            let w = self.weight(g, p, 2 * l, l)?;
            let mut a = g.conv2d(h, w, Some(p.var(2 * l + 1)), 2, pad)?;
            a = g.relu(a);
            if let Mode::Train(rng) = &mut mode {
                a = g.dropout(a, self.config.keep_prob_discriminator, &mut **rng);
            }
            h = if self.config.input_skip {
                let (_, _, ht, hf) = g.value(a).dims4()?;
                if t % ht != 0 || f % hf != 0 {
                    return Err(Error::Shape(format!(
                        "layer {} grid {ht}x{hf} does not tile the input {t}x{f}",
                        l + 1
                    )));
                }
                let pooled = g.max_pool(x, t / ht, f / hf)?;
                let (_, _, pt, pf) = g.value(pooled).dims4()?;
                if (pt, pf) != (ht, hf) {
                    return Err(Error::Shape(format!(
                        "pooled input {pt}x{pf} vs layer {} activation {ht}x{hf}",
                        l + 1
                    )));
                }
                g.concat_channels(&[a, pooled])?
            } else {
                a
            };
            layers.push(h);
        }
        let flat_len = g.value(h).len() / n;
        let flat = g.reshape(h, &[n, flat_len])?;
        let hw = self.weight(g, p, 2 * self.config.layers(), self.config.layers())?;
        let score = g.linear(flat, hw, Some(p.var(2 * self.config.layers() + 1)))?;
        Ok(DiscriminatorOutput { score, layers })
    }

    /// Applies delta augmentation to `[N, 1, T, F]` segments, then [`forward`](Self::forward).
    pub fn forward_segments(
        &self,
        g: &mut Graph,
        p: &Bound,
        segments: Var,
        mode: Mode<'_>,
    ) -> Result<DiscriminatorOutput> {
        let x = g.deltas(segments)?;
        self.forward(g, p, x, mode)
    }

    /// Evaluation-mode response for one augmented segment.
    pub fn respond(&self, x: &AugmentedSegment) -> Result<DiscriminatorResponse> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let input = g.constant(Tensor::from_vec(
            &[1, AUGMENTED_CHANNELS, x.frames, N_MELS],
            x.values.clone(),
        )?);
        let out = self.forward(&mut g, &p, input, Mode::Eval)?;
        Ok(DiscriminatorResponse {
            score: g.value(out.score).item(),
            layer_activations: out.layers.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = self.params.fingerprint();
        for s in &self.spectral {
            for v in s.u.iter().chain(&s.v) {
                h = h.rotate_left(5) ^ v.to_bits();
            }
        }
        h
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    v
}
