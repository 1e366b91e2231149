use rand::Rng;

use super::params::{Bound, Params};
use super::{ConditionVector, ModelConfig, Mode, ELU_ALPHA};
use crate::audio::{MelSegment, N_MELS};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

/// Strided conv encoder (conv, instance norm, ELU, dropout per layer) with a
/// linear head emitting an unconstrained condition vector.
#[derive(Clone, Debug)]
pub struct Controller {
    pub params: Params,
    config: ModelConfig,
}

impl Controller {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let mut params = Params::default();
        let k = config.kernel;
        let mut cin = 1;
        for (l, &w) in config.widths.iter().enumerate() {
            let fan = cin * k * k;
            params.push_uniform(format!("conv{l}.weight"), &[w, cin, k, k], fan, rng);
            params.push_uniform(format!("conv{l}.bias"), &[w], fan, rng);
            cin = w;
        }
        let (t, f) = config.bottleneck();
        let head_in = cin * t * f;
        params.push_uniform("head.weight", &[config.cond_dim, head_in], head_in, rng);
        params.push_uniform("head.bias", &[config.cond_dim], head_in, rng);
        Self {
            params,
            config: config.clone(),
        }
    }

    /// `[N, 1, seg_frames, N_MELS]` → `[N, cond_dim]`, before projection.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, mut mode: Mode<'_>) -> Result<Var> {
        let (n, c, t, f) = g.value(x).dims4()?;
        if c != 1 || t != self.config.seg_frames || f != N_MELS {
            return Err(Error::Shape(format!(
                "controller expects [N, 1, {}, {N_MELS}], got {:?}",
                self.config.seg_frames,
                g.value(x).shape()
            )));
        }
        let pad = self.config.kernel / 2;
        let mut h = x;
        for l in 0..self.config.layers() {
            h = g.conv2d(h, p.var(2 * l), Some(p.var(2 * l + 1)), 2, pad)?;
            h = g.instance_norm(h)?;
            h = g.elu(h, ELU_ALPHA);
            if let Mode::Train(rng) = &mut mode {
                h = g.dropout(h, self.config.keep_prob_controller, &mut **rng);
            }
        }
        let flat_len = g.value(h).len() / n;
        let flat = g.reshape(h, &[n, flat_len])?;
        let head = 2 * self.config.layers();
        g.linear(flat, p.var(head), Some(p.var(head + 1)))
    }

    /// Evaluation-mode encoding of one segment.
    pub fn encode(&self, s: &MelSegment) -> Result<ConditionVector> {
        Ok(self.encode_batch(&[s])?.remove(0))
    }

    pub fn encode_batch(&self, segments: &[&MelSegment]) -> Result<Vec<ConditionVector>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(MelSegment::batch_tensor(segments)?);
        let out = self.forward(&mut g, &p, x, Mode::Eval)?;
        Ok(g
            .value(out)
            .data()
            .chunks(self.config.cond_dim)
            .map(|c| ConditionVector(c.to_vec()))
            .collect())
    }
}
