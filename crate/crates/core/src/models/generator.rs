use rand::Rng;

use super::params::{Bound, Params};
use super::{ConditionVector, ModelConfig, ELU_ALPHA, OUTPUT_SCALE};
use crate::audio::{MelSegment, N_MELS};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Condition vector → linear projection to the bottleneck grid → a stack of
/// (2× upsample, conv, instance norm, ELU) blocks → `3·tanh` output conv.
#[derive(Clone, Debug)]
pub struct Generator {
    pub params: Params,
    config: ModelConfig,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let mut params = Params::default();
        let (t0, f0) = config.bottleneck();
        let deepest = *config.widths.last().expect("validated");
        let k = config.kernel;
        let fc_out = deepest * t0 * f0;
        params.push_uniform("fc.weight", &[fc_out, config.cond_dim], config.cond_dim, rng);
        params.push_uniform("fc.bias", &[fc_out], config.cond_dim, rng);
        for i in (0..config.layers() - 1).rev() {
            let (cin, cout) = (config.widths[i + 1], config.widths[i]);
            let fan = cin * k * k;
            params.push_uniform(format!("up{i}.weight"), &[cout, cin, k, k], fan, rng);
            params.push_uniform(format!("up{i}.bias"), &[cout], fan, rng);
        }
        let fan = config.widths[0] * k * k;
        params.push_uniform("out.weight", &[1, config.widths[0], k, k], fan, rng);
        params.push_uniform("out.bias", &[1], fan, rng);
        Self {
            params,
            config: config.clone(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `[N, cond_dim]` → `[N, 1, seg_frames, N_MELS]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, cond: Var) -> Result<Var> {
        let (n, d) = g.value(cond).dims2()?;
        if d != self.config.cond_dim {
            return Err(Error::Shape(format!(
                "generator expects condition dim {}, got {d}",
                self.config.cond_dim
            )));
        }
        let (t0, f0) = self.config.bottleneck();
        let deepest = *self.config.widths.last().expect("validated");
        let pad = self.config.kernel / 2;
        let h = g.linear(cond, p.var(0), Some(p.var(1)))?;
        let mut h = g.reshape(h, &[n, deepest, t0, f0])?;
        h = g.instance_norm(h)?;
        h = g.elu(h, ELU_ALPHA);
        let mut idx = 2;
        for _ in 0..self.config.layers() - 1 {
            h = g.upsample2(h)?;
            h = g.conv2d(h, p.var(idx), Some(p.var(idx + 1)), 1, pad)?;
            h = g.instance_norm(h)?;
            h = g.elu(h, ELU_ALPHA);
            idx += 2;
        }
        h = g.upsample2(h)?;
        h = g.conv2d(h, p.var(idx), Some(p.var(idx + 1)), 1, pad)?;
        Ok(g.scaled_tanh(h, OUTPUT_SCALE))
    }

    /// Evaluation-mode generation of one segment.
    pub fn generate(&self, c: &ConditionVector) -> Result<MelSegment> {
        Ok(self.generate_batch(std::slice::from_ref(c))?.remove(0))
    }

    pub fn generate_batch(&self, conds: &[ConditionVector]) -> Result<Vec<MelSegment>> {
        let d = self.config.cond_dim;
        if conds.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(bad) = conds.iter().find(|c| c.dim() != d) {
            return Err(Error::Shape(format!(
                "generator expects condition dim {d}, got {}",
                bad.dim()
            )));
        }
        let data = conds.iter().flat_map(|c| c.0.iter().copied()).collect();
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let c = g.constant(Tensor::from_vec(&[conds.len(), d], data)?);
        let out = self.forward(&mut g, &p, c)?;
        let t = g.value(out);
        let per = self.config.seg_frames * N_MELS;
        Ok(t.data()
            .chunks(per)
            .map(|v| MelSegment {
                frames: self.config.seg_frames,
                values: v.to_vec(),
            })
            .collect())
    }
}
