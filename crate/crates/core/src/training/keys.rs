//! Flat `key = value` form of [`TrainingConfig`].

use std::str::FromStr;

use super::{Ablation, TrainingConfig};
use crate::error::{Error, Result};

/// Every recognized key, in echo order.
pub const KEYS: &[&str] = &[
    "seg_frames",
    "cond_dim",
    "widths",
    "kernel",
    "spectral_norm",
    "keep_prob_controller",
    "keep_prob_discriminator",
    "lr_gc",
    "lr_d",
    "adam_beta1",
    "adam_beta2",
    "batch_size",
    "iters",
    "ablation",
    "gl_iters",
    "seed",
    "gan_grad_into_controller",
    "log_wall_time",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

impl TrainingConfig {
    /// Sets one field from its text form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "seg_frames" => m.seg_frames = parse(key, value)?,
            "cond_dim" => m.cond_dim = parse(key, value)?,
            "widths" => {
                m.widths = value
                    .split(',')
                    .map(|w| parse(key, w))
                    .collect::<Result<Vec<usize>>>()?
            }
            "kernel" => m.kernel = parse(key, value)?,
            "spectral_norm" => m.spectral_norm = parse_bool(key, value)?,
            "keep_prob_controller" => m.keep_prob_controller = parse(key, value)?,
            "keep_prob_discriminator" => m.keep_prob_discriminator = parse(key, value)?,
            "lr_gc" => self.lr_gc = parse(key, value)?,
            "lr_d" => self.lr_d = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "iters" => self.iters = parse(key, value)?,
            "ablation" => self.ablation = Ablation::from_str(value.trim())?,
            "gl_iters" => self.gl_iters = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "gan_grad_into_controller" => self.gan_grad_into_controller = parse_bool(key, value)?,
            "log_wall_time" => self.log_wall_time = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// All fields as `(key, value)` text, in [`KEYS`] order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let widths = m
            .widths
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let values = [
            m.seg_frames.to_string(),
            m.cond_dim.to_string(),
            widths,
            m.kernel.to_string(),
            m.spectral_norm.to_string(),
            m.keep_prob_controller.to_string(),
            m.keep_prob_discriminator.to_string(),
            self.lr_gc.to_string(),
            self.lr_d.to_string(),
            self.adam_beta1.to_string(),
            self.adam_beta2.to_string(),
            self.batch_size.to_string(),
            self.iters.to_string(),
            self.ablation.to_string(),
            self.gl_iters.to_string(),
            self.seed.to_string(),
            self.gan_grad_into_controller.to_string(),
            self.log_wall_time.to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        self.pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are
/// ignored. Returns the pairs with their 1-based line numbers.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            reason: format!("expected key = value, got {line:?}"),
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
