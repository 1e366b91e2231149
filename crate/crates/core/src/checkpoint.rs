//! Versioned binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "VTRCKPT\0"
//! version    u32
//! iteration  u64
//! config     u32 length + UTF-8 `key = value` lines
//! stats      u32 band count, then means (f64 each), then stds
//! networks   u32 count; per network: string name, u32 tensor count,
//!            per tensor: string name, u32 rank, u64 dims, f64 values
//! spectral   u32 count; per state: u32 len + f64 u, u32 len + f64 v
//! checksum   u64 FNV-1a over every preceding byte
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8.

use std::io::Write;
use std::path::Path;

use crate::audio::NormStats;
use crate::error::{Error, Result};
use crate::models::{Networks, Params, SpectralState};
use crate::tensor::Tensor;
use crate::training::keys::parse_pairs;
use crate::training::TrainingConfig;

pub const MAGIC: &[u8; 8] = b"VTRCKPT\0";
pub const VERSION: u32 = 1;

/// Everything needed to resume or run a trained model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainingConfig,
    pub stats: NormStats,
    pub nets: Networks,
    pub iteration: usize,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

struct Enc(Vec<u8>);

impl Enc {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| {
            Error::Checkpoint("array length overflow".into())
        })?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Enc(Vec::new());
        e.0.extend_from_slice(MAGIC);
        e.u32(VERSION as usize);
        e.u64(self.iteration as u64);
        e.str(&self.config.to_text());
        e.u32(self.stats.mean.len());
        e.f64s(&self.stats.mean);
        e.f64s(&self.stats.std);
        let nets = [
            ("generator", &self.nets.generator.params),
            ("discriminator", &self.nets.discriminator.params),
            ("controller", &self.nets.controller.params),
        ];
        e.u32(nets.len());
        for (name, params) in nets {
            e.str(name);
            e.u32(params.len());
            for (tname, t) in params.iter() {
                e.str(tname);
                e.u32(t.shape().len());
                for &d in t.shape() {
                    e.u64(d as u64);
                }
                e.f64s(t.data());
            }
        }
        e.u32(self.nets.discriminator.spectral.len());
        for s in &self.nets.discriminator.spectral {
            e.u32(s.u.len());
            e.f64s(&s.u);
            e.u32(s.v.len());
            e.f64s(&s.v);
        }
        let sum = fnv1a(&e.0);
        e.u64(sum);
        e.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 4 + 8 || &buf[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut d = Dec {
            buf,
            pos: MAGIC.len(),
        };
        let version = d.u32()? as u32;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let body = buf.len() - 8;
        let stored = u64::from_le_bytes(buf[body..].try_into().expect("8 bytes"));
        if fnv1a(&buf[..body]) != stored {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let d_buf = &buf[..body];
        let mut d = Dec {
            buf: d_buf,
            pos: d.pos,
        };
        let iteration = d.u64()? as usize;
        let mut config = TrainingConfig::default();
        for (_, k, v) in parse_pairs(&d.str()?)? {
            config.set(&k, &v)?;
        }
        config.validate()?;
        let bands = d.u32()?;
        let stats = NormStats {
            mean: d.f64s(bands)?,
            std: d.f64s(bands)?,
        };
        stats.validate()?;

        let mut nets = Networks::new(config.effective_model(), config.seed)?;
        let count = d.u32()?;
        if count != 3 {
            return Err(Error::Checkpoint(format!("expected 3 networks, found {count}")));
        }
        for _ in 0..count {
            let name = d.str()?;
            let params = match name.as_str() {
                "generator" => &mut nets.generator.params,
                "discriminator" => &mut nets.discriminator.params,
                "controller" => &mut nets.controller.params,
                _ => return Err(Error::Checkpoint(format!("unknown network {name:?}"))),
            };
            read_params(&mut d, &name, params)?;
        }
        let states = d.u32()?;
        if states != nets.discriminator.spectral.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} spectral-norm states, found {states}",
                nets.discriminator.spectral.len()
            )));
        }
        for s in nets.discriminator.spectral.iter_mut() {
            let (nu, nv) = (s.u.len(), s.v.len());
            let read = |d: &mut Dec, want: usize| -> Result<Vec<f64>> {
                let n = d.u32()?;
                if n != want {
                    return Err(Error::Checkpoint("spectral-norm state size mismatch".into()));
                }
                d.f64s(n)
            };
            let u = read(&mut d, nu)?;
            let v = read(&mut d, nv)?;
            *s = SpectralState { u, v };
        }
        if d.pos != d_buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            config,
            stats,
            nets,
            iteration,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()
        };
        write().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

fn read_params(d: &mut Dec, net: &str, params: &mut Params) -> Result<()> {
    let n = d.u32()?;
    if n != params.len() {
        return Err(Error::Checkpoint(format!(
            "{net}: expected {} tensors, found {n}",
            params.len()
        )));
    }
    for i in 0..n {
        let name = d.str()?;
        if name != params.name(i) {
            return Err(Error::Checkpoint(format!(
                "{net}: expected tensor {:?}, found {name:?}",
                params.name(i)
            )));
        }
        let rank = d.u32()?;
        let shape = (0..rank)
            .map(|_| d.u64().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != params.get(i).shape() {
            return Err(Error::Checkpoint(format!(
                "{net}.{name}: shape {shape:?} does not match configured {:?}",
                params.get(i).shape()
            )));
        }
        let len = shape.iter().product();
        params.tensors_mut()[i] = Tensor::from_vec(&shape, d.f64s(len)?)?;
    }
    Ok(())
}
