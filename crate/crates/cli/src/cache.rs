//! On-disk cache of per-utterance mel dB arrays, keyed by the SHA-256 of
//! the WAV bytes together with every featurization parameter.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use vtrans_core::audio::{
    MelDb, DB_FLOOR, FFT_SIZE, HOP_LENGTH, MEL_FMAX, MEL_FMIN, N_MELS, SAMPLE_RATE, WIN_LENGTH,
};
use vtrans_core::dataset::{utterance_db, Preprocessing};
use vtrans_core::io::{npy_bytes, parse_npy};
use vtrans_core::{Error, Result};

pub struct FeatureCache {
    dir: PathBuf,
    pub hits: usize,
    pub misses: usize,
}

fn params_tag(pre: &Preprocessing) -> String {
    format!(
        "meldb-v1 sr={SAMPLE_RATE} win={WIN_LENGTH} hop={HOP_LENGTH} fft={FFT_SIZE} mels={N_MELS} \
         fmin={MEL_FMIN} fmax={MEL_FMAX} floor={DB_FLOOR} trim={} peak={}",
        pre.trim_db, pre.target_peak
    )
}

pub fn cache_key(wav_bytes: &[u8], pre: &Preprocessing) -> String {
    let mut h = Sha256::new();
    h.update(params_tag(pre).as_bytes());
    h.update([0u8]);
    h.update(wav_bytes);
    hex::encode(h.finalize())
}

impl FeatureCache {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            hits: 0,
            misses: 0,
        })
    }

    /// Mel dB of `path`, from the cache when possible.
    pub fn utterance_db(&mut self, path: &Path, pre: &Preprocessing) -> Result<MelDb> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let entry = self.dir.join(format!("{}.npy", cache_key(&bytes, pre)));
        if let Ok(buf) = std::fs::read(&entry) {
            if let Ok((frames, bands, values)) = parse_npy(&buf) {
                if bands == N_MELS {
                    self.hits += 1;
                    return Ok(MelDb { frames, values });
                }
            }
        }
        self.misses += 1;
        let db = utterance_db(path, pre)?;
        let tmp = entry.with_extension("npy.tmp");
        std::fs::write(&tmp, npy_bytes(db.frames, N_MELS, &db.values)?)
            .map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &entry).map_err(|e| Error::io(&entry, e))?;
        Ok(db)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_depends_on_content_and_parameters() {
        let pre = Preprocessing::default();
        let a = cache_key(b"abc", &pre);
        assert_eq!(a, cache_key(b"abc", &pre));
        assert_ne!(a, cache_key(b"abd", &pre));
        let other = Preprocessing {
            trim_db: 30.0,
            ..pre
        };
        assert_ne!(a, cache_key(b"abc", &other));
        assert_eq!(a.len(), 64);
    }
}
