//! WAV corpora → mel dB utterances → standardized training segments.

use std::path::{Path, PathBuf};

use crate::audio::{
    load_audio, preprocess, segment, FeatureExtractor, MelDb, MelFeatures, MelSegment, NormStats,
    DEFAULT_TARGET_PEAK, DEFAULT_TRIM_DB,
};
use crate::error::{Error, Result};
use crate::training::CorpusHandle;

/// Silence trimming and peak normalization applied before featurization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preprocessing {
    pub trim_db: f64,
    pub target_peak: f64,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self {
            trim_db: DEFAULT_TRIM_DB,
            target_peak: DEFAULT_TARGET_PEAK,
        }
    }
}

/// Load, preprocess and compute unstandardized mel dB for one file.
pub fn utterance_db(path: &Path, pre: &Preprocessing) -> Result<MelDb> {
    let w = load_audio(path)?;
    let w = preprocess(&w, pre.trim_db, pre.target_peak)?;
    FeatureExtractor::shared().mel_db(&w)
}

/// Sorted `.wav` files (case-insensitive extension) directly inside `dir`.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let is_wav = p
            .extension()
            .and_then(|x| x.to_str())
            .is_some_and(|x| x.eq_ignore_ascii_case("wav"));
        if is_wav && p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Segments of one utterance used for training: every full segment, plus
/// the padded tail when at least half of it is real audio. Utterances
/// shorter than half a segment contribute their single padded segment.
pub fn training_segments(f: &MelFeatures, seg_frames: usize) -> Result<Vec<MelSegment>> {
    let seg = segment(f, seg_frames)?;
    let mut segments = seg.segments;
    if segments.len() > 1 && seg.padding * 2 > seg_frames {
        segments.pop();
    }
    Ok(segments)
}

/// Standardizes both corpora with statistics of the normal corpus and cuts
/// them into training segments.
pub fn build_corpus(
    normal: &[MelDb],
    impaired: &[MelDb],
    seg_frames: usize,
) -> Result<(CorpusHandle, NormStats)> {
    if normal.is_empty() {
        return Err(Error::Config("normal corpus is empty".into()));
    }
    if impaired.is_empty() {
        return Err(Error::Config("impaired corpus is empty".into()));
    }
    let stats = NormStats::from_corpus(normal)?;
    let cut = |dbs: &[MelDb]| -> Result<Vec<MelSegment>> {
        let mut out = Vec::new();
        for db in dbs {
            out.extend(training_segments(&MelFeatures::from_db(db, &stats), seg_frames)?);
        }
        Ok(out)
    };
    let corpus = CorpusHandle::new(cut(normal)?, cut(impaired)?)?;
    Ok((corpus, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::N_MELS;

    fn db(frames: usize, level: f64) -> MelDb {
        MelDb {
            frames,
            values: (0..frames * N_MELS).map(|i| level + (i % 7) as f64).collect(),
        }
    }

    #[test]
    fn tail_segments_kept_only_when_mostly_audio() {
        let stats = NormStats::from_corpus([&db(10, 0.0)]).unwrap();
        let f = |n| MelFeatures::from_db(&db(n, 0.0), &stats);
        assert_eq!(training_segments(&f(16), 8).unwrap().len(), 2);
        assert_eq!(training_segments(&f(20), 8).unwrap().len(), 3);
        assert_eq!(training_segments(&f(19), 8).unwrap().len(), 2);
        assert_eq!(training_segments(&f(3), 8).unwrap().len(), 1);
    }

    #[test]
    fn stats_come_from_the_normal_corpus_only() {
        let normal = vec![db(16, -20.0), db(16, -30.0)];
        let impaired = vec![db(16, 40.0)];
        let (c, stats) = build_corpus(&normal, &impaired, 8).unwrap();
        assert_eq!(stats, NormStats::from_corpus(&normal).unwrap());
        assert_eq!(c.normal.len(), 4);
        assert_eq!(c.impaired.len(), 2);
        assert!(c.impaired.iter().all(|s| s.values.iter().all(|&v| v == 3.0)));
        assert!(build_corpus(&[], &impaired, 8).is_err());
    }

    #[test]
    fn lists_only_wavs_sorted() {
        let d = tempfile::tempdir().unwrap();
        for n in ["b.wav", "a.WAV", "c.txt"] {
            std::fs::write(d.path().join(n), b"").unwrap();
        }
        let names: Vec<_> = list_wavs(d.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["a.WAV", "b.wav"]);
    }
}
