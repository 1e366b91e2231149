//! Impaired utterance → controller → projected condition → generator →
//! waveform, one independent segment at a time.

use std::path::{Path, PathBuf};

use crate::audio::{
    featurize_with_stats, invert_features, load_audio, preprocess, segment, write_wav,
    MelFeatures, MelSegment, Waveform, N_MELS,
};
use crate::checkpoint::Checkpoint;
use crate::dataset::{list_wavs, Preprocessing};
use crate::error::{Error, Result};
use crate::models::{project_unit_ball, ConditionVector};

#[derive(Clone, Debug, PartialEq)]
pub struct ConvertOptions {
    pub preprocessing: Preprocessing,
    pub gl_iters: usize,
    /// Frames on each side of a segment boundary to smooth; 0 disables.
    pub crossfade_frames: usize,
}

impl ConvertOptions {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        Self {
            preprocessing: Preprocessing::default(),
            gl_iters: ckpt.config.gl_iters,
            crossfade_frames: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConversionResult {
    pub waveform: Waveform,
    pub per_segment_conditions: Vec<ConditionVector>,
    /// Frames of the preprocessed input.
    pub source_frames: usize,
    pub padding_frames: usize,
    /// Generated features after truncation, in the standardized space.
    pub features: MelFeatures,
    /// Input features, for side-by-side analysis.
    pub source_features: MelFeatures,
}

/// Projected conditions and generated frames for `segments`, in order.
pub fn generate_segments(
    ckpt: &Checkpoint,
    segments: &[MelSegment],
) -> Result<(Vec<ConditionVector>, Vec<MelSegment>)> {
    let refs: Vec<&MelSegment> = segments.iter().collect();
    let conds = ckpt
        .nets
        .controller
        .encode_batch(&refs)?
        .iter()
        .map(project_unit_ball)
        .collect::<Result<Vec<_>>>()?;
    let generated = ckpt.nets.generator.generate_batch(&conds)?;
    Ok((conds, generated))
}

/// Converts features of an already preprocessed utterance.
pub fn convert_features(
    source: &MelFeatures,
    ckpt: &Checkpoint,
    crossfade_frames: usize,
) -> Result<(MelFeatures, Vec<ConditionVector>, usize)> {
    let seg = segment(source, ckpt.config.model.seg_frames)?;
    let (conds, generated) = generate_segments(ckpt, &seg.segments)?;
    let mut values: Vec<f64> = generated.iter().flat_map(|s| s.values.iter().copied()).collect();
    values.truncate(seg.source_frames * N_MELS);
    if crossfade_frames > 0 {
        smooth_boundaries(
            &mut values,
            seg.source_frames,
            ckpt.config.model.seg_frames,
            crossfade_frames,
        );
    }
    let features = MelFeatures {
        frames: seg.source_frames,
        bands: N_MELS,
        values,
        stats: ckpt.stats.clone(),
    };
    Ok((features, conds, seg.padding))
}

/// Replaces the `k` frames on each side of every segment boundary with a
/// linear interpolation between the frames just outside that span.
fn smooth_boundaries(values: &mut [f64], frames: usize, seg: usize, k: usize) {
    let mut b = seg;
    while b < frames {
        let lo = b.saturating_sub(k + 1);
        let hi = (b + k).min(frames - 1);
        if hi > lo + 1 {
            let span = (hi - lo) as f64;
            for t in lo + 1..hi {
                let a = (t - lo) as f64 / span;
                for m in 0..N_MELS {
                    let left = values[lo * N_MELS + m];
                    let right = values[hi * N_MELS + m];
                    values[t * N_MELS + m] = (1.0 - a) * left + a * right;
                }
            }
        }
        b += seg;
    }
}

pub fn convert_utterance(
    w: &Waveform,
    ckpt: &Checkpoint,
    opts: &ConvertOptions,
) -> Result<ConversionResult> {
    let pre = preprocess(w, opts.preprocessing.trim_db, opts.preprocessing.target_peak)?;
    let source = featurize_with_stats(&pre, &ckpt.stats)?;
    let (features, conds, padding) = convert_features(&source, ckpt, opts.crossfade_frames)?;
    let waveform = invert_features(&features, &ckpt.stats, opts.gl_iters)?;
    Ok(ConversionResult {
        waveform,
        per_segment_conditions: conds,
        source_frames: source.frames,
        padding_frames: padding,
        features,
        source_features: source,
    })
}

pub fn convert_file(
    input: &Path,
    output: &Path,
    ckpt: &Checkpoint,
    opts: &ConvertOptions,
) -> Result<ConversionResult> {
    let w = load_audio(input)?;
    let r = convert_utterance(&w, ckpt, opts)?;
    write_wav(output, &r.waveform)?;
    Ok(r)
}

/// One row of a batch conversion summary.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub file: String,
    pub ok: bool,
    pub source_frames: usize,
    pub segments: usize,
    pub padding_frames: usize,
    pub output_samples: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchSummary {
    pub rows: Vec<SummaryRow>,
}

impl BatchSummary {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.ok).count()
    }

    /// Columns: `file,status,source_frames,segments,padding_frames,output_samples,error`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record([
            "file",
            "status",
            "source_frames",
            "segments",
            "padding_frames",
            "output_samples",
            "error",
        ])
        .map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.file.clone(),
                if r.ok { "ok" } else { "failed" }.to_string(),
                r.source_frames.to_string(),
                r.segments.to_string(),
                r.padding_frames.to_string(),
                r.output_samples.to_string(),
                r.error.clone(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Converts every WAV in `dir_in` into `dir_out` under the same basename.
/// Per-file failures are recorded, not propagated.
pub fn convert_batch(
    dir_in: &Path,
    dir_out: &Path,
    ckpt: &Checkpoint,
    opts: &ConvertOptions,
) -> Result<BatchSummary> {
    let inputs = list_wavs(dir_in)?;
    if inputs.is_empty() {
        return Err(Error::EmptyInput(format!("no WAV files in {}", dir_in.display())));
    }
    std::fs::create_dir_all(dir_out).map_err(|e| Error::io(dir_out, e))?;
    let rows = inputs
        .iter()
        .map(|input| {
            let name = input.file_name().expect("listed file").to_owned();
            let out: PathBuf = dir_out.join(&name);
            let file = name.to_string_lossy().into_owned();
            match convert_file(input, &out, ckpt, opts) {
                Ok(r) => SummaryRow {
                    file,
                    ok: true,
                    source_frames: r.source_frames,
                    segments: r.per_segment_conditions.len(),
                    padding_frames: r.padding_frames,
                    output_samples: r.waveform.len(),
                    error: String::new(),
                },
                Err(e) => SummaryRow {
                    file,
                    ok: false,
                    source_frames: 0,
                    segments: 0,
                    padding_frames: 0,
                    output_samples: 0,
                    error: e.to_string(),
                },
            }
        })
        .collect();
    Ok(BatchSummary { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_interpolates_across_boundaries_only() {
        let frames = 8;
        let mut v: Vec<f64> = (0..frames)
            .flat_map(|t| std::iter::repeat_n(if t < 4 { 0.0 } else { 1.0 }, N_MELS))
            .collect();
        smooth_boundaries(&mut v, frames, 4, 1);
        let col: Vec<f64> = (0..frames).map(|t| v[t * N_MELS]).collect();
        assert_eq!(col, [0.0, 0.0, 0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0, 1.0, 1.0]);
    }
}
