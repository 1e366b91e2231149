//! Global variance, spectrogram images and loss-curve plots.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::audio::{MelFeatures, CLIP, N_MELS};
use crate::error::{Error, Result};
use crate::io::save_features;
use crate::training::LossRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceLabel {
    Impaired,
    Generated,
    Normal,
}

impl SourceLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceLabel::Impaired => "impaired",
            SourceLabel::Generated => "generated",
            SourceLabel::Normal => "normal",
        }
    }
}

/// Per-band variance pooled over every frame of a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalVariance {
    pub per_band_variance: Vec<f64>,
    pub source_label: SourceLabel,
}

impl GlobalVariance {
    pub fn distance(&self, other: &GlobalVariance) -> f64 {
        self.per_band_variance
            .iter()
            .zip(&other.per_band_variance)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Population variance per band, accumulated in one pass with Welford's
/// update.
pub fn global_variance(features: &[MelFeatures], label: SourceLabel) -> Result<GlobalVariance> {
    let mut count = 0usize;
    let mut mean = vec![0.0; N_MELS];
    let mut m2 = vec![0.0; N_MELS];
    for f in features {
        if f.bands != N_MELS {
            return Err(Error::Shape(format!("expected {N_MELS} bands, got {}", f.bands)));
        }
        for row in f.values.chunks(N_MELS) {
            count += 1;
            for ((mu, s), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(row) {
                let d = x - *mu;
                *mu += d / count as f64;
                *s += d * (x - *mu);
            }
        }
    }
    if count == 0 {
        return Err(Error::Config("global variance needs at least one frame".into()));
    }
    Ok(GlobalVariance {
        per_band_variance: m2.into_iter().map(|s| (s / count as f64).max(0.0)).collect(),
        source_label: label,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GvReport {
    pub impaired: GlobalVariance,
    pub generated: GlobalVariance,
    pub normal: GlobalVariance,
    pub d_generated_normal: f64,
    pub d_impaired_normal: f64,
}

pub fn gv_report(
    impaired: &[MelFeatures],
    converted: &[MelFeatures],
    normal: &[MelFeatures],
) -> Result<GvReport> {
    let impaired = global_variance(impaired, SourceLabel::Impaired)?;
    let generated = global_variance(converted, SourceLabel::Generated)?;
    let normal = global_variance(normal, SourceLabel::Normal)?;
    Ok(GvReport {
        d_generated_normal: generated.distance(&normal),
        d_impaired_normal: impaired.distance(&normal),
        impaired,
        generated,
        normal,
    })
}

impl GvReport {
    pub fn curves(&self) -> [&GlobalVariance; 3] {
        [&self.impaired, &self.generated, &self.normal]
    }

    /// Columns `band,impaired,generated,normal`, one row per band.
    pub fn write_curves_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(["band", "impaired", "generated", "normal"]).map_err(io)?;
        for b in 0..N_MELS {
            w.write_record([
                b.to_string(),
                self.impaired.per_band_variance[b].to_string(),
                self.generated.per_band_variance[b].to_string(),
                self.normal.per_band_variance[b].to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Columns `metric,value`.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let text = format!(
            "metric,value\nd_generated_normal,{}\nd_impaired_normal,{}\n",
            self.d_generated_normal, self.d_impaired_normal
        );
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Anchors of the color map, dark blue (−3) through teal to yellow (+3).
const COLORMAP: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

pub fn color(value: f64) -> [u8; 3] {
    let x = ((value.clamp(-CLIP, CLIP) + CLIP) / (2.0 * CLIP)) * (COLORMAP.len() - 1) as f64;
    let i = (x.floor() as usize).min(COLORMAP.len() - 2);
    let a = x - i as f64;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = ((1.0 - a) * COLORMAP[i][c] + a * COLORMAP[i + 1][c]).round() as u8;
    }
    out
}

/// Time runs left to right and band 0 is the bottom row; each frame/band
/// cell is `scale × scale` pixels.
pub fn spectrogram_rgb(f: &MelFeatures, scale: usize) -> (usize, usize, Vec<u8>) {
    let (w, h) = (f.frames * scale, f.bands * scale);
    let mut px = vec![0u8; w * h * 3];
    for y in 0..h {
        let band = f.bands - 1 - y / scale;
        for x in 0..w {
            let c = color(f.values[(x / scale) * f.bands + band]);
            px[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&c);
        }
    }
    (w, h, px)
}

pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut w = enc.write_header().map_err(io)?;
    w.write_image_data(rgb).map_err(io)?;
    w.finish().map_err(io)
}

/// Writes `<stem>.png` and the lossless dump `<stem>.npy` + `<stem>.json`.
pub fn export_spectrogram(f: &MelFeatures, stem: &Path) -> Result<()> {
    if f.frames == 0 || f.values.len() != f.frames * f.bands {
        return Err(Error::Shape("spectrogram needs a nonempty frames × bands buffer".into()));
    }
    let (w, h, px) = spectrogram_rgb(f, 2);
    write_png(&stem.with_extension("png"), w, h, &px)?;
    save_features(&stem.with_extension("npy"), f, None, None)
}

/// Overlaid `L_D` (solid) and `L_C` (dashed) curves, one color per
/// labeled history, as an SVG document.
pub fn loss_curves_svg(histories: &[(String, Vec<LossRecord>)]) -> Result<String> {
    if histories.is_empty() {
        return Err(Error::Config("no loss histories to plot".into()));
    }
    if let Some((label, _)) = histories.iter().find(|(_, h)| h.is_empty()) {
        return Err(Error::Config(format!("history {label:?} has no records")));
    }
    const W: f64 = 720.0;
    const H: f64 = 420.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let max_iter = histories
        .iter()
        .flat_map(|(_, h)| h.iter().map(|r| r.iteration))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let max_loss = histories
        .iter()
        .flat_map(|(_, h)| h.iter().flat_map(|r| [r.loss_d, r.loss_c]))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let px = |it: usize| PAD + (W - 2.0 * PAD) * it as f64 / max_iter;
    let py = |v: f64| H - PAD - (H - 2.0 * PAD) * v / max_loss;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">iteration (max {max_iter})</text>"#,
        W / 2.0,
        H - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{PAD}" font-size="12">loss (max {max_loss:.4})</text>"#
    );
    for (k, (label, h)) in histories.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        for (field, dash) in [(0usize, ""), (1, r#" stroke-dasharray="6 4""#)] {
            let pts: Vec<String> = h
                .iter()
                .map(|r| {
                    let v = if field == 0 { r.loss_d } else { r.loss_c };
                    format!("{:.2},{:.2}", px(r.iteration), py(v))
                })
                .collect();
            let name = if field == 0 { "L_D" } else { "L_C" };
            let _ = writeln!(
                s,
                r#"<polyline class="{label} {name}" points="{}" stroke="{color}" fill="none"{dash}/>"#,
                pts.join(" ")
            );
        }
        let ly = PAD + 18.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text class="legend" x="{}" y="{ly}" font-size="12" fill="{color}">{label}: L_D solid, L_C dashed</text>"#,
            W - PAD - 230.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn plot_loss_curves(histories: &[(String, Vec<LossRecord>)], path: &Path) -> Result<()> {
    let svg = loss_curves_svg(histories)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::NormStats;

    fn feats(frames: usize, values: Vec<f64>) -> MelFeatures {
        MelFeatures {
            frames,
            bands: N_MELS,
            values,
            stats: NormStats {
                mean: vec![0.0; N_MELS],
                std: vec![1.0; N_MELS],
            },
        }
    }

    #[test]
    fn gv_examples() {
        let c = global_variance(&[feats(5, vec![1.5; 5 * N_MELS])], SourceLabel::Normal).unwrap();
        assert!(c.per_band_variance.iter().all(|&v| v == 0.0));
        let (a, b) = (0.5, -1.25);
        let mut v = vec![a; N_MELS];
        v.extend(vec![b; N_MELS]);
        let g = global_variance(&[feats(2, v)], SourceLabel::Normal).unwrap();
        for x in g.per_band_variance {
            assert!((x - (a - b) * (a - b) / 4.0).abs() < 1e-15);
        }
        assert!(matches!(global_variance(&[], SourceLabel::Normal), Err(Error::Config(_))));
    }

    #[test]
    fn identical_corpora_have_zero_distance() {
        let f = vec![feats(2, (0..2 * N_MELS).map(|i| (i % 5) as f64 * 0.1).collect())];
        let r = gv_report(&f, &f, &f).unwrap();
        assert_eq!(r.d_generated_normal, 0.0);
        assert_eq!(r.curves().len(), 3);
        assert!(r.curves().iter().all(|c| c.per_band_variance.len() == N_MELS));
    }

    #[test]
    fn image_layout_and_orientation() {
        let mut values = vec![-3.0; 3 * N_MELS];
        values[0] = 3.0;
        let (w, h, px) = spectrogram_rgb(&feats(3, values), 2);
        assert_eq!((w, h), (6, 2 * N_MELS));
        let bottom_left = (h - 1) * w * 3;
        assert_eq!(px[bottom_left..bottom_left + 3], color(3.0));
        assert_eq!(px[0..3], color(-3.0));
        assert_ne!(color(-3.0), color(3.0));
    }

    #[test]
    fn svg_has_one_polyline_per_loss_and_label() {
        let h: Vec<LossRecord> = (1..=10)
            .map(|i| LossRecord {
                iteration: i,
                loss_d: 1.0 / i as f64,
                loss_g: 0.5,
                loss_c: 0.2,
                wall_time: 0.0,
            })
            .collect();
        let svg = loss_curves_svg(&[("proposed".into(), h.clone()), ("joint_cg".into(), h)]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert_eq!(svg.matches(r#"class="legend""#).count(), 2);
        let first = svg.lines().find(|l| l.contains("polyline")).unwrap();
        assert_eq!(first.matches(',').count(), 10);
        assert!(loss_curves_svg(&[]).is_err());
    }
}
