use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use vtrans_core::audio::{featurize, featurize_with_stats, invert_features, load_audio, preprocess, segment, write_wav};
use vtrans_core::checkpoint::Checkpoint;
use vtrans_core::dataset::{build_corpus, list_wavs, Preprocessing};
use vtrans_core::evaluation::{export_spectrogram, gv_report, plot_loss_curves};
use vtrans_core::inference::{convert_batch, convert_file, convert_utterance, ConvertOptions};
use vtrans_core::io::{load_features, save_features};
use vtrans_core::synth::write_corpus;
use vtrans_core::training::{read_history, train, HistoryWriter};
use vtrans_core::Error;

use crate::cache::FeatureCache;
use crate::config::{process_env, resolve};
use crate::{Failure, EXIT_OK, EXIT_PARTIAL, EXIT_RUNTIME};

type CmdResult = Result<i32, Failure>;

#[derive(Parser, Debug)]
#[command(name = "vtrans", version, about = "Impaired-to-normal speech conversion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train controller, generator and discriminator on two WAV corpora.
    Train(TrainArgs),
    /// Convert a WAV file or a directory of WAVs with a checkpoint.
    Convert(ConvertArgs),
    /// Convert the impaired corpus and write GV, spectrogram and loss reports.
    Eval(EvalArgs),
    /// Featurize a WAV to NPY/JSON/PNG, or invert a feature dump to WAV.
    Features(FeaturesArgs),
    /// Write synthetic normal and impaired corpora.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Key-value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub normal_dir: Option<PathBuf>,
    #[arg(long)]
    pub impaired_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// proposed, no_sd or joint_cg.
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// WAV file or directory.
    #[arg(long)]
    pub input: PathBuf,
    /// WAV file, or directory when the input is one.
    #[arg(long)]
    pub output: PathBuf,
    /// Griffin-Lim iterations; defaults to the checkpoint's value.
    #[arg(long)]
    pub gl_iters: Option<usize>,
    /// Frames smoothed on each side of segment boundaries.
    #[arg(long, default_value_t = 0)]
    pub crossfade: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub normal_dir: PathBuf,
    #[arg(long)]
    pub impaired_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Utterances to export spectrograms for.
    #[arg(long, default_value_t = 3)]
    pub spectrograms: usize,
    /// Loss history to plot, as `label=path`; repeatable.
    #[arg(long = "history", value_name = "LABEL=PATH")]
    pub histories: Vec<String>,
    #[arg(long)]
    pub gl_iters: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FeaturesArgs {
    /// WAV to featurize, or `.npy` feature dump to invert.
    #[arg(long)]
    pub input: PathBuf,
    /// Output stem for `.npy`, `.json` and `.png`.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Standardize with this checkpoint's corpus statistics.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Record the segmentation of this many frames in the sidecar.
    #[arg(long)]
    pub seg_frames: Option<usize>,
    /// Write the Griffin-Lim reconstruction here.
    #[arg(long)]
    pub invert: Option<PathBuf>,
    #[arg(long, default_value_t = vtrans_core::audio::DEFAULT_GL_ITERS)]
    pub gl_iters: usize,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub normal: usize,
    #[arg(long, default_value_t = 20)]
    pub impaired: usize,
    #[arg(long, default_value_t = 1.0)]
    pub secs: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

pub fn dispatch(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Convert(a) => cmd_convert(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Features(a) => cmd_features(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn split_pair(s: &str, what: &str) -> Result<(String, String), Failure> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Failure::usage(format!("{what} must look like key=value, got {s:?}")))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut overrides = Vec::new();
    let path_arg = |k: &str, p: &Option<PathBuf>| p.as_ref().map(|p| (k.to_string(), p.display().to_string()));
    overrides.extend(path_arg("normal_dir", &a.normal_dir));
    overrides.extend(path_arg("impaired_dir", &a.impaired_dir));
    overrides.extend(path_arg("out_dir", &a.out_dir));
    overrides.extend(a.ablation.map(|v| ("ablation".to_string(), v)));
    overrides.extend(a.seed.map(|v| ("seed".to_string(), v.to_string())));
    overrides.extend(a.iters.map(|v| ("iters".to_string(), v.to_string())));
    for s in &a.set {
        overrides.push(split_pair(s, "--set")?);
    }
    let resolved = resolve(a.config.as_deref(), &process_env(), &overrides)?;
    let rc = &resolved.config;
    let (normal_dir, impaired_dir) = rc.corpus_dirs()?;
    create_dir(&rc.out_dir)?;
    let echo_path = rc.out_dir.join("effective_config.txt");
    std::fs::write(&echo_path, resolved.echo()).map_err(|e| Error::io(&echo_path, e))?;

    let normal_files = list_wavs(normal_dir)?;
    let impaired_files = list_wavs(impaired_dir)?;
    for (name, files, dir) in [
        ("normal", &normal_files, normal_dir),
        ("impaired", &impaired_files, impaired_dir),
    ] {
        if files.is_empty() {
            return Err(Failure::runtime(format!(
                "{name} corpus {} contains no WAV files",
                dir.display()
            )));
        }
    }
    let mut cache = FeatureCache::open(&rc.cache_dir())?;
    let mut load = |files: &[PathBuf]| -> Result<Vec<_>, Failure> {
        files
            .iter()
            .map(|p| {
                cache
                    .utterance_db(p, &rc.preprocessing)
                    .map_err(|e| Failure::from(e).with_context(p))
            })
            .collect()
    };
    let normal = load(&normal_files)?;
    let impaired = load(&impaired_files)?;
    eprintln!(
        "featurized {} normal and {} impaired utterances ({} cached, {} computed)",
        normal.len(),
        impaired.len(),
        cache.hits,
        cache.misses
    );
    let cfg = &rc.training;
    let (corpus, stats) = build_corpus(&normal, &impaired, cfg.model.seg_frames)?;
    eprintln!(
        "{} normal and {} impaired segments of {} frames",
        corpus.normal.len(),
        corpus.impaired.len(),
        corpus.seg_frames()
    );

    let history_path = rc.out_dir.join("loss_history.csv");
    let ckpt_path = rc.out_dir.join("checkpoint.ckpt");
    let mut history = HistoryWriter::create(&history_path)?;
    let started = Instant::now();
    let outcome = train(&corpus, cfg, |trainer, rec| {
        history.append(rec)?;
        let i = rec.iteration;
        if rc.log_interval > 0 && (i % rc.log_interval == 0 || i == cfg.iters) {
            eprintln!(
                "iter {i}/{}  L_D {:.4}  L_G {:.4}  L_C {:.4}  ({:.1}s)",
                cfg.iters,
                rec.loss_d,
                rec.loss_g,
                rec.loss_c,
                started.elapsed().as_secs_f64()
            );
        }
        let due = rc.checkpoint_interval > 0 && i % rc.checkpoint_interval == 0;
        if due || i == cfg.iters {
            Checkpoint {
                config: cfg.clone(),
                stats: stats.clone(),
                nets: trainer.nets.clone(),
                iteration: i,
            }
            .save(&ckpt_path)?;
        }
        Ok(())
    });
    match outcome {
        Ok(_) => {
            eprintln!("wrote {} and {}", history_path.display(), ckpt_path.display());
            Ok(EXIT_OK)
        }
        Err(e @ Error::Diverged { .. }) => Err(Failure::runtime(format!(
            "{e}; history up to the failure is in {}",
            history_path.display()
        ))),
        Err(e) => Err(e.into()),
    }
}

impl Failure {
    fn with_context(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| Failure::runtime(format!("loading checkpoint: {e}")))
}

fn cmd_convert(a: ConvertArgs) -> CmdResult {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let mut opts = ConvertOptions::from_checkpoint(&ckpt);
    opts.crossfade_frames = a.crossfade;
    if let Some(n) = a.gl_iters {
        opts.gl_iters = n;
    }
    if a.input.is_dir() {
        let summary = convert_batch(&a.input, &a.output, &ckpt, &opts)?;
        let csv = a.output.join("summary.csv");
        summary.write_csv(&csv)?;
        let failed = summary.failures();
        for r in summary.rows.iter().filter(|r| !r.ok) {
            eprintln!("failed: {}: {}", r.file, r.error);
        }
        eprintln!(
            "converted {} of {} files; summary in {}",
            summary.rows.len() - failed,
            summary.rows.len(),
            csv.display()
        );
        Ok(match failed {
            0 => EXIT_OK,
            n if n == summary.rows.len() => EXIT_RUNTIME,
            _ => EXIT_PARTIAL,
        })
    } else {
        if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        let r = convert_file(&a.input, &a.output, &ckpt, &opts)
            .map_err(|e| Failure::from(e).with_context(&a.input))?;
        eprintln!(
            "{} frames in {} segments -> {} samples",
            r.source_frames,
            r.per_segment_conditions.len(),
            r.waveform.len()
        );
        Ok(EXIT_OK)
    }
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let mut opts = ConvertOptions::from_checkpoint(&ckpt);
    if let Some(n) = a.gl_iters {
        opts.gl_iters = n;
    }
    let histories = a
        .histories
        .iter()
        .map(|h| split_pair(h, "--history"))
        .collect::<Result<Vec<_>, _>>()?;
    let normal_files = list_wavs(&a.normal_dir)?;
    let impaired_files = list_wavs(&a.impaired_dir)?;
    if normal_files.is_empty() || impaired_files.is_empty() {
        return Err(Failure::runtime("eval needs nonempty normal and impaired corpora"));
    }
    let converted_dir = a.out_dir.join("converted");
    create_dir(&converted_dir)?;
    let spec_dir = a.out_dir.join("spectrograms");
    if a.spectrograms > 0 {
        create_dir(&spec_dir)?;
    }

    let mut sources = Vec::new();
    let mut generated = Vec::new();
    for (i, path) in impaired_files.iter().enumerate() {
        let ctx = |e: Error| Failure::from(e).with_context(path);
        let w = load_audio(path).map_err(ctx)?;
        let r = convert_utterance(&w, &ckpt, &opts).map_err(ctx)?;
        let name = path.file_name().expect("listed file");
        write_wav(&converted_dir.join(name), &r.waveform)?;
        if i < a.spectrograms {
            let stem = path.file_stem().expect("listed file").to_string_lossy();
            export_spectrogram(&r.source_features, &spec_dir.join(format!("{stem}_impaired")))?;
            export_spectrogram(&r.features, &spec_dir.join(format!("{stem}_converted")))?;
        }
        sources.push(r.source_features);
        generated.push(r.features);
    }
    let mut normal = Vec::new();
    for path in &normal_files {
        let ctx = |e: Error| Failure::from(e).with_context(path);
        let w = load_audio(path).map_err(ctx)?;
        let w = preprocess(&w, opts.preprocessing.trim_db, opts.preprocessing.target_peak)
            .map_err(ctx)?;
        normal.push(featurize_with_stats(&w, &ckpt.stats).map_err(ctx)?);
    }
    let report = gv_report(&sources, &generated, &normal)?;
    report.write_curves_csv(&a.out_dir.join("gv_report.csv"))?;
    report.write_summary_csv(&a.out_dir.join("gv_summary.csv"))?;
    eprintln!(
        "GV distance to normal: generated {:.4}, impaired {:.4}",
        report.d_generated_normal, report.d_impaired_normal
    );
    if !histories.is_empty() {
        let loaded = histories
            .iter()
            .map(|(label, path)| Ok((label.clone(), read_history(Path::new(path))?)))
            .collect::<Result<Vec<_>, Error>>()?;
        plot_loss_curves(&loaded, &a.out_dir.join("loss_curves.svg"))?;
    }
    Ok(EXIT_OK)
}

fn cmd_features(a: FeaturesArgs) -> CmdResult {
    let is_npy = a
        .input
        .extension()
        .and_then(|x| x.to_str())
        .is_some_and(|x| x.eq_ignore_ascii_case("npy"));
    if is_npy {
        let out = a
            .invert
            .ok_or_else(|| Failure::usage("inverting a feature dump needs --invert <wav>"))?;
        let (f, meta) = load_features(&a.input)?;
        write_wav(&out, &invert_features(&f, &meta.stats, a.gl_iters)?)?;
        return Ok(EXIT_OK);
    }
    if a.output.is_none() && a.invert.is_none() {
        return Err(Failure::usage("give --output, --invert or both"));
    }
    let pre = Preprocessing::default();
    let w = load_audio(&a.input)?;
    let w = preprocess(&w, pre.trim_db, pre.target_peak)?;
    let f = match &a.checkpoint {
        Some(p) => featurize_with_stats(&w, &load_checkpoint(p)?.stats)?,
        None => featurize(&w)?,
    };
    if let Some(stem) = &a.output {
        if let Some(parent) = stem.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        export_spectrogram(&f, stem)?;
        if let Some(seg) = a.seg_frames {
            let padding = segment(&f, seg)?.padding;
            save_features(&stem.with_extension("npy"), &f, Some(seg), Some(padding))?;
        }
    }
    if let Some(out) = &a.invert {
        write_wav(out, &invert_features(&f, &f.stats, a.gl_iters)?)?;
    }
    eprintln!("{} frames x {} bands", f.frames, f.bands);
    Ok(EXIT_OK)
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let c = write_corpus(&a.out_dir, a.normal, a.impaired, a.secs, a.seed)?;
    eprintln!(
        "wrote {} normal and {} impaired utterances under {}",
        c.normal.len(),
        c.impaired.len(),
        a.out_dir.display()
    );
    Ok(EXIT_OK)
}
