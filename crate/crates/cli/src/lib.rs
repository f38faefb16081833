//! Command implementations behind the `textgan` binary.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use textgan::checkpoint::file_sha256;
use textgan::corpus::{self, tokenize, Corpus, CorpusSpec};
use textgan::embedder::{pretrain_matching, Embedder, PretrainConfig};
use textgan::evaluate::{evaluate, EvalConfig};
use textgan::inspect::{attention_maps, edit_demo};
use textgan::models::{GanModel, ImageSet, NoiseBundle};
use textgan::raster::{compose_grid, from_planar, heat_overlay, save_png, upscale_nearest};
use textgan::trainer::{GanCheckpoint, StepRecord, TrainConfig, Trainer};
use textgan::{derive_seed, Error};

pub const SNAPSHOT_FILE: &str = "resolved_config.txt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 2 usage, 3 missing or damaged artifact, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(Error::Numerical(_)) => 4,
            CliError::Core(e) if e.is_artifact_error() => 3,
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Options shared by every command.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
}

impl Common {
    fn resolve<T: Serialize + serde::de::DeserializeOwned>(&self, defaults: &T) -> CliResult<T> {
        let text = match &self.config {
            Some(p) => Some(fs::read_to_string(p).map_err(io_err(p))?),
            None => None,
        };
        config::resolve(defaults, text.as_deref(), self.seed, &self.overrides)
    }

    fn out_dir(&self, default: &str) -> CliResult<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from(default));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(dir)
    }
}

fn write_snapshot<T: Serialize>(out: &Path, command: &str, cfg: &T) -> CliResult<()> {
    let path = out.join(SNAPSHOT_FILE);
    let text = config::render_flat(cfg, &format!("resolved configuration of `textgan {command}`\nreplay with: textgan {command} --config {SNAPSHOT_FILE}"));
    fs::write(&path, text).map_err(io_err(&path))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("report serializes") + "\n"))
}

/// A corpus path may name the directory or its manifest.
fn open_corpus(path: &str) -> CliResult<Corpus> {
    let p = Path::new(path);
    let manifest = if p.is_dir() { p.join(corpus::MANIFEST_FILE) } else { p.to_path_buf() };
    Ok(corpus::load_manifest(&manifest)?)
}

fn open_embedder(path: &str) -> CliResult<(Embedder, String)> {
    let p = Path::new(path);
    let embedder = Embedder::load(p, None)?;
    Ok((embedder, file_sha256(p)?))
}

fn open_model(path: &str, embedder_hash: &str) -> CliResult<GanCheckpoint> {
    let ckpt = GanCheckpoint::read(Path::new(path))?;
    if ckpt.embedder_hash != embedder_hash {
        return Err(Error::Checkpoint(format!("{path} was trained against a different embedder")).into());
    }
    Ok(ckpt)
}

fn caption_tokens(embedder: &Embedder, caption: &str) -> CliResult<Vec<String>> {
    let tokens = tokenize(caption);
    if tokens.is_empty() {
        return Err(CliError::Usage("empty caption".into()));
    }
    if let Some(t) = tokens.iter().find(|t| embedder.vocab.index_of(t).is_none()) {
        return Err(CliError::Usage(format!("caption token `{t}` is not in the vocabulary")));
    }
    Ok(tokens)
}

fn row_images(planar: &[Vec<f64>], side: usize, final_side: usize, scale: u32) -> Vec<image::RgbImage> {
    let factor = (final_side / side) as u32 * scale;
    planar.iter().map(|p| upscale_nearest(&from_planar(p, side as u32), factor)).collect()
}

// ---- gen-data ----

pub fn cmd_gen_data(common: &Common) -> CliResult<()> {
    let spec: CorpusSpec = common.resolve(&CorpusSpec::default())?;
    let out = common.out_dir("data")?;
    write_snapshot(&out, "gen-data", &spec)?;
    let manifest = corpus::generate_corpus(&spec, &out)?;
    eprintln!("wrote {} images, manifest {}", spec.num_images, manifest.display());
    Ok(())
}

// ---- pretrain ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainCmd {
    pub corpus: String,
    pub pretrain: PretrainConfig,
}

impl Default for PretrainCmd {
    fn default() -> Self {
        Self { corpus: "data".into(), pretrain: PretrainConfig::default() }
    }
}

pub fn cmd_pretrain(common: &Common) -> CliResult<()> {
    let cfg: PretrainCmd = common.resolve(&PretrainCmd::default())?;
    let out = common.out_dir("pretrain")?;
    write_snapshot(&out, "pretrain", &cfg)?;
    let corpus = open_corpus(&cfg.corpus)?;
    let (embedder, report) = pretrain_matching(&corpus, &cfg.pretrain)?;
    let path = out.join("embedder.ckpt");
    let sha = embedder.save(&path)?;
    write_json(&out.join("pretrain_report.json"), &report)?;
    eprintln!("loss {:.4} -> {:.4}; embedder {} ({sha})", report.initial_loss, report.epoch_losses.last().copied().unwrap_or(f64::NAN), path.display());
    Ok(())
}

// ---- train ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainCmd {
    pub corpus: String,
    pub embedder: String,
    /// Checkpoint to continue from; empty for a fresh run. When resuming,
    /// the checkpoint's training configuration is used except `train.steps`.
    pub resume: String,
    pub log_every: u64,
    pub train: TrainConfig,
}

impl Default for TrainCmd {
    fn default() -> Self {
        Self {
            corpus: "data".into(),
            embedder: "pretrain/embedder.ckpt".into(),
            resume: String::new(),
            log_every: 50,
            train: TrainConfig::default(),
        }
    }
}

pub fn cmd_train(common: &Common) -> CliResult<()> {
    use std::io::Write;
    let cfg: TrainCmd = common.resolve(&TrainCmd::default())?;
    let out = common.out_dir("train")?;
    write_snapshot(&out, "train", &cfg)?;
    let corpus = open_corpus(&cfg.corpus)?;
    let (embedder, hash) = open_embedder(&cfg.embedder)?;
    let mut trainer = if cfg.resume.is_empty() {
        Trainer::new(cfg.train.clone(), &corpus, embedder, hash)?
    } else {
        let mut t = Trainer::resume(Path::new(&cfg.resume), &corpus, embedder, hash)?;
        t.config.steps = cfg.train.steps;
        t
    };
    let ckpt = out.join("gan.ckpt");
    let log_path = out.join("losses.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(!cfg.resume.is_empty())
        .write(true)
        .truncate(cfg.resume.is_empty())
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let every = cfg.log_every.max(1);
    let result = trainer.run(
        |r: &StepRecord| {
            writeln!(log, "{}", serde_json::to_string(r).expect("record serializes"))
                .map_err(|e| Error::io(&log_path, e))?;
            if r.step % every == 0 || r.step == 1 {
                let l = &r.losses;
                eprintln!("step {:>6}  total_g {:9.4}  total_d {:9.4}  sim {:8.4}  div {:8.4}", r.step, l.total_g, l.total_d, l.sim, l.div);
            }
            Ok(())
        },
        Some(&ckpt),
        Some(&out.join("last_good.ckpt")),
    );
    result?;
    let sha = trainer.save(&ckpt)?;
    eprintln!("{} steps; checkpoint {} ({sha})", trainer.steps_done(), ckpt.display());
    Ok(())
}

// ---- eval ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalCmd {
    pub corpus: String,
    pub embedder: String,
    /// Comma-separated checkpoint paths; one report is written per checkpoint.
    pub checkpoints: String,
    pub eval: EvalConfig,
}

impl Default for EvalCmd {
    fn default() -> Self {
        Self {
            corpus: "data".into(),
            embedder: "pretrain/embedder.ckpt".into(),
            checkpoints: "train/gan.ckpt".into(),
            eval: EvalConfig::default(),
        }
    }
}

pub fn cmd_eval(common: &Common) -> CliResult<()> {
    let cfg: EvalCmd = common.resolve(&EvalCmd::default())?;
    let out = common.out_dir("eval")?;
    write_snapshot(&out, "eval", &cfg)?;
    let corpus = open_corpus(&cfg.corpus)?;
    let (embedder, hash) = open_embedder(&cfg.embedder)?;
    let paths: Vec<&str> = cfg.checkpoints.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if paths.is_empty() {
        return Err(CliError::Usage("no checkpoints given".into()));
    }
    for path in paths {
        let ckpt = open_model(path, &hash)?;
        let report = evaluate(&ckpt.model, &embedder, &corpus, &cfg.eval)?;
        let stem = Path::new(path).file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
        let dest = out.join(format!("report_{stem}.json"));
        write_json(&dest, &report)?;
        eprintln!(
            "{path}: fid {:.4}  diversity {}  is {}  r-precision {}  accuracy {:.4}",
            report.fid, report.perceptual_diversity, report.inception_style, report.r_precision, report.sample_accuracy
        );
    }
    Ok(())
}

// ---- sample ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleCmd {
    pub embedder: String,
    pub checkpoint: String,
    /// Text file with one caption per line.
    pub captions: String,
    /// A single inline caption, used when `captions` is empty.
    pub caption: String,
    pub all_stages: bool,
    pub scale: u32,
    pub seed: u64,
}

impl Default for SampleCmd {
    fn default() -> Self {
        Self {
            embedder: "pretrain/embedder.ckpt".into(),
            checkpoint: "train/gan.ckpt".into(),
            captions: String::new(),
            caption: String::new(),
            all_stages: false,
            scale: 2,
            seed: 0,
        }
    }
}

/// Noise for row `row` of a seeded sampling command.
pub fn row_noise(seed: u64, row: usize, model: &GanModel) -> NoiseBundle {
    NoiseBundle::from_seed(derive_seed(seed, row as u64), model.config.k, model.config.noise_dim)
}

pub fn cmd_sample(common: &Common) -> CliResult<()> {
    let cfg: SampleCmd = common.resolve(&SampleCmd::default())?;
    let out = common.out_dir("samples")?;
    write_snapshot(&out, "sample", &cfg)?;
    let captions: Vec<String> = if !cfg.captions.is_empty() {
        let p = Path::new(&cfg.captions);
        fs::read_to_string(p).map_err(io_err(p))?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
    } else if !cfg.caption.is_empty() {
        vec![cfg.caption.clone()]
    } else {
        return Err(CliError::Usage("set `captions` (a file) or `caption`".into()));
    };
    if captions.is_empty() {
        return Err(CliError::Usage("the caption file is empty".into()));
    }
    let (embedder, hash) = open_embedder(&cfg.embedder)?;
    let model = open_model(&cfg.checkpoint, &hash)?.model;
    let final_side = model.config.final_resolution();
    let mut rows = Vec::new();
    let mut sidecar = String::new();
    for (i, caption) in captions.iter().enumerate() {
        let tokens = caption_tokens(&embedder, caption)?;
        let cond = embedder.encode_tokens(&embedder.vocab.encode(&tokens)?)?;
        let set: ImageSet = model.generate_set(&cond, &row_noise(cfg.seed, i, &model))?;
        let stages: Vec<usize> = if cfg.all_stages { (0..set.stages.len()).collect() } else { vec![set.stages.len() - 1] };
        for s in stages {
            sidecar.push_str(&format!("row {}\tstage {s}\t{}px\t{}\n", rows.len(), set.resolutions[s], tokens.join(" ")));
            rows.push(row_images(&set.stages[s], set.resolutions[s], final_side, cfg.scale.max(1)));
        }
    }
    let grid = out.join("grid.png");
    save_png(&compose_grid(&rows, 2), &grid)?;
    write_text(&out.join("grid.txt"), &sidecar)?;
    eprintln!("{} rows of {} samples -> {}", rows.len(), model.config.k, grid.display());
    Ok(())
}

// ---- attention ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionCmd {
    pub embedder: String,
    pub checkpoint: String,
    pub caption: String,
    /// Which of the K branch samples to inspect.
    pub branch: usize,
    pub top: usize,
    pub scale: u32,
    pub seed: u64,
}

impl Default for AttentionCmd {
    fn default() -> Self {
        Self {
            embedder: "pretrain/embedder.ckpt".into(),
            checkpoint: "train/gan.ckpt".into(),
            caption: String::new(),
            branch: 0,
            top: 5,
            scale: 4,
            seed: 0,
        }
    }
}

pub fn cmd_attention(common: &Common) -> CliResult<()> {
    let cfg: AttentionCmd = common.resolve(&AttentionCmd::default())?;
    let out = common.out_dir("attention")?;
    write_snapshot(&out, "attention", &cfg)?;
    let (embedder, hash) = open_embedder(&cfg.embedder)?;
    let ckpt = open_model(&cfg.checkpoint, &hash)?;
    let model = &ckpt.model;
    if cfg.branch >= model.config.k {
        return Err(CliError::Usage(format!("branch {} out of range for K = {}", cfg.branch, model.config.k)));
    }
    let tokens = caption_tokens(&embedder, &cfg.caption)?;
    let cond = embedder.encode_tokens(&embedder.vocab.encode(&tokens)?)?;
    let set = model.generate_set(&cond, &row_noise(cfg.seed, 0, model))?;
    let image = &set.final_stage()[cfg.branch];
    let words = attention_maps(&embedder, image, &tokens, ckpt.config.matching.gamma1, cfg.top)?;
    let side = model.config.final_resolution() as u32;
    let base = upscale_nearest(&from_planar(image, side), cfg.scale.max(1));
    save_png(&base, &out.join("image.png"))?;
    let grid = embedder.config.grid() as u32;
    let mut sidecar = String::new();
    for (rank, w) in words.iter().enumerate() {
        let name = format!("attn_{}_{}.png", rank + 1, w.token);
        save_png(&heat_overlay(&base, &w.map, grid), &out.join(&name))?;
        sidecar.push_str(&format!("{}\t{}\tposition {}\tmass {:.6}\t{name}\n", rank + 1, w.token, w.position, w.mass));
    }
    write_text(&out.join("attention.txt"), &sidecar)?;
    eprintln!("{} word maps -> {}", words.len(), out.display());
    Ok(())
}

// ---- edit-demo ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditCmd {
    pub corpus: String,
    pub embedder: String,
    pub checkpoint: String,
    pub caption: String,
    /// Zero-based index of the token to replace.
    pub index: usize,
    pub replacement: String,
    pub scale: u32,
    pub seed: u64,
}

impl Default for EditCmd {
    fn default() -> Self {
        Self {
            corpus: "data".into(),
            embedder: "pretrain/embedder.ckpt".into(),
            checkpoint: "train/gan.ckpt".into(),
            caption: String::new(),
            index: 0,
            replacement: String::new(),
            scale: 2,
            seed: 0,
        }
    }
}

pub fn cmd_edit_demo(common: &Common) -> CliResult<()> {
    let cfg: EditCmd = common.resolve(&EditCmd::default())?;
    let out = common.out_dir("edit")?;
    write_snapshot(&out, "edit-demo", &cfg)?;
    let corpus = open_corpus(&cfg.corpus)?;
    let spec = corpus.spec()?.clone();
    let (embedder, hash) = open_embedder(&cfg.embedder)?;
    let model = open_model(&cfg.checkpoint, &hash)?.model;
    let tokens = caption_tokens(&embedder, &cfg.caption)?;
    if cfg.index >= tokens.len() {
        return Err(CliError::Usage(format!("token index {} out of range for a {}-word caption", cfg.index, tokens.len())));
    }
    if embedder.vocab.index_of(&cfg.replacement).is_none() {
        return Err(CliError::Usage(format!("replacement `{}` is not in the vocabulary", cfg.replacement)));
    }
    let outcome = edit_demo(&model, &embedder, &spec, &tokens, cfg.index, &cfg.replacement, &row_noise(cfg.seed, 0, &model))?;
    let side = model.config.final_resolution();
    let scale = cfg.scale.max(1);
    save_png(&compose_grid(&[row_images(outcome.before.final_stage(), side, side, scale)], 2), &out.join("before.png"))?;
    save_png(&compose_grid(&[row_images(outcome.after.final_stage(), side, side, scale)], 2), &out.join("after.png"))?;
    let r = &outcome.report;
    write_text(
        &out.join("edit.txt"),
        &format!("before.png\t{}\nafter.png\t{}\n", r.original.tokens.join(" "), r.edited.tokens.join(" ")),
    )?;
    write_json(&out.join("edit_report.json"), r)?;
    eprintln!("color flips {}/{}; shape kept {}/{}", r.color_flips, r.samples, r.shape_kept, r.samples);
    Ok(())
}
