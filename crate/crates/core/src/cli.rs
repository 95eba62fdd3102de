//! The `opn` command line: argument parsing, run manifests and exit codes.
//!
//! Exit status is 0 on success, 2 for usage errors (bad flags, missing or
//! unreadable inputs) and 1 for failures during computation. Every failure
//! prints one JSON line on stderr.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::driver::{
    complete_targets, complete_video, encode_reference, CompletionOptions, FrameSet, FrameTrace, DEFAULT_REF_STRIDE,
};
use crate::error::{Error, Result};
use crate::frame::RgbFrame;
use crate::gradsuite::{self, SuiteOptions, SuiteResult};
use crate::io::{list_images, load_frame, load_mask_checked, matching_mask, save_frame, save_mask};
use crate::mask::{MaskPlane, PeelWidth};
use crate::metrics::{psnr, ssim};
use crate::network::{init_params, Checkpoint, Network, NetworkConfig};
use crate::training::{draw_sample, train_loop, DataSource, LossBreakdown, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const THREADS_ENV: &str = "OPN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "opn", version, about = "Onion-peel video completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fill the masked regions of a frame sequence, or of one image given references.
    Complete(CompleteArgs),
    /// Like `complete`, also writing every recursion's attention scores.
    AttnDump(CompleteArgs),
    /// Train a network on synthetic samples.
    Train(TrainArgs),
    /// Compare predicted frames against ground truth (PSNR / SSIM).
    Eval(EvalArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Write synthetic training samples as PNG files.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct CompleteArgs {
    /// Frame directory (video mode) or a single target image (with --refs).
    #[arg(long)]
    frames: PathBuf,
    /// Mask directory matching --frames by file stem, or a single mask image.
    #[arg(long)]
    masks: PathBuf,
    /// Reference image directory; switches to image mode.
    #[arg(long)]
    refs: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint directory; without it an untrained network is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    peel_width: u32,
    #[arg(long, default_value_t = DEFAULT_REF_STRIDE)]
    ref_stride: usize,
    #[arg(long)]
    one_shot: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "desk", value_parser = ["desk", "paper"])]
    preset: String,
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "desk", value_parser = ["desk", "paper", "overfit"])]
    preset: String,
    /// TOML training config; replaces the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Initial checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory of training images (procedural scenes otherwise).
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Directory of hole masks added to the procedural pool.
    #[arg(long)]
    masks: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory of predicted frames.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth frames (matched by file stem).
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "desk", value_parser = ["desk", "paper"])]
    preset: String,
    #[arg(long)]
    frames: Option<PathBuf>,
    #[arg(long)]
    masks: Option<PathBuf>,
}

/// Echo of the resolved settings of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub frames: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub refs: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub peel_width: u32,
    pub ref_stride: usize,
    pub one_shot: bool,
    pub seed: u64,
    pub strict: bool,
    pub preset: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: "complete".into(),
            frames: None,
            masks: None,
            refs: None,
            out: None,
            checkpoint: None,
            peel_width: PeelWidth::default().get(),
            ref_stride: DEFAULT_REF_STRIDE,
            one_shot: false,
            seed: 0,
            strict: false,
            preset: "desk".into(),
        }
    }
}

impl RunConfig {
    pub fn completion_options(&self, threads: usize) -> Result<CompletionOptions> {
        Ok(CompletionOptions {
            peel_width: PeelWidth::new(self.peel_width)?,
            ref_stride: self.ref_stride,
            one_shot: self.one_shot,
            strict: self.strict,
            threads,
            ..CompletionOptions::default()
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameRecord {
    pub name: String,
    pub hole_area: usize,
    #[serde(flatten)]
    pub trace: FrameTrace,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Not computed; always "n/a".
    pub vfid: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps_run: usize,
    pub initial: Option<LossBreakdown>,
    pub last: Option<LossBreakdown>,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
    pub exit_code: i32,
}

/// Machine-readable record of one invocation, written to `<out>/manifest.json`.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub config: RunConfig,
    pub threads: usize,
    pub reference_frames: Vec<String>,
    pub frames: Vec<FrameRecord>,
    pub metrics: Vec<MetricRow>,
    pub gradcheck: Vec<SuiteResult>,
    pub training: Option<TrainSummary>,
    pub total_seconds: f64,
    pub error: Option<ErrorRecord>,
}

impl Manifest {
    fn new(config: RunConfig, threads: usize) -> Self {
        Manifest {
            tool: "opn",
            version: env!("CARGO_PKG_VERSION"),
            config,
            threads,
            reference_frames: Vec::new(),
            frames: Vec::new(),
            metrics: Vec::new(),
            gradcheck: Vec::new(),
            training: None,
            total_seconds: 0.0,
            error: None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

/// An error with the exit status it maps to.
#[derive(Debug)]
struct Failure {
    code: i32,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Failure { code: 1, error }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: 1, error: e.into() }
    }
}

fn usage(error: Error) -> Failure {
    Failure { code: 2, error }
}

fn require(path: &Path, what: &str) -> std::result::Result<(), Failure> {
    if !path.exists() {
        return Err(usage(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{what} {} does not exist", path.display()),
        ))));
    }
    Ok(())
}

/// Worker count: available cores, bounded by `OPN_THREADS` when set.
pub fn thread_budget() -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) => n.clamp(1, cores.max(1)),
        None => cores,
    }
}

fn error_line(kind: &str, message: &str, code: i32) -> String {
    serde_json::json!({ "error": kind, "message": message, "exit_code": code }).to_string()
}

/// Parse `argv` (including the program name) and run. Returns the exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 };
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first, 2));
            return 2;
        }
    };
    let start = Instant::now();
    let (config, out) = describe(&cli.command);
    let mut manifest = Manifest::new(config, thread_budget());
    let result = dispatch(cli.command, &mut manifest);
    manifest.total_seconds = start.elapsed().as_secs_f64();
    let code = match &result {
        Ok(code) => *code,
        Err(f) => {
            manifest.error = Some(ErrorRecord { kind: f.error.kind().into(), message: f.error.to_string(), exit_code: f.code });
            eprintln!("{}", error_line(f.error.kind(), &f.error.to_string(), f.code));
            f.code
        }
    };
    if let Some(dir) = out {
        if let Err(e) = manifest.write(&dir) {
            eprintln!("{}", error_line(e.kind(), &format!("writing manifest: {e}"), 1));
            return if code == 0 { 1 } else { code };
        }
    }
    code
}

fn describe(cmd: &Command) -> (RunConfig, Option<PathBuf>) {
    let base = RunConfig::default();
    match cmd {
        Command::Complete(a) | Command::AttnDump(a) => (
            RunConfig {
                command: if matches!(cmd, Command::Complete(_)) { "complete" } else { "attn-dump" }.into(),
                frames: Some(a.frames.clone()),
                masks: Some(a.masks.clone()),
                refs: a.refs.clone(),
                out: Some(a.out.clone()),
                checkpoint: a.checkpoint.clone(),
                peel_width: a.peel_width,
                ref_stride: a.ref_stride,
                one_shot: a.one_shot,
                seed: a.seed,
                strict: a.strict,
                preset: a.preset.clone(),
            },
            Some(a.out.clone()),
        ),
        Command::Train(a) => (
            RunConfig {
                command: "train".into(),
                frames: a.frames.clone(),
                masks: a.masks.clone(),
                out: Some(a.out.clone()),
                checkpoint: a.checkpoint.clone(),
                seed: a.seed.unwrap_or(0),
                preset: a.preset.clone(),
                ..base
            },
            Some(a.out.clone()),
        ),
        Command::Eval(a) => (
            RunConfig { command: "eval".into(), frames: Some(a.pred.clone()), refs: Some(a.gt.clone()), out: a.out.clone(), ..base },
            a.out.clone(),
        ),
        Command::Gradcheck(a) => (RunConfig { command: "gradcheck".into(), seed: a.seed, out: a.out.clone(), ..base }, a.out.clone()),
        Command::Synth(a) => (
            RunConfig {
                command: "synth".into(),
                frames: a.frames.clone(),
                masks: a.masks.clone(),
                out: Some(a.out.clone()),
                seed: a.seed,
                preset: a.preset.clone(),
                ..base
            },
            Some(a.out.clone()),
        ),
    }
}

fn dispatch(cmd: Command, manifest: &mut Manifest) -> std::result::Result<i32, Failure> {
    match cmd {
        Command::Complete(a) => complete(&a, false, manifest),
        Command::AttnDump(a) => complete(&a, true, manifest),
        Command::Train(a) => train(&a, manifest),
        Command::Eval(a) => eval(&a, manifest),
        Command::Gradcheck(a) => gradcheck(&a, manifest),
        Command::Synth(a) => synth(&a),
    }
}

fn network_preset(name: &str) -> NetworkConfig {
    if name == "paper" {
        NetworkConfig::paper()
    } else {
        NetworkConfig::desk()
    }
}

fn load_network(a: &CompleteArgs) -> std::result::Result<Network, Failure> {
    match &a.checkpoint {
        Some(dir) => {
            let (ckpt, cfg) = Checkpoint::load(dir).map_err(usage)?;
            Ok(Network::from_checkpoint(&ckpt, &cfg, false, a.strict).map_err(usage)?)
        }
        None => {
            warn!("no --checkpoint given: using an untrained {} network (seed {})", a.preset, a.seed);
            let cfg = network_preset(&a.preset);
            Ok(Network::from_checkpoint(&init_params(&cfg, a.seed)?, &cfg, false, true)?)
        }
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn is_png(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Write `frame` as `<out>/<stem>.png`; an untouched PNG input is copied
/// byte for byte.
fn emit(out: &Path, source: &Path, frame: &RgbFrame, untouched: bool) -> Result<()> {
    let dest = out.join(format!("{}.png", stem(source)));
    if untouched && is_png(source) {
        fs::copy(source, dest)?;
        Ok(())
    } else {
        save_frame(&dest, frame)
    }
}

fn complete(a: &CompleteArgs, dump: bool, manifest: &mut Manifest) -> std::result::Result<i32, Failure> {
    require(&a.frames, "--frames")?;
    require(&a.masks, "--masks")?;
    if let Some(r) = &a.refs {
        require(r, "--refs")?;
    }
    if let Some(c) = &a.checkpoint {
        require(c, "--checkpoint")?;
    }
    let mut opts = manifest.config.completion_options(manifest.threads).map_err(usage)?;
    if opts.ref_stride == 0 {
        return Err(usage(Error::invalid("--ref-stride must be ≥ 1")));
    }
    if dump {
        opts.score_dump = Some(a.out.join("scores"));
    }

    // Inputs: (source path, frame, hole).
    let targets: Vec<PathBuf> = if a.frames.is_dir() { list_images(&a.frames).map_err(usage)? } else { vec![a.frames.clone()] };
    if targets.is_empty() {
        return Err(usage(Error::invalid(format!("no images in {}", a.frames.display()))));
    }
    let mut frames = Vec::new();
    let mut holes = Vec::new();
    for path in &targets {
        let mask_path = if a.masks.is_dir() { matching_mask(path, &a.masks).map_err(usage)? } else { a.masks.clone() };
        frames.push(load_frame(path).map_err(usage)?);
        holes.push(load_mask_checked(&mask_path, a.strict).map_err(usage)?);
    }
    let net = load_network(a)?;
    fs::create_dir_all(&a.out)?;

    if let Some(ref_dir) = &a.refs {
        if targets.len() != 1 {
            return Err(usage(Error::invalid("image mode (--refs) takes exactly one target image")));
        }
        let ref_paths = list_images(ref_dir).map_err(usage)?;
        if ref_paths.is_empty() {
            return Err(usage(Error::NoReference(format!("no images in {}", ref_dir.display()))));
        }
        let (h, w) = frames[0].dims();
        for p in &ref_paths {
            let f = load_frame(p).map_err(usage)?;
            if f.dims() != (h, w) {
                return Err(usage(Error::invalid(format!("{}: {:?} differs from target {:?}", p.display(), f.dims(), (h, w)))));
            }
            frames.push(f);
            holes.push(MaskPlane::empty(h, w));
        }
        let set = FrameSet::from_holes(frames, holes)?;
        let refs = (1..set.len())
            .map(|i| encode_reference(&net, i, &set.frames[i], &set.holes[i], &set.validity[i]))
            .collect::<Result<Vec<_>>>()?;
        manifest.reference_frames = ref_paths.iter().map(|p| stem(p)).collect();
        let done = complete_targets(&set, &refs, &[0], &net, &opts)?;
        let c = &done[0];
        emit(&a.out, &targets[0], &c.frame, set.holes[0].is_empty())?;
        manifest.frames.push(FrameRecord { name: stem(&targets[0]), hole_area: set.holes[0].area(), trace: c.trace.clone() });
        return Ok(0);
    }

    let set = FrameSet::from_holes(frames, holes).map_err(usage)?;
    let done = complete_video(&set, &net, &opts)?;
    manifest.reference_frames = done.trace.reference_indices.iter().map(|&i| stem(&targets[i])).collect();
    for (i, path) in targets.iter().enumerate() {
        emit(&a.out, path, &done.frames.frames[i], set.holes[i].is_empty())?;
        manifest.frames.push(FrameRecord { name: stem(path), hole_area: set.holes[i].area(), trace: done.trace.frames[i].clone() });
    }
    Ok(0)
}

fn train(a: &TrainArgs, manifest: &mut Manifest) -> std::result::Result<i32, Failure> {
    let mut cfg = match &a.config {
        Some(p) => {
            require(p, "--config")?;
            TrainConfig::from_toml(&fs::read_to_string(p).map_err(|e| usage(e.into()))?).map_err(usage)?
        }
        None => TrainConfig::preset(&a.preset).map_err(usage)?,
    };
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.frames.is_some() {
        cfg.image_dir = a.frames.clone();
    }
    if a.masks.is_some() {
        cfg.mask_dir = a.masks.clone();
    }
    cfg.validate().map_err(usage)?;
    for p in [&cfg.image_dir, &cfg.mask_dir].into_iter().flatten() {
        require(p, "training data directory")?;
    }
    let init = match &a.checkpoint {
        Some(dir) => {
            require(dir, "--checkpoint")?;
            let (ckpt, net_cfg) = Checkpoint::load(dir).map_err(usage)?;
            if net_cfg != cfg.network {
                return Err(usage(Error::Config("checkpoint network differs from the training config".into())));
            }
            Some(ckpt)
        }
        None => None,
    };
    let data = DataSource::load(cfg.image_dir.as_deref(), cfg.mask_dir.as_deref(), cfg.synth.size).map_err(usage)?;
    let outcome = train_loop(cfg, data, init, Some(&a.out))?;
    manifest.training = Some(TrainSummary {
        steps_run: outcome.log.len(),
        initial: outcome.log.first().map(|r| r.losses),
        last: outcome.log.last().map(|r| r.losses),
        checkpoint: a.out.join("checkpoint"),
    });
    match outcome.aborted {
        Some(e) => Err(e.into()),
        None => Ok(0),
    }
}

fn eval(a: &EvalArgs, manifest: &mut Manifest) -> std::result::Result<i32, Failure> {
    require(&a.pred, "--pred")?;
    require(&a.gt, "--gt")?;
    let preds = list_images(&a.pred).map_err(usage)?;
    if preds.is_empty() {
        return Err(usage(Error::invalid(format!("no images in {}", a.pred.display()))));
    }
    let mut rows = Vec::new();
    for p in &preds {
        let g = matching_mask(p, &a.gt).map_err(usage)?;
        let (fp, fg) = (load_frame(p).map_err(usage)?, load_frame(&g).map_err(usage)?);
        rows.push(MetricRow { name: stem(p), psnr: psnr(&fp, &fg, 1.0)?, ssim: ssim(&fp, &fg)?, vfid: "n/a" });
    }
    let n = rows.len() as f64;
    let mean = MetricRow {
        name: "mean".into(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        vfid: "n/a",
    };
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{:<24} {:>8} {:>8} {:>6}", "frame", "PSNR", "SSIM", "VFID");
    for r in rows.iter().chain(std::iter::once(&mean)) {
        let _ = writeln!(stdout, "{:<24} {:>8.2} {:>8.4} {:>6}", r.name, r.psnr, r.ssim, r.vfid);
    }
    rows.push(mean);
    manifest.metrics = rows;
    Ok(0)
}

fn gradcheck(a: &GradcheckArgs, manifest: &mut Manifest) -> std::result::Result<i32, Failure> {
    let results = gradsuite::run_all(&SuiteOptions { seed: a.seed, ..SuiteOptions::default() })?;
    let mut stdout = std::io::stdout().lock();
    for r in &results {
        let verdict = if r.passed { "pass" } else { "FAIL" };
        let _ = writeln!(stdout, "{:<16} max_rel_err {:.3e} coords {:>4} {verdict}", r.name, r.max_relative_error, r.coords_checked);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    manifest.gradcheck = results;
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} gradient suite(s) failed")).into());
    }
    Ok(0)
}

fn synth(a: &SynthArgs) -> std::result::Result<i32, Failure> {
    for p in [&a.frames, &a.masks].into_iter().flatten() {
        require(p, "data directory")?;
    }
    let cfg = TrainConfig::preset(&a.preset).map_err(usage)?.synth;
    let data = DataSource::load(a.frames.as_deref(), a.masks.as_deref(), cfg.size).map_err(usage)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for k in 0..a.count {
        let dir = a.out.join(format!("sample_{k:05}"));
        fs::create_dir_all(&dir)?;
        let s = draw_sample(&data, &cfg, &mut rng)?;
        for (v, (frame, hole)) in s.views.iter().zip(&s.holes).enumerate() {
            save_frame(&dir.join(format!("view_{v}.png")), frame)?;
            save_mask(&dir.join(format!("hole_{v}.png")), hole)?;
        }
    }
    Ok(0)
}
