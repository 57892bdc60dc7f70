//! Command-line front end for the anchorvid toy pipeline.
//!
//! Each subcommand parses flags into library types, calls one library entry
//! point and writes its files atomically. Reports are JSON with a fixed key
//! order and contain no paths or timings, so identical flags give identical
//! bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use anchorvid_core::check::{run_fast_suite, CheckOptions, CheckReport};
use anchorvid_core::denoiser::{init_denoiser, Arch, DenoiserParams};
use anchorvid_core::export::export_frames;
use anchorvid_core::sampler::{
    animate, compute_metrics, generate_t2i_trace, interpolate, invert, Animation, Metrics,
    SamplerConfig, StepLog, TemporalEffect,
};
use anchorvid_core::tensor::write_atomic;
use anchorvid_core::trace::{manifest_checksum, GenerationTrace};
use anchorvid_core::{read_tensor, write_tensor, AttentionMode, Error};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRACE: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;
pub const EXIT_IO: i32 = 5;

pub const VIDEO_FILE: &str = "video.azt";
pub const REPORT_FILE: &str = "report.json";
pub const FRAMES_DIR: &str = "frames";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("invariant failed: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invariant(_) => EXIT_INVARIANT,
            CliError::Core(e) => match e {
                Error::TraceMismatch(_) | Error::MissingLatent(_) | Error::MissingKvSource(_) => {
                    EXIT_TRACE
                }
                Error::Io { .. } | Error::Json { .. } | Error::Format { .. } => EXIT_IO,
                Error::Dimension(_)
                | Error::NonFinite(_)
                | Error::FrameIndex { .. }
                | Error::Timestep { .. }
                | Error::Unsupported(_)
                | Error::Config(_) => EXIT_CONFIG,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "anchorvid",
    version,
    about = "First-frame anchored video sampling on a toy diffusion model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample one image and store its full generation trace.
    T2i(T2iArgs),
    /// Animate a stored trace into a video.
    Animate(AnimateArgs),
    /// Pin two traces to the first and last frame and fill in between.
    Interpolate(InterpolateArgs),
    /// Build a pseudo-trace for a single-frame latent by DDIM inversion.
    Invert(InvertArgs),
    /// Run the fast invariant suite.
    Check(CheckArgs),
    /// Compare frame smoothness with and without motion modules over many seeds.
    Study(StudyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Number of diffusion steps.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// Seed for the toy denoiser weights.
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
}

impl ModelArgs {
    fn params(&self) -> CliResult<DenoiserParams> {
        Ok(init_denoiser(self.model_seed, Arch::default())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AttnArg {
    Global,
    Window,
    WindowPc,
}

impl From<AttnArg> for AttentionMode {
    fn from(a: AttnArg) -> Self {
        match a {
            AttnArg::Global => AttentionMode::Global,
            AttnArg::Window => AttentionMode::WindowUncorrected,
            AttnArg::WindowPc => AttentionMode::WindowCorrected,
        }
    }
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| format!("expected LO:HI, got {s:?}"))?;
    let lo = lo
        .trim()
        .parse()
        .map_err(|e| format!("bad LO in {s:?}: {e}"))?;
    let hi = hi
        .trim()
        .parse()
        .map_err(|e| format!("bad HI in {s:?}: {e}"))?;
    Ok((lo, hi))
}

#[derive(Debug, Clone, Args)]
pub struct ControlArgs {
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    /// Seed for the noise of the non-inserted frames.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "share-kv", overrides_with = "no_share_kv")]
    pub share_kv: bool,
    #[arg(long = "no-share-kv", overrides_with = "share_kv")]
    pub no_share_kv: bool,
    #[arg(long = "insert-latents", overrides_with = "no_insert_latents")]
    pub insert_latents: bool,
    #[arg(long = "no-insert-latents", overrides_with = "insert_latents")]
    pub no_insert_latents: bool,
    #[arg(long, value_enum, default_value = "window-pc")]
    pub encoder_attn: AttnArg,
    #[arg(long, value_enum, default_value = "global")]
    pub decoder_attn: AttnArg,
    /// Skip every motion module.
    #[arg(long)]
    pub bypass_motion: bool,
    #[arg(long)]
    pub time_travel: bool,
    #[arg(long, default_value_t = 5)]
    pub tt_iters: usize,
    /// Inclusive range of sampling steps (1 = first reverse step) with time travel.
    #[arg(long, value_parser = parse_range, default_value = "10:20")]
    pub tt_range: (usize, usize),
    /// DDIM eta; 0 is deterministic.
    #[arg(long, default_value_t = 0.0)]
    pub eta: f32,
    /// Write one grayscale PGM per frame.
    #[arg(long)]
    pub export_frames: bool,
}

impl ControlArgs {
    /// Sampler settings for a trace whose latents are `[1, c, h, w]`.
    pub fn sampler_config(&self, model: &ModelArgs, h: usize, w: usize) -> SamplerConfig {
        SamplerConfig {
            steps: model.steps,
            frames: self.frames,
            height: h,
            width: w,
            eta: self.eta,
            insert_latents: !self.no_insert_latents,
            share_kv: !self.no_share_kv,
            encoder_mode: self.encoder_attn.into(),
            decoder_mode: self.decoder_attn.into(),
            bypass_motion: self.bypass_motion,
            time_travel: self.time_travel,
            tt_iters: self.tt_iters,
            tt_lo: self.tt_range.0,
            tt_hi: self.tt_range.1,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct T2iArgs {
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub height: usize,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Trace directory to create.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AnimateArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub controls: ControlArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct InterpolateArgs {
    /// Trace for the first frame.
    #[arg(long)]
    pub trace: PathBuf,
    /// Trace for the last frame.
    #[arg(long)]
    pub trace_b: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub controls: ControlArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct InvertArgs {
    /// Single-frame latent, `[1, c, h, w]` or `[c, h, w]`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Fixed-point refinements per inversion step.
    #[arg(long, default_value_t = 3)]
    pub refine_iters: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CheckArgs {
    /// Test hook: swap the first two position embeddings in production paths.
    #[arg(long, hide = true)]
    pub corrupt_position_table: bool,
}

#[derive(Debug, Clone, Args)]
pub struct StudyArgs {
    #[arg(long, default_value = "a boat on a lake")]
    pub prompt: String,
    /// Trace and noise seeds `0..N`.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long, default_value_t = 8)]
    pub height: usize,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub controls: ControlArgs,
    /// Directory for `report.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigEcho {
    pub prompt: String,
    pub model_seed: u64,
    /// Manifest checksums of the input traces.
    pub traces: Vec<String>,
    pub sampler: SamplerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepSummary {
    pub steps: usize,
    pub inserted_steps: usize,
    pub anchors_match_every_step: bool,
    pub tt_iterations_total: usize,
    /// Time-travel iterations per step, in step order.
    pub tt_iterations: Vec<usize>,
    /// Temporal mode per block at the first step (`null`: skipped).
    pub block_modes: Vec<Option<AttentionMode>>,
}

impl StepSummary {
    pub fn from_log(log: &StepLog) -> Self {
        Self {
            steps: log.records.len(),
            inserted_steps: log.records.iter().filter(|r| r.inserted).count(),
            anchors_match_every_step: log.all_frame1_match(),
            tt_iterations_total: log.total_tt_iterations(),
            tt_iterations: log.records.iter().map(|r| r.tt_iterations).collect(),
            block_modes: log
                .records
                .first()
                .map(|r| r.modes.clone())
                .unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub command: &'static str,
    pub config: ConfigEcho,
    pub metrics: Option<Metrics>,
    pub step_log: Option<StepSummary>,
    pub temporal_effect: Option<TemporalEffect>,
    /// SHA-256 of every written file, keyed by path relative to the output dir.
    pub outputs: BTreeMap<String, String>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// What a command produced, for `main` to print.
#[derive(Debug)]
pub enum Outcome {
    Trace {
        dir: PathBuf,
        manifest_sha256: String,
    },
    Report(Box<RunReport>),
    Check(CheckReport),
}

impl Outcome {
    pub fn render(&self) -> String {
        match self {
            Outcome::Trace {
                manifest_sha256, ..
            } => format!("{manifest_sha256}\n"),
            Outcome::Report(r) => r.to_json(),
            Outcome::Check(r) => {
                let mut s = serde_json::to_string_pretty(r).expect("check report serializes");
                s.push('\n');
                s
            }
        }
    }
}

pub fn run(cli: Cli) -> CliResult<Outcome> {
    match cli.command {
        Command::T2i(a) => cmd_t2i(&a),
        Command::Animate(a) => cmd_animate(&a).map(|r| Outcome::Report(Box::new(r))),
        Command::Interpolate(a) => cmd_interpolate(&a).map(|r| Outcome::Report(Box::new(r))),
        Command::Invert(a) => cmd_invert(&a),
        Command::Check(a) => cmd_check(&a).map(Outcome::Check),
        Command::Study(a) => cmd_study(&a).map(|r| Outcome::Report(Box::new(r))),
    }
}

pub fn cmd_t2i(a: &T2iArgs) -> CliResult<Outcome> {
    let params = a.model.params()?;
    let config = SamplerConfig {
        steps: a.model.steps,
        height: a.height,
        width: a.width,
        ..SamplerConfig::default()
    };
    let trace = generate_t2i_trace(&a.prompt, a.seed, &config, &params)?;
    let manifest_sha256 = trace.save(&a.out)?;
    Ok(Outcome::Trace {
        dir: a.out.clone(),
        manifest_sha256,
    })
}

fn load_trace(dir: &Path) -> CliResult<(GenerationTrace, String)> {
    let trace = GenerationTrace::load(dir)?;
    let sum = manifest_checksum(dir)?;
    Ok((trace, sum))
}

fn trace_hw(trace: &GenerationTrace) -> CliResult<(usize, usize)> {
    let d = trace.latent_dims()?;
    Ok((d[2], d[3]))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    Ok(())
}

/// Writes the video, optional frames and the report; fills `outputs`.
fn write_video_outputs(
    out: &Path,
    video: &anchorvid_core::Tensor,
    export: bool,
    report: &mut RunReport,
) -> CliResult<()> {
    ensure_dir(out)?;
    write_tensor(out.join(VIDEO_FILE), video)?;
    report
        .outputs
        .insert(VIDEO_FILE.to_string(), video.checksum());
    if export {
        for frame in export_frames(video, &out.join(FRAMES_DIR))? {
            let name = frame
                .path
                .file_name()
                .expect("exported frames have file names")
                .to_string_lossy();
            report
                .outputs
                .insert(format!("{FRAMES_DIR}/{name}"), frame.sha256);
        }
    }
    write_atomic(&out.join(REPORT_FILE), report.to_json().as_bytes())?;
    Ok(())
}

fn video_report(
    command: &'static str,
    prompt: &str,
    model: &ModelArgs,
    traces: Vec<String>,
    config: SamplerConfig,
    anim: &Animation,
    first: &GenerationTrace,
) -> CliResult<RunReport> {
    Ok(RunReport {
        command,
        config: ConfigEcho {
            prompt: prompt.to_string(),
            model_seed: model.model_seed,
            traces,
            sampler: config,
        },
        metrics: Some(compute_metrics(&anim.video, first)?),
        step_log: Some(StepSummary::from_log(&anim.log)),
        temporal_effect: None,
        outputs: BTreeMap::new(),
    })
}

pub fn cmd_animate(a: &AnimateArgs) -> CliResult<RunReport> {
    let params = a.model.params()?;
    let (trace, sum) = load_trace(&a.trace)?;
    let (h, w) = trace_hw(&trace)?;
    let config = a.controls.sampler_config(&a.model, h, w);
    let anim = animate(&trace, &config, &params)?;
    let mut report = video_report(
        "animate",
        &trace.prompt,
        &a.model,
        vec![sum],
        config,
        &anim,
        &trace,
    )?;
    write_video_outputs(&a.out, &anim.video, a.controls.export_frames, &mut report)?;
    Ok(report)
}

pub fn cmd_interpolate(a: &InterpolateArgs) -> CliResult<RunReport> {
    let params = a.model.params()?;
    let (first, sum_a) = load_trace(&a.trace)?;
    let (last, sum_b) = load_trace(&a.trace_b)?;
    let (h, w) = trace_hw(&first)?;
    let config = a.controls.sampler_config(&a.model, h, w);
    let anim = interpolate(&first, &last, &config, &params)?;
    let mut report = video_report(
        "interpolate",
        &first.prompt,
        &a.model,
        vec![sum_a, sum_b],
        config,
        &anim,
        &first,
    )?;
    write_video_outputs(&a.out, &anim.video, a.controls.export_frames, &mut report)?;
    Ok(report)
}

pub fn cmd_invert(a: &InvertArgs) -> CliResult<Outcome> {
    let params = a.model.params()?;
    let input = read_tensor(&a.input)?;
    let z0 = match input.rank() {
        3 => {
            let dims = [&[1], input.dims()].concat();
            input.reshape(dims)?
        }
        _ => input,
    };
    if z0.rank() != 4 || z0.dims()[0] != 1 {
        return Err(Error::Dimension(format!(
            "expected a single-frame latent [1, c, h, w], got {:?}",
            z0.dims()
        ))
        .into());
    }
    let config = SamplerConfig {
        steps: a.model.steps,
        height: z0.dims()[2],
        width: z0.dims()[3],
        ..SamplerConfig::default()
    };
    let trace = invert(&z0, &a.prompt, &config, &params, a.refine_iters)?;
    let manifest_sha256 = trace.save(&a.out)?;
    Ok(Outcome::Trace {
        dir: a.out.clone(),
        manifest_sha256,
    })
}

/// Runs the fast suite; any failed check becomes an invariant error naming it.
pub fn cmd_check(a: &CheckArgs) -> CliResult<CheckReport> {
    let report = run_fast_suite(&CheckOptions {
        corrupt_position_table: a.corrupt_position_table,
    })?;
    Ok(report)
}

pub fn cmd_study(a: &StudyArgs) -> CliResult<RunReport> {
    let params = a.model.params()?;
    let config = a.controls.sampler_config(&a.model, a.height, a.width);
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let effect = anchorvid_core::sampler::temporal_effect(&a.prompt, &seeds, &config, &params)?;
    let report = RunReport {
        command: "study",
        config: ConfigEcho {
            prompt: a.prompt.clone(),
            model_seed: a.model.model_seed,
            traces: vec![],
            sampler: config,
        },
        metrics: None,
        step_log: None,
        temporal_effect: Some(effect),
        outputs: BTreeMap::new(),
    };
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        write_atomic(&out.join(REPORT_FILE), report.to_json().as_bytes())?;
    }
    Ok(report)
}

/// Exit status for a finished command: invariant failures in `check` and a
/// non-smoother `study` map to [`EXIT_INVARIANT`].
pub fn outcome_status(outcome: &Outcome) -> Result<(), CliError> {
    match outcome {
        Outcome::Check(r) if !r.passed() => Err(CliError::Invariant(r.failed_names().join(", "))),
        Outcome::Report(r)
            if r.temporal_effect
                .as_ref()
                .is_some_and(|e| !e.temporal_is_smoother()) =>
        {
            let e = r.temporal_effect.as_ref().expect("checked above");
            Err(CliError::Invariant(format!(
            "temporal-control effect: mean smoothness {:.6} with motion modules is not below {:.6} without",
            e.mean_smoothness_temporal, e.mean_smoothness_bypassed
        )))
        }
        _ => Ok(()),
    }
}
