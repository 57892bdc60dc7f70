//! Two-stage sampling: record a single-image trace, then animate it.
//!
//! Step `s` (1-based, counted from the start of sampling) denoises timestep
//! `t = T - s + 1`. With insertion enabled, frame 1 is overwritten with the
//! trace latent `z_t^1` before the denoiser runs and with `z_{t-1}^1` after the
//! reverse step, so the final frame 1 is `z_0^1` bit for bit.

use serde::{Deserialize, Serialize};

use crate::attention::SpatialKv;
use crate::denoiser::{
    capture_frame1_kv, denoise, denoise_traced, ControlHooks, DenoiserParams, PromptEmbedding,
};
use crate::error::{Error, Result};
use crate::schedule::{ddim_inversion_step, ddim_reverse_step, rediffuse, NoiseSchedule};
use crate::tensor::{randn, SeededRng, Tensor};
use crate::trace::{GenerationTrace, TraceKind};
use crate::window::AttentionMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub eta: f32,
    pub insert_latents: bool,
    pub share_kv: bool,
    pub encoder_mode: AttentionMode,
    pub decoder_mode: AttentionMode,
    /// Skip every motion module (ablation).
    pub bypass_motion: bool,
    pub time_travel: bool,
    pub tt_iters: usize,
    /// Inclusive range of step indices where time travel runs.
    pub tt_lo: usize,
    pub tt_hi: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            frames: 16,
            height: 8,
            width: 8,
            eta: 0.0,
            insert_latents: true,
            share_kv: true,
            encoder_mode: AttentionMode::WindowCorrected,
            decoder_mode: AttentionMode::Global,
            bypass_motion: false,
            time_travel: false,
            tt_iters: 5,
            tt_lo: 10,
            tt_hi: 20,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// Every control off: no insertion, no sharing, global attention, no time travel.
    pub fn control_free(self) -> Self {
        Self {
            insert_latents: false,
            share_kv: false,
            encoder_mode: AttentionMode::Global,
            decoder_mode: AttentionMode::Global,
            time_travel: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(
                "frames, height and width must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", self.eta)));
        }
        if self.time_travel && !(self.tt_lo <= self.tt_hi && self.tt_hi <= self.steps) {
            return Err(Error::Config(format!(
                "time-travel range {}:{} must satisfy lo <= hi <= steps ({})",
                self.tt_lo, self.tt_hi, self.steps
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::default_linear(self.steps)
    }

    fn time_travel_iters(&self, step: usize) -> usize {
        if self.time_travel && (self.tt_lo..=self.tt_hi).contains(&step) {
            self.tt_iters
        } else {
            0
        }
    }
}

/// What happened at one sampling step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: usize,
    pub inserted: bool,
    /// Frame 1 equalled the trace latent before every denoiser call and after
    /// every reverse step of this step (time-travel iterations included).
    pub frame1_matches_trace: bool,
    pub tt_iterations: usize,
    /// Temporal mode executed per block (`None`: motion module skipped).
    pub modes: Vec<Option<AttentionMode>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub records: Vec<StepRecord>,
}

impl StepLog {
    pub fn total_tt_iterations(&self) -> usize {
        self.records.iter().map(|r| r.tt_iterations).sum()
    }

    pub fn all_frame1_match(&self) -> bool {
        self.records.iter().all(|r| r.frame1_matches_trace)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Animation {
    /// Final `z_0`, `[f, c, h, w]`.
    pub video: Tensor,
    pub log: StepLog,
}

fn image_dims(params: &DenoiserParams, config: &SamplerConfig) -> Vec<usize> {
    vec![1, params.arch.channels, config.height, config.width]
}

/// Samples one image from seeded noise with the image model, recording every
/// latent and every spatial K/V.
pub fn generate_t2i_trace(
    prompt: &str,
    seed: u64,
    config: &SamplerConfig,
    params: &DenoiserParams,
) -> Result<GenerationTrace> {
    config.validate()?;
    let schedule = config.schedule()?;
    let embedding = PromptEmbedding::from_text(prompt, params.arch.cond_dim)?;
    let mut rng = SeededRng::new(seed);
    let steps = schedule.steps();
    let mut z = randn(&mut rng, image_dims(params, config))?;
    let mut trace = GenerationTrace {
        kind: TraceKind::Generated,
        prompt: prompt.to_string(),
        seed,
        model_seed: params.seed,
        arch: params.arch,
        schedule_hash: schedule.hash(),
        latents: Default::default(),
        kv_caches: Default::default(),
    };
    trace.latents.insert(steps, z.clone());
    for t in (1..=steps).rev() {
        let (eps, info) = denoise_traced(&z, &embedding, t, params, &ControlHooks::image())?;
        trace.kv_caches.insert(t, info.frame1_kv);
        z = ddim_reverse_step(&z, &eps, t, &schedule, 0.0, &mut rng)?;
        trace.latents.insert(t - 1, z.clone());
    }
    Ok(trace)
}

/// Plain DDIM sampling from `z_T` with fixed hooks; no insertion or time travel.
#[allow(clippy::too_many_arguments)]
pub fn sample_from(
    z_t: Tensor,
    prompt: &PromptEmbedding,
    schedule: &NoiseSchedule,
    eta: f32,
    rng: &mut SeededRng,
    params: &DenoiserParams,
    hooks: &ControlHooks<'_>,
) -> Result<Tensor> {
    let mut z = z_t;
    for t in (1..=schedule.steps()).rev() {
        let eps = denoise(&z, prompt, t, params, hooks)?;
        z = ddim_reverse_step(&z, &eps, t, schedule, eta, rng)?;
    }
    Ok(z)
}

/// Replaces frame `frame` (1-based) of `z` with the trace latent at `t`.
pub fn insert_frame(z: &Tensor, trace: &GenerationTrace, t: usize, frame: usize) -> Result<Tensor> {
    let latent = trace.latent(t)?;
    if z.rank() != 4 || latent.dims()[1..] != z.dims()[1..] {
        return Err(Error::dim(format!(
            "trace latent {:?} does not fit video {:?}",
            latent.dims(),
            z.dims()
        )));
    }
    if frame == 0 || frame > z.dims()[0] {
        return Err(Error::FrameIndex {
            index: frame,
            frames: z.dims()[0],
        });
    }
    z.with_outer(frame - 1, latent.data())
}

/// Replaces frame 1 of `z` with `z_t^1` from the trace.
pub fn insert_first_frame(z: &Tensor, trace: &GenerationTrace, t: usize) -> Result<Tensor> {
    insert_frame(z, trace, t, 1)
}

/// Repeats `iters` times: re-diffuse `z_{t-1}` to `t` with fresh noise, then
/// run `step` (insert, denoise, reverse, insert) back down to `t - 1`.
pub fn time_travel_loop<F>(
    z_prev: Tensor,
    t: usize,
    iters: usize,
    schedule: &NoiseSchedule,
    rng: &mut SeededRng,
    mut step: F,
) -> Result<Tensor>
where
    F: FnMut(Tensor, &mut SeededRng) -> Result<Tensor>,
{
    let mut z = z_prev;
    for _ in 0..iters {
        let z_t = rediffuse(&z, t, schedule, rng)?;
        z = step(z_t, rng)?;
    }
    Ok(z)
}

fn check_trace(
    trace: &GenerationTrace,
    config: &SamplerConfig,
    params: &DenoiserParams,
) -> Result<()> {
    let schedule = config.schedule()?;
    if trace.schedule_hash != schedule.hash() || trace.steps() != schedule.steps() {
        return Err(Error::TraceMismatch(format!(
            "trace schedule {} ({} steps) does not match config schedule {} ({} steps)",
            trace.schedule_hash,
            trace.steps(),
            schedule.hash(),
            schedule.steps()
        )));
    }
    if trace.model_seed != params.seed || trace.arch != params.arch {
        return Err(Error::TraceMismatch(format!(
            "trace was made with model seed {} and a different architecture",
            trace.model_seed
        )));
    }
    let dims = trace.latent_dims()?;
    if dims != image_dims(params, config).as_slice() {
        return Err(Error::TraceMismatch(format!(
            "trace latents {dims:?} do not match configured size {}x{}",
            config.height, config.width
        )));
    }
    Ok(())
}

/// Frame-1 K/V for timestep `t`: the trace caches, or, for traces without
/// caches, a single-image pass over the trace latent at `t`.
fn kv_at(
    trace: &GenerationTrace,
    t: usize,
    prompt: &PromptEmbedding,
    params: &DenoiserParams,
) -> Result<Vec<SpatialKv>> {
    match trace.kv(t) {
        Some(kv) => Ok(kv.to_vec()),
        None => capture_frame1_kv(trace.latent(t)?, prompt, t, params),
    }
}

struct Pipeline<'a> {
    config: &'a SamplerConfig,
    params: &'a DenoiserParams,
    schedule: NoiseSchedule,
    prompt: PromptEmbedding,
    encoder_mode: AttentionMode,
    /// `(frame, trace)` pairs inserted every step.
    anchors: Vec<(usize, &'a GenerationTrace)>,
    /// `(frame, trace)` pairs compared against the trace for the step log.
    checks: Vec<(usize, &'a GenerationTrace)>,
    kv_trace: Option<&'a GenerationTrace>,
}

impl Pipeline<'_> {
    fn insert_all(&self, z: Tensor, t: usize) -> Result<Tensor> {
        self.anchors
            .iter()
            .try_fold(z, |z, &(frame, trace)| insert_frame(&z, trace, t, frame))
    }

    fn checks_hold(&self, z: &Tensor, t: usize) -> Result<bool> {
        for &(frame, trace) in &self.checks {
            let want = trace.latent(t)?.data();
            let got = z.outer(frame - 1);
            if !got
                .iter()
                .zip(want)
                .all(|(a, b)| a.to_bits() == b.to_bits())
            {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// One pass `z_t -> z_{t-1}`: insert, denoise, reverse, insert.
    fn step(
        &self,
        z: Tensor,
        t: usize,
        kv: Option<&[SpatialKv]>,
        rng: &mut SeededRng,
        matches: &mut bool,
    ) -> Result<(Tensor, Vec<Option<AttentionMode>>)> {
        let z = self.insert_all(z, t)?;
        *matches &= self.checks_hold(&z, t)?;
        let hooks = ControlHooks {
            encoder_mode: self.encoder_mode,
            decoder_mode: self.config.decoder_mode,
            bypass_motion: self.config.bypass_motion,
            share_kv: kv.is_some(),
            kv_source: kv,
            first_frame_tokens: None,
        };
        let (eps, info) = denoise_traced(&z, &self.prompt, t, self.params, &hooks)?;
        let z = ddim_reverse_step(&z, &eps, t, &self.schedule, self.config.eta, rng)?;
        let z = self.insert_all(z, t - 1)?;
        *matches &= self.checks_hold(&z, t - 1)?;
        Ok((z, info.modes))
    }

    /// `init` holds the `z_T` latents of the `fixed` frames (1-based); every
    /// other frame is replaced by noise from `config.seed`, in frame order.
    fn run(&self, init: Tensor, fixed: &[usize]) -> Result<Animation> {
        let mut rng = SeededRng::new(self.config.seed);
        let mut z = init;
        for frame in 1..=z.dims()[0] {
            if !fixed.contains(&frame) {
                let n = randn(&mut rng, z.dims()[1..].to_vec())?;
                z = z.with_outer(frame - 1, n.data())?;
            }
        }
        let steps = self.schedule.steps();
        let mut log = StepLog::default();
        for step in 1..=steps {
            let t = steps - step + 1;
            let kv = match self.kv_trace {
                Some(trace) => Some(kv_at(trace, t, &self.prompt, self.params)?),
                None => None,
            };
            let mut matches = true;
            let (z_prev, modes) = self.step(z, t, kv.as_deref(), &mut rng, &mut matches)?;
            let iters = self.config.time_travel_iters(step);
            let z_prev =
                time_travel_loop(z_prev, t, iters, &self.schedule, &mut rng, |z_t, rng| {
                    self.step(z_t, t, kv.as_deref(), rng, &mut matches)
                        .map(|(z, _)| z)
                })?;
            log.records.push(StepRecord {
                step,
                t,
                inserted: !self.anchors.is_empty(),
                frame1_matches_trace: matches,
                tt_iterations: iters,
                modes,
            });
            z = z_prev;
        }
        Ok(Animation { video: z, log })
    }
}

/// Animates a trace. Frame 1 starts from `z_T^1`; frames `2..=f` start from
/// noise seeded by `config.seed`.
pub fn animate(
    trace: &GenerationTrace,
    config: &SamplerConfig,
    params: &DenoiserParams,
) -> Result<Animation> {
    config.validate()?;
    trace.validate()?;
    check_trace(trace, config, params)?;
    let schedule = config.schedule()?;
    let dims = vec![
        config.frames,
        params.arch.channels,
        config.height,
        config.width,
    ];
    let init = Tensor::zeros(dims)?.with_outer(0, trace.latent(schedule.steps())?.data())?;
    let pipeline = Pipeline {
        config,
        params,
        prompt: PromptEmbedding::from_text(&trace.prompt, params.arch.cond_dim)?,
        encoder_mode: config.encoder_mode,
        anchors: if config.insert_latents {
            vec![(1, trace)]
        } else {
            vec![]
        },
        checks: vec![(1, trace)],
        kv_trace: config.share_kv.then_some(trace),
        schedule,
    };
    pipeline.run(init, &[1])
}

/// Inserts `first` into frame 1 and `last` into frame `f` every step, with
/// the two-anchor window in the encoder. Spatial K/V (when shared) come from
/// `first` only. The prompt is taken from `first`.
pub fn interpolate(
    first: &GenerationTrace,
    last: &GenerationTrace,
    config: &SamplerConfig,
    params: &DenoiserParams,
) -> Result<Animation> {
    config.validate()?;
    let f = config.frames;
    if f < 3 {
        return Err(Error::Config(format!(
            "interpolation needs at least 3 frames, got {f}"
        )));
    }
    for trace in [first, last] {
        trace.validate()?;
        check_trace(trace, config, params)?;
    }
    let schedule = config.schedule()?;
    let steps = schedule.steps();
    let dims = vec![f, params.arch.channels, config.height, config.width];
    let init = Tensor::zeros(dims)?
        .with_outer(0, first.latent(steps)?.data())?
        .with_outer(f - 1, last.latent(steps)?.data())?;
    let ends = vec![(1, first), (f, last)];
    let pipeline = Pipeline {
        config,
        params,
        prompt: PromptEmbedding::from_text(&first.prompt, params.arch.cond_dim)?,
        encoder_mode: AttentionMode::WindowTwoAnchor,
        anchors: ends.clone(),
        checks: ends,
        kv_trace: config.share_kv.then_some(first),
        schedule,
    };
    pipeline.run(init, &[1, f])
}

/// Builds a pseudo-trace for `z0` (`[1, c, h, w]`) by running DDIM inversion
/// with the image model.
///
/// Each step predicts noise at the current latent `z_{t-1}` and timestep `t`,
/// then refines it `refine_iters` times by re-predicting at the latest
/// estimate of `z_t` (fixed-point iteration on the inverse map). With
/// `refine_iters = 0` this is the usual one-shot approximation.
pub fn invert(
    z0: &Tensor,
    prompt: &str,
    config: &SamplerConfig,
    params: &DenoiserParams,
    refine_iters: usize,
) -> Result<GenerationTrace> {
    config.validate()?;
    let dims = image_dims(params, config);
    if z0.dims() != dims.as_slice() {
        return Err(Error::dim(format!(
            "input latent {:?} does not match {dims:?}",
            z0.dims()
        )));
    }
    let schedule = config.schedule()?;
    let embedding = PromptEmbedding::from_text(prompt, params.arch.cond_dim)?;
    let hooks = ControlHooks::image();
    let mut trace = GenerationTrace {
        kind: TraceKind::Inverted,
        prompt: prompt.to_string(),
        seed: config.seed,
        model_seed: params.seed,
        arch: params.arch,
        schedule_hash: schedule.hash(),
        latents: Default::default(),
        kv_caches: Default::default(),
    };
    trace.latents.insert(0, z0.clone());
    let mut z = z0.clone();
    for t in 1..=schedule.steps() {
        let eps = denoise(&z, &embedding, t, params, &hooks)?;
        let mut z_t = ddim_inversion_step(&z, &eps, t, &schedule)?;
        for _ in 0..refine_iters {
            let eps = denoise(&z_t, &embedding, t, params, &hooks)?;
            z_t = ddim_inversion_step(&z, &eps, t, &schedule)?;
        }
        trace.latents.insert(t, z_t.clone());
        z = z_t;
    }
    Ok(trace)
}

/// Re-samples a trace's `z_T^1` with the image model (no insertion).
pub fn resample_image(
    trace: &GenerationTrace,
    config: &SamplerConfig,
    params: &DenoiserParams,
) -> Result<Tensor> {
    check_trace(trace, config, params)?;
    let schedule = config.schedule()?;
    let prompt = PromptEmbedding::from_text(&trace.prompt, params.arch.cond_dim)?;
    sample_from(
        trace.latent(schedule.steps())?.clone(),
        &prompt,
        &schedule,
        0.0,
        &mut SeededRng::new(0),
        params,
        &ControlHooks::image(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean squared difference between output frame 1 and the trace's `z_0^1`.
    pub first_frame_mse: f64,
    /// Mean over consecutive frame pairs of their mean squared difference.
    pub frame_smoothness: f64,
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        / n
}

/// Mean over consecutive frame pairs of their mean squared difference; 0 for one frame.
pub fn frame_smoothness(video: &Tensor) -> f64 {
    let f = video.dims()[0];
    if f < 2 {
        return 0.0;
    }
    (1..f)
        .map(|i| mse(video.outer(i - 1), video.outer(i)))
        .sum::<f64>()
        / (f - 1) as f64
}

pub fn compute_metrics(video: &Tensor, trace: &GenerationTrace) -> Result<Metrics> {
    let z0 = trace.latent(0)?;
    if video.rank() != 4 || video.dims()[1..] != z0.dims()[1..] {
        return Err(Error::dim(format!(
            "video {:?} does not match trace latent {:?}",
            video.dims(),
            z0.dims()
        )));
    }
    Ok(Metrics {
        first_frame_mse: mse(video.outer(0), z0.data()),
        frame_smoothness: frame_smoothness(video),
    })
}

/// Mean smoothness with the configured temporal modes against the same runs
/// with every motion module skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalEffect {
    pub seeds: Vec<u64>,
    pub mean_smoothness_temporal: f64,
    pub mean_smoothness_bypassed: f64,
}

impl TemporalEffect {
    pub fn temporal_is_smoother(&self) -> bool {
        self.mean_smoothness_temporal < self.mean_smoothness_bypassed
    }
}

/// For each seed: generate a trace, then animate it twice (configured modes,
/// motion bypassed) and average `frame_smoothness` per variant.
pub fn temporal_effect(
    prompt: &str,
    seeds: &[u64],
    config: &SamplerConfig,
    params: &DenoiserParams,
) -> Result<TemporalEffect> {
    let mut with = 0.0;
    let mut without = 0.0;
    for &seed in seeds {
        let trace = generate_t2i_trace(prompt, seed, config, params)?;
        let cfg = SamplerConfig {
            seed,
            bypass_motion: false,
            ..config.clone()
        };
        with += frame_smoothness(&animate(&trace, &cfg, params)?.video);
        let cfg = SamplerConfig {
            bypass_motion: true,
            ..cfg
        };
        without += frame_smoothness(&animate(&trace, &cfg, params)?.video);
    }
    let n = seeds.len().max(1) as f64;
    Ok(TemporalEffect {
        seeds: seeds.to_vec(),
        mean_smoothness_temporal: with / n,
        mean_smoothness_bypassed: without / n,
    })
}
