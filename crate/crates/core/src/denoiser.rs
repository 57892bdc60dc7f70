//! Seeded pseudo-UNet used as the noise predictor.
//!
//! Each block adds the conditioning bias, runs a spatial module on every frame
//! and then a motion module on every spatial site:
//!
//! ```text
//! x  <- x + cond_proj(prompt) + time_proj(time_features(t))
//! x  <- x + mix(spatial_attn(x))                      per frame, over hw tokens
//! x  <- x + project_out(attn2(attn1(project_in(x))))  per site, over f tokens
//! ```
//!
//! Encoder blocks run first, then decoder blocks; the final hidden state is
//! the predicted noise. Channels stay constant and there is no resampling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{
    sinusoidal_embedding, spatial_kv, spatial_self_attention, FrameTokens, Linear,
    PositionEmbeddings, SpatialAttentionParams, SpatialKv, TemporalAttentionParams,
};
use crate::error::{Error, Result};
use crate::tensor::{encode, SeededRng, Tensor};
use crate::window::{window_attention_output, AttentionMode};

/// Width of the timestep feature vector fed to `time_proj`.
pub const TIME_FEATURES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub channels: usize,
    pub cond_dim: usize,
    pub max_frames: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            encoder_blocks: 2,
            decoder_blocks: 2,
            channels: 8,
            cond_dim: 8,
            max_frames: 32,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 || self.cond_dim < 2 {
            return Err(Error::Config(format!(
                "channel widths must be >= 2 (channels {}, cond_dim {})",
                self.channels, self.cond_dim
            )));
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return Err(Error::Config(
                "need at least one encoder and one decoder block".into(),
            ));
        }
        if self.max_frames == 0 {
            return Err(Error::Config("max_frames must be positive".into()));
        }
        Ok(())
    }

    pub fn total_blocks(&self) -> usize {
        self.encoder_blocks + self.decoder_blocks
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialBlockParams {
    pub attn: SpatialAttentionParams,
    pub mix: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionModuleParams {
    pub project_in: Linear,
    pub attn1: TemporalAttentionParams,
    pub attn2: TemporalAttentionParams,
    pub project_out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub spatial: SpatialBlockParams,
    pub motion: MotionModuleParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub arch: Arch,
    pub encoder_blocks: Vec<BlockParams>,
    pub decoder_blocks: Vec<BlockParams>,
    pub cond_proj: Linear,
    pub time_proj: Linear,
    pub seed: u64,
}

fn uniform_linear(rng: &mut SeededRng, out_dim: usize, in_dim: usize) -> Result<Linear> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let data = (0..out_dim * in_dim)
        .map(|_| rng.uniform_symmetric(bound))
        .collect();
    Linear::new(Tensor::new(vec![out_dim, in_dim], data)?)
}

/// Draws every weight from one SplitMix64 stream, uniform in `[-1/sqrt(in), 1/sqrt(in))`.
///
/// Draw order per block (encoder blocks first): spatial `wq wk wv mix`, motion
/// `project_in`, `attn1 wq wk wv`, `attn2 wq wk wv`, `project_out`. Then
/// `cond_proj` and `time_proj`.
pub fn init_denoiser(seed: u64, arch: Arch) -> Result<DenoiserParams> {
    arch.validate()?;
    let c = arch.channels;
    let pos = PositionEmbeddings::sinusoidal(arch.max_frames, c)?;
    let mut rng = SeededRng::new(seed);
    let block = |rng: &mut SeededRng| -> Result<BlockParams> {
        let spatial = SpatialBlockParams {
            attn: SpatialAttentionParams::new(
                uniform_linear(rng, c, c)?,
                uniform_linear(rng, c, c)?,
                uniform_linear(rng, c, c)?,
            )?,
            mix: uniform_linear(rng, c, c)?,
        };
        let project_in = uniform_linear(rng, c, c)?;
        let temporal = |rng: &mut SeededRng| {
            TemporalAttentionParams::new(
                uniform_linear(rng, c, c)?,
                uniform_linear(rng, c, c)?,
                uniform_linear(rng, c, c)?,
                pos.clone(),
            )
        };
        let attn1 = temporal(rng)?;
        let attn2 = temporal(rng)?;
        let project_out = uniform_linear(rng, c, c)?;
        Ok(BlockParams {
            spatial,
            motion: MotionModuleParams {
                project_in,
                attn1,
                attn2,
                project_out,
            },
        })
    };
    let encoder_blocks = (0..arch.encoder_blocks)
        .map(|_| block(&mut rng))
        .collect::<Result<_>>()?;
    let decoder_blocks = (0..arch.decoder_blocks)
        .map(|_| block(&mut rng))
        .collect::<Result<_>>()?;
    let cond_proj = uniform_linear(&mut rng, c, arch.cond_dim)?;
    let time_proj = uniform_linear(&mut rng, c, TIME_FEATURES)?;
    Ok(DenoiserParams {
        arch,
        encoder_blocks,
        decoder_blocks,
        cond_proj,
        time_proj,
        seed,
    })
}

impl DenoiserParams {
    /// Encoder blocks followed by decoder blocks.
    pub fn blocks(&self) -> impl Iterator<Item = &BlockParams> {
        self.encoder_blocks.iter().chain(&self.decoder_blocks)
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut BlockParams> {
        self.encoder_blocks
            .iter_mut()
            .chain(&mut self.decoder_blocks)
    }

    /// Hex SHA-256 over the encodings of every weight in draw order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for b in self.blocks() {
            let s = &b.spatial;
            let m = &b.motion;
            for w in [
                &s.attn.wq,
                &s.attn.wk,
                &s.attn.wv,
                &s.mix,
                &m.project_in,
                &m.attn1.wq,
                &m.attn1.wk,
                &m.attn1.wv,
                &m.attn2.wq,
                &m.attn2.wk,
                &m.attn2.wv,
                &m.project_out,
            ] {
                h.update(encode(w.weight()));
            }
        }
        h.update(encode(self.cond_proj.weight()));
        h.update(encode(self.time_proj.weight()));
        hex::encode(h.finalize())
    }

    /// Replaces every block's position table (both attention layers).
    pub fn set_position_table(&mut self, pos: PositionEmbeddings) {
        for b in self.blocks_mut() {
            b.motion.attn1.pos = pos.clone();
            b.motion.attn2.pos = pos.clone();
        }
    }
}

/// Prompt conditioning vector drawn from a seed derived from the text.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub vec: Tensor,
}

impl PromptEmbedding {
    /// Seeds a [`SeededRng`] with the first 8 bytes (little-endian) of
    /// SHA-256(text) and draws `dim` standard normals.
    pub fn from_text(text: &str, dim: usize) -> Result<Self> {
        let digest = Sha256::digest(text.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
        Ok(Self {
            vec: crate::tensor::randn(&mut SeededRng::new(seed), vec![dim])?,
        })
    }
}

/// `[sin t, cos t, sin(t/100), cos(t/100)]`: the base-10000 sinusoid at width 4.
pub fn time_features(t: usize) -> Vec<f32> {
    sinusoidal_embedding(t, TIME_FEATURES)
}

/// Switches applied during one denoiser call.
#[derive(Debug, Clone, Copy)]
pub struct ControlHooks<'a> {
    pub encoder_mode: AttentionMode,
    pub decoder_mode: AttentionMode,
    /// Skip every motion module (the plain image model).
    pub bypass_motion: bool,
    /// Spatial attention of every frame uses frame-1 keys and values.
    pub share_kv: bool,
    /// Per-block frame-1 K/V, encoder blocks first.
    pub kv_source: Option<&'a [SpatialKv]>,
    /// Per-block frame-1 spatial inputs `[hw, c]`; K/V are projected from these
    /// when `kv_source` is absent.
    pub first_frame_tokens: Option<&'a [Tensor]>,
}

impl Default for ControlHooks<'_> {
    fn default() -> Self {
        Self {
            encoder_mode: AttentionMode::WindowCorrected,
            decoder_mode: AttentionMode::Global,
            bypass_motion: false,
            share_kv: false,
            kv_source: None,
            first_frame_tokens: None,
        }
    }
}

impl<'a> ControlHooks<'a> {
    /// Global attention everywhere, nothing shared.
    pub fn plain() -> Self {
        Self {
            encoder_mode: AttentionMode::Global,
            ..Self::default()
        }
    }

    /// The single-image model: motion modules skipped.
    pub fn image() -> Self {
        Self {
            bypass_motion: true,
            ..Self::plain()
        }
    }

    pub fn with_shared_kv(self, kv: &'a [SpatialKv]) -> Self {
        Self {
            share_kv: true,
            kv_source: Some(kv),
            ..self
        }
    }
}

/// Instrumentation from one denoiser call.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseTrace {
    /// Temporal mode executed per block, `None` when the motion module was skipped.
    pub modes: Vec<Option<AttentionMode>>,
    /// K/V of frame 1's own spatial input per block.
    pub frame1_kv: Vec<SpatialKv>,
}

fn check_latent(z: &Tensor, params: &DenoiserParams) -> Result<(usize, usize)> {
    let arch = &params.arch;
    if z.rank() != 4 || z.dims()[1] != arch.channels {
        return Err(Error::dim(format!(
            "latent must be [f, {}, h, w], got {:?}",
            arch.channels,
            z.dims()
        )));
    }
    let f = z.dims()[0];
    if f > arch.max_frames {
        return Err(Error::dim(format!(
            "{f} frames exceed the model's position table ({})",
            arch.max_frames
        )));
    }
    Ok((f, z.dims()[2] * z.dims()[3]))
}

/// `[c, hw]` channel-major frame to `[hw, c]` tokens.
fn to_tokens(frame: &[f32], c: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        for s in 0..hw {
            out[s * c + ch] = frame[ch * hw + s];
        }
    }
    out
}

fn from_tokens(tokens: &[f32], c: usize, hw: usize, out: &mut [f32]) {
    for s in 0..hw {
        for ch in 0..c {
            out[ch * hw + s] = tokens[s * c + ch];
        }
    }
}

fn conditioning_bias(
    prompt: &PromptEmbedding,
    t: usize,
    params: &DenoiserParams,
) -> Result<Vec<f32>> {
    if prompt.vec.len() != params.arch.cond_dim {
        return Err(Error::dim(format!(
            "prompt embedding has {} entries, model expects {}",
            prompt.vec.len(),
            params.arch.cond_dim
        )));
    }
    let cond = params.cond_proj.apply(prompt.vec.data());
    let time = params.time_proj.apply(&time_features(t));
    Ok(cond.iter().zip(&time).map(|(a, b)| a + b).collect())
}

fn spatial_module(
    x: &[f32],
    block: &SpatialBlockParams,
    shared: Option<&SpatialKv>,
    c: usize,
    hw: usize,
) -> Result<Vec<f32>> {
    let tokens = Tensor::from_parts(vec![hw, c], x.to_vec());
    let attn = spatial_self_attention(&tokens, &block.attn, shared)?;
    let mut out = x.to_vec();
    let mut mixed = vec![0.0; c];
    for (o, a) in out.chunks_exact_mut(c).zip(attn.rows()) {
        block.mix.apply_into(a, &mut mixed);
        o.iter_mut().zip(&mixed).for_each(|(o, m)| *o += m);
    }
    Ok(out)
}

/// Motion-module update (without the residual) for the `[f, c]` tokens of one site.
pub fn motion_delta(
    tokens: &Tensor,
    m: &MotionModuleParams,
    mode: AttentionMode,
) -> Result<Tensor> {
    let h = FrameTokens::new(m.project_in.apply_rows(tokens)?)?;
    let h = window_attention_output(&h, &m.attn1, mode)?;
    let h = window_attention_output(&h, &m.attn2, mode)?;
    m.project_out.apply_rows(h.as_tensor())
}

/// Predicts the noise in `z` (`[f, c, h, w]`) at timestep `t`.
pub fn denoise(
    z: &Tensor,
    prompt: &PromptEmbedding,
    t: usize,
    params: &DenoiserParams,
    hooks: &ControlHooks<'_>,
) -> Result<Tensor> {
    denoise_traced(z, prompt, t, params, hooks).map(|(eps, _)| eps)
}

pub fn denoise_traced(
    z: &Tensor,
    prompt: &PromptEmbedding,
    t: usize,
    params: &DenoiserParams,
    hooks: &ControlHooks<'_>,
) -> Result<(Tensor, DenoiseTrace)> {
    let (f, hw) = check_latent(z, params)?;
    let c = params.arch.channels;
    let n_blocks = params.arch.total_blocks();
    if hooks.share_kv {
        let have = hooks
            .kv_source
            .map(<[_]>::len)
            .or(hooks.first_frame_tokens.map(<[_]>::len))
            .unwrap_or(0);
        if have < n_blocks {
            return Err(Error::MissingKvSource(have));
        }
    }
    let bias = conditioning_bias(prompt, t, params)?;

    let mut frames: Vec<Vec<f32>> = (0..f).map(|i| to_tokens(z.outer(i), c, hw)).collect();
    let mut modes = Vec::with_capacity(n_blocks);
    let mut frame1_kv = Vec::with_capacity(n_blocks);

    for (b, block) in params.blocks().enumerate() {
        for x in &mut frames {
            for tok in x.chunks_exact_mut(c) {
                tok.iter_mut().zip(&bias).for_each(|(v, b)| *v += b);
            }
        }

        let own_kv = spatial_kv(
            &Tensor::from_parts(vec![hw, c], frames[0].clone()),
            &block.spatial.attn,
        )?;
        let shared = if hooks.share_kv {
            Some(match hooks.kv_source {
                Some(src) => src[b].clone(),
                None => {
                    let x1 = &hooks.first_frame_tokens.expect("checked above")[b];
                    spatial_kv(x1, &block.spatial.attn)?
                }
            })
        } else {
            None
        };
        frame1_kv.push(own_kv);
        frames = frames
            .par_iter()
            .map(|x| spatial_module(x, &block.spatial, shared.as_ref(), c, hw))
            .collect::<Result<_>>()?;

        if hooks.bypass_motion {
            modes.push(None);
            continue;
        }
        let mode = if b < params.arch.encoder_blocks {
            hooks.encoder_mode
        } else {
            hooks.decoder_mode
        };
        modes.push(Some(mode));
        let deltas = (0..hw)
            .into_par_iter()
            .map(|s| {
                let site: Vec<f32> = frames
                    .iter()
                    .flat_map(|x| x[s * c..(s + 1) * c].iter().copied())
                    .collect();
                motion_delta(&Tensor::from_parts(vec![f, c], site), &block.motion, mode)
            })
            .collect::<Result<Vec<_>>>()?;
        for (s, d) in deltas.iter().enumerate() {
            for (i, x) in frames.iter_mut().enumerate() {
                x[s * c..(s + 1) * c]
                    .iter_mut()
                    .zip(d.row(i))
                    .for_each(|(v, dv)| *v += dv);
            }
        }
    }

    let mut out = vec![0.0; f * c * hw];
    for (x, o) in frames.iter().zip(out.chunks_exact_mut(c * hw)) {
        from_tokens(x, c, hw, o);
    }
    let eps = Tensor::new(z.dims().to_vec(), out)?;
    Ok((eps, DenoiseTrace { modes, frame1_kv }))
}

/// Runs the single-image model on one frame and returns each spatial block's K/V.
pub fn capture_frame1_kv(
    z1: &Tensor,
    prompt: &PromptEmbedding,
    t: usize,
    params: &DenoiserParams,
) -> Result<Vec<SpatialKv>> {
    if z1.rank() != 4 || z1.dims()[0] != 1 {
        return Err(Error::dim(format!(
            "frame-1 latent must be [1, c, h, w], got {:?}",
            z1.dims()
        )));
    }
    let (_, trace) = denoise_traced(z1, prompt, t, params, &ControlHooks::image())?;
    Ok(trace.frame1_kv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::randn;

    fn small() -> (DenoiserParams, PromptEmbedding) {
        let arch = Arch {
            channels: 4,
            cond_dim: 3,
            ..Arch::default()
        };
        (
            init_denoiser(21, arch).unwrap(),
            PromptEmbedding::from_text("a cat", 3).unwrap(),
        )
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_denoiser(1, Arch::default()).unwrap();
        let b = init_denoiser(1, Arch::default()).unwrap();
        let c = init_denoiser(2, Arch::default()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn init_rejects_bad_arch() {
        for arch in [
            Arch {
                channels: 0,
                ..Arch::default()
            },
            Arch {
                channels: 1,
                ..Arch::default()
            },
            Arch {
                encoder_blocks: 0,
                ..Arch::default()
            },
        ] {
            assert!(matches!(init_denoiser(1, arch), Err(Error::Config(_))));
        }
    }

    #[test]
    fn weights_within_init_bound() {
        let p = init_denoiser(4, Arch::default()).unwrap();
        let bound = 1.0 / (8f32).sqrt();
        for b in p.blocks() {
            assert!(b
                .spatial
                .mix
                .weight()
                .data()
                .iter()
                .all(|w| w.abs() <= bound));
        }
        let tb = 1.0 / (TIME_FEATURES as f32).sqrt();
        assert!(p.time_proj.weight().data().iter().all(|w| w.abs() <= tb));
    }

    #[test]
    fn prompt_embedding_is_stable() {
        let a = PromptEmbedding::from_text("a cat", 8).unwrap();
        let b = PromptEmbedding::from_text("a cat", 8).unwrap();
        let c = PromptEmbedding::from_text("a dog", 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn mode_split_is_recorded() {
        let (p, prompt) = small();
        let z = randn(&mut SeededRng::new(1), vec![3, 4, 2, 2]).unwrap();
        let (_, trace) = denoise_traced(&z, &prompt, 10, &p, &ControlHooks::default()).unwrap();
        assert_eq!(
            trace.modes,
            vec![
                Some(AttentionMode::WindowCorrected),
                Some(AttentionMode::WindowCorrected),
                Some(AttentionMode::Global),
                Some(AttentionMode::Global)
            ]
        );
        let (_, trace) = denoise_traced(&z, &prompt, 10, &p, &ControlHooks::image()).unwrap();
        assert!(trace.modes.iter().all(Option::is_none));
    }

    #[test]
    fn missing_kv_source_is_an_error() {
        let (p, prompt) = small();
        let z = randn(&mut SeededRng::new(1), vec![2, 4, 2, 2]).unwrap();
        let hooks = ControlHooks {
            share_kv: true,
            ..ControlHooks::default()
        };
        assert!(matches!(
            denoise(&z, &prompt, 5, &p, &hooks),
            Err(Error::MissingKvSource(0))
        ));
    }

    #[test]
    fn shape_errors() {
        let (p, prompt) = small();
        let wrong_c = Tensor::zeros(vec![2, 3, 2, 2]).unwrap();
        assert!(denoise(&wrong_c, &prompt, 1, &p, &ControlHooks::plain()).is_err());
        let too_many = Tensor::zeros(vec![33, 4, 1, 1]).unwrap();
        assert!(denoise(&too_many, &prompt, 1, &p, &ControlHooks::plain()).is_err());
        let bad_prompt = PromptEmbedding::from_text("x", 5).unwrap();
        let z = Tensor::zeros(vec![1, 4, 2, 2]).unwrap();
        assert!(denoise(&z, &bad_prompt, 1, &p, &ControlHooks::plain()).is_err());
        assert!(
            capture_frame1_kv(&Tensor::zeros(vec![2, 4, 2, 2]).unwrap(), &prompt, 1, &p).is_err()
        );
    }
}
