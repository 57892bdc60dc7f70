//! Window attention over the frame axis with position-embedding correction.
//!
//! Frame `i` (1-based) attends to a list of exactly `f` key/value tokens drawn
//! from frames `1..=i`, padded by duplicating anchor-frame tokens. Each list
//! entry is a [`TokenRef`]: the frame whose content it carries and the
//! position embedding added before projection.
//!
//! | mode                | list for frame `i`                                              | query          |
//! |---------------------|-----------------------------------------------------------------|----------------|
//! | `Global`            | `(1,1) (2,2) ... (f,f)`                                         | `(i,i)`        |
//! | `WindowUncorrected` | `(1,1)` x `(f-i+1)`, then `(2,2) ... (i,i)`                     | `(i,i)`        |
//! | `WindowCorrected`   | `(1,1) (1,2) ... (1,f-i+1)`, then `(2,f-i+2) ... (i,f)`         | `(i,f)`        |
//! | `WindowTwoAnchor`   | anchor 1 copies, interior `2..=i`, anchor `f` copies; positions `1..=f` in order | last entry with content `i` |
//!
//! In every mode the query carries the same position as the last list entry
//! whose content is frame `i`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{attend, global_temporal_attention, FrameTokens, TemporalAttentionParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionMode {
    #[serde(rename = "global")]
    Global,
    #[serde(rename = "window")]
    WindowUncorrected,
    #[serde(rename = "window-pc")]
    WindowCorrected,
    #[serde(rename = "window-two-anchor")]
    WindowTwoAnchor,
}

impl AttentionMode {
    /// Frames emphasized by duplication.
    pub fn anchors(self, frames: usize) -> Vec<usize> {
        match self {
            AttentionMode::Global => vec![],
            AttentionMode::WindowUncorrected | AttentionMode::WindowCorrected => vec![1],
            AttentionMode::WindowTwoAnchor => vec![1, frames],
        }
    }

    pub fn is_window(self) -> bool {
        self != AttentionMode::Global
    }

    fn needs_pool(self) -> bool {
        matches!(
            self,
            AttentionMode::WindowCorrected | AttentionMode::WindowTwoAnchor
        )
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::Global => "global",
            AttentionMode::WindowUncorrected => "window",
            AttentionMode::WindowCorrected => "window-pc",
            AttentionMode::WindowTwoAnchor => "window-two-anchor",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(AttentionMode::Global),
            "window" => Ok(AttentionMode::WindowUncorrected),
            "window-pc" => Ok(AttentionMode::WindowCorrected),
            "window-two-anchor" => Ok(AttentionMode::WindowTwoAnchor),
            other => Err(Error::Config(format!("unknown attention mode {other:?}"))),
        }
    }
}

/// Mode plus the anchor frames it duplicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSpec {
    pub mode: AttentionMode,
    pub anchors: Vec<usize>,
}

impl WindowSpec {
    pub fn new(mode: AttentionMode, frames: usize) -> Self {
        Self {
            mode,
            anchors: mode.anchors(frames),
        }
    }
}

/// One list entry: content of frame `content`, embedding `p_position`. 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenRef {
    pub content: usize,
    pub position: usize,
}

impl TokenRef {
    pub fn new(content: usize, position: usize) -> Self {
        Self { content, position }
    }
}

fn check_index(i: usize, f: usize) -> Result<()> {
    if i == 0 || i > f {
        return Err(Error::FrameIndex {
            index: i,
            frames: f,
        });
    }
    Ok(())
}

/// Key/value list for frame `i` of `f`.
pub fn key_list(mode: AttentionMode, i: usize, f: usize) -> Result<Vec<TokenRef>> {
    check_index(i, f)?;
    let list = match mode {
        AttentionMode::Global => (1..=f).map(|j| TokenRef::new(j, j)).collect(),
        AttentionMode::WindowUncorrected => {
            let pad = f - i + 1;
            std::iter::repeat_n(TokenRef::new(1, 1), pad)
                .chain((2..=i).map(|j| TokenRef::new(j, j)))
                .collect()
        }
        AttentionMode::WindowCorrected => {
            let pad = f - i + 1;
            std::iter::repeat_n(1, pad)
                .chain(2..=i)
                .zip(1..=f)
                .map(|(content, position)| TokenRef::new(content, position))
                .collect()
        }
        AttentionMode::WindowTwoAnchor => {
            if f < 3 {
                return Err(Error::Unsupported(format!(
                    "two-anchor window needs at least 3 frames, got {f}"
                )));
            }
            let interior = 2..=i.min(f - 1);
            let distinct = 2 + interior.clone().count();
            let pad = f - distinct;
            let first_copies = 1 + pad.div_ceil(2);
            let last_copies = 1 + pad / 2;
            std::iter::repeat_n(1, first_copies)
                .chain(interior)
                .chain(std::iter::repeat_n(f, last_copies))
                .zip(1..=f)
                .map(|(content, position)| TokenRef::new(content, position))
                .collect()
        }
    };
    Ok(list)
}

/// Query token for frame `i` of `f`.
pub fn query_ref(mode: AttentionMode, i: usize, f: usize) -> Result<TokenRef> {
    check_index(i, f)?;
    Ok(match mode {
        AttentionMode::Global | AttentionMode::WindowUncorrected => TokenRef::new(i, i),
        AttentionMode::WindowCorrected => TokenRef::new(i, f),
        AttentionMode::WindowTwoAnchor => key_list(mode, i, f)?
            .into_iter()
            .rev()
            .find(|r| r.content == i)
            .expect("two-anchor list contains every frame of its window"),
    })
}

/// Projections `q_i^j, k_i^j, v_i^j = W(z_i + p_j)` for all `1 <= i, j <= f`.
///
/// By linearity each entry is `W z_i + W p_j`, so only `2f` matrix products
/// are needed for the `f^2` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionCorrectedPool {
    frames: usize,
    channels: usize,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
}

impl PositionCorrectedPool {
    pub fn build(z: &FrameTokens, params: &TemporalAttentionParams) -> Result<Self> {
        params.check_tokens(z)?;
        let (f, c) = (z.frames(), z.channels());
        let mut q = Vec::with_capacity(f * f * c);
        let mut k = Vec::with_capacity(f * f * c);
        let mut v = Vec::with_capacity(f * f * c);
        let positions = params.position_projections(f);
        for i in 1..=f {
            let zi = params.project_wide(z.token(i));
            for pj in &positions {
                let [qi, ki, vi] = TemporalAttentionParams::combine(&zi, pj, c);
                q.extend(qi);
                k.extend(ki);
                v.extend(vi);
            }
        }
        Ok(Self {
            frames: f,
            channels: c,
            q,
            k,
            v,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn offset(&self, r: TokenRef) -> usize {
        debug_assert!(r.content >= 1 && r.content <= self.frames);
        debug_assert!(r.position >= 1 && r.position <= self.frames);
        ((r.content - 1) * self.frames + (r.position - 1)) * self.channels
    }

    pub fn q(&self, r: TokenRef) -> &[f32] {
        let o = self.offset(r);
        &self.q[o..o + self.channels]
    }

    pub fn k(&self, r: TokenRef) -> &[f32] {
        let o = self.offset(r);
        &self.k[o..o + self.channels]
    }

    pub fn v(&self, r: TokenRef) -> &[f32] {
        let o = self.offset(r);
        &self.v[o..o + self.channels]
    }

    fn gather(&self, list: &[TokenRef]) -> (Tensor, Tensor) {
        let c = self.channels;
        let k = list
            .iter()
            .flat_map(|&r| self.k(r).iter().copied())
            .collect();
        let v = list
            .iter()
            .flat_map(|&r| self.v(r).iter().copied())
            .collect();
        (
            Tensor::from_parts(vec![list.len(), c], k),
            Tensor::from_parts(vec![list.len(), c], v),
        )
    }

    fn keys_values(&self, mode: AttentionMode, i: usize, f: usize) -> Result<(Tensor, Tensor)> {
        if f != self.frames {
            return Err(Error::dim(format!(
                "pool holds {} frames, asked for f = {f}",
                self.frames
            )));
        }
        Ok(self.gather(&key_list(mode, i, f)?))
    }
}

/// `K~_i, V~_i` of plain window attention: `k_1^1` repeated `f-i+1` times, then `k_2^2 ... k_i^i`.
pub fn window_keys_values_uncorrected(
    pool: &PositionCorrectedPool,
    i: usize,
    f: usize,
) -> Result<(Tensor, Tensor)> {
    pool.keys_values(AttentionMode::WindowUncorrected, i, f)
}

/// `K~_i, V~_i` with corrected positions: `k_1^1 ... k_1^(f-i+1), k_2^(f-i+2) ... k_i^f`.
pub fn window_keys_values_corrected(
    pool: &PositionCorrectedPool,
    i: usize,
    f: usize,
) -> Result<(Tensor, Tensor)> {
    pool.keys_values(AttentionMode::WindowCorrected, i, f)
}

/// Key/value list emphasizing both the first and last frame.
pub fn two_anchor_keys_values(
    pool: &PositionCorrectedPool,
    i: usize,
    f: usize,
) -> Result<(Tensor, Tensor)> {
    pool.keys_values(AttentionMode::WindowTwoAnchor, i, f)
}

/// Frame-axis attention under `mode`. `Global` delegates to
/// [`global_temporal_attention`]; the uncorrected window only needs the
/// diagonal projections, the other window modes build the full pool.
pub fn window_attention_output(
    z: &FrameTokens,
    params: &TemporalAttentionParams,
    mode: AttentionMode,
) -> Result<FrameTokens> {
    if mode == AttentionMode::Global {
        return global_temporal_attention(z, params);
    }
    params.check_tokens(z)?;
    let (f, c) = (z.frames(), z.channels());
    if mode == AttentionMode::WindowTwoAnchor && f < 3 {
        return Err(Error::Unsupported(format!(
            "two-anchor window needs at least 3 frames, got {f}"
        )));
    }
    let mut out = vec![0.0; f * c];
    if mode.needs_pool() {
        let pool = PositionCorrectedPool::build(z, params)?;
        for (i, oi) in (1..=f).zip(out.chunks_exact_mut(c)) {
            let list = key_list(mode, i, f)?;
            let keys: Vec<&[f32]> = list.iter().map(|&r| pool.k(r)).collect();
            let values: Vec<&[f32]> = list.iter().map(|&r| pool.v(r)).collect();
            attend(pool.q(query_ref(mode, i, f)?), &keys, &values, oi);
        }
    } else {
        let (q, k, v) = crate::attention::project_qkv(z, params)?;
        for (i, oi) in (1..=f).zip(out.chunks_exact_mut(c)) {
            let list = key_list(mode, i, f)?;
            let keys: Vec<&[f32]> = list.iter().map(|r| k.row(r.content - 1)).collect();
            let values: Vec<&[f32]> = list.iter().map(|r| v.row(r.content - 1)).collect();
            attend(q.row(i - 1), &keys, &values, oi);
        }
    }
    FrameTokens::new(Tensor::from_parts(vec![f, c], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{project_qkv, Linear, PositionEmbeddings};
    use crate::tensor::{randn, SeededRng};

    fn refs(pairs: &[(usize, usize)]) -> Vec<TokenRef> {
        pairs.iter().map(|&(c, p)| TokenRef::new(c, p)).collect()
    }

    fn seeded(seed: u64, f: usize, c: usize) -> (FrameTokens, TemporalAttentionParams) {
        let mut rng = SeededRng::new(seed);
        let mut lin = || Linear::new(randn(&mut rng, vec![c, c]).unwrap()).unwrap();
        let params = TemporalAttentionParams::new(
            lin(),
            lin(),
            lin(),
            PositionEmbeddings::sinusoidal(16, c).unwrap(),
        )
        .unwrap();
        let z =
            FrameTokens::new(randn(&mut SeededRng::new(seed ^ 0xFF), vec![f, c]).unwrap()).unwrap();
        (z, params)
    }

    #[test]
    fn uncorrected_lists() {
        let m = AttentionMode::WindowUncorrected;
        assert_eq!(key_list(m, 1, 4).unwrap(), refs(&[(1, 1); 4]));
        assert_eq!(
            key_list(m, 4, 4).unwrap(),
            key_list(AttentionMode::Global, 4, 4).unwrap()
        );
        assert_eq!(
            key_list(m, 2, 4).unwrap(),
            refs(&[(1, 1), (1, 1), (1, 1), (2, 2)])
        );
    }

    #[test]
    fn corrected_lists() {
        let m = AttentionMode::WindowCorrected;
        assert_eq!(
            key_list(m, 4, 4).unwrap(),
            refs(&[(1, 1), (2, 2), (3, 3), (4, 4)])
        );
        assert_eq!(
            key_list(m, 1, 4).unwrap(),
            refs(&[(1, 1), (1, 2), (1, 3), (1, 4)])
        );
        assert_eq!(
            key_list(m, 2, 4).unwrap(),
            refs(&[(1, 1), (1, 2), (1, 3), (2, 4)])
        );
        assert_eq!(query_ref(m, 2, 4).unwrap(), TokenRef::new(2, 4));
    }

    #[test]
    fn two_anchor_lists() {
        let m = AttentionMode::WindowTwoAnchor;
        assert_eq!(key_list(m, 1, 3).unwrap(), refs(&[(1, 1), (1, 2), (3, 3)]));
        assert_eq!(
            key_list(m, 2, 4).unwrap(),
            refs(&[(1, 1), (1, 2), (2, 3), (4, 4)])
        );
        assert_eq!(
            key_list(m, 5, 5).unwrap(),
            refs(&[(1, 1), (2, 2), (3, 3), (4, 4), (5, 5)])
        );
        // Even split of 4 padding slots at f = 6, i = 1.
        let contents: Vec<usize> = key_list(m, 1, 6)
            .unwrap()
            .iter()
            .map(|r| r.content)
            .collect();
        assert_eq!(contents, vec![1, 1, 1, 6, 6, 6]);
        // Odd padding: the extra copy goes to frame 1.
        let contents: Vec<usize> = key_list(m, 1, 7)
            .unwrap()
            .iter()
            .map(|r| r.content)
            .collect();
        assert_eq!(contents, vec![1, 1, 1, 1, 7, 7, 7]);
        assert_eq!(query_ref(m, 1, 7).unwrap(), TokenRef::new(1, 4));
        assert_eq!(query_ref(m, 7, 7).unwrap(), TokenRef::new(7, 7));
        assert!(matches!(key_list(m, 1, 2), Err(Error::Unsupported(_))));
    }

    #[test]
    fn index_errors_are_one_based() {
        let err = key_list(AttentionMode::WindowCorrected, 0, 4).unwrap_err();
        assert_eq!(err.to_string(), "frame index 0 out of range 1..=4");
        assert!(key_list(AttentionMode::WindowCorrected, 5, 4).is_err());
        assert!(query_ref(AttentionMode::Global, 5, 4).is_err());
    }

    #[test]
    fn pool_diagonal_matches_projection() {
        let (z, params) = seeded(2, 5, 4);
        let pool = PositionCorrectedPool::build(&z, &params).unwrap();
        let (q, k, v) = project_qkv(&z, &params).unwrap();
        for i in 1..=5 {
            let r = TokenRef::new(i, i);
            assert_eq!(pool.q(r), q.row(i - 1));
            assert_eq!(pool.k(r), k.row(i - 1));
            assert_eq!(pool.v(r), v.row(i - 1));
        }
    }

    #[test]
    fn pool_with_constant_positions_ignores_position() {
        let (z, params) = seeded(5, 4, 4);
        let params = TemporalAttentionParams {
            pos: PositionEmbeddings::constant(16, &[0.2, -0.4, 0.1, 0.9]).unwrap(),
            ..params
        };
        let pool = PositionCorrectedPool::build(&z, &params).unwrap();
        for i in 1..=4 {
            for j in 2..=4 {
                assert_eq!(pool.k(TokenRef::new(i, 1)), pool.k(TokenRef::new(i, j)));
            }
        }
    }

    #[test]
    fn pool_of_zero_tokens_ignores_content() {
        let (_, params) = seeded(6, 4, 4);
        let z = FrameTokens::new(Tensor::zeros(vec![4, 4]).unwrap()).unwrap();
        let pool = PositionCorrectedPool::build(&z, &params).unwrap();
        for j in 1..=4 {
            let expected = params.wv.apply(params.pos.get(j));
            for i in 1..=4 {
                assert_eq!(pool.v(TokenRef::new(i, j)), &expected[..]);
            }
        }
    }

    #[test]
    fn gathered_lists_have_f_rows() {
        let (z, params) = seeded(7, 4, 4);
        let pool = PositionCorrectedPool::build(&z, &params).unwrap();
        let (k, v) = window_keys_values_corrected(&pool, 2, 4).unwrap();
        assert_eq!(k.dims(), &[4, 4]);
        assert_eq!(k.row(3), pool.k(TokenRef::new(2, 4)));
        assert_eq!(v.row(1), pool.v(TokenRef::new(1, 2)));
        let (k, _) = window_keys_values_uncorrected(&pool, 1, 4).unwrap();
        assert!(k.rows().all(|r| r == pool.k(TokenRef::new(1, 1))));
        assert!(window_keys_values_corrected(&pool, 2, 5).is_err());
        assert!(two_anchor_keys_values(&pool, 2, 4).is_ok());
    }

    #[test]
    fn uncorrected_first_frame_is_its_value() {
        let (z, params) = seeded(11, 6, 4);
        let (_, _, v) = project_qkv(&z, &params).unwrap();
        let out = window_attention_output(&z, &params, AttentionMode::WindowUncorrected).unwrap();
        for (a, b) in out.token(1).iter().zip(v.row(0)) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn last_frame_equals_global() {
        for f in [2, 3, 8] {
            let (z, params) = seeded(f as u64, f, 4);
            let global = global_temporal_attention(&z, &params).unwrap();
            for mode in [
                AttentionMode::WindowUncorrected,
                AttentionMode::WindowCorrected,
            ] {
                let out = window_attention_output(&z, &params, mode).unwrap();
                assert_eq!(out.token(f), global.token(f), "{mode} f={f}");
            }
        }
    }

    #[test]
    fn mode_strings_round_trip() {
        for m in [
            AttentionMode::Global,
            AttentionMode::WindowUncorrected,
            AttentionMode::WindowCorrected,
            AttentionMode::WindowTwoAnchor,
        ] {
            assert_eq!(m.to_string().parse::<AttentionMode>().unwrap(), m);
        }
        assert!("local".parse::<AttentionMode>().is_err());
        assert_eq!(
            WindowSpec::new(AttentionMode::WindowTwoAnchor, 9).anchors,
            vec![1, 9]
        );
        assert!(WindowSpec::new(AttentionMode::Global, 9).anchors.is_empty());
    }
}
