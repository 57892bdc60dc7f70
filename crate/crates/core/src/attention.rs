//! Single-head attention over frame tokens and spatial tokens.
//!
//! All dot products and softmax sums accumulate in `f64` and round to `f32`
//! once per output element. Softmax subtracts the row maximum before
//! exponentiation. The logit scale is `1/sqrt(c)` with `c` the full channel
//! count.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bias-free linear map with weight `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    weight: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::dim(format!(
                "linear weight must be rank 2, got {:?}",
                weight.dims()
            )));
        }
        Ok(Self { weight })
    }

    pub fn identity(c: usize) -> Result<Self> {
        let mut data = vec![0.0; c * c];
        for i in 0..c {
            data[i * c + i] = 1.0;
        }
        Self::new(Tensor::new(vec![c, c], data)?)
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Result<Self> {
        Self::new(Tensor::zeros(vec![out_dim, in_dim])?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn apply_into(&self, x: &[f32], out: &mut [f32]) {
        debug_assert_eq!(x.len(), self.in_dim());
        debug_assert_eq!(out.len(), self.out_dim());
        for (o, row) in out.iter_mut().zip(self.weight.rows()) {
            *o = dot(row, x) as f32;
        }
    }

    pub fn apply(&self, x: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; self.out_dim()];
        self.apply_into(x, &mut out);
        out
    }

    /// Applies the map to every row of a `[n, in]` array.
    pub fn apply_rows(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.dims()[1] != self.in_dim() {
            return Err(Error::dim(format!(
                "linear {}x{} cannot take rows of {:?}",
                self.out_dim(),
                self.in_dim(),
                x.dims()
            )));
        }
        let n = x.dims()[0];
        let mut data = vec![0.0; n * self.out_dim()];
        for (row, out) in x.rows().zip(data.chunks_exact_mut(self.out_dim())) {
            self.apply_into(row, out);
        }
        Ok(Tensor::from_parts(vec![n, self.out_dim()], data))
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Row `j` (0-based) of the transformer sinusoidal table with base 10000:
/// entry `2m` is `sin(j / 10000^(2m/c))`, entry `2m+1` the matching cosine.
pub fn sinusoidal_embedding(j: usize, c: usize) -> Vec<f32> {
    (0..c)
        .map(|k| {
            let m = (k / 2) as f64;
            let angle = j as f64 / libm::pow(10000.0, 2.0 * m / c as f64);
            if k % 2 == 0 {
                libm::sin(angle) as f32
            } else {
                libm::cos(angle) as f32
            }
        })
        .collect()
}

/// Frame position embeddings `p_1 ... p_fmax`, stored as table rows `0 .. fmax`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionEmbeddings {
    table: Tensor,
}

impl PositionEmbeddings {
    pub fn sinusoidal(max_frames: usize, c: usize) -> Result<Self> {
        let data = (0..max_frames)
            .flat_map(|j| sinusoidal_embedding(j, c))
            .collect();
        Self::from_table(Tensor::new(vec![max_frames, c], data)?)
    }

    /// Every position carries the same vector.
    pub fn constant(max_frames: usize, row: &[f32]) -> Result<Self> {
        let data = row.repeat(max_frames);
        Self::from_table(Tensor::new(vec![max_frames, row.len()], data)?)
    }

    pub fn from_table(table: Tensor) -> Result<Self> {
        if table.rank() != 2 {
            return Err(Error::dim(format!(
                "position table must be [f_max, c], got {:?}",
                table.dims()
            )));
        }
        Ok(Self { table })
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn max_frames(&self) -> usize {
        self.table.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.table.dims()[1]
    }

    /// `p_position`, 1-based.
    pub fn get(&self, position: usize) -> &[f32] {
        self.table.row(position - 1)
    }
}

/// Per-frame tokens `z_1 ... z_f` at one spatial site, shape `[f, c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTokens(Tensor);

impl FrameTokens {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.rank() != 2 {
            return Err(Error::dim(format!(
                "frame tokens must be [f, c], got {:?}",
                tokens.dims()
            )));
        }
        Ok(Self(tokens))
    }

    pub fn frames(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.dims()[1]
    }

    /// `z_i`, 1-based.
    pub fn token(&self, i: usize) -> &[f32] {
        self.0.row(i - 1)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Query/key/value projections plus the position table of one temporal
/// attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalAttentionParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub pos: PositionEmbeddings,
}

impl TemporalAttentionParams {
    pub fn new(wq: Linear, wk: Linear, wv: Linear, pos: PositionEmbeddings) -> Result<Self> {
        let c = pos.channels();
        for (name, w) in [("wq", &wq), ("wk", &wk), ("wv", &wv)] {
            if w.in_dim() != c || w.out_dim() != c {
                return Err(Error::dim(format!(
                    "{name} is {}x{}, expected {c}x{c}",
                    w.out_dim(),
                    w.in_dim()
                )));
            }
        }
        Ok(Self { wq, wk, wv, pos })
    }

    pub fn channels(&self) -> usize {
        self.pos.channels()
    }

    pub(crate) fn check_tokens(&self, z: &FrameTokens) -> Result<()> {
        if z.channels() != self.channels() {
            return Err(Error::dim(format!(
                "tokens have {} channels, block expects {}",
                z.channels(),
                self.channels()
            )));
        }
        if z.frames() > self.pos.max_frames() {
            return Err(Error::dim(format!(
                "{} frames exceed the position table length {}",
                z.frames(),
                self.pos.max_frames()
            )));
        }
        Ok(())
    }

    /// `[W_q x, W_k x, W_v x]` in `f64`, concatenated.
    pub(crate) fn project_wide(&self, x: &[f32]) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.channels());
        for w in [&self.wq, &self.wk, &self.wv] {
            out.extend(w.weight().rows().map(|row| dot(row, x)));
        }
        out
    }

    /// `(q_i^j, k_i^j, v_i^j) = W(z_i + p_j)`, given the wide projections of
    /// `z_i` and `p_j`. The sum is formed in `f64` and rounded once, so every
    /// caller producing the same `(i, j)` entry gets identical bits.
    pub(crate) fn combine(content: &[f64], position: &[f64], c: usize) -> [Vec<f32>; 3] {
        let part = |k: usize| -> Vec<f32> {
            content[k * c..(k + 1) * c]
                .iter()
                .zip(&position[k * c..(k + 1) * c])
                .map(|(a, b)| (a + b) as f32)
                .collect()
        };
        [part(0), part(1), part(2)]
    }

    pub(crate) fn position_projections(&self, frames: usize) -> Vec<Vec<f64>> {
        (1..=frames)
            .map(|j| self.project_wide(self.pos.get(j)))
            .collect()
    }
}

/// Softmax weights of one query against a key list, scaled by `1/sqrt(c)`.
pub fn softmax_weights(query: &[f32], keys: &[&[f32]]) -> Vec<f64> {
    let scale = 1.0 / (query.len() as f64).sqrt();
    let logits: Vec<f64> = keys.iter().map(|k| dot(query, k) * scale).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| libm::exp(l - max)).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `sum_j w_j v_j` with `w = softmax(q . k_j / sqrt(c))`.
pub(crate) fn attend(query: &[f32], keys: &[&[f32]], values: &[&[f32]], out: &mut [f32]) {
    debug_assert_eq!(keys.len(), values.len());
    let weights = softmax_weights(query, keys);
    for (ch, o) in out.iter_mut().enumerate() {
        *o = weights
            .iter()
            .zip(values)
            .map(|(w, v)| w * f64::from(v[ch]))
            .sum::<f64>() as f32;
    }
}

/// `Q, K, V` with row `i` equal to `W(z_i + p_i)`, evaluated as `W z_i + W p_i`
/// in `f64`.
pub fn project_qkv(
    z: &FrameTokens,
    params: &TemporalAttentionParams,
) -> Result<(Tensor, Tensor, Tensor)> {
    params.check_tokens(z)?;
    let (f, c) = (z.frames(), z.channels());
    let mut q = Vec::with_capacity(f * c);
    let mut k = Vec::with_capacity(f * c);
    let mut v = Vec::with_capacity(f * c);
    let positions = params.position_projections(f);
    for (i, pj) in (1..=f).zip(&positions) {
        let zi = params.project_wide(z.token(i));
        let [qi, ki, vi] = TemporalAttentionParams::combine(&zi, pj, c);
        q.extend(qi);
        k.extend(ki);
        v.extend(vi);
    }
    Ok((
        Tensor::from_parts(vec![f, c], q),
        Tensor::from_parts(vec![f, c], k),
        Tensor::from_parts(vec![f, c], v),
    ))
}

/// Frame-axis self-attention where every frame attends to all `f` frames.
pub fn global_temporal_attention(
    z: &FrameTokens,
    params: &TemporalAttentionParams,
) -> Result<FrameTokens> {
    let (q, k, v) = project_qkv(z, params)?;
    let keys: Vec<&[f32]> = k.rows().collect();
    let values: Vec<&[f32]> = v.rows().collect();
    let (f, c) = (z.frames(), z.channels());
    let mut out = vec![0.0; f * c];
    for (qi, oi) in q.rows().zip(out.chunks_exact_mut(c)) {
        attend(qi, &keys, &values, oi);
    }
    Ok(FrameTokens(Tensor::from_parts(vec![f, c], out)))
}

/// Spatial self-attention projections. No position embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAttentionParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
}

impl SpatialAttentionParams {
    pub fn new(wq: Linear, wk: Linear, wv: Linear) -> Result<Self> {
        let c = wq.in_dim();
        for w in [&wq, &wk, &wv] {
            if w.in_dim() != c || w.out_dim() != c {
                return Err(Error::dim("spatial projections must all be c x c"));
            }
        }
        Ok(Self { wq, wk, wv })
    }

    pub fn channels(&self) -> usize {
        self.wq.in_dim()
    }
}

/// Keys and values of one frame's spatial self-attention, each `[hw, c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialKv {
    pub k: Tensor,
    pub v: Tensor,
}

pub fn spatial_kv(x: &Tensor, params: &SpatialAttentionParams) -> Result<SpatialKv> {
    Ok(SpatialKv {
        k: params.wk.apply_rows(x)?,
        v: params.wv.apply_rows(x)?,
    })
}

/// Self-attention over the `hw` tokens of one frame. With `shared`, queries
/// come from `x` while keys and values are the supplied tensors.
pub fn spatial_self_attention(
    x: &Tensor,
    params: &SpatialAttentionParams,
    shared: Option<&SpatialKv>,
) -> Result<Tensor> {
    let q = params.wq.apply_rows(x)?;
    let own;
    let kv = match shared {
        Some(kv) => {
            if kv.k.dims() != x.dims() || kv.v.dims() != x.dims() {
                return Err(Error::dim(format!(
                    "shared K/V {:?}/{:?} do not match tokens {:?}",
                    kv.k.dims(),
                    kv.v.dims(),
                    x.dims()
                )));
            }
            kv
        }
        None => {
            own = spatial_kv(x, params)?;
            &own
        }
    };
    let keys: Vec<&[f32]> = kv.k.rows().collect();
    let values: Vec<&[f32]> = kv.v.rows().collect();
    let c = params.channels();
    let mut out = vec![0.0; x.len()];
    for (qi, oi) in q.rows().zip(out.chunks_exact_mut(c)) {
        attend(qi, &keys, &values, oi);
    }
    Ok(Tensor::from_parts(x.dims().to_vec(), out))
}
