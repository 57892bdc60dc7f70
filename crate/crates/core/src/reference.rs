//! Slow, straight-line versions of the attention paths.
//!
//! Everything here is computed in `f64` from the raw weight arrays, with key
//! lists built by explicit loops and softmax written as two passes. The
//! production code is checked against these.

use crate::tensor::Tensor;
use crate::window::AttentionMode;

pub type Matrix = Vec<Vec<f64>>;

/// `[rows, cols]` array as nested `f64` rows.
pub fn to_matrix(t: &Tensor) -> Matrix {
    let cols = t.dims()[t.rank() - 1];
    t.data()
        .chunks_exact(cols)
        .map(|r| r.iter().map(|&x| f64::from(x)).collect())
        .collect()
}

/// Sinusoidal table rows `p_1 ..= p_f`, row `j - 1` built from index `j - 1`.
pub fn sinusoid_table(f: usize, c: usize) -> Matrix {
    let mut table = Vec::with_capacity(f);
    for j in 0..f {
        let mut row = vec![0.0; c];
        for m in 0..c / 2 + c % 2 {
            let freq = 10000f64.powf(-(2.0 * m as f64) / c as f64);
            row[2 * m] = (j as f64 * freq).sin();
            if 2 * m + 1 < c {
                row[2 * m + 1] = (j as f64 * freq).cos();
            }
        }
        table.push(row);
    }
    table
}

fn matvec(w: &Matrix, x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| {
            let mut s = 0.0;
            for k in 0..x.len() {
                s += row[k] * x[k];
            }
            s
        })
        .collect()
}

/// Two-pass softmax attention of one query over explicit key/value rows.
pub fn attention(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
    let c = q.len() as f64;
    let mut logits = Vec::with_capacity(keys.len());
    for k in keys {
        let mut s = 0.0;
        for ch in 0..q.len() {
            s += q[ch] * k[ch];
        }
        logits.push(s / c.sqrt());
    }
    let mut max = f64::NEG_INFINITY;
    for &l in &logits {
        if l > max {
            max = l;
        }
    }
    let mut total = 0.0;
    let mut weights = Vec::with_capacity(logits.len());
    for &l in &logits {
        let e = (l - max).exp();
        weights.push(e);
        total += e;
    }
    let mut out = vec![0.0; values[0].len()];
    for (w, v) in weights.iter().zip(values) {
        for ch in 0..out.len() {
            out[ch] += w / total * v[ch];
        }
    }
    out
}

/// `(content, position)` pairs for frame `i` of `f`, built slot by slot.
pub fn list(mode: AttentionMode, i: usize, f: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    match mode {
        AttentionMode::Global => {
            for j in 1..=f {
                out.push((j, j));
            }
        }
        AttentionMode::WindowUncorrected | AttentionMode::WindowCorrected => {
            let copies = f - i + 1;
            for slot in 1..=f {
                let content = if slot <= copies { 1 } else { slot - copies + 1 };
                let position = if mode == AttentionMode::WindowCorrected {
                    slot
                } else {
                    content
                };
                out.push((content, position));
            }
        }
        AttentionMode::WindowTwoAnchor => {
            let mut contents = vec![1];
            for j in 2..=i {
                if j < f {
                    contents.push(j);
                }
            }
            contents.push(f);
            let pad = f - contents.len();
            let front = pad - pad / 2;
            let back = pad / 2;
            let mut full = vec![1; front];
            full.extend(contents);
            full.extend(vec![f; back]);
            for (slot, content) in full.into_iter().enumerate() {
                out.push((content, slot + 1));
            }
        }
    }
    out
}

/// `(content, position)` of the query for frame `i` of `f`.
pub fn query(mode: AttentionMode, i: usize, f: usize) -> (usize, usize) {
    match mode {
        AttentionMode::Global | AttentionMode::WindowUncorrected => (i, i),
        AttentionMode::WindowCorrected => (i, f),
        AttentionMode::WindowTwoAnchor => {
            let l = list(mode, i, f);
            let mut found = (i, i);
            for &(content, position) in &l {
                if content == i {
                    found = (content, position);
                }
            }
            found
        }
    }
}

/// Frame-axis attention for tokens `z` (`[f, c]`) with weights `wq, wk, wv`
/// (`[c, c]`) and position table `pos` (at least `f` rows).
pub fn temporal_attention(
    z: &Tensor,
    weights: [&Tensor; 3],
    pos: &Matrix,
    mode: AttentionMode,
) -> Matrix {
    let z = to_matrix(z);
    let [wq, wk, wv] = weights.map(to_matrix);
    let f = z.len();
    let token = |content: usize, position: usize| -> Vec<f64> {
        z[content - 1]
            .iter()
            .zip(&pos[position - 1])
            .map(|(a, b)| a + b)
            .collect()
    };
    let mut out = Vec::with_capacity(f);
    for i in 1..=f {
        let (qc, qp) = query(mode, i, f);
        let q = matvec(&wq, &token(qc, qp));
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for (content, position) in list(mode, i, f) {
            let a = token(content, position);
            keys.push(matvec(&wk, &a));
            values.push(matvec(&wv, &a));
        }
        out.push(attention(&q, &keys, &values));
    }
    out
}

/// Spatial self-attention over `x` (`[hw, c]`). With `kv_tokens`, keys and
/// values are projected from those tokens instead of `x`.
pub fn spatial_attention(x: &Tensor, weights: [&Tensor; 3], kv_tokens: Option<&Tensor>) -> Matrix {
    let [wq, wk, wv] = weights.map(to_matrix);
    let xs = to_matrix(x);
    let src = kv_tokens.map(to_matrix).unwrap_or_else(|| xs.clone());
    let keys: Matrix = src.iter().map(|t| matvec(&wk, t)).collect();
    let values: Matrix = src.iter().map(|t| matvec(&wv, t)).collect();
    xs.iter()
        .map(|t| attention(&matvec(&wq, t), &keys, &values))
        .collect()
}

/// Largest absolute difference between a production `[n, c]` array and a
/// reference matrix.
pub fn max_abs_diff(actual: &Tensor, expected: &Matrix) -> f64 {
    to_matrix(actual)
        .iter()
        .zip(expected)
        .flat_map(|(a, e)| a.iter().zip(e).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}
