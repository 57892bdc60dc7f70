//! Seeded inputs shared by the benchmarks.

use anchorvid_core::attention::{FrameTokens, Linear, PositionEmbeddings, TemporalAttentionParams};
use anchorvid_core::{randn, SeededRng, Tensor};

/// Random `[f, c]` tokens and temporal weights scaled by `1/sqrt(c)`.
pub fn temporal_inputs(seed: u64, f: usize, c: usize) -> (FrameTokens, TemporalAttentionParams) {
    let mut rng = SeededRng::new(seed);
    let scale = 1.0 / (c as f32).sqrt();
    let mut weight = || {
        let m = randn(&mut rng, vec![c, c]).expect("valid dims");
        let data = m.data().iter().map(|x| x * scale).collect();
        Linear::new(Tensor::new(vec![c, c], data).expect("valid dims")).expect("square weight")
    };
    let (wq, wk, wv) = (weight(), weight(), weight());
    let z = FrameTokens::new(randn(&mut rng, vec![f, c]).expect("valid dims")).expect("rank 2");
    let pos = PositionEmbeddings::sinusoidal(f, c).expect("valid table");
    (
        z,
        TemporalAttentionParams::new(wq, wk, wv, pos).expect("matching shapes"),
    )
}

/// Seeded `[f, c, h, w]` latent.
pub fn latent(seed: u64, f: usize, c: usize, h: usize, w: usize) -> Tensor {
    randn(&mut SeededRng::new(seed), vec![f, c, h, w]).expect("valid dims")
}
