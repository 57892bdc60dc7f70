//! Grayscale frame dumps for eyeballing latents.
//!
//! Channel 0 of each frame maps to a byte by `x -> clamp(128 + 64 x, 0, 255)`,
//! rounded to nearest, and is written as a binary PGM (`P5`).

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{sha256_hex, write_atomic, Tensor};

pub const GRAY_OFFSET: f32 = 128.0;
pub const GRAY_SCALE: f32 = 64.0;

pub fn to_gray(x: f32) -> u8 {
    (GRAY_OFFSET + GRAY_SCALE * x).round().clamp(0.0, 255.0) as u8
}

/// `P5` bytes for channel 0 of one `[c, h, w]` frame.
pub fn encode_pgm(frame: &[f32], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(frame[..h * w].iter().map(|&x| to_gray(x)));
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportedFrame {
    pub path: PathBuf,
    pub sha256: String,
}

/// Writes `frame_001.pgm ...` for every frame of a `[f, c, h, w]` video, in
/// frame order.
pub fn export_frames(video: &Tensor, dir: &Path) -> Result<Vec<ExportedFrame>> {
    if video.rank() != 4 {
        return Err(Error::dim(format!(
            "expected [f, c, h, w], got {:?}",
            video.dims()
        )));
    }
    let (f, h, w) = (video.dims()[0], video.dims()[2], video.dims()[3]);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..f)
        .map(|i| {
            let path = dir.join(format!("frame_{:03}.pgm", i + 1));
            let bytes = encode_pgm(video.outer(i), h, w);
            write_atomic(&path, &bytes)?;
            Ok(ExportedFrame {
                path,
                sha256: sha256_hex(&bytes),
            })
        })
        .collect()
}
