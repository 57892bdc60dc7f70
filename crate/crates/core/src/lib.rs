//! First-frame anchored video diffusion on a deterministic toy model.
//!
//! The crate covers the numeric kernels (attention, window attention with
//! position correction), a seeded pseudo-UNet with spatial and motion modules,
//! and the DDIM sampling pipeline that animates a recorded single-image
//! generation trace.

pub mod attention;
pub mod check;
pub mod denoiser;
pub mod error;
pub mod export;
pub mod reference;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trace;
pub mod window;

pub use error::{Error, FormatError, Result};
pub use tensor::{randn, read_tensor, sha256_hex, write_tensor, SeededRng, Tensor};
pub use window::AttentionMode;
