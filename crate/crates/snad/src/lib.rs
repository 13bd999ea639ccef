//! Region-separable feature normalization and a desk-scale deblurring GAN.
//!
//! The crate packages, as an ordinary Rust library:
//!
//! * a small dense-tensor core with tape-based reverse-mode gradients and a
//!   finite-difference verification harness ([`tensor`], [`tape`],
//!   [`gradcheck`]);
//! * netpbm image / label-map serialization and a procedural generator of
//!   labeled face-like scenes ([`image`], [`scene`]);
//! * motion-blur kernel synthesis and the `y = x (*) k + noise` degradation
//!   model ([`blur`]);
//! * region masks derived from label maps ([`masks`]);
//! * separable normalization, adaptive denormalization, their assembled
//!   layer/block, batch/instance baselines, spectral normalization, and the
//!   mean/variance decomposition oracle ([`norm`]);
//! * Laplacian texture extraction and the texture prediction branch
//!   ([`texture`]);
//! * every training objective plus PSNR/SSIM/L1 metrics ([`loss`],
//!   [`metrics`]);
//! * a toy encoder/decoder generator, a multi-patch discriminator, and a
//!   deterministic adversarial training loop ([`net`], [`train`],
//!   [`params`], [`checkpoint`]);
//! * runnable invariant suites with pinned thresholds ([`verify`]).
//!
//! The `snad` CLI (see the companion crate) exposes each capability as a
//! subcommand. The guide under `book/` walks through the concepts; its code
//! blocks compile and run as this crate's doc-tests (see [`book`]).

pub mod blur;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod masks;
pub mod metrics;
pub mod net;
pub mod norm;
pub mod params;
pub mod rng;
pub mod scene;
pub mod tape;
pub mod tensor;
pub mod tensor_io;
pub mod texture;
pub mod train;
pub mod verify;

pub mod book;

pub use error::{Error, Result};
pub use tensor::{ConvSpec, PadMode, Tensor};

#[cfg(test)]
pub(crate) mod testutil {
    use crate::tensor::Tensor;
    use rand_chacha::ChaCha8Rng;

    pub fn rng(seed: u64) -> ChaCha8Rng {
        crate::rng::seeded(seed)
    }

    /// Uniform entries in `[-1, 1)`.
    pub fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        crate::rng::uniform_tensor(shape, rng, -1.0, 1.0)
    }
}
