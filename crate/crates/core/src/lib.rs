//! Steganography via learned iterative optimization.
//!
//! A cover image is perturbed so that a convolutional decoder recovers an
//! arbitrary bit string from it. The perturbation is found by gradient-based
//! optimization of an accuracy + quality objective inside the pixel box
//! `[0,1]`; the optimizer is either a trained recurrent update network
//! ([`optim::liso_encode`]), projected gradient descent
//! ([`optim::pgd_optimize`]), box-constrained L-BFGS
//! ([`optim::lbfgs_optimize`]), or the learned optimizer refined by L-BFGS
//! ([`optim::liso_refine_lbfgs`]).

pub mod archive;
pub mod autograd;
pub mod bitstream;
pub mod error;
pub mod imageio;
pub mod jpeg;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod steganalysis;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

/// Raises glibc's mmap/trim thresholds once so the large transient buffers
/// of the convolution kernels are recycled through the heap instead of being
/// mapped and unmapped on every call.
pub(crate) fn tune_allocator() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        }
    });
}
