#![forbid(unsafe_code)]

//! MkfaNet: a convolutional backbone for face-forgery detection, built on a
//! self-contained dense-tensor engine with reverse-mode differentiation.
//!
//! The crate is organised around the pieces a full detection pipeline needs:
//!
//! - [`tensor`]: rank-4 tensors (N×C×H×W), the op set, the autodiff tape and
//!   a finite-difference gradient checker.
//! - [`blocks`]: the Multi-Kernel Aggregator and Multi-Frequency Aggregator
//!   blocks, stems, and a squeeze-excitation block used by the ablation
//!   harness.
//! - [`model`]: the four-stage backbone, presets, parameter accounting and
//!   per-stage feature taps.
//! - [`spectral`]: Fourier amplitude spectra, radial profiles and relative
//!   log-amplitude curves for corpora and feature maps.
//! - [`synth`]: a procedural real/fake image corpus with controllable
//!   spectral artifacts, augmentations and PPM I/O.
//! - [`train`]: optimizers, schedules, the training loop, AUC evaluation,
//!   checkpointing, Grad-CAM and the ablation harness.

pub mod blocks;
pub mod model;
pub mod spectral;
pub mod suite;
pub mod synth;
pub mod tensor;
pub mod train;

/// Caps the rayon worker pool. Results are identical for any thread count;
/// this only bounds CPU usage. Returns false if the pool was already built.
pub fn set_threads(n: usize) -> bool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .is_ok()
}
