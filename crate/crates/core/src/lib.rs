//! Dual-camera HDR video fusion at desk scale.
//!
//! One camera holds a constant mid exposure (the reference stream), a second
//! camera alternates low and high exposures. Exposure triplets grouped by
//! timestamp are fused into HDR frames by a small attention-based network,
//! and reconstructions are scored for fidelity and temporal stability
//! against the classic single-camera alternating-exposure approach.
//!
//! The crate is organized as:
//!
//! - [`radiometry`]: gamma linearization, mu-law tone mapping, global
//!   luminance alignment, network input stacking.
//! - [`scene`] / [`capture`]: synthetic radiance scenes, exposure and
//!   quantization, capture schedules, timestamp grouping.
//! - [`tensor`]: a minimal reverse-mode differentiable array engine with
//!   finite-difference verification built in.
//! - [`model`]: the fusion network, its loss, and the training loop.
//! - [`metrics`]: PSNR / SSIM in linear and tonemapped domains, luminance
//!   stability statistics for video.
//! - [`io`]: PNG / PFM image files and dataset manifests.
//!
//! Numeric code is generic over [`scalar::Scalar`]. Everyday work runs in
//! `f32`; `f64` instantiations exist for gradient checks and metric oracles.

pub mod capture;
pub mod io;
pub mod metrics;
pub mod model;
pub mod radiometry;
pub mod scalar;
pub mod scene;
pub mod seed;
pub mod tensor;

/// Working precision for simulation, training, and inference.
pub type Real = f32;

pub type Graph = tensor::Graph<Real>;
pub type Array = tensor::Array<Real>;
pub type ParamStore = tensor::ParamStore<Real>;

pub type ImageBuf = radiometry::ImageBuf<Real>;
pub type LdrImage = radiometry::LdrImage<Real>;
pub type HdrImage = radiometry::HdrImage<Real>;
pub type LdrFrame = capture::LdrFrame<Real>;
pub type FusionGroup = capture::FusionGroup<Real>;
