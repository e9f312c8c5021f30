//! Scale-conditioned feature fields on 3D Gaussian scenes.
//!
//! The crate takes a reconstructed Gaussian scene, attaches a trainable
//! 32-d latent to every Gaussian, and fits two small MLP heads against
//! mask-aligned 2D supervision: a language head that maps (scale, latent)
//! into a compressed text-embedding space, and an instance head that maps
//! (scale, latent) onto a hypersphere where Gaussians of one object cluster
//! together. Once trained, a free-form query is resolved to a group of
//! Gaussians, and that group is re-rendered alone to produce an amodal
//! (occlusion-completed) mask alongside the usual visible (modal) one.
//!
//! Pipeline stages, in dependency order:
//!
//! 1. [`scene`] — Gaussian/camera types, projection, PLY + latent sidecar I/O.
//! 2. [`raster`] — tiled forward renderer, exhaustive reference renderer,
//!    per-pixel contribution records, and the feature backward pass.
//! 3. [`supervision`] — mask filtering, mask scale estimation, embedding
//!    compression, and triplet assembly.
//! 4. [`mappers`] — the two MLP heads with manual backprop, plus losses.
//! 5. [`train`] — Adam, the optional geometry fitter, and feature training.
//! 6. [`ground`] — query → group resolution: vision-language client,
//!    relevancy, scale selection, HDBSCAN grouping, mask extraction.
//! 7. [`eval`] — IoU / localization metrics and the benchmark harness.
//!
//! [`synth`] builds small synthetic scenes and datasets used by the test
//! suite and handy for demos; [`config`] carries every tunable with its
//! default; [`io`] holds the shared binary container formats.

pub mod config;
pub mod error;
pub mod eval;
pub mod ground;
pub mod io;
pub mod mappers;
pub mod mask;
pub mod raster;
pub mod scene;
pub mod supervision;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
