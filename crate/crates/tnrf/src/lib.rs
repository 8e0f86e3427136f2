//! Template-conditioned radiance fields with dense shape correspondences.
//!
//! The crate learns, from posed RGB images alone, per-object shape and
//! appearance codes, a shared category template field, and a deformation
//! field whose warps yield explicit dense correspondences across object
//! instances. Modules are layered bottom-up:
//!
//! - [`autodiff`]: tensor tape with reverse-mode gradients and spatial jets
//! - [`camera`]: pinhole rays and stratified sampling along rays
//! - [`dataset`]: posed-image ingestion and a synthetic family generator
//!   with analytic ground-truth correspondences
//! - [`film_siren`]: sinusoidal layers, FiLM conditioning, mapping networks
//! - [`fields`]: template, deformation, and density-correction composition
//! - [`renderer`]: quadrature compositing of density/radiance into pixels
//! - [`losses`]: the training objective and its five terms
//! - [`trainer`]: auto-decoder optimization loop with checkpointing
//! - [`correspond`]: marching cubes, template-space matching, transfer tools
//!
//! See the crate `examples/` directory for one runnable example per
//! capability, and the `tnrf` binary for the batch pipeline.

pub mod autodiff;
pub mod camera;
pub mod cli;
pub mod correspond;
pub mod dataset;
pub mod error;
pub mod fields;
pub mod film_siren;
pub mod losses;
pub mod renderer;
pub mod trainer;

pub use error::{Error, Result};
