//! Probabilistic interactive point-cloud segmentation.
//!
//! User clicks are encoded into per-object click prototypes. A scene-level
//! Gaussian latent summarises all prototypes; object-level Gaussian latents
//! blend a sample of it with each object's prototypes; samples of the object
//! latents modulate the prototypes (FiLM) before a cosine mask head. The
//! spread of the cosine responses across samples is the per-point uncertainty.
//!
//! Layout:
//! - [`autodiff`], [`nn`], [`gaussian`], [`loss`], [`optim`], [`gradcheck`]:
//!   the numeric kernel.
//! - [`scene`], [`geometry`]: synthetic scenes, the `NPSC1` format, neighbourhoods.
//! - [`model`]: encoder, latents, modulator and mask head.
//! - [`interaction`]: click simulation and metrics.
//! - [`training`]: loss assembly, the optimisation loop, checkpoints.
//! - [`service`]: click-and-refine sessions.

pub mod autodiff;
pub mod error;
pub mod gaussian;
pub mod geometry;
pub mod gradcheck;
pub mod interaction;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scene;
pub mod service;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use gaussian::{gaussian_kl, gaussian_sample, Gaussian};
pub use params::ParamStore;
pub use rng::SeedTree;
pub use scene::{generate_scene, generate_scenes, read_scene, write_scene, LabeledScene, SceneSpec};
pub use tensor::Tensor;
