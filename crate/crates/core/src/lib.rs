//! Soft concept bottleneck pipeline for binary aneurysm-style classification
//! on 3D vascular volumes.
//!
//! The crate is organized along the data path:
//!
//! - [`volume`]: the in-memory volume container, a bit-exact on-disk format,
//!   corner-aligned trilinear resampling and percentile intensity scaling.
//! - [`phantom`] / [`cohort`]: seeded synthetic tube phantoms with analytic
//!   concept surrogates, plus cohort generation and manifest/CSV persistence.
//! - [`concept`]: name-based leakage filtering, correlation-ranked concept
//!   selection and per-fold min-max normalization.
//! - [`split`] / [`augment`]: stratified k-fold planning, minority-class
//!   oversampling and the three-tier seeded augmentation policies.
//! - [`nn`] / [`backbone`] / [`model`]: a small dependency-free layer stack
//!   (conv3d, group norm, pooling, linear, dropout) with hand-written
//!   backward passes, the two 3D backbones built from it, and the bottleneck
//!   model with its concept and task heads.
//! - [`loss`] / [`schedule`] / [`optim`] / [`train`]: focal + concept losses,
//!   the staged fine-tuning schedule with plateau decay, Adam, the training
//!   loop and cross-validation driver.
//! - [`infer`] / [`metrics`] / [`report`]: single-pass and test-time-averaged
//!   prediction, concept intervention, threshold metrics and ROC/AUC, and the
//!   deterministic report emitter.
//!
//! Everything stochastic draws from named ChaCha streams derived in [`seed`],
//! so every artifact is reproducible from the run seed alone.

pub mod augment;
pub mod backbone;
pub mod cohort;
pub mod concept;
pub mod config;
pub mod error;
pub mod infer;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod report;
pub mod schedule;
pub mod seed;
pub mod split;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
