//! OTDR reflective-event toolkit: trace simulation, windowed dataset
//! construction, a from-scratch 1-D convolutional multi-task network, and
//! classical matched-filter baselines with analytic and Monte Carlo bounds.
//!
//! The crate is organized bottom-up:
//!
//! - [`sim`] — pulse shaping (rect → Bessel low-pass → square-law detection)
//!   and calibrated-noise trace synthesis;
//! - [`dataset`] — 35-sample window extraction, labeling, normalization,
//!   train/val/test splitting, and on-disk persistence;
//! - [`nn`] — minimal tensor ops with exact analytic gradients (conv1d,
//!   dense, maxpool, dropout, losses, Adam);
//! - [`model`] — the multi-task detector/locator/reflectance network and its
//!   training loop;
//! - [`detectors`] — the rank-1 matched-subspace GLRT and the optimum
//!   unipolar detector bound;
//! - [`eval`] — per-SNR-bin metrics, detector comparison sweeps, and report
//!   persistence;
//! - [`svg`] — dependency-free line charts for the figure analogues.

pub mod dataset;
pub mod detectors;
pub mod erf;
pub mod error;
pub mod eval;
pub mod filter;
pub mod model;
pub mod nn;
pub mod sim;
pub mod svg;
pub mod util;

pub use dataset::{Dataset, DatasetVariant, Sequence, Split, WINDOW_LEN};
pub use error::{ErrorClass, OtdrError, Result};
pub use eval::{EvalReport, EvalRow};
pub use model::{ModelConfig, MultiTaskNet, Prediction, TrainHistory};
pub use sim::{PulseTemplate, SimConfig, Trace};
