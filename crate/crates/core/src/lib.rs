//! Fleet battery capacity forecasting.
//!
//! The pipeline runs end to end from raw charging logs to probabilistic
//! capacity forecasts:
//!
//! 1. [`ingest`] isolates charging sessions, Coulomb-counts per-segment
//!    capacity, aggregates weekly, and median-filters the trajectories.
//! 2. [`features`] builds the 27-feature weekly table and screens it with a
//!    Pearson + boosted-tree hybrid into the F1/F2/F3 sets.
//! 3. [`gbdt`] is a small exact-greedy gradient-boosted tree regressor that
//!    supplies gain-based feature importances.
//! 4. [`nn`] is the differentiable-operator core (tape autodiff + Adam).
//! 5. [`model`] assembles the conditional U-Net context encoder and the
//!    cross-attention noise predictor, including ablation variants.
//! 6. [`diffusion`] owns the noise schedule, masked training loss, reverse
//!    sampler, and ensemble summaries with 95% intervals.
//! 7. [`eval`] provides metrics, fold/window construction, experiments, and
//!    ablation drivers with report emission.
//! 8. [`synth`] generates seeded synthetic fleets with known ground truth
//!    for desk-scale verification.

pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod features;
pub mod gbdt;
pub mod ingest;
pub mod model;
pub mod nn;
pub mod synth;

pub use config::RunConfig;
pub use error::{CoreError, Result};
