//! Region-aware mixture experts for imbalanced tabular regression.
//!
//! The training side decomposes the label distribution with a one-dimensional
//! Gaussian mixture, oversamples each component's label range with a
//! SMOGN-style synthesizer and fits one regressor per component. At test time
//! the frozen experts are combined with softmax weights learned on unlabeled
//! test features by minimizing the prediction gap between two corrupted views.
//!
//! Module map:
//! - [`data`]: datasets, CSV I/O, label bins, balanced/normal/inverse splits.
//! - [`gmm`]: EM for 1-D mixtures, AIC selection, posterior partition.
//! - [`synth`]: relevance function, SMOTER/Gaussian-noise oversampling.
//! - [`expert`]: MLP regressors trained with Adam and early stopping.
//! - [`ttsa`]: test-time aggregation of frozen experts.
//! - [`eval`]: metrics, reports, region test sets, perturbation sweeps.
//! - [`pipeline`]: the end-to-end flow, baselines and run directories.

pub mod data;
pub mod error;
pub mod eval;
pub mod expert;
#[cfg(feature = "fetch")]
pub mod fetch;
pub mod gmm;
pub mod matrix;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod synthetic;
pub mod ttsa;

pub use data::{BinningScheme, ColumnKind, FeatureSchema, Scaler, SplitBundle, TabularDataset};
pub use error::{Error, Result};
pub use expert::{ExpertModel, MlpConfig};
pub use gmm::{GaussianComponent, GmmModel};
pub use matrix::Matrix;
pub use synth::{RelevanceFn, SynthConfig};
pub use ttsa::{AggregationWeights, Predictor, TtsaConfig};
