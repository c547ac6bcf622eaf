//! Gaussian-process surrogate and the expected-improvement BO loop.

pub mod acquisition;
pub mod bo;
pub mod model;
pub mod prior;

pub use acquisition::{acquisition_argmax, expected_improvement, expected_improvement_from, EiParams, EiVariant};
pub use bo::{run_bo, ArmPosterior, BoConfig, ValueScaling};
pub use model::GpModel;
pub use prior::{feature_kernel, ArmTable, FeaturePrior, RbfPrior, DEFAULT_RBF_LENGTHSCALE};
