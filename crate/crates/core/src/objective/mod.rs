//! OLPC search space, KPI and the exhaustive-search oracle.

pub mod grid;
pub mod kpi;
pub mod landscape;
pub mod power;

pub use grid::{OlpcGrid, OlpcPoint};
pub use kpi::{interference_covariance, kpi, KpiEvaluator};
pub use landscape::{
    argmax_lowest, empirical_objective, exhaustive_oracle, observe, Landscape, LandscapeObjective, Objective,
    Observation,
};
pub use power::tx_power_dbm;
