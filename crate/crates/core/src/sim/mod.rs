//! Multi-cell MIMO uplink simulator under the UMi street-canyon model.

pub mod channel;
pub mod config;
pub mod csi;
pub mod geometry;

pub use channel::{los_probability, pathloss_db};
pub use config::{sample_configuration, ConfigSpec, Configuration};
pub use csi::{draw_csi, CsiDataset, CsiSample};
