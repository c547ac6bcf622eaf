//! Open-loop power control.

/// Closed-loop correction, fixed at 0 dB.
pub const CL_DB: f64 = 0.0;

/// `min(p_max, p0 + alpha * PL + CL)` in dBm.
pub fn tx_power_dbm(p0_dbm: f64, alpha: f64, pathloss_db: f64, cl_db: f64, p_max_dbm: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&alpha), "alpha {alpha} outside [0, 1]");
    p_max_dbm.min(p0_dbm + alpha * pathloss_db + cl_db)
}

/// Logarithmic to linear, `10^(x/10)`. Used for both dBm powers and the dB noise level.
pub fn db_to_linear(x: f64) -> f64 {
    10f64.powf(x / 10.0)
}
