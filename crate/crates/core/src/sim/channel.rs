//! UMi street-canyon LOS probability and pathloss.

use crate::error::{Error, Result};

/// Distance below which a link is always LOS.
pub const LOS_D_MIN_M: f64 = 18.0;

/// LOS probability for a 2D distance in meters.
pub fn los_probability(distance_m: f64) -> Result<f64> {
    if !(distance_m > 0.0) || !distance_m.is_finite() {
        return Err(Error::InvalidArgument(format!("LOS probability needs a positive distance, got {distance_m}")));
    }
    if distance_m <= LOS_D_MIN_M {
        return Ok(1.0);
    }
    let r = LOS_D_MIN_M / distance_m;
    Ok((r + (-distance_m / 36.0).exp() * (1.0 - r)).clamp(0.0, 1.0))
}

/// Pathloss in dB. `distance_m` is the UE-to-antenna distance, `los` picks the branch.
pub fn pathloss_db(distance_m: f64, carrier_freq_ghz: f64, ue_height_m: f64, los: bool) -> Result<f64> {
    if !(distance_m > 0.0) || !(carrier_freq_ghz > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "pathloss needs positive distance and frequency, got d={distance_m}, fc={carrier_freq_ghz}"
        )));
    }
    let pl_los = 32.4 + 21.0 * distance_m.log10() + 20.0 * carrier_freq_ghz.log10();
    if los {
        return Ok(pl_los);
    }
    let pl_nlos = 35.3 * distance_m.log10() + 22.4 + 21.3 * carrier_freq_ghz.log10() - 0.3 * (ue_height_m - 1.5);
    Ok(pl_los.max(pl_nlos))
}
