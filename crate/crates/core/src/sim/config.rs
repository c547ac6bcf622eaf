//! Network configurations: counts, UE placement and radio constants.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::geometry::HexWrapAround;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Parameters from which configurations are sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSpec {
    pub n_cells: usize,
    pub n_ues_per_cell: usize,
    pub n_rx: usize,
    pub n_tx: usize,
    pub carrier_freq_ghz: f64,
    pub bs_height_m: f64,
    pub ue_height_m: f64,
    pub shadow_sigma_los_db: f64,
    pub shadow_sigma_nlos_db: f64,
    pub noise_power_db: f64,
    pub p_max_dbm: f64,
    pub inter_site_distance_m: f64,
    pub min_serving_m: f64,
    pub max_serving_m: f64,
    /// Power of the deterministic LOS component of Ricean fading.
    pub ricean_los_power_db: f64,
    /// Per-entry variance of the scattered component (Rayleigh and Ricean).
    pub scatter_power_db: f64,
}

impl Default for ConfigSpec {
    fn default() -> Self {
        Self {
            n_cells: 3,
            n_ues_per_cell: 10,
            n_rx: 16,
            n_tx: 4,
            carrier_freq_ghz: 3.5,
            bs_height_m: 15.0,
            ue_height_m: 1.5,
            shadow_sigma_los_db: 4.0,
            shadow_sigma_nlos_db: 7.82,
            noise_power_db: -121.38,
            p_max_dbm: 23.0,
            inter_site_distance_m: 250.0,
            min_serving_m: 18.0,
            max_serving_m: 200.0,
            ricean_los_power_db: -0.2,
            scatter_power_db: -13.5,
        }
    }
}

impl ConfigSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_cells", self.n_cells),
            ("n_ues_per_cell", self.n_ues_per_cell),
            ("n_rx", self.n_rx),
            ("n_tx", self.n_tx),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.n_cells > 3 {
            return Err(Error::InvalidConfig(format!(
                "the 3-site wrap-around layout supports at most 3 cells, got {}",
                self.n_cells
            )));
        }
        let positive = [
            ("carrier_freq_ghz", self.carrier_freq_ghz),
            ("bs_height_m", self.bs_height_m),
            ("ue_height_m", self.ue_height_m),
            ("inter_site_distance_m", self.inter_site_distance_m),
            ("min_serving_m", self.min_serving_m),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.max_serving_m >= self.min_serving_m) {
            return Err(Error::InvalidConfig(format!(
                "serving distance range [{}, {}] is empty",
                self.min_serving_m, self.max_serving_m
            )));
        }
        if self.shadow_sigma_los_db < 0.0 || self.shadow_sigma_nlos_db < 0.0 {
            return Err(Error::InvalidConfig("shadowing std must be non-negative".into()));
        }
        Ok(())
    }
}

/// One deployment. Distances are planar (2D) wrap-around distances in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub n_cells: usize,
    pub n_ues_per_cell: usize,
    pub n_rx: usize,
    pub n_tx: usize,
    /// `[cell][ue]`, distance to the serving BS.
    pub distances_serving: Vec<Vec<f64>>,
    /// `[cell][ue][bs_cell]`; the diagonal `[c][u][c]` equals the serving distance.
    pub distances_cross: Vec<Vec<Vec<f64>>>,
    pub carrier_freq_ghz: f64,
    pub bs_height_m: f64,
    pub ue_height_m: f64,
    pub shadow_sigma_los_db: f64,
    pub shadow_sigma_nlos_db: f64,
    pub noise_power_db: f64,
    pub p_max_dbm: f64,
    pub ricean_los_power_db: f64,
    pub scatter_power_db: f64,
    pub seed: u64,
}

impl Configuration {
    pub fn n_ues_total(&self) -> usize {
        self.n_cells * self.n_ues_per_cell
    }

    /// 3D distance between UE `(cell, ue)` and the BS of `bs_cell`.
    pub fn distance_3d(&self, cell: usize, ue: usize, bs_cell: usize) -> f64 {
        let d = self.distances_cross[cell][ue][bs_cell];
        let dh = self.bs_height_m - self.ue_height_m;
        (d * d + dh * dh).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cells == 0 || self.n_ues_per_cell == 0 || self.n_rx == 0 || self.n_tx == 0 {
            return Err(Error::InvalidConfig("counts must be at least 1".into()));
        }
        if self.distances_serving.len() != self.n_cells || self.distances_cross.len() != self.n_cells {
            return Err(Error::InvalidConfig("distance tables do not match n_cells".into()));
        }
        for c in 0..self.n_cells {
            if self.distances_serving[c].len() != self.n_ues_per_cell
                || self.distances_cross[c].len() != self.n_ues_per_cell
            {
                return Err(Error::InvalidConfig("distance tables do not match n_ues_per_cell".into()));
            }
            for u in 0..self.n_ues_per_cell {
                let row = &self.distances_cross[c][u];
                if row.len() != self.n_cells {
                    return Err(Error::InvalidConfig("cross distance row length".into()));
                }
                if row.iter().any(|d| !(*d >= 0.0)) || !(self.distances_serving[c][u] >= 0.0) {
                    return Err(Error::InvalidConfig("distances must be non-negative".into()));
                }
            }
        }
        Ok(())
    }

    /// Serializes to `key=value` lines. Distance tables are flattened in
    /// `[cell][ue]` / `[cell][ue][bs_cell]` order, comma separated.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_cells={}", self.n_cells);
        let _ = writeln!(s, "n_ues_per_cell={}", self.n_ues_per_cell);
        let _ = writeln!(s, "n_rx={}", self.n_rx);
        let _ = writeln!(s, "n_tx={}", self.n_tx);
        let _ = writeln!(s, "carrier_freq_ghz={:?}", self.carrier_freq_ghz);
        let _ = writeln!(s, "bs_height_m={:?}", self.bs_height_m);
        let _ = writeln!(s, "ue_height_m={:?}", self.ue_height_m);
        let _ = writeln!(s, "shadow_sigma_los_db={:?}", self.shadow_sigma_los_db);
        let _ = writeln!(s, "shadow_sigma_nlos_db={:?}", self.shadow_sigma_nlos_db);
        let _ = writeln!(s, "noise_power_db={:?}", self.noise_power_db);
        let _ = writeln!(s, "p_max_dbm={:?}", self.p_max_dbm);
        let _ = writeln!(s, "ricean_los_power_db={:?}", self.ricean_los_power_db);
        let _ = writeln!(s, "scatter_power_db={:?}", self.scatter_power_db);
        let _ = writeln!(s, "seed={}", self.seed);
        let serving: Vec<String> = self.distances_serving.iter().flatten().map(|d| format!("{d:?}")).collect();
        let _ = writeln!(s, "distances_serving={}", serving.join(","));
        let cross: Vec<String> = self.distances_cross.iter().flatten().flatten().map(|d| format!("{d:?}")).collect();
        let _ = writeln!(s, "distances_cross={}", cross.join(","));
        s
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut map = std::collections::BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Parse(format!("line {}: expected key=value", lineno + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&String> { map.get(k).ok_or_else(|| Error::Parse(format!("missing key {k}"))) };
        let usize_of = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|e| Error::Parse(format!("{k}: {e}"))) };
        let f64_of = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|e| Error::Parse(format!("{k}: {e}"))) };
        let list_of = |k: &str| -> Result<Vec<f64>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|x| x.trim().parse().map_err(|e| Error::Parse(format!("{k}: {e}")))).collect()
        };
        let n_cells = usize_of("n_cells")?;
        let n_ues = usize_of("n_ues_per_cell")?;
        let serving = list_of("distances_serving")?;
        let cross = list_of("distances_cross")?;
        if serving.len() != n_cells * n_ues || cross.len() != n_cells * n_ues * n_cells {
            return Err(Error::Parse("distance list lengths do not match counts".into()));
        }
        let distances_serving = serving.chunks(n_ues.max(1)).map(|c| c.to_vec()).collect();
        let distances_cross = cross
            .chunks((n_ues * n_cells).max(1))
            .map(|cell| cell.chunks(n_cells).map(|r| r.to_vec()).collect())
            .collect();
        let cfg = Configuration {
            n_cells,
            n_ues_per_cell: n_ues,
            n_rx: usize_of("n_rx")?,
            n_tx: usize_of("n_tx")?,
            distances_serving,
            distances_cross,
            carrier_freq_ghz: f64_of("carrier_freq_ghz")?,
            bs_height_m: f64_of("bs_height_m")?,
            ue_height_m: f64_of("ue_height_m")?,
            shadow_sigma_los_db: f64_of("shadow_sigma_los_db")?,
            shadow_sigma_nlos_db: f64_of("shadow_sigma_nlos_db")?,
            noise_power_db: f64_of("noise_power_db")?,
            p_max_dbm: f64_of("p_max_dbm")?,
            ricean_los_power_db: f64_of("ricean_los_power_db")?,
            scatter_power_db: f64_of("scatter_power_db")?,
            seed: get("seed")?.parse().map_err(|e| Error::Parse(format!("seed: {e}")))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv_str(&std::fs::read_to_string(path)?)
    }
}

/// Samples UE positions: serving distance uniform in
/// `[min_serving_m, max_serving_m]`, angle uniform, cross distances from the
/// wrap-around layout.
pub fn sample_configuration(spec: &ConfigSpec, seed: u64) -> Result<Configuration> {
    spec.validate()?;
    let layout = HexWrapAround::new(spec.inter_site_distance_m);
    let mut rng = rng_from_seed(seed);
    let mut distances_serving = Vec::with_capacity(spec.n_cells);
    let mut distances_cross = Vec::with_capacity(spec.n_cells);
    for c in 0..spec.n_cells {
        let bs = layout.site(c);
        let mut serving = Vec::with_capacity(spec.n_ues_per_cell);
        let mut cross = Vec::with_capacity(spec.n_ues_per_cell);
        for _ in 0..spec.n_ues_per_cell {
            let r = if spec.max_serving_m > spec.min_serving_m {
                rng.random_range(spec.min_serving_m..spec.max_serving_m)
            } else {
                spec.min_serving_m
            };
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let pos = [bs[0] + r * phi.cos(), bs[1] + r * phi.sin()];
            let row: Vec<f64> = (0..spec.n_cells).map(|b| if b == c { r } else { layout.distance(pos, b) }).collect();
            serving.push(r);
            cross.push(row);
        }
        distances_serving.push(serving);
        distances_cross.push(cross);
    }
    Ok(Configuration {
        n_cells: spec.n_cells,
        n_ues_per_cell: spec.n_ues_per_cell,
        n_rx: spec.n_rx,
        n_tx: spec.n_tx,
        distances_serving,
        distances_cross,
        carrier_freq_ghz: spec.carrier_freq_ghz,
        bs_height_m: spec.bs_height_m,
        ue_height_m: spec.ue_height_m,
        shadow_sigma_los_db: spec.shadow_sigma_los_db,
        shadow_sigma_nlos_db: spec.shadow_sigma_nlos_db,
        noise_power_db: spec.noise_power_db,
        p_max_dbm: spec.p_max_dbm,
        ricean_los_power_db: spec.ricean_los_power_db,
        scatter_power_db: spec.scatter_power_db,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts() {
        let cfg = sample_configuration(&ConfigSpec::default(), 3).unwrap();
        assert_eq!(cfg.n_cells, 3);
        assert_eq!(cfg.n_ues_per_cell, 10);
        assert_eq!(cfg.n_rx, 16);
        assert_eq!(cfg.n_tx, 4);
        assert_eq!(cfg.carrier_freq_ghz, 3.5);
        for c in 0..3 {
            for u in 0..10 {
                let d = cfg.distances_serving[c][u];
                assert!((18.0..=200.0).contains(&d));
                assert_eq!(cfg.distances_cross[c][u][c], d);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = ConfigSpec::default();
        let a = sample_configuration(&spec, 11).unwrap();
        let b = sample_configuration(&spec, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_kv_string(), b.to_kv_string());
        let c = sample_configuration(&spec, 12).unwrap();
        assert_ne!(a.distances_serving, c.distances_serving);
    }

    #[test]
    fn zero_ues_rejected() {
        let spec = ConfigSpec { n_ues_per_cell: 0, ..ConfigSpec::default() };
        assert!(matches!(sample_configuration(&spec, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn kv_round_trip() {
        let cfg = sample_configuration(&ConfigSpec::default(), 5).unwrap();
        let back = Configuration::from_kv_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn kv_missing_key() {
        assert!(matches!(Configuration::from_kv_str("n_cells=1\n"), Err(Error::Parse(_))));
    }
}
