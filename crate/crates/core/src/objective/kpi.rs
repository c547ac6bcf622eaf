//! Sum spectral efficiency with interference treated as noise.
//!
//! For BS `b` let `R_b = n I + sum_{c,u} p_{c,u} H_{c,u,b} H_{c,u,b}^H` be the
//! total received covariance. For a UE `(b, u)` served by `b` the
//! noise-plus-interference covariance is `Gamma = R_b - p H H^H` and
//!
//! `log2 det(I + p Gamma^-1 H H^H) = -log2 det(I_T - p A^H A)`, `A = L^-1 H`,
//!
//! where `L` is the Cholesky factor of `R_b`. One factorization per BS then
//! serves every UE in the cell. When `I_T - p A^H A` is too close to singular
//! for the identity to be accurate, the rate falls back to an explicit `Gamma`.

use num_complex::Complex64;

use super::grid::OlpcPoint;
use super::power::{db_to_linear, tx_power_dbm, CL_DB};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_hermitian, forward_substitute, log2_det_from_cholesky};
use crate::sim::{Configuration, CsiDataset, CsiSample};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Smallest acceptable squared pivot of `I - p A^H A` before falling back.
const FAST_PATH_MIN_PIVOT: f64 = 1e-8;

/// Per-UE transmit powers in dBm, `[cell][ue]` flattened.
pub fn tx_powers_dbm(point: &OlpcPoint, csi: &CsiSample, config: &Configuration) -> Result<Vec<f64>> {
    let (nc, nu, _, _) = csi.shape();
    if point.p0_dbm.len() != nc || point.alpha.len() != nc {
        return Err(Error::DimensionMismatch { expected: nc, got: point.p0_dbm.len() });
    }
    let mut out = Vec::with_capacity(nc * nu);
    for c in 0..nc {
        for u in 0..nu {
            out.push(tx_power_dbm(
                point.p0_dbm[c],
                point.alpha[c],
                csi.serving_pathloss_db(c, u),
                CL_DB,
                config.p_max_dbm,
            ));
        }
    }
    Ok(out)
}

fn check_shape(csi: &CsiSample, config: &Configuration) -> Result<()> {
    let expected = (config.n_cells, config.n_ues_per_cell, config.n_rx, config.n_tx);
    if csi.shape() != expected {
        return Err(Error::InvalidArgument(format!(
            "CSI shape {:?} does not match configuration {:?}",
            csi.shape(),
            expected
        )));
    }
    Ok(())
}

/// `H H^H`, row-major `n_rx x n_rx`.
fn gram(h: &[Complex64], n_rx: usize, n_tx: usize) -> Vec<Complex64> {
    let mut g = vec![ZERO; n_rx * n_rx];
    for i in 0..n_rx {
        for j in 0..=i {
            let mut s = ZERO;
            for t in 0..n_tx {
                s += h[i * n_tx + t] * h[j * n_tx + t].conj();
            }
            g[i * n_rx + j] = s;
            g[j * n_rx + i] = s.conj();
        }
    }
    g
}

/// Noise-plus-interference covariance for UE `(cell, ue)` at its serving BS,
/// built term by term. Row-major `n_rx x n_rx`.
pub fn interference_covariance(
    point: &OlpcPoint,
    csi: &CsiSample,
    config: &Configuration,
    cell: usize,
    ue: usize,
) -> Result<Vec<Complex64>> {
    check_shape(csi, config)?;
    let powers = tx_powers_dbm(point, csi, config)?;
    Ok(explicit_gamma(csi, &powers, db_to_linear(config.noise_power_db), cell, ue))
}

fn explicit_gamma(csi: &CsiSample, powers_dbm: &[f64], noise: f64, cell: usize, ue: usize) -> Vec<Complex64> {
    let (nc, nu, nr, nt) = csi.shape();
    let mut gamma = vec![ZERO; nr * nr];
    for i in 0..nr {
        gamma[i * nr + i] = Complex64::new(noise, 0.0);
    }
    for c in 0..nc {
        for u in 0..nu {
            if c == cell && u == ue {
                continue;
            }
            let p = db_to_linear(powers_dbm[c * nu + u]);
            if p == 0.0 {
                continue;
            }
            let g = gram(csi.channel(c, u, cell), nr, nt);
            for (a, b) in gamma.iter_mut().zip(&g) {
                *a += b * p;
            }
        }
    }
    gamma
}

/// Rate of one UE from an explicit `Gamma`: `log2 det(I_T + p C^H C)`, `C = L_Gamma^-1 H`.
fn explicit_rate(gamma: &[Complex64], h: &[Complex64], p: f64, nr: usize, nt: usize) -> Result<f64> {
    let mut l = gamma.to_vec();
    if !cholesky_hermitian(&mut l, nr) {
        return Err(Error::InvalidArgument("interference covariance is not positive definite".into()));
    }
    let mut a = h.to_vec();
    forward_substitute(&l, nr, &mut a, nt);
    let mut m = vec![ZERO; nt * nt];
    for i in 0..nt {
        for j in 0..=i {
            let mut s = ZERO;
            for k in 0..nr {
                s += a[k * nt + i].conj() * a[k * nt + j];
            }
            m[i * nt + j] = s * p;
        }
        m[i * nt + i] += Complex64::new(1.0, 0.0);
    }
    if !cholesky_hermitian(&mut m, nt) {
        return Err(Error::InvalidArgument("rate matrix is not positive definite".into()));
    }
    Ok(log2_det_from_cholesky(&m, nt))
}

/// Precomputed Gram matrices for fast repeated KPI evaluation on one dataset.
#[derive(Debug)]
pub struct KpiEvaluator<'a> {
    config: &'a Configuration,
    dataset: &'a CsiDataset,
    /// Per sample, `[cell][ue][bs]` Grams of size `n_rx x n_rx`.
    grams: Vec<Vec<Complex64>>,
}

impl<'a> KpiEvaluator<'a> {
    pub fn new(config: &'a Configuration, dataset: &'a CsiDataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("empty CSI dataset".into()));
        }
        for s in &dataset.samples {
            check_shape(s, config)?;
        }
        let (nc, nu, nr, nt) = (config.n_cells, config.n_ues_per_cell, config.n_rx, config.n_tx);
        let grams = dataset
            .samples
            .iter()
            .map(|s| {
                let mut out = Vec::with_capacity(nc * nu * nc * nr * nr);
                for c in 0..nc {
                    for u in 0..nu {
                        for b in 0..nc {
                            out.extend(gram(s.channel(c, u, b), nr, nt));
                        }
                    }
                }
                out
            })
            .collect();
        Ok(Self { config, dataset, grams })
    }

    pub fn dataset(&self) -> &CsiDataset {
        self.dataset
    }

    pub fn config(&self) -> &Configuration {
        self.config
    }

    /// KPI of sample `s` under the given point.
    pub fn sample_kpi(&self, s: usize, point: &OlpcPoint) -> Result<f64> {
        let csi = &self.dataset.samples[s];
        let powers = tx_powers_dbm(point, csi, self.config)?;
        self.kpi_with_powers(s, &powers)
    }

    fn kpi_with_powers(&self, s: usize, powers_dbm: &[f64]) -> Result<f64> {
        let csi = &self.dataset.samples[s];
        let (nc, nu, nr, nt) = csi.shape();
        let noise = db_to_linear(self.config.noise_power_db);
        let lin: Vec<f64> = powers_dbm.iter().map(|p| db_to_linear(*p)).collect();
        let grams = &self.grams[s];
        let gsize = nr * nr;
        let mut total = 0.0;
        let mut r = vec![ZERO; gsize];
        let mut a = vec![ZERO; nr * nt];
        let mut m = vec![ZERO; nt * nt];
        for b in 0..nc {
            r.iter_mut().for_each(|z| *z = ZERO);
            for i in 0..nr {
                r[i * nr + i] = Complex64::new(noise, 0.0);
            }
            for c in 0..nc {
                for u in 0..nu {
                    let p = lin[c * nu + u];
                    if p == 0.0 {
                        continue;
                    }
                    let g = &grams[((c * nu + u) * nc + b) * gsize..][..gsize];
                    for i in 0..nr {
                        for j in 0..=i {
                            r[i * nr + j] += g[i * nr + j] * p;
                        }
                    }
                }
            }
            if !cholesky_hermitian(&mut r, nr) {
                return Err(Error::InvalidArgument(format!("received covariance at BS {b} is not positive definite")));
            }
            for u in 0..nu {
                let p = lin[b * nu + u];
                if p == 0.0 {
                    continue;
                }
                let h = csi.channel(b, u, b);
                a.copy_from_slice(h);
                forward_substitute(&r, nr, &mut a, nt);
                for i in 0..nt {
                    for j in 0..=i {
                        let mut s = ZERO;
                        for k in 0..nr {
                            s += a[k * nt + i].conj() * a[k * nt + j];
                        }
                        m[i * nt + j] = -s * p;
                    }
                    m[i * nt + i] += Complex64::new(1.0, 0.0);
                }
                let ok = cholesky_hermitian(&mut m, nt)
                    && (0..nt).all(|i| m[i * nt + i].re * m[i * nt + i].re > FAST_PATH_MIN_PIVOT);
                let rate = if ok {
                    -log2_det_from_cholesky(&m, nt)
                } else {
                    let gamma = explicit_gamma(csi, powers_dbm, noise, b, u);
                    explicit_rate(&gamma, h, p, nr, nt)?
                };
                total += rate.max(0.0);
            }
        }
        if !total.is_finite() {
            return Err(Error::InvalidArgument("non-finite KPI".into()));
        }
        Ok(total)
    }

    /// Mean KPI over every sample of the dataset.
    pub fn empirical(&self, point: &OlpcPoint) -> Result<f64> {
        let mut sum = 0.0;
        for s in 0..self.dataset.len() {
            sum += self.sample_kpi(s, point)?;
        }
        Ok(sum / self.dataset.len() as f64)
    }
}

/// KPI of one CSI sample.
pub fn kpi(point: &OlpcPoint, csi: &CsiSample, config: &Configuration) -> Result<f64> {
    check_shape(csi, config)?;
    let (nc, nu, nr, nt) = csi.shape();
    let powers = tx_powers_dbm(point, csi, config)?;
    let noise = db_to_linear(config.noise_power_db);
    let mut total = 0.0;
    for c in 0..nc {
        for u in 0..nu {
            let p = db_to_linear(powers[c * nu + u]);
            if p == 0.0 {
                continue;
            }
            let gamma = explicit_gamma(csi, &powers, noise, c, u);
            total += explicit_rate(&gamma, csi.channel(c, u, c), p, nr, nt)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::grid::OlpcGrid;
    use crate::sim::{draw_csi, sample_configuration, ConfigSpec};

    fn small() -> (Configuration, CsiDataset) {
        let spec = ConfigSpec { n_cells: 2, n_ues_per_cell: 3, n_rx: 4, n_tx: 2, ..ConfigSpec::default() };
        let cfg = sample_configuration(&spec, 3).unwrap();
        let ds = draw_csi(&cfg, 4, 5).unwrap();
        (cfg, ds)
    }

    #[test]
    fn fast_path_matches_explicit() {
        let (cfg, ds) = small();
        let ev = KpiEvaluator::new(&cfg, &ds).unwrap();
        let grid = OlpcGrid::shared(2);
        for idx in [0, 100, 400, 600, 800, 911] {
            let pt = grid.point(idx).unwrap();
            for s in 0..ds.len() {
                let a = ev.sample_kpi(s, &pt).unwrap();
                let b = kpi(&pt, &ds.samples[s], &cfg).unwrap();
                assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0), "idx {idx}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_power_gives_zero_kpi() {
        let (cfg, ds) = small();
        let pt = OlpcPoint { p0_dbm: vec![f64::NEG_INFINITY; 2], alpha: vec![0.0; 2], grid_index: 0 };
        assert_eq!(kpi(&pt, &ds.samples[0], &cfg).unwrap(), 0.0);
        let ev = KpiEvaluator::new(&cfg, &ds).unwrap();
        assert_eq!(ev.empirical(&pt).unwrap(), 0.0);
    }
}
