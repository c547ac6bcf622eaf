//! CSI datasets: per-link MIMO channel draws.
//!
//! Each link `(cell, ue) -> bs_cell` gets, independently per sample, a
//! Bernoulli LOS state, a UMi pathloss for that state, log-normal shadowing
//! `beta = 10^(X/20)` with `X ~ N(0, sigma_dB)`, and small-scale fading `G`:
//!
//! * NLOS: i.i.d. `CN(0, v)` entries with `v = 10^(scatter_power_db/10)` (Rayleigh).
//! * LOS: `sqrt(P_los) * a b^H + CN(0, v)` where `a`, `b` are unit-modulus
//!   random-phase vectors and `P_los = 10^(ricean_los_power_db/10)` (Ricean).
//!
//! The channel is `H = 10^(-PL/20) * beta * G`.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::channel::{los_probability, pathloss_db};
use super::config::Configuration;
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, SimRng};

pub const CSI_MAGIC: [u8; 4] = *b"CSI1";

/// One channel realization for every link in the network.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiSample {
    n_cells: usize,
    n_ues: usize,
    n_rx: usize,
    n_tx: usize,
    /// Flattened `[cell][ue][bs_cell][rx][tx]`.
    channels: Vec<Complex64>,
    /// `[cell][ue]`, pathloss of the serving link used by power control.
    serving_pathloss_db: Vec<f64>,
}

impl CsiSample {
    pub fn new(
        n_cells: usize,
        n_ues: usize,
        n_rx: usize,
        n_tx: usize,
        channels: Vec<Complex64>,
        serving_pathloss_db: Vec<f64>,
    ) -> Result<Self> {
        let expected = n_cells * n_ues * n_cells * n_rx * n_tx;
        if channels.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: channels.len() });
        }
        if serving_pathloss_db.len() != n_cells * n_ues {
            return Err(Error::DimensionMismatch { expected: n_cells * n_ues, got: serving_pathloss_db.len() });
        }
        Ok(Self { n_cells, n_ues, n_rx, n_tx, channels, serving_pathloss_db })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n_cells, self.n_ues, self.n_rx, self.n_tx)
    }

    fn offset(&self, cell: usize, ue: usize, bs: usize) -> usize {
        ((cell * self.n_ues + ue) * self.n_cells + bs) * self.n_rx * self.n_tx
    }

    /// Row-major `n_rx x n_tx` channel from UE `(cell, ue)` to BS `bs`.
    pub fn channel(&self, cell: usize, ue: usize, bs: usize) -> &[Complex64] {
        let o = self.offset(cell, ue, bs);
        &self.channels[o..o + self.n_rx * self.n_tx]
    }

    pub fn serving_pathloss_db(&self, cell: usize, ue: usize) -> f64 {
        self.serving_pathloss_db[cell * self.n_ues + ue]
    }

    pub fn matrix_count(&self) -> usize {
        self.n_cells * self.n_ues * self.n_cells
    }

    pub fn is_finite(&self) -> bool {
        self.channels.iter().all(|z| z.re.is_finite() && z.im.is_finite())
            && self.serving_pathloss_db.iter().all(|p| p.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsiDataset {
    pub samples: Vec<CsiSample>,
}

impl CsiDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Writes the 16-byte header (magic, N_C, N_U, N_R, N_T as u16, S as u32),
    /// then every channel entry as little-endian complex64 (f32 re, f32 im) in
    /// `[sample][cell][ue][bs][rx][tx]` order, then the serving pathlosses as
    /// little-endian f32 in `[sample][cell][ue]` order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let first =
            self.samples.first().ok_or_else(|| Error::InvalidArgument("cannot write an empty dataset".into()))?;
        let (nc, nu, nr, nt) = first.shape();
        let dims = [nc, nu, nr, nt];
        if dims.iter().any(|d| *d > u16::MAX as usize) || self.len() > u32::MAX as usize {
            return Err(Error::InvalidArgument("dataset too large for header".into()));
        }
        w.write_all(&CSI_MAGIC)?;
        for d in dims {
            w.write_all(&(d as u16).to_le_bytes())?;
        }
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for s in &self.samples {
            if s.shape() != first.shape() {
                return Err(Error::InvalidArgument("samples differ in shape".into()));
            }
            for z in &s.channels {
                w.write_all(&(z.re as f32).to_le_bytes())?;
                w.write_all(&(z.im as f32).to_le_bytes())?;
            }
        }
        for s in &self.samples {
            for p in &s.serving_pathloss_db {
                w.write_all(&(*p as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if header[0..4] != CSI_MAGIC {
            return Err(Error::Parse("bad CSI magic".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes([header[i], header[i + 1]]) as usize;
        let (nc, nu, nr, nt) = (u16_at(4), u16_at(6), u16_at(8), u16_at(10));
        let s = u32::from_le_bytes([header[12], header[13], header[14], header[15]]) as usize;
        let per = nc * nu * nc * nr * nt;
        let mut buf = [0u8; 4];
        let mut read_f32 = |r: &mut R| -> Result<f32> {
            r.read_exact(&mut buf)?;
            Ok(f32::from_le_bytes(buf))
        };
        let mut channels = Vec::with_capacity(s);
        for _ in 0..s {
            let mut ch = Vec::with_capacity(per);
            for _ in 0..per {
                let re = read_f32(&mut r)? as f64;
                let im = read_f32(&mut r)? as f64;
                ch.push(Complex64::new(re, im));
            }
            channels.push(ch);
        }
        let mut samples = Vec::with_capacity(s);
        for ch in channels {
            let mut pl = Vec::with_capacity(nc * nu);
            for _ in 0..nc * nu {
                pl.push(read_f32(&mut r)? as f64);
            }
            samples.push(CsiSample::new(nc, nu, nr, nt, ch, pl)?);
        }
        Ok(Self { samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_binary(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_binary(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Scales a fading matrix by pathloss and shadowing amplitude.
pub fn compose_channel(pathloss_db: f64, shadow_amplitude: f64, fading: &[Complex64]) -> Vec<Complex64> {
    let a = 10f64.powf(-pathloss_db / 20.0) * shadow_amplitude;
    fading.iter().map(|g| g * a).collect()
}

fn complex_gaussian(rng: &mut SimRng, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

/// Rayleigh fading: i.i.d. `CN(0, variance)` entries.
pub fn rayleigh_fading(rng: &mut SimRng, n_rx: usize, n_tx: usize, variance: f64) -> Vec<Complex64> {
    (0..n_rx * n_tx).map(|_| complex_gaussian(rng, variance)).collect()
}

/// Ricean fading: rank-one random-phase LOS component of power `los_power`
/// per entry plus `CN(0, scatter_variance)` scattering.
pub fn ricean_fading(
    rng: &mut SimRng,
    n_rx: usize,
    n_tx: usize,
    los_power: f64,
    scatter_variance: f64,
) -> Vec<Complex64> {
    let a: Vec<Complex64> =
        (0..n_rx).map(|_| Complex64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU))).collect();
    let b: Vec<Complex64> =
        (0..n_tx).map(|_| Complex64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU))).collect();
    let amp = los_power.sqrt();
    let mut g = Vec::with_capacity(n_rx * n_tx);
    for ar in &a {
        for bt in &b {
            g.push(ar * bt.conj() * amp + complex_gaussian(rng, scatter_variance));
        }
    }
    g
}

fn draw_sample(config: &Configuration, rng: &mut SimRng) -> Result<CsiSample> {
    let (nc, nu, nr, nt) = (config.n_cells, config.n_ues_per_cell, config.n_rx, config.n_tx);
    let scatter = 10f64.powf(config.scatter_power_db / 10.0);
    let los_power = 10f64.powf(config.ricean_los_power_db / 10.0);
    let shadow_los = Normal::new(0.0, config.shadow_sigma_los_db).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let shadow_nlos = Normal::new(0.0, config.shadow_sigma_nlos_db).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut channels = Vec::with_capacity(nc * nu * nc * nr * nt);
    let mut serving_pl = vec![0.0; nc * nu];
    for c in 0..nc {
        for u in 0..nu {
            for b in 0..nc {
                let d2 = config.distances_cross[c][u][b].max(1e-3);
                let d3 = config.distance_3d(c, u, b).max(1e-3);
                let los = rng.random::<f64>() < los_probability(d2)?;
                let pl = pathloss_db(d3, config.carrier_freq_ghz, config.ue_height_m, los)?;
                let x_db: f64 = if los { shadow_los.sample(rng) } else { shadow_nlos.sample(rng) };
                let beta = 10f64.powf(x_db / 20.0);
                let g = if los {
                    ricean_fading(rng, nr, nt, los_power, scatter)
                } else {
                    rayleigh_fading(rng, nr, nt, scatter)
                };
                channels.extend(compose_channel(pl, beta, &g));
                if b == c {
                    serving_pl[c * nu + u] = pl;
                }
            }
        }
    }
    CsiSample::new(nc, nu, nr, nt, channels, serving_pl)
}

/// Draws `n_samples` independent CSI realizations for `config`.
pub fn draw_csi(config: &Configuration, n_samples: usize, seed: u64) -> Result<CsiDataset> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    config.validate()?;
    let mut rng = rng_from_seed(seed);
    let samples = (0..n_samples).map(|_| draw_sample(config, &mut rng)).collect::<Result<Vec<_>>>()?;
    Ok(CsiDataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::config::{sample_configuration, ConfigSpec};

    fn small_spec() -> ConfigSpec {
        ConfigSpec { n_cells: 2, n_ues_per_cell: 3, n_rx: 4, n_tx: 2, ..ConfigSpec::default() }
    }

    #[test]
    fn dataset_size_and_shape() {
        let cfg = sample_configuration(&ConfigSpec::default(), 1).unwrap();
        let ds = draw_csi(&cfg, 100, 2).unwrap();
        assert_eq!(ds.len(), 100);
        for s in &ds.samples {
            assert_eq!(s.matrix_count(), 3 * 10 * 3);
            assert_eq!(s.channel(2, 9, 1).len(), 16 * 4);
            assert!(s.is_finite());
        }
    }

    #[test]
    fn reproducible_and_seed_sensitive() {
        let cfg = sample_configuration(&small_spec(), 4).unwrap();
        let a = draw_csi(&cfg, 5, 9).unwrap();
        let b = draw_csi(&cfg, 5, 9).unwrap();
        assert_eq!(a, b);
        let c = draw_csi(&cfg, 5, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_samples_rejected() {
        let cfg = sample_configuration(&small_spec(), 4).unwrap();
        assert!(draw_csi(&cfg, 0, 0).is_err());
    }

    #[test]
    fn pathloss_scaling() {
        let g = vec![Complex64::new(0.3, -1.2), Complex64::new(2.0, 0.5)];
        let h1 = compose_channel(80.0, 1.7, &g);
        let h2 = compose_channel(100.0, 1.7, &g);
        for (a, b) in h1.iter().zip(&h2) {
            assert!((b.norm() / a.norm() - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn rayleigh_power_matches_configured_variance() {
        let mut rng = rng_from_seed(123);
        let v = 10f64.powf(-13.5 / 10.0);
        let n = 100_000;
        let g = rayleigh_fading(&mut rng, 1, n, v);
        let p = g.iter().map(|z| z.norm_sqr()).sum::<f64>() / n as f64;
        assert!((p / v - 1.0).abs() < 0.05, "power {p} vs {v}");
    }

    #[test]
    fn ricean_power() {
        let mut rng = rng_from_seed(5);
        let v = 10f64.powf(-13.5 / 10.0);
        let los = 10f64.powf(-0.2 / 10.0);
        let mut total = 0.0;
        let n = 20_000;
        for _ in 0..n {
            total += ricean_fading(&mut rng, 2, 2, los, v).iter().map(|z| z.norm_sqr()).sum::<f64>() / 4.0;
        }
        let p = total / n as f64;
        assert!((p / (los + v) - 1.0).abs() < 0.02);
    }

    #[test]
    fn binary_round_trip() {
        let cfg = sample_configuration(&small_spec(), 4).unwrap();
        let ds = draw_csi(&cfg, 3, 1).unwrap();
        let mut buf = Vec::new();
        ds.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"CSI1");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 2);
        assert_eq!(u16::from_le_bytes([buf[6], buf[7]]), 3);
        assert_eq!(u16::from_le_bytes([buf[8], buf[9]]), 4);
        assert_eq!(u16::from_le_bytes([buf[10], buf[11]]), 2);
        assert_eq!(u32::from_le_bytes([buf[12], buf[13], buf[14], buf[15]]), 3);
        assert_eq!(buf.len(), 16 + 3 * (2 * 3 * 2 * 4 * 2) * 8 + 3 * 6 * 4);
        let back = CsiDataset::read_binary(&buf[..]).unwrap();
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            for (x, y) in a.channels.iter().zip(&b.channels) {
                assert_eq!((x.re as f32, x.im as f32), (y.re as f32, y.im as f32));
            }
        }
        assert!(CsiDataset::read_binary(&b"XXXX0000000000000000"[..]).is_err());
    }
}
