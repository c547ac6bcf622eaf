//! Fully-connected networks with hand-written reverse mode.
//!
//! Parameters live in one flat vector, layer by layer, each layer as its
//! weight matrix (`out x in`, row-major) followed by its bias. Hidden layers
//! apply the activation; the output layer is linear.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MLP_MAGIC: [u8; 4] = *b"MLP1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Identity),
            _ => Err(Error::Parse(format!("unknown activation code {c}"))),
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
    activation: Activation,
}

/// Layer outputs of one forward pass, input first.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("at least the input layer")
    }
}

impl Mlp {
    pub fn param_count(layer_sizes: &[usize]) -> usize {
        layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn check_sizes(layer_sizes: &[usize]) -> Result<()> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes need an input and an output layer, all positive: {layer_sizes:?}"
            )));
        }
        Ok(())
    }

    /// All-zero parameters.
    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        Self::check_sizes(layer_sizes)?;
        Ok(Self { layer_sizes: layer_sizes.to_vec(), params: vec![0.0; Self::param_count(layer_sizes)], activation })
    }

    pub fn from_params(layer_sizes: &[usize], activation: Activation, params: Vec<f64>) -> Result<Self> {
        Self::check_sizes(layer_sizes)?;
        let expected = Self::param_count(layer_sizes);
        if params.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("network parameters must be finite".into()));
        }
        Ok(Self { layer_sizes: layer_sizes.to_vec(), params, activation })
    }

    /// Weights uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot<R: Rng + ?Sized>(layer_sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes, activation)?;
        let mut o = 0;
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut net.params[o..o + fan_in * fan_out] {
                *p = rng.random_range(-a..=a);
            }
            o += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), got: params.len() });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("checked at construction")
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        let n_layers = self.layer_sizes.len() - 1;
        let mut layers = Vec::with_capacity(n_layers + 1);
        layers.push(x.to_vec());
        let mut o = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &self.params[o..o + n_in * n_out];
            let b = &self.params[o + n_in * n_out..o + n_in * n_out + n_out];
            let input = &layers[l];
            let hidden = l + 1 < n_layers;
            let out: Vec<f64> = (0..n_out)
                .map(|j| {
                    let row = &w[j * n_in..(j + 1) * n_in];
                    let z = b[j] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                    if hidden {
                        self.activation.apply(z)
                    } else {
                        z
                    }
                })
                .collect();
            layers.push(out);
            o += n_in * n_out + n_out;
        }
        Ok(ForwardCache { layers })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.layers.pop().expect("output layer"))
    }

    /// Adds the gradient of `<upstream, output>` to `grad`.
    pub fn accumulate_gradient(&self, cache: &ForwardCache, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch { expected: self.output_dim(), got: upstream.len() });
        }
        if grad.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), got: grad.len() });
        }
        let n_layers = self.layer_sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut o = 0;
        for l in 0..n_layers {
            offsets.push(o);
            o += self.layer_sizes[l] * self.layer_sizes[l + 1] + self.layer_sizes[l + 1];
        }
        let mut delta = upstream.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let o = offsets[l];
            let input = &cache.layers[l];
            for j in 0..n_out {
                let d = delta[j];
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad[o + j * n_in..o + (j + 1) * n_in];
                for (gi, xi) in g.iter_mut().zip(input) {
                    *gi += d * xi;
                }
                grad[o + n_in * n_out + j] += d;
            }
            if l > 0 {
                let w = &self.params[o..o + n_in * n_out];
                let mut prev = vec![0.0; n_in];
                for j in 0..n_out {
                    let d = delta[j];
                    if d == 0.0 {
                        continue;
                    }
                    for (p, wij) in prev.iter_mut().zip(&w[j * n_in..(j + 1) * n_in]) {
                        *p += wij * d;
                    }
                }
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= self.activation.derivative_from_output(*a);
                }
                delta = prev;
            }
        }
        Ok(())
    }

    /// Gradient of `<upstream, forward(x)>` with respect to the parameters.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_cached(x)?;
        let mut g = vec![0.0; self.params.len()];
        self.accumulate_gradient(&cache, upstream, &mut g)?;
        Ok(g)
    }

    /// Header `MLP1`, activation code, layer count and sizes as u32, then the
    /// parameters as little-endian f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&MLP_MAGIC)?;
        w.write_all(&self.activation.code().to_le_bytes())?;
        w.write_all(&(self.layer_sizes.len() as u32).to_le_bytes())?;
        for s in &self.layer_sizes {
            w.write_all(&(*s as u32).to_le_bytes())?;
        }
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MLP_MAGIC {
            return Err(Error::Parse("bad network file magic".into()));
        }
        let mut b4 = [0u8; 4];
        let mut read_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut b4)?;
            Ok(u32::from_le_bytes(b4))
        };
        let activation = Activation::from_code(read_u32(&mut r)?)?;
        let n = read_u32(&mut r)? as usize;
        if n > 64 {
            return Err(Error::Parse(format!("implausible layer count {n}")));
        }
        let sizes = (0..n).map(|_| read_u32(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        Self::check_sizes(&sizes)?;
        let mut params = Vec::with_capacity(Self::param_count(&sizes));
        let mut b8 = [0u8; 8];
        for _ in 0..Self::param_count(&sizes) {
            r.read_exact(&mut b8)?;
            params.push(f64::from_le_bytes(b8));
        }
        Self::from_params(&sizes, activation, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
