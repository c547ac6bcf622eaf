//! GP priors expressed through a feature map.
//!
//! Every prior used here has unit signal variance and a squared-exponential
//! kernel on some feature map: `k(x, x') = exp(-||phi(x) - phi(x')||^2)`.
//! The RBF kernel `exp(-||x - x'||^2 / (2 l^2))` is the case `phi(x) = x / (sqrt(2) l)`.

/// Lengthscale of the default RBF prior on scaled grid inputs.
pub const DEFAULT_RBF_LENGTHSCALE: f64 = 0.76;

pub trait FeaturePrior {
    fn input_dim(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn mean(&self, x: &[f64]) -> f64;
    fn features(&self, x: &[f64]) -> Vec<f64>;
}

/// `exp(-||a - b||^2)`.
pub fn feature_kernel(a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RbfPrior {
    pub lengthscale: f64,
    pub mean: f64,
    pub input_dim: usize,
}

impl RbfPrior {
    pub fn new(input_dim: usize, lengthscale: f64, mean: f64) -> Self {
        Self { lengthscale, mean, input_dim }
    }

    pub fn kernel(&self, x: &[f64], y: &[f64]) -> f64 {
        feature_kernel(&self.features(x), &self.features(y))
    }
}

impl FeaturePrior for RbfPrior {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn feature_dim(&self) -> usize {
        self.input_dim
    }

    fn mean(&self, _x: &[f64]) -> f64 {
        self.mean
    }

    fn features(&self, x: &[f64]) -> Vec<f64> {
        let s = 1.0 / (std::f64::consts::SQRT_2 * self.lengthscale);
        x.iter().map(|v| v * s).collect()
    }
}

/// Prior mean and features of every arm, precomputed once per prior.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmTable {
    means: Vec<f64>,
    features: Vec<f64>,
    dim: usize,
}

impl ArmTable {
    pub fn from_prior<P: FeaturePrior + ?Sized>(prior: &P, inputs: &[Vec<f64>]) -> Self {
        let dim = prior.feature_dim();
        let mut means = Vec::with_capacity(inputs.len());
        let mut features = Vec::with_capacity(inputs.len() * dim);
        for x in inputs {
            means.push(prior.mean(x));
            features.extend(prior.features(x));
        }
        Self { means, features, dim }
    }

    pub fn from_parts(means: Vec<f64>, features: Vec<f64>, dim: usize) -> Self {
        assert_eq!(means.len() * dim, features.len());
        Self { means, features, dim }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self, arm: usize) -> f64 {
        self.means[arm]
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn feature(&self, arm: usize) -> &[f64] {
        &self.features[arm * self.dim..(arm + 1) * self.dim]
    }

    pub fn kernel(&self, a: usize, b: usize) -> f64 {
        feature_kernel(self.feature(a), self.feature(b))
    }
}
