use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Zero-mean normal with variance `2 / fan_in`, where `fan_in` counts
    /// every shared component reaching an output unit.
    VarianceScaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitSpec {
    pub scheme: InitScheme,
    pub seed: u64,
}

impl InitSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            scheme: InitScheme::VarianceScaled,
            seed,
        }
    }

    /// Independent stream per parameter name, so adding or removing one
    /// parameter never perturbs another's draw.
    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(name.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        ChaCha8Rng::from_seed(seed)
    }

    /// One component kernel `[O/n, C/n, k, k]` of an `n`-dimensional
    /// hypercomplex convolution; effective fan-in is `n * C/n * k * k`.
    pub fn conv_component<T: Real>(&self, name: &str, shape: [usize; 4], n: usize) -> Tensor<T> {
        let fan_in = (n * shape[1] * shape[2] * shape[3]) as f64;
        let std = (2.0 / fan_in).sqrt();
        let mut rng = self.rng_for(name);
        match self.scheme {
            InitScheme::VarianceScaled => Tensor::randn(&shape, std, &mut rng),
        }
    }

    /// A PHM block `S_i: [k/n, d/n]`, scaled by `1 / sqrt(n * d/n)`.
    pub fn phm_block<T: Real>(&self, name: &str, shape: [usize; 2], n: usize) -> Tensor<T> {
        let std = 1.0 / ((n * shape[1]) as f64).sqrt();
        Tensor::randn(&shape, std, &mut self.rng_for(name))
    }

    /// A real dense weight `[k, d]`.
    pub fn dense<T: Real>(&self, name: &str, shape: [usize; 2]) -> Tensor<T> {
        self.phm_block(name, shape, 1)
    }
}
