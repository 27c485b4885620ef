//! Synthetic observations with a known low-dimensional cause.
//!
//! `x = tanh(A z*) + noise`, with `z*` drawn from a labelled 2-D mixture and
//! `A` a fixed random `2 -> data_dim` map. `z*` doubles as the paired feature
//! `phi(x)` for the pairwise-alignment baseline, and its component label as the
//! class used for guidance.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::reference::{Gmm, ReferenceDistribution};
use crate::rng::{self, Rng};
use crate::{Array, Error, Result};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ToyDataSpec {
    pub data_dim: usize,
    /// Distribution of the hidden cause `z*`.
    pub source: ReferenceDistribution,
    pub noise: f64,
    /// Seed of the mixing map `A`.
    pub map_seed: u64,
}

impl Default for ToyDataSpec {
    fn default() -> Self {
        Self {
            data_dim: 16,
            source: ReferenceDistribution::Gmm(grid8()),
            noise: 0.05,
            map_seed: 7,
        }
    }
}

/// Eight blobs of std 0.15 on a 4 x 2 grid with unit spacing.
pub fn grid8() -> Gmm {
    let means = (0..8)
        .map(|k| vec![(k % 4) as f64 - 1.5, (k / 4) as f64 - 0.5])
        .collect();
    Gmm::isotropic(vec![0.125; 8], means, 0.15)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyBatch {
    pub x: Array,
    /// The hidden cause `z*`, one row per sample.
    pub features: Array,
    pub labels: Option<Vec<usize>>,
}

impl ToyBatch {
    pub fn classes(&self) -> Vec<Option<usize>> {
        match &self.labels {
            Some(l) => l.iter().map(|&c| Some(c)).collect(),
            None => vec![None; self.x.rows()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyData {
    pub spec: ToyDataSpec,
    /// `latent_dim x data_dim`.
    pub map: Array,
}

impl ToyData {
    pub fn new(spec: ToyDataSpec) -> Result<Self> {
        spec.source.validate()?;
        if spec.data_dim == 0 || !(spec.noise >= 0.0) {
            return Err(Error::InvalidSpec("toy data needs data_dim > 0 and noise >= 0".into()));
        }
        let k = spec.source.dim();
        let scale = 1.0 / math::sqrt(k as f64);
        let map = rng::normal_array(&mut rng::seeded(spec.map_seed), k, spec.data_dim).scale(scale);
        Ok(Self { spec, map })
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.spec.source.num_classes()
    }

    /// Noise-free observation of given causes.
    pub fn observe(&self, features: &Array) -> Result<Array> {
        Ok(features.matmul(&self.map)?.map(math::tanh))
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<ToyBatch> {
        let s = self.spec.source.sample(n, rng)?;
        let mut x = self.observe(&s.points)?;
        let noise = rng::normal_array(rng, n, self.spec.data_dim);
        x.axpy(self.spec.noise, &noise)?;
        Ok(ToyBatch {
            x,
            features: s.points,
            labels: s.labels,
        })
    }
}
