//! Feature extractors and their frozen snapshots.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpSpec, Parameterized};
use crate::rng::Rng;
use crate::tensor::Matrix;

/// Anything that maps a batch of inputs (rows) to a batch of features.
///
/// Implementations take `&self`, so a map handed out as `&dyn FeatureMap`
/// cannot change while it is being read.
pub trait FeatureMap: Send + Sync {
    fn input_dim(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn embed(&self, x: &Matrix) -> Result<Matrix>;
}

/// Trainable MLP backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub(crate) net: Mlp,
}

impl FeatureExtractor {
    pub fn new(spec: MlpSpec, rng: &mut Rng) -> Result<Self> {
        Ok(FeatureExtractor { net: Mlp::new(spec, rng)? })
    }

    pub fn from_mlp(net: Mlp) -> Self {
        FeatureExtractor { net }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn snapshot(&self) -> FrozenExtractor {
        snapshot(self)
    }
}

impl FeatureMap for FeatureExtractor {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn feature_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn embed(&self, x: &Matrix) -> Result<Matrix> {
        self.net.forward(x)
    }
}

/// Immutable copy of an extractor at a task boundary.
#[derive(Debug, Clone)]
pub struct FrozenExtractor {
    net: Arc<Mlp>,
    fingerprint: [u8; 32],
}

/// Deep copy of the extractor's current parameters.
pub fn snapshot(extractor: &FeatureExtractor) -> FrozenExtractor {
    let net = extractor.net.clone();
    let fingerprint = fingerprint(&net);
    FrozenExtractor {
        net: Arc::new(net),
        fingerprint,
    }
}

impl FrozenExtractor {
    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    /// SHA-256 over the parameter bits, fixed at snapshot time.
    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    /// A trainable copy seeded from this snapshot.
    pub fn thaw(&self) -> FeatureExtractor {
        FeatureExtractor {
            net: (*self.net).clone(),
        }
    }
}

impl PartialEq for FrozenExtractor {
    fn eq(&self, other: &Self) -> bool {
        self.fingerprint == other.fingerprint && self.net == other.net
    }
}

impl FeatureMap for FrozenExtractor {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn feature_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn embed(&self, x: &Matrix) -> Result<Matrix> {
        self.net.forward(x)
    }
}

pub fn fingerprint(model: &impl Parameterized) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in model.params() {
        h.update((p.len() as u64).to_le_bytes());
        for v in p {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().into()
}

/// `f(x) = x`.
#[derive(Debug, Clone, Copy)]
pub struct IdentityMap(pub usize);

impl FeatureMap for IdentityMap {
    fn input_dim(&self) -> usize {
        self.0
    }

    fn feature_dim(&self) -> usize {
        self.0
    }

    fn embed(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.0 {
            return Err(Error::dim(format!("identity map of dim {} given {} columns", self.0, x.cols())));
        }
        Ok(x.clone())
    }
}

/// `f(x) = A·g(x) + b` for an inner map `g`.
pub struct AffineAfter<M> {
    pub inner: M,
    /// `out × g.feature_dim()`
    pub matrix: Matrix,
    pub offset: Option<Vec<f64>>,
}

impl<M: FeatureMap> FeatureMap for AffineAfter<M> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn feature_dim(&self) -> usize {
        self.matrix.rows()
    }

    fn embed(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = self.inner.embed(x)?.matmul_t(&self.matrix)?;
        if let Some(b) = &self.offset {
            y.add_row_broadcast(b)?;
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    fn extractor() -> FeatureExtractor {
        FeatureExtractor::new(
            MlpSpec {
                input_dim: 4,
                hidden: vec![8],
                output_dim: 3,
                final_relu: false,
            },
            &mut SeedTree(5).rng(),
        )
        .unwrap()
    }

    #[test]
    fn snapshot_forward_equality_and_immutability() {
        let mut f = extractor();
        let x = Matrix::from_rows(&[[1.0, 0.5, -0.5, 2.0], [0.0, 1.0, 1.0, -1.0]]).unwrap();
        let snap = snapshot(&f);
        assert_eq!(snap.embed(&x).unwrap(), f.embed(&x).unwrap());
        let before = snap.embed(&x).unwrap();
        let fp = snap.fingerprint();
        for p in f.mlp_mut().params_mut() {
            p.iter_mut().for_each(|v| *v += 1.0);
        }
        assert_eq!(snap.embed(&x).unwrap(), before);
        assert_eq!(fingerprint(snap.mlp()), fp);
        assert_ne!(snap.embed(&x).unwrap(), f.embed(&x).unwrap());
        let snap2 = snapshot(&snap.thaw());
        assert_eq!(snap2, snap);
        assert_eq!(snap2.embed(&x).unwrap(), before);
    }
}
