use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};

/// Draws `P` distinct identities and `K` images of each per batch. Identities
/// with fewer than `K` images are sampled with replacement.
#[derive(Clone, Debug)]
pub struct PkSampler {
    by_label: Vec<Vec<usize>>,
    p: usize,
    k: usize,
}

impl PkSampler {
    /// `labels` are dense class indices, one per dataset item.
    pub fn new(labels: &[usize], p: usize, k: usize) -> Result<Self> {
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut by_label = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            by_label[l].push(i);
        }
        by_label.retain(|v| !v.is_empty());
        if p == 0 || k == 0 {
            return Err(Error::Config("sampler needs P and K of at least 1".into()));
        }
        if by_label.len() < p {
            return Err(Error::Config(format!(
                "batch needs {p} identities but the training set has {}",
                by_label.len()
            )));
        }
        Ok(PkSampler { by_label, p, k })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    /// Dataset indices of one batch, grouped by identity.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.by_label.len()).collect();
        let (chosen, _) = order.partial_shuffle(rng, self.p);
        let mut out = Vec::with_capacity(self.batch_size());
        for &c in chosen.iter() {
            let pool = &self.by_label[c];
            if pool.len() >= self.k {
                out.extend(pool.choose_multiple(rng, self.k).copied());
            } else {
                out.extend((0..self.k).map(|_| *pool.choose(rng).expect("non-empty pool")));
            }
        }
        out
    }
}
