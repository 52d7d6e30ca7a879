//! Finite atomic measures with an overlap oracle.
//!
//! Everything downstream (cluster search, replica sampling, identity tests)
//! sees its input through this trait: a list of atoms with masses summing to
//! one and a symmetric pairwise overlap bounded by 1 in absolute value. Both
//! cascade embeddings and Gibbs measures implement it.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MeasureError {
    #[error("measure has no atoms with positive mass")]
    EmptySupport,
    #[error("masses sum to {total}, expected 1 within {tol}")]
    NotNormalized { total: f64, tol: f64 },
}

pub trait AtomicMeasure {
    fn n_atoms(&self) -> usize;

    fn mass(&self, i: usize) -> f64;

    /// Symmetric, in [-1, 1]; the diagonal is the atom's self-overlap.
    fn overlap(&self, i: usize, j: usize) -> f64;

    fn self_overlap(&self, i: usize) -> f64 {
        self.overlap(i, i)
    }

    fn total_mass(&self) -> f64 {
        (0..self.n_atoms()).map(|i| self.mass(i)).sum()
    }
}

/// Checks normalization to the given tolerance and nonempty support.
pub fn validate_measure(m: &impl AtomicMeasure, tol: f64) -> Result<(), MeasureError> {
    if m.n_atoms() == 0 || (0..m.n_atoms()).all(|i| m.mass(i) <= 0.0) {
        return Err(MeasureError::EmptySupport);
    }
    let total = m.total_mass();
    if (total - 1.0).abs() > tol {
        return Err(MeasureError::NotNormalized { total, tol });
    }
    Ok(())
}

/// Cumulative-mass table for drawing atoms by mass.
pub struct AtomSampler {
    cdf: Vec<f64>,
}

impl AtomSampler {
    pub fn new(m: &impl AtomicMeasure) -> Result<Self, MeasureError> {
        let mut cdf = Vec::with_capacity(m.n_atoms());
        let mut acc = 0.0;
        for i in 0..m.n_atoms() {
            acc += m.mass(i).max(0.0);
            cdf.push(acc);
        }
        if cdf.last().copied().unwrap_or(0.0) <= 0.0 {
            return Err(MeasureError::EmptySupport);
        }
        Ok(AtomSampler { cdf })
    }

    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        let total = *self.cdf.last().expect("nonempty");
        let u: f64 = rng.gen::<f64>() * total;
        // First index with cdf > u; zero-mass atoms are never returned.
        match self.cdf.binary_search_by(|c| {
            c.partial_cmp(&u).expect("finite cdf").then(std::cmp::Ordering::Less)
        }) {
            Ok(i) | Err(i) => i.min(self.cdf.len() - 1),
        }
    }
}

/// Atoms given as explicit vectors; the oracle is the dot product.
#[derive(Debug, Clone)]
pub struct VectorMeasure {
    pub vectors: Vec<Vec<f64>>,
    pub masses: Vec<f64>,
}

impl AtomicMeasure for VectorMeasure {
    fn n_atoms(&self) -> usize {
        self.masses.len()
    }

    fn mass(&self, i: usize) -> f64 {
        self.masses[i]
    }

    fn overlap(&self, i: usize, j: usize) -> f64 {
        self.vectors[i]
            .iter()
            .zip(&self.vectors[j])
            .map(|(a, b)| a * b)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_point() -> VectorMeasure {
        VectorMeasure {
            vectors: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            masses: vec![0.25, 0.75],
        }
    }

    #[test]
    fn validation_accepts_normalized_and_rejects_empty() {
        assert!(validate_measure(&two_point(), 1e-12).is_ok());
        let empty = VectorMeasure {
            vectors: vec![],
            masses: vec![],
        };
        assert_eq!(validate_measure(&empty, 1e-12), Err(MeasureError::EmptySupport));
        let off = VectorMeasure {
            vectors: vec![vec![1.0]],
            masses: vec![0.9],
        };
        assert!(matches!(
            validate_measure(&off, 1e-12),
            Err(MeasureError::NotNormalized { .. })
        ));
    }

    #[test]
    fn sampler_frequencies_match_masses() {
        let m = two_point();
        let sampler = AtomSampler::new(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let hits = (0..n).filter(|_| sampler.draw(&mut rng) == 1).count();
        let p = hits as f64 / n as f64;
        // 3 sigma around 0.75 at n = 1e5.
        assert!((p - 0.75).abs() < 3.0 * (0.75f64 * 0.25 / n as f64).sqrt());
    }

    #[test]
    fn sampler_skips_zero_mass_atoms() {
        let m = VectorMeasure {
            vectors: vec![vec![1.0], vec![1.0], vec![1.0]],
            masses: vec![0.0, 1.0, 0.0],
        };
        let sampler = AtomSampler::new(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| sampler.draw(&mut rng) == 1));
    }

    #[test]
    fn overlap_oracle_is_symmetric() {
        let m = two_point();
        assert_eq!(m.overlap(0, 1), m.overlap(1, 0));
        assert_eq!(m.self_overlap(0), 1.0);
    }
}
