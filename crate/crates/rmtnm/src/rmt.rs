//! Sampling of Gaussian-unitary-ensemble matrices with reproducible,
//! independently seeded random streams.

use ndarray::Array2;
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RmtError {
    #[error("matrix dimension must be at least 1")]
    InvalidDimension,
}

/// One independent random stream per ensemble realization.
///
/// ChaCha streams are counter based, so realizations can be generated in any
/// order (or in parallel) and still yield bit-identical matrices for the same
/// `(master_seed, realization_index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeededStream {
    pub master_seed: u64,
    pub realization_index: u64,
}

impl SeededStream {
    pub fn new(master_seed: u64, realization_index: u64) -> Self {
        Self {
            master_seed,
            realization_index,
        }
    }

    /// A fresh generator positioned at the start of this realization's stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.realization_index);
        rng
    }
}

/// Hermitian random matrix with GUE entry statistics.
///
/// Normalization: diagonal entries are real N(0, 1), off-diagonal entries are
/// complex with independent N(0, 1/2) real and imaginary parts, so that
/// `<|M_ij|^2>` = 1 for every entry.
#[derive(Debug, Clone)]
pub struct GueMatrix {
    dim: usize,
    entries: Array2<C64>,
}

impl GueMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &Array2<C64> {
        &self.entries
    }

    pub fn into_entries(self) -> Array2<C64> {
        self.entries
    }

    /// Largest absolute deviation from Hermiticity, `max |M - M^dag|`.
    pub fn hermiticity_defect(&self) -> f64 {
        let m = &self.entries;
        let mut worst = 0.0f64;
        for i in 0..self.dim {
            for j in 0..self.dim {
                let d = (m[[i, j]] - m[[j, i]].conj()).norm();
                worst = worst.max(d);
            }
        }
        worst
    }
}

/// Draw one GUE matrix from `rng`.
///
/// The entry order is fixed (diagonal first within each row, then the upper
/// triangle), which pins the mapping from stream position to matrix entries.
pub fn sample_gue_with<R: Rng>(dim: usize, rng: &mut R) -> Result<GueMatrix, RmtError> {
    if dim == 0 {
        return Err(RmtError::InvalidDimension);
    }
    let mut m = Array2::<C64>::zeros((dim, dim));
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..dim {
        let d: f64 = rng.sample(StandardNormal);
        m[[i, i]] = C64::new(d, 0.0);
        for j in (i + 1)..dim {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            let v = C64::new(re * inv_sqrt2, im * inv_sqrt2);
            m[[i, j]] = v;
            m[[j, i]] = v.conj();
        }
    }
    Ok(GueMatrix { dim, entries: m })
}

/// Draw one GUE matrix from the start of a seeded stream.
pub fn sample_gue(dim: usize, stream: &SeededStream) -> Result<GueMatrix, RmtError> {
    let mut rng = stream.rng();
    sample_gue_with(dim, &mut rng)
}

/// Deterministic factor that rescales a raw GUE matrix to unit mean level
/// spacing at the center of its spectrum.
///
/// The raw semicircle density at the center is sqrt(dim)/pi levels per unit
/// energy; multiplying the matrix by this same factor stretches the spectrum
/// so that the center density becomes 1.
pub fn unit_spacing_factor(dim: usize) -> f64 {
    (dim as f64).sqrt() / PI
}

/// Rescale energies so the mean level spacing at the spectrum center is 1.
pub fn scale_to_unit_spacing(m: GueMatrix) -> GueMatrix {
    let c = C64::new(unit_spacing_factor(m.dim), 0.0);
    GueMatrix {
        dim: m.dim,
        entries: m.entries * c,
    }
}
