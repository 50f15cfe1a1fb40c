//! Choi-matrix and superoperator representations of qubit X-channels,
//! closed-form inversion, and intermediate maps between two times.
//!
//! Density matrices are vectorized in anti-lexicographical order
//! (rho00, rho10, rho01, rho11); composition of maps is then a plain matrix
//! product of superoperators, and the Choi matrix is an index reshuffle of
//! the superoperator.

use crate::dynamics::ChannelPoint;
use num_complex::Complex64 as C64;
use thiserror::Error;

/// Absolute tolerance on |2r-1| and on ||z1|^2-|z2|^2| below which a channel
/// is treated as non-invertible. Chosen above ensemble statistical noise at
/// the default sample size while excluding genuine nodes.
pub const DEFAULT_INVERT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error(
        "channel not invertible: |2r-1|={d:.3e}, |det z-block|={d_z:.3e}, tol={tol:.1e}"
    )]
    NonInvertible { d: f64, d_z: f64, tol: f64 },
}

const ZERO: C64 = C64::new(0.0, 0.0);

/// 4x4 Choi-matrix representation; positive semidefinite iff the map is
/// completely positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChoiMatrix(pub [[C64; 4]; 4]);

/// 4x4 matrix acting on vectorized density matrices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Superoperator(pub [[C64; 4]; 4]);

/// Reshuffle between superoperator and Choi index order:
/// out[2a+k][2b+l] = in[k+2l][a+2b]. Applying it twice is the identity.
pub fn reshuffle(m: &[[C64; 4]; 4]) -> [[C64; 4]; 4] {
    let mut out = [[ZERO; 4]; 4];
    for p in 0..4 {
        for q in 0..4 {
            out[p][q] = m[(p & 1) + 2 * (q & 1)][(p >> 1) + 2 * (q >> 1)];
        }
    }
    out
}

impl ChoiMatrix {
    /// X-form Choi matrix of an averaged channel point: diagonal
    /// (r, 1-r, 1-r, r), anti-diagonal (z1*, z2, z2*, z1).
    pub fn from_point(p: &ChannelPoint) -> Self {
        let r = C64::new(p.r, 0.0);
        let s = C64::new(1.0 - p.r, 0.0);
        ChoiMatrix([
            [r, ZERO, ZERO, p.z1.conj()],
            [ZERO, s, p.z2, ZERO],
            [ZERO, p.z2.conj(), s, ZERO],
            [p.z1, ZERO, ZERO, r],
        ])
    }

    pub fn reshuffle(&self) -> Superoperator {
        Superoperator(reshuffle(&self.0))
    }
}

/// Closed-form eigenvalues {r +- |z1|, (1-r) +- |z2|} of an X-form Choi
/// matrix built from a channel point.
pub fn point_choi_eigenvalues(p: &ChannelPoint) -> [f64; 4] {
    let a = p.z1.norm();
    let b = p.z2.norm();
    [p.r + a, p.r - a, (1.0 - p.r) + b, (1.0 - p.r) - b]
}

impl Superoperator {
    /// Superoperator of an averaged channel point (two 2x2 blocks: a
    /// population block in r and a coherence block in z1, z2).
    pub fn from_point(p: &ChannelPoint) -> Self {
        let r = C64::new(p.r, 0.0);
        let s = C64::new(1.0 - p.r, 0.0);
        Superoperator([
            [r, ZERO, ZERO, s],
            [ZERO, p.z1, p.z2, ZERO],
            [ZERO, p.z2.conj(), p.z1.conj(), ZERO],
            [s, ZERO, ZERO, r],
        ])
    }

    /// Matrix product: `self` applied after `inner`.
    pub fn compose(&self, inner: &Superoperator) -> Superoperator {
        let mut out = [[ZERO; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = ZERO;
                for k in 0..4 {
                    acc += self.0[i][k] * inner.0[k][j];
                }
                out[i][j] = acc;
            }
        }
        Superoperator(out)
    }

    /// Apply to a density matrix via vectorization.
    pub fn apply(&self, rho: [[C64; 2]; 2]) -> [[C64; 2]; 2] {
        let vin = [rho[0][0], rho[1][0], rho[0][1], rho[1][1]];
        let mut vout = [ZERO; 4];
        for i in 0..4 {
            for k in 0..4 {
                vout[i] += self.0[i][k] * vin[k];
            }
        }
        [[vout[0], vout[2]], [vout[1], vout[3]]]
    }

    pub fn reshuffle(&self) -> ChoiMatrix {
        ChoiMatrix(reshuffle(&self.0))
    }
}

/// Closed-form inverse of an X-channel superoperator. Fails when either
/// block determinant (2r-1 or |z1|^2-|z2|^2) is within `tol` of zero.
pub fn invert_superop(l: &Superoperator, tol: f64) -> Result<Superoperator, ChannelError> {
    let r = l.0[0][0];
    let z1 = l.0[1][1];
    let z2 = l.0[1][2];
    let d = 2.0 * r - C64::new(1.0, 0.0);
    let d_z = z1.norm_sqr() - z2.norm_sqr();
    if d.norm() <= tol || d_z.abs() <= tol {
        return Err(ChannelError::NonInvertible {
            d: d.norm(),
            d_z: d_z.abs(),
            tol,
        });
    }
    let s = r - C64::new(1.0, 0.0);
    Ok(Superoperator([
        [r / d, ZERO, ZERO, s / d],
        [ZERO, z1.conj() / d_z, -z2 / d_z, ZERO],
        [ZERO, -z2.conj() / d_z, z1 / d_z, ZERO],
        [s / d, ZERO, ZERO, r / d],
    ]))
}

/// Parameters (q, Z1, Z2) of the intermediate map from time t to t+eps,
/// together with the block determinants of the base channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntermediateMap {
    pub q: f64,
    pub z1: C64,
    pub z2: C64,
    /// 2r-1 of the base point.
    pub d: f64,
    /// |z1|^2 - |z2|^2 of the base point.
    pub d_z: f64,
}

/// Closed-form intermediate map between two channel points:
/// q = (r + r' - 1)/(2r - 1), Z1 = (z1' z1* - z2' z2*)/D,
/// Z2 = (z2' z1 - z1' z2)/D with D = |z1|^2 - |z2|^2.
pub fn intermediate_map(
    p_t: &ChannelPoint,
    p_te: &ChannelPoint,
    tol: f64,
) -> Result<IntermediateMap, ChannelError> {
    let d = 2.0 * p_t.r - 1.0;
    let d_z = p_t.z1.norm_sqr() - p_t.z2.norm_sqr();
    if d.abs() <= tol || d_z.abs() <= tol {
        return Err(ChannelError::NonInvertible {
            d: d.abs(),
            d_z: d_z.abs(),
            tol,
        });
    }
    let q = (p_t.r + p_te.r - 1.0) / d;
    let z1 = (p_te.z1 * p_t.z1.conj() - p_te.z2 * p_t.z2.conj()) / d_z;
    let z2 = (p_te.z2 * p_t.z1 - p_te.z1 * p_t.z2) / d_z;
    Ok(IntermediateMap { q, z1, z2, d, d_z })
}

impl IntermediateMap {
    /// X-form Choi matrix assembled from (q, Z1, Z2).
    pub fn choi(&self) -> ChoiMatrix {
        let q = C64::new(self.q, 0.0);
        let s = C64::new(1.0 - self.q, 0.0);
        ChoiMatrix([
            [q, ZERO, ZERO, self.z1.conj()],
            [ZERO, s, self.z2, ZERO],
            [ZERO, self.z2.conj(), s, ZERO],
            [self.z1, ZERO, ZERO, q],
        ])
    }

    /// Closed-form Choi eigenvalues {q +- |Z1|, (1-q) +- |Z2|}.
    pub fn choi_eigenvalues(&self) -> [f64; 4] {
        let a = self.z1.norm();
        let b = self.z2.norm();
        [self.q + a, self.q - a, (1.0 - self.q) + b, (1.0 - self.q) - b]
    }

    /// Trace norm of the Choi matrix; 2 exactly for a completely positive
    /// trace-preserving intermediate map, larger otherwise.
    pub fn choi_trace_norm(&self) -> f64 {
        self.choi_eigenvalues().iter().map(|l| l.abs()).sum()
    }
}
