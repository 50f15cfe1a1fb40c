//! Coupled qubit-environment evolution and extraction of the ensemble-averaged
//! channel parameters r(t), z1(t), z2(t).
//!
//! The full Hamiltonian is diagonalized once per realization; channel
//! parameters at every grid time then follow from overlap matrices between the
//! qubit blocks of the eigenvector matrix, evaluated in blocks of time points
//! with one BLAS product per block. The maximally mixed environment state is
//! handled as an exact average over all environment basis states (it is folded
//! into the overlap matrices, not sampled).
//!
//! Sign convention: the decoupled (lambda = 0) qubit has z1(t) = e^{-i Delta t}.
//! The raw propagator produces the complex-conjugate parametrization, so the
//! extraction conjugates the coherences. Both describe the same physics; every
//! derived quantity depends only on conjugation-invariant combinations.

use crate::rmt::{sample_gue_with, scale_to_unit_spacing, GueMatrix, RmtError, SeededStream};
use ndarray::{s, Array2};
use ndarray_linalg::{Eigh, UPLO};
use num_complex::Complex64 as C64;
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;
use thiserror::Error;

/// Heisenberg time for unit mean level spacing.
pub const HEISENBERG_TIME: f64 = TAU;

/// Number of realizations dispatched to the thread pool at a time. Results
/// are folded in realization order, so the reduction is independent of the
/// worker count.
const REALIZATION_CHUNK: usize = 8;

/// Time points evaluated per BLAS product.
const TIME_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("environment matrix dimension mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("eigensolver failed{}", match .realization {
        Some(r) => format!(" for realization {r}"),
        None => String::new(),
    })]
    Eigensolver { realization: Option<u64> },
    #[error("ensemble must contain at least one realization")]
    EmptyEnsemble,
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error("{path}:{line}: {msg}")]
    TrajectoryParse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Rmt(#[from] RmtError),
}

/// Physical and sampling configuration for one parameter point.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelParams {
    /// Qubit level splitting, in units of the mean level spacing.
    pub delta: f64,
    /// Qubit-environment coupling strength.
    pub lambda: f64,
    /// Environment Hilbert-space dimension N.
    pub env_dim: usize,
    /// Number of (H_e, V_e) realizations in the ensemble.
    pub n_samples: usize,
    pub master_seed: u64,
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.delta > 0.0) {
            return Err(DynamicsError::InvalidParams(format!(
                "delta must be > 0, got {}",
                self.delta
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(DynamicsError::InvalidParams(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.env_dim == 0 || (self.lambda > 0.0 && self.env_dim < 2) {
            return Err(DynamicsError::InvalidParams(format!(
                "env_dim {} too small for lambda {}",
                self.env_dim, self.lambda
            )));
        }
        if self.n_samples == 0 {
            return Err(DynamicsError::EmptyEnsemble);
        }
        Ok(())
    }
}

/// Uniform time grid t_i = i * dt starting at 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    dt: f64,
    n_points: usize,
}

impl TimeGrid {
    pub fn uniform(dt: f64, n_points: usize) -> Self {
        assert!(dt > 0.0 && n_points >= 1, "degenerate time grid");
        Self { dt, n_points }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        self.n_points == 0
    }

    pub fn t(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.t(self.n_points - 1)
    }
}

/// Grid step resolving both the qubit precession and the Heisenberg-time
/// structure: dt = min(2 pi / delta, 2 pi) / steps_per_period.
pub fn default_dt(delta: f64, steps_per_period: u32) -> f64 {
    (TAU / delta).min(TAU) / steps_per_period as f64
}

/// Averaged channel parameters at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelPoint {
    pub t: f64,
    pub r: f64,
    pub z1: C64,
    pub z2: C64,
}

/// Standard errors of the mean for the five real channel components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PointSe {
    pub r: f64,
    pub re_z1: f64,
    pub im_z1: f64,
    pub re_z2: f64,
    pub im_z2: f64,
}

/// Channel parameter series for a single realization, aligned with a grid
/// index range.
#[derive(Debug, Clone)]
pub struct RealizationSeries {
    pub r: Vec<f64>,
    pub z1: Vec<C64>,
    pub z2: Vec<C64>,
}

impl RealizationSeries {
    fn len(&self) -> usize {
        self.r.len()
    }
}

/// Ensemble-averaged channel trajectory with per-point standard errors.
#[derive(Debug, Clone)]
pub struct ChannelTrajectory {
    pub params: ModelParams,
    pub dt: f64,
    pub points: Vec<ChannelPoint>,
    pub se: Vec<PointSe>,
    pub n_accumulated: usize,
}

impl ChannelTrajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Append a later segment produced with the same parameters and grid step.
    pub fn extend_with(&mut self, tail: ChannelTrajectory) {
        assert_eq!(self.params, tail.params, "segment parameter mismatch");
        assert_eq!(self.dt, tail.dt, "segment grid step mismatch");
        if let (Some(last), Some(first)) = (self.points.last(), tail.points.first()) {
            assert!(
                (first.t - last.t - self.dt).abs() < 1e-9 * self.dt.max(1.0),
                "segments are not contiguous"
            );
        }
        self.points.extend(tail.points);
        self.se.extend(tail.se);
    }

    /// Clone of the prefix with t <= t_cut.
    pub fn truncated(&self, t_cut: f64) -> ChannelTrajectory {
        let keep = self.points.iter().take_while(|p| p.t <= t_cut).count();
        ChannelTrajectory {
            params: self.params.clone(),
            dt: self.dt,
            points: self.points[..keep].to_vec(),
            se: self.se[..keep].to_vec(),
            n_accumulated: self.n_accumulated,
        }
    }
}

/// Assemble H = (Delta/2) sigma_z (x) 1 + 1 (x) H_e + lambda sigma_x (x) V_e
/// in qubit-major ordering (rows 0..N belong to qubit state |0>).
pub fn build_hamiltonian(
    params: &ModelParams,
    h_env: &GueMatrix,
    v_env: &GueMatrix,
) -> Result<Array2<C64>, DynamicsError> {
    let n = params.env_dim;
    for m in [h_env, v_env] {
        if m.dim() != n {
            return Err(DynamicsError::ShapeMismatch {
                expected: n,
                got: m.dim(),
            });
        }
    }
    let he = h_env.entries();
    let ve = v_env.entries();
    let half_delta = C64::new(params.delta / 2.0, 0.0);
    let lambda = C64::new(params.lambda, 0.0);
    let mut h = Array2::<C64>::zeros((2 * n, 2 * n));
    for i in 0..n {
        for j in 0..n {
            let coupling = lambda * ve[[i, j]];
            h[[i, j]] = he[[i, j]];
            h[[n + i, n + j]] = he[[i, j]];
            h[[i, n + j]] = coupling;
            h[[n + i, j]] = coupling;
        }
        h[[i, i]] += half_delta;
        h[[n + i, n + i]] -= half_delta;
    }
    Ok(h)
}

fn adjoint(a: ndarray::ArrayView2<C64>) -> Array2<C64> {
    let mut out = a.t().to_owned();
    out.mapv_inplace(|v| v.conj());
    out
}

/// Channel parameters of a single realization on `range` of the grid.
///
/// The three quantities are linear in the evolved basis operators, so the
/// per-time work reduces to bilinear forms u^T B u* with u_j = e^{-i E_j t}
/// and fixed matrices B built from eigenvector-block overlaps. Everything
/// downstream of the eigendecomposition is exact in t.
pub fn propagate_channel_range(
    grid: &TimeGrid,
    range: Range<usize>,
    h_total: &Array2<C64>,
) -> Result<RealizationSeries, DynamicsError> {
    crate::single_threaded_blas();
    let n2 = h_total.nrows();
    let n = n2 / 2;
    assert!(n >= 1 && n2 == 2 * n && h_total.ncols() == n2);
    assert!(range.end <= grid.len());

    let (evals, vecs) = h_total
        .eigh(UPLO::Lower)
        .map_err(|_| DynamicsError::Eigensolver { realization: None })?;

    let w0 = vecs.slice(s![..n, ..]);
    let w1 = vecs.slice(s![n.., ..]);
    let a0 = adjoint(w0);
    let a1 = adjoint(w1);
    let t00 = a0.dot(&w0);
    let t01 = a0.dot(&w1);
    let t10 = a1.dot(&w0);
    let t11 = a1.dot(&w1);

    // G_{ka,lb}(t) = (1/N) sum_{j j'} u_j u*_{j'} T^{ab}_{j j'} T^{lk}_{j' j}
    // gives the evolved-basis matrix elements; r and the two coherences are
    // fixed linear combinations, so their B matrices are combined up front.
    // The output gauge (z -> z*) is folded in as a conjugate transpose.
    let half = C64::new(0.5, 0.0);
    let one_m_i = C64::new(1.0, -1.0);
    let one_p_i = C64::new(1.0, 1.0);
    let mut bstack = Array2::<C64>::zeros((3 * n2, n2));
    for j in 0..n2 {
        for jp in 0..n2 {
            let tr01 = t01[[jp, j]];
            let b1 = t00[[j, jp]] * tr01;
            let b2 = t01[[j, jp]] * tr01;
            let b3 = t10[[j, jp]] * tr01;
            let b4 = t11[[j, jp]] * tr01;
            let bz1 = (one_m_i * (b1 + b4) + 2.0 * b3) * half;
            let bz2 = (one_p_i * (b1 + b4) + 2.0 * b2) * half;
            bstack[[j, jp]] = t00[[j, jp]] * t00[[jp, j]];
            // Conjugate transpose folds conj(u^T B u*) into the same form.
            bstack[[n2 + jp, j]] = bz1.conj();
            bstack[[2 * n2 + jp, j]] = bz2.conj();
        }
    }

    let inv_n = 1.0 / n as f64;
    let count = range.len();
    let mut out = RealizationSeries {
        r: Vec::with_capacity(count),
        z1: Vec::with_capacity(count),
        z2: Vec::with_capacity(count),
    };
    let mut start = range.start;
    while start < range.end {
        let k = TIME_CHUNK.min(range.end - start);
        let mut ubar = Array2::<C64>::zeros((n2, k));
        for j in 0..n2 {
            let e = evals[j];
            for m in 0..k {
                ubar[[j, m]] = C64::from_polar(1.0, e * grid.t(start + m));
            }
        }
        let v = bstack.dot(&ubar);
        let mut acc = vec![[C64::new(0.0, 0.0); 3]; k];
        for j in 0..n2 {
            let urow = ubar.row(j);
            let v0 = v.row(j);
            let v1 = v.row(n2 + j);
            let v2 = v.row(2 * n2 + j);
            for m in 0..k {
                let u = urow[m].conj();
                acc[m][0] += u * v0[m];
                acc[m][1] += u * v1[m];
                acc[m][2] += u * v2[m];
            }
        }
        for a in &acc {
            out.r.push(a[0].re * inv_n);
            out.z1.push(a[1] * inv_n);
            out.z2.push(a[2] * inv_n);
        }
        start += k;
    }
    Ok(out)
}

/// Single-realization channel parameters over the full grid.
pub fn propagate_channel(
    grid: &TimeGrid,
    h_total: &Array2<C64>,
) -> Result<RealizationSeries, DynamicsError> {
    propagate_channel_range(grid, 0..grid.len(), h_total)
}

fn realization_series(
    params: &ModelParams,
    grid: &TimeGrid,
    range: Range<usize>,
    idx: u64,
) -> Result<RealizationSeries, DynamicsError> {
    let stream = SeededStream::new(params.master_seed, idx);
    let mut rng = stream.rng();
    let h_env = scale_to_unit_spacing(sample_gue_with(params.env_dim, &mut rng)?);
    let v_env = sample_gue_with(params.env_dim, &mut rng)?;
    let h = build_hamiltonian(params, &h_env, &v_env)?;
    propagate_channel_range(grid, range, &h).map_err(|e| match e {
        DynamicsError::Eigensolver { .. } => DynamicsError::Eigensolver {
            realization: Some(idx),
        },
        other => other,
    })
}

/// Running sums used for means and standard errors. Both the streaming
/// accumulator and prefix/bootstrap queries fold realizations through this
/// same code in index order, which makes the two paths bit-identical.
///
/// Sums are taken of deviations from the first realization's values, which
/// avoids the cancellation noise floor of raw sums of squares when the
/// ensemble scatter is tiny compared to the mean.
struct ComponentSums {
    shift: Vec<[f64; 5]>,
    s1: Vec<[f64; 5]>,
    s2: Vec<[f64; 5]>,
    count: usize,
}

impl ComponentSums {
    fn new(n_points: usize) -> Self {
        Self {
            shift: vec![[0.0; 5]; n_points],
            s1: vec![[0.0; 5]; n_points],
            s2: vec![[0.0; 5]; n_points],
            count: 0,
        }
    }

    fn add(&mut self, series: &RealizationSeries) {
        assert_eq!(series.len(), self.s1.len());
        for i in 0..series.len() {
            let x = [
                series.r[i],
                series.z1[i].re,
                series.z1[i].im,
                series.z2[i].re,
                series.z2[i].im,
            ];
            if self.count == 0 {
                self.shift[i] = x;
            }
            for c in 0..5 {
                let dx = x[c] - self.shift[i][c];
                self.s1[i][c] += dx;
                self.s2[i][c] += dx * dx;
            }
        }
        self.count += 1;
    }

    fn finish(
        self,
        params: &ModelParams,
        grid: &TimeGrid,
        range: Range<usize>,
    ) -> ChannelTrajectory {
        let n = self.count as f64;
        let mut points = Vec::with_capacity(self.s1.len());
        let mut se = Vec::with_capacity(self.s1.len());
        for (i, (s1, s2)) in self.s1.iter().zip(&self.s2).enumerate() {
            let mean: Vec<f64> = s1
                .iter()
                .zip(&self.shift[i])
                .map(|(v, c)| c + v / n)
                .collect();
            points.push(ChannelPoint {
                t: grid.t(range.start + i),
                r: mean[0],
                z1: C64::new(mean[1], mean[2]),
                z2: C64::new(mean[3], mean[4]),
            });
            let mut errs = [0.0; 5];
            if self.count >= 2 {
                for c in 0..5 {
                    let var = (s2[c] - s1[c] * s1[c] / n).max(0.0) / (n - 1.0);
                    errs[c] = (var / n).sqrt();
                }
            }
            se.push(PointSe {
                r: errs[0],
                re_z1: errs[1],
                im_z1: errs[2],
                re_z2: errs[3],
                im_z2: errs[4],
            });
        }
        ChannelTrajectory {
            params: params.clone(),
            dt: grid.dt(),
            points,
            se,
            n_accumulated: self.count,
        }
    }
}

/// Ensemble average over `params.n_samples` realizations on `range` of the
/// grid. Realizations are computed in parallel but reduced in index order, so
/// the result does not depend on the worker count.
pub fn accumulate_range(
    params: &ModelParams,
    grid: &TimeGrid,
    range: Range<usize>,
) -> Result<ChannelTrajectory, DynamicsError> {
    use rayon::prelude::*;
    params.validate()?;
    let mut sums = ComponentSums::new(range.len());
    let mut idx = 0u64;
    while idx < params.n_samples as u64 {
        let hi = (idx + REALIZATION_CHUNK as u64).min(params.n_samples as u64);
        let batch: Result<Vec<_>, _> = (idx..hi)
            .into_par_iter()
            .map(|i| realization_series(params, grid, range.clone(), i))
            .collect();
        for series in batch? {
            sums.add(&series);
        }
        idx = hi;
    }
    Ok(sums.finish(params, grid, range))
}

/// Ensemble average over the full grid.
pub fn accumulate_ensemble(
    params: &ModelParams,
    grid: &TimeGrid,
) -> Result<ChannelTrajectory, DynamicsError> {
    accumulate_range(params, grid, 0..grid.len())
}

/// Ensemble with every realization's series retained, for prefix and
/// bootstrap queries.
#[derive(Debug, Clone)]
pub struct EnsembleData {
    pub params: ModelParams,
    grid: TimeGrid,
    realizations: Vec<RealizationSeries>,
}

impl EnsembleData {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_realizations(&self) -> usize {
        self.realizations.len()
    }

    /// Mean trajectory over the first `k` realizations; identical to a fresh
    /// `accumulate_ensemble` run with `n_samples = k` and the same seed.
    pub fn trajectory_prefix(&self, k: usize) -> ChannelTrajectory {
        assert!(k >= 1 && k <= self.realizations.len(), "bad prefix size {k}");
        let mut sums = ComponentSums::new(self.grid.len());
        for series in &self.realizations[..k] {
            sums.add(series);
        }
        let mut params = self.params.clone();
        params.n_samples = k;
        sums.finish(&params, &self.grid, 0..self.grid.len())
    }

    /// Mean trajectory over an arbitrary multiset of realization indices
    /// (bootstrap resampling).
    pub fn trajectory_resampled(&self, indices: &[usize]) -> ChannelTrajectory {
        assert!(!indices.is_empty());
        let mut sums = ComponentSums::new(self.grid.len());
        for &i in indices {
            sums.add(&self.realizations[i]);
        }
        let mut params = self.params.clone();
        params.n_samples = indices.len();
        sums.finish(&params, &self.grid, 0..self.grid.len())
    }

    /// Extend every realization's series to a longer grid with the same step.
    pub fn extend_to(&mut self, grid: &TimeGrid) -> Result<(), DynamicsError> {
        use rayon::prelude::*;
        assert_eq!(grid.dt(), self.grid.dt(), "grid step mismatch");
        if grid.len() <= self.grid.len() {
            return Ok(());
        }
        let range = self.grid.len()..grid.len();
        let tails: Result<Vec<_>, _> = (0..self.realizations.len() as u64)
            .into_par_iter()
            .map(|i| realization_series(&self.params, grid, range.clone(), i))
            .collect();
        for (series, tail) in self.realizations.iter_mut().zip(tails?) {
            series.r.extend(tail.r);
            series.z1.extend(tail.z1);
            series.z2.extend(tail.z2);
        }
        self.grid = *grid;
        Ok(())
    }
}

/// Compute the ensemble keeping per-realization series.
pub fn accumulate_with_realizations(
    params: &ModelParams,
    grid: &TimeGrid,
) -> Result<EnsembleData, DynamicsError> {
    use rayon::prelude::*;
    params.validate()?;
    let realizations: Result<Vec<_>, _> = (0..params.n_samples as u64)
        .into_par_iter()
        .map(|i| realization_series(params, grid, 0..grid.len(), i))
        .collect();
    Ok(EnsembleData {
        params: params.clone(),
        grid: *grid,
        realizations: realizations?,
    })
}

/// Exact reference propagation through the full Hilbert space. Slow; used by
/// the test suites as an independent check of the fast extraction path.
pub mod direct {
    use super::*;

    /// U(t) = W e^{-iEt} W^dag from one eigendecomposition.
    pub fn propagator(h_total: &Array2<C64>, t: f64) -> Array2<C64> {
        crate::single_threaded_blas();
        let (evals, vecs) = h_total.eigh(UPLO::Lower).expect("eigh failed");
        let mut scaled = vecs.to_owned();
        for (j, mut col) in scaled.columns_mut().into_iter().enumerate() {
            let phase = C64::from_polar(1.0, -evals[j] * t);
            col.map_inplace(|v| *v *= phase);
        }
        scaled.dot(&adjoint(vecs.view()))
    }

    /// Evolve `rho_c (x) 1/N` under `u` and trace out the environment,
    /// in the same gauge as the fast extraction path.
    pub fn evolve_qubit(u: &Array2<C64>, rho_c: [[C64; 2]; 2]) -> [[C64; 2]; 2] {
        let n2 = u.nrows();
        let n = n2 / 2;
        // Gauge: Lambda[rho] = conj(Lambda_raw[conj(rho)]).
        let rho_in = [
            [rho_c[0][0].conj(), rho_c[0][1].conj()],
            [rho_c[1][0].conj(), rho_c[1][1].conj()],
        ];
        let mut full = Array2::<C64>::zeros((n2, n2));
        for a in 0..2 {
            for b in 0..2 {
                if rho_in[a][b].norm() == 0.0 {
                    continue;
                }
                let w = rho_in[a][b] / n as f64;
                for m in 0..n {
                    full[[a * n + m, b * n + m]] = w;
                }
            }
        }
        let evolved = u.dot(&full).dot(&adjoint(u.view()));
        let mut out = [[C64::new(0.0, 0.0); 2]; 2];
        for k in 0..2 {
            for l in 0..2 {
                let mut acc = C64::new(0.0, 0.0);
                for m in 0..n {
                    acc += evolved[[k * n + m, l * n + m]];
                }
                out[k][l] = acc.conj();
            }
        }
        out
    }

    /// Single-realization Choi matrix C[2a+k, 2b+l] = <k| Lambda[|a><b|] |l>.
    pub fn choi(u: &Array2<C64>, t_unused: ()) -> [[C64; 4]; 4] {
        let _ = t_unused;
        let mut c = [[C64::new(0.0, 0.0); 4]; 4];
        for a in 0..2 {
            for b in 0..2 {
                let mut basis = [[C64::new(0.0, 0.0); 2]; 2];
                basis[a][b] = C64::new(1.0, 0.0);
                let img = evolve_qubit(u, basis);
                for k in 0..2 {
                    for l in 0..2 {
                        c[2 * a + k][2 * b + l] = img[k][l];
                    }
                }
            }
        }
        c
    }
}

fn fmt_f64(v: f64) -> String {
    // Exponential shortest-roundtrip form: parsing recovers the exact f64.
    format!("{v:e}")
}

/// Write a trajectory as CSV with a `# key=value` provenance header.
pub fn write_trajectory_csv(path: &Path, traj: &ChannelTrajectory) -> Result<(), DynamicsError> {
    let mut out = String::new();
    let p = &traj.params;
    writeln!(
        out,
        "# delta={} lambda={} N={} N_sam={} seed={}",
        fmt_f64(p.delta),
        fmt_f64(p.lambda),
        p.env_dim,
        p.n_samples,
        p.master_seed
    )
    .unwrap();
    writeln!(
        out,
        "t,r,re_z1,im_z1,re_z2,im_z2,se_r,se_re_z1,se_im_z1,se_re_z2,se_im_z2"
    )
    .unwrap();
    for (pt, se) in traj.points.iter().zip(&traj.se) {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            fmt_f64(pt.t),
            fmt_f64(pt.r),
            fmt_f64(pt.z1.re),
            fmt_f64(pt.z1.im),
            fmt_f64(pt.z2.re),
            fmt_f64(pt.z2.im),
            fmt_f64(se.r),
            fmt_f64(se.re_z1),
            fmt_f64(se.im_z1),
            fmt_f64(se.re_z2),
            fmt_f64(se.im_z2)
        )
        .unwrap();
    }
    crate::fsutil::write_atomic(path, out.as_bytes())?;
    Ok(())
}

/// Parse a trajectory CSV, checking the header keys and that the time column
/// is a uniform, strictly increasing grid starting at 0.
pub fn read_trajectory_csv(path: &Path) -> Result<ChannelTrajectory, DynamicsError> {
    let text = std::fs::read_to_string(path)?;
    let pstr = path.display().to_string();
    let perr = |line: usize, msg: String| DynamicsError::TrajectoryParse {
        path: pstr.clone(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();

    let (hline, header) = lines
        .next()
        .ok_or_else(|| perr(1, "empty file".into()))?;
    let header = header
        .strip_prefix('#')
        .ok_or_else(|| perr(hline + 1, "missing `# key=value` header".into()))?;
    let mut delta = None;
    let mut lambda = None;
    let mut env_dim = None;
    let mut n_sam = None;
    let mut seed = None;
    for kv in header.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| perr(hline + 1, format!("malformed header field `{kv}`")))?;
        let bad = |e: String| perr(hline + 1, format!("header field `{k}`: {e}"));
        match k {
            "delta" => delta = Some(v.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            "lambda" => lambda = Some(v.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            "N" => env_dim = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "N_sam" => n_sam = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "seed" => seed = Some(v.parse::<u64>().map_err(|e| bad(e.to_string()))?),
            other => return Err(perr(hline + 1, format!("unknown header key `{other}`"))),
        }
    }
    let params = ModelParams {
        delta: delta.ok_or_else(|| perr(hline + 1, "header missing `delta`".into()))?,
        lambda: lambda.ok_or_else(|| perr(hline + 1, "header missing `lambda`".into()))?,
        env_dim: env_dim.ok_or_else(|| perr(hline + 1, "header missing `N`".into()))?,
        n_samples: n_sam.ok_or_else(|| perr(hline + 1, "header missing `N_sam`".into()))?,
        master_seed: seed.ok_or_else(|| perr(hline + 1, "header missing `seed`".into()))?,
    };

    let (cline, columns) = lines
        .next()
        .ok_or_else(|| perr(2, "missing column header".into()))?;
    let expected = "t,r,re_z1,im_z1,re_z2,im_z2,se_r,se_re_z1,se_im_z1,se_re_z2,se_im_z2";
    if columns.trim() != expected {
        return Err(perr(cline + 1, format!("unexpected columns `{columns}`")));
    }

    let mut points = Vec::new();
    let mut se = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(perr(
                lineno + 1,
                format!("expected 11 fields, found {}", fields.len()),
            ));
        }
        let mut v = [0.0f64; 11];
        for (c, f) in fields.iter().enumerate() {
            v[c] = f.trim().parse::<f64>().map_err(|e| {
                perr(lineno + 1, format!("field {}: {e}", c + 1))
            })?;
        }
        points.push(ChannelPoint {
            t: v[0],
            r: v[1],
            z1: C64::new(v[2], v[3]),
            z2: C64::new(v[4], v[5]),
        });
        se.push(PointSe {
            r: v[6],
            re_z1: v[7],
            im_z1: v[8],
            re_z2: v[9],
            im_z2: v[10],
        });
    }
    if points.is_empty() {
        return Err(perr(3, "no data rows".into()));
    }
    if points[0].t != 0.0 {
        return Err(perr(3, format!("time grid must start at 0, got {}", points[0].t)));
    }
    let dt = if points.len() >= 2 {
        points[1].t - points[0].t
    } else {
        1.0
    };
    if !(dt > 0.0) {
        return Err(perr(4, "time column is not strictly increasing".into()));
    }
    for i in 1..points.len() {
        let t = points[i].t;
        let prev = points[i - 1].t;
        if t <= prev {
            return Err(perr(
                i + 3,
                format!("time column is not strictly increasing at row {} (t={t})", i + 1),
            ));
        }
        if ((t - prev) - dt).abs() > 1e-9 * dt.max(1.0) {
            return Err(perr(
                i + 3,
                format!("time grid is not uniform at row {} (step {})", i + 1, t - prev),
            ));
        }
    }
    Ok(ChannelTrajectory {
        n_accumulated: params.n_samples,
        params,
        dt,
        points,
        se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rmt::sample_gue;
    use approx::assert_abs_diff_eq;

    fn small_params(delta: f64, lambda: f64, n: usize, n_samples: usize) -> ModelParams {
        ModelParams {
            delta,
            lambda,
            env_dim: n,
            n_samples,
            master_seed: 42,
        }
    }

    fn env_pair(params: &ModelParams, idx: u64) -> (GueMatrix, GueMatrix) {
        let mut rng = SeededStream::new(params.master_seed, idx).rng();
        let h = scale_to_unit_spacing(sample_gue_with(params.env_dim, &mut rng).unwrap());
        let v = sample_gue_with(params.env_dim, &mut rng).unwrap();
        (h, v)
    }

    #[test]
    fn hamiltonian_block_structure() {
        let params = small_params(0.8, 0.0, 6, 1);
        let (h_env, v_env) = env_pair(&params, 0);
        let h = build_hamiltonian(&params, &h_env, &v_env).unwrap();
        let n = 6;
        for i in 0..n {
            for j in 0..n {
                let expect = h_env.entries()[[i, j]]
                    + if i == j {
                        C64::new(0.4, 0.0)
                    } else {
                        C64::new(0.0, 0.0)
                    };
                assert_eq!(h[[i, j]], expect);
                assert_eq!(h[[i, n + j]], C64::new(0.0, 0.0));
                assert_eq!(h[[n + i, j]], C64::new(0.0, 0.0));
            }
        }

        // Delta = 0, lambda = 0 leaves 1 (x) H_e.
        let params0 = ModelParams {
            delta: 0.0,
            ..small_params(1.0, 0.0, 6, 1)
        };
        let h0 = build_hamiltonian(&params0, &h_env, &v_env).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(h0[[i, j]], h_env.entries()[[i, j]]);
                assert_eq!(h0[[n + i, n + j]], h_env.entries()[[i, j]]);
            }
        }
    }

    #[test]
    fn hamiltonian_trace_and_hermiticity() {
        let params = small_params(0.7, 0.3, 8, 1);
        let (h_env, v_env) = env_pair(&params, 1);
        let h = build_hamiltonian(&params, &h_env, &v_env).unwrap();
        let mut tr = C64::new(0.0, 0.0);
        let mut tr_env = C64::new(0.0, 0.0);
        for i in 0..16 {
            tr += h[[i, i]];
        }
        for i in 0..8 {
            tr_env += h_env.entries()[[i, i]];
        }
        assert_abs_diff_eq!(tr.re, 2.0 * tr_env.re, epsilon = 1e-12);
        assert_abs_diff_eq!(tr.im, 0.0, epsilon = 1e-12);
        for i in 0..16 {
            for j in 0..16 {
                assert!((h[[i, j]] - h[[j, i]].conj()).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn hamiltonian_shape_error() {
        let params = small_params(0.5, 0.1, 8, 1);
        let h_env = scale_to_unit_spacing(sample_gue(6, &SeededStream::new(1, 0)).unwrap());
        let v_env = sample_gue(8, &SeededStream::new(1, 1)).unwrap();
        assert!(matches!(
            build_hamiltonian(&params, &h_env, &v_env),
            Err(DynamicsError::ShapeMismatch { expected: 8, got: 6 })
        ));
    }

    #[test]
    fn decoupled_qubit_is_exact() {
        let params = small_params(0.73, 0.0, 12, 1);
        let (h_env, v_env) = env_pair(&params, 0);
        let h = build_hamiltonian(&params, &h_env, &v_env).unwrap();
        let grid = TimeGrid::uniform(0.21, 60);
        let series = propagate_channel(&grid, &h).unwrap();
        for i in 0..grid.len() {
            let t = grid.t(i);
            let expect = C64::from_polar(1.0, -params.delta * t);
            assert_abs_diff_eq!(series.r[i], 1.0, epsilon = 1e-10);
            assert!((series.z1[i] - expect).norm() < 1e-10, "t={t}");
            assert!(series.z2[i].norm() < 1e-10);
        }
    }

    #[test]
    fn initial_point_is_identity_channel() {
        let params = small_params(0.4, 0.35, 10, 1);
        let (h_env, v_env) = env_pair(&params, 3);
        let h = build_hamiltonian(&params, &h_env, &v_env).unwrap();
        let grid = TimeGrid::uniform(0.5, 4);
        let series = propagate_channel(&grid, &h).unwrap();
        assert_abs_diff_eq!(series.r[0], 1.0, epsilon = 1e-12);
        assert!((series.z1[0] - C64::new(1.0, 0.0)).norm() < 1e-12);
        assert!(series.z2[0].norm() < 1e-12);
    }

    #[test]
    fn fast_extraction_matches_direct_propagation() {
        // The three extracted parameters against the full-Hilbert-space
        // reference, including the conjugate output gauge.
        let params = small_params(0.9, 0.4, 8, 1);
        let (h_env, v_env) = env_pair(&params, 5);
        let h = build_hamiltonian(&params, &h_env, &v_env).unwrap();
        let grid = TimeGrid::uniform(0.37, 9);
        let series = propagate_channel(&grid, &h).unwrap();
        let half = C64::new(0.5, 0.0);
        let ih = C64::new(0.0, 0.5);
        for i in [0, 3, 8] {
            let u = direct::propagator(&h, grid.t(i));
            let rho_z = [
                [C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
                [C64::new(0.0, 0.0), C64::new(0.0, 0.0)],
            ];
            let rho_x = [[half, half], [half, half]];
            let rho_y = [[half, -ih], [ih, half]];
            let ez = direct::evolve_qubit(&u, rho_z);
            let ex = direct::evolve_qubit(&u, rho_x);
            let ey = direct::evolve_qubit(&u, rho_y);
            let r = ez[0][0].re;
            let zx = 2.0 * ex[1][0];
            let zy = 2.0 * ey[1][0];
            let z1 = (zx - C64::i() * zy) / 2.0;
            let z2 = (zx + C64::i() * zy) / 2.0;
            assert_abs_diff_eq!(series.r[i], r, epsilon = 1e-10);
            assert!((series.z1[i] - z1).norm() < 1e-10);
            assert!((series.z2[i] - z2).norm() < 1e-10);
            // Trace preservation & Hermiticity of evolved states.
            for e in [ez, ex, ey] {
                assert!((e[0][0] + e[1][1] - C64::new(1.0, 0.0)).norm() < 1e-10);
                assert!((e[0][1] - e[1][0].conj()).norm() < 1e-10);
            }
            // Unitality.
            let one = direct::evolve_qubit(
                &u,
                [
                    [C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
                    [C64::new(0.0, 0.0), C64::new(1.0, 0.0)],
                ],
            );
            assert!((one[0][0] - C64::new(1.0, 0.0)).norm() < 1e-10);
            assert!((one[1][1] - C64::new(1.0, 0.0)).norm() < 1e-10);
            assert!(one[0][1].norm() < 1e-10 && one[1][0].norm() < 1e-10);
        }
    }

    #[test]
    fn ensemble_reproducible_across_thread_counts() {
        let params = small_params(0.5, 0.25, 8, 12);
        let grid = TimeGrid::uniform(0.3, 24);
        let pool1 = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let pool2 = rayon::ThreadPoolBuilder::new()
            .num_threads(2)
            .build()
            .unwrap();
        let t1 = pool1.install(|| accumulate_ensemble(&params, &grid).unwrap());
        let t2 = pool2.install(|| accumulate_ensemble(&params, &grid).unwrap());
        assert_eq!(t1.points.len(), t2.points.len());
        for (a, b) in t1.points.iter().zip(&t2.points) {
            assert_eq!(a.r, b.r);
            assert_eq!(a.z1, b.z1);
            assert_eq!(a.z2, b.z2);
        }
        for (a, b) in t1.se.iter().zip(&t2.se) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn decoupled_ensemble_has_zero_errors() {
        let params = small_params(1.3, 0.0, 6, 5);
        let grid = TimeGrid::uniform(0.2, 12);
        let traj = accumulate_ensemble(&params, &grid).unwrap();
        for se in &traj.se {
            assert!(se.r < 1e-13 && se.re_z1 < 1e-13 && se.im_z1 < 1e-13);
            assert!(se.re_z2 < 1e-13 && se.im_z2 < 1e-13);
        }
    }

    #[test]
    fn prefix_equals_fresh_run() {
        let params = small_params(0.3, 0.3, 8, 10);
        let grid = TimeGrid::uniform(0.25, 16);
        let data = accumulate_with_realizations(&params, &grid).unwrap();
        for k in [1, 4, 10] {
            let prefix = data.trajectory_prefix(k);
            let fresh_params = ModelParams {
                n_samples: k,
                ..params.clone()
            };
            let fresh = accumulate_ensemble(&fresh_params, &grid).unwrap();
            for (a, b) in prefix.points.iter().zip(&fresh.points) {
                assert_eq!(a.r, b.r);
                assert_eq!(a.z1, b.z1);
                assert_eq!(a.z2, b.z2);
            }
            for (a, b) in prefix.se.iter().zip(&fresh.se) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn range_accumulation_matches_full_grid() {
        let params = small_params(0.6, 0.2, 8, 6);
        let grid = TimeGrid::uniform(0.4, 20);
        let full = accumulate_ensemble(&params, &grid).unwrap();
        let mut head = accumulate_range(&params, &grid, 0..8).unwrap();
        let tail = accumulate_range(&params, &grid, 8..20).unwrap();
        head.extend_with(tail);
        assert_eq!(head.points.len(), full.points.len());
        for (a, b) in head.points.iter().zip(&full.points) {
            assert_eq!(a.t, b.t);
            assert_eq!(a.r, b.r);
            assert_eq!(a.z1, b.z1);
            assert_eq!(a.z2, b.z2);
        }
    }

    #[test]
    fn standard_errors_shrink_with_ensemble_size() {
        let params = small_params(0.4, 0.3, 8, 48);
        let grid = TimeGrid::uniform(0.5, 10);
        let data = accumulate_with_realizations(&params, &grid).unwrap();
        let small = data.trajectory_prefix(12);
        let big = data.trajectory_prefix(48);
        // Expect se(12)/se(48) ~ 2, within a factor of 2.
        let avg = |t: &ChannelTrajectory| {
            t.se[1..]
                .iter()
                .map(|s| s.r + s.re_z1 + s.im_z1 + s.re_z2 + s.im_z2)
                .sum::<f64>()
                / (t.se.len() - 1) as f64
        };
        let ratio = avg(&small) / avg(&big);
        assert!(ratio > 1.0 && ratio < 4.0, "ratio {ratio}");
    }

    #[test]
    fn averaged_channel_stays_physical() {
        let params = small_params(0.5, 0.25, 12, 24);
        let grid = TimeGrid::uniform(0.3, 30);
        let traj = accumulate_ensemble(&params, &grid).unwrap();
        for (p, se) in traj.points.iter().zip(&traj.se) {
            let tol = 5.0 * (se.r + se.re_z1 + se.im_z1 + se.re_z2 + se.im_z2) + 1e-12;
            assert!(p.r >= -tol && p.r <= 1.0 + tol);
            assert!(p.z1.norm() + p.z2.norm() <= 1.0 + tol);
        }
    }

    #[test]
    fn off_x_entries_shrink_with_sampling() {
        // Off-pattern Choi entries are statistical noise; their RMS should
        // fall roughly like 1/sqrt(N * N_sam).
        let rms_off_x = |n: usize, n_sam: usize, delta: f64, lambda: f64| {
            let params = small_params(delta, lambda, n, n_sam);
            let t = 2.5;
            let mut acc = [[C64::new(0.0, 0.0); 4]; 4];
            for idx in 0..n_sam as u64 {
                let (h_env, v_env) = env_pair(&params, idx);
                let h = build_hamiltonian(&params, &h_env, &v_env).unwrap();
                let u = direct::propagator(&h, t);
                let c = direct::choi(&u, ());
                for i in 0..4 {
                    for j in 0..4 {
                        acc[i][j] += c[i][j];
                    }
                }
            }
            let x_slots = [(0, 0), (1, 1), (2, 2), (3, 3), (0, 3), (3, 0), (1, 2), (2, 1)];
            let mut sq = 0.0;
            let mut count = 0;
            for i in 0..4 {
                for j in 0..4 {
                    if !x_slots.contains(&(i, j)) {
                        sq += (acc[i][j] / n_sam as f64).norm_sqr();
                        count += 1;
                    }
                }
            }
            (sq / count as f64).sqrt()
        };
        let coarse = rms_off_x(8, 12, 0.4, 0.3);
        let fine = rms_off_x(16, 48, 0.4, 0.3);
        // sqrt((8*12)/(16*48)) ~ 0.35; allow statistical slack.
        assert!(
            fine < 0.75 * coarse,
            "off-X RMS did not shrink: {coarse} -> {fine}"
        );
    }

    #[test]
    fn trajectory_csv_roundtrip_is_exact() {
        let params = small_params(0.8, 0.15, 8, 4);
        let grid = TimeGrid::uniform(0.7, 9);
        let traj = accumulate_ensemble(&params, &grid).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        write_trajectory_csv(&path, &traj).unwrap();
        let back = read_trajectory_csv(&path).unwrap();
        assert_eq!(back.params, traj.params);
        assert_eq!(back.points.len(), traj.points.len());
        for (a, b) in back.points.iter().zip(&traj.points) {
            assert_eq!(a.t, b.t);
            assert_eq!(a.r, b.r);
            assert_eq!(a.z1, b.z1);
            assert_eq!(a.z2, b.z2);
        }
        for (a, b) in back.se.iter().zip(&traj.se) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn trajectory_csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(
            &path,
            "# delta=1e-1 lambda=0e0 N=4 N_sam=1 seed=1\n\
             t,r,re_z1,im_z1,re_z2,im_z2,se_r,se_re_z1,se_im_z1,se_re_z2,se_im_z2\n\
             0e0,1e0,1e0,0e0,0e0,0e0,0e0,0e0,0e0,0e0,0e0\n\
             2e0,1e0,1e0,0e0,0e0,0e0,0e0,0e0,0e0,0e0,0e0\n\
             1e0,1e0,1e0,0e0,0e0,0e0,0e0,0e0,0e0,0e0,0e0\n",
        )
        .unwrap();
        let err = read_trajectory_csv(&path).unwrap_err();
        match err {
            DynamicsError::TrajectoryParse { line, ref msg, .. } => {
                assert_eq!(line, 5, "{msg}");
                assert!(msg.contains("increasing"), "{msg}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_ensemble_is_rejected() {
        let params = small_params(0.5, 0.2, 8, 0);
        let grid = TimeGrid::uniform(0.5, 4);
        assert!(matches!(
            accumulate_ensemble(&params, &grid),
            Err(DynamicsError::EmptyEnsemble)
        ));
    }
}
