//! Time-local divisibility and contractivity criteria and the three
//! non-Markovianity measures (divisibility-integral, distinguishability
//! backflow, maximal distinguishability recovery), evaluated on an averaged
//! channel trajectory.

use crate::channel::ChannelError;
use crate::dynamics::{ChannelPoint, ChannelTrajectory};
use num_complex::Complex64 as C64;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

/// Purity threshold defining the process ending time.
pub const ENDING_PURITY: f64 = 0.51;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("derivative estimation needs at least 3 points, got {0}")]
    InsufficientData(usize),
    #[error("purity stays above {threshold} (minimum {min_purity:.6} at t={t_min:.3})")]
    EndingTimeNotReached {
        threshold: f64,
        min_purity: f64,
        t_min: f64,
    },
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Time derivatives of the channel parameters on a uniform grid: central
/// differences in the interior, second-order one-sided stencils at the ends.
#[derive(Debug, Clone)]
pub struct Derivatives {
    pub r_dot: Vec<f64>,
    pub z1_dot: Vec<C64>,
    pub z2_dot: Vec<C64>,
}

fn diff_series(vals: &[f64], dt: f64) -> Vec<f64> {
    let n = vals.len();
    let mut out = vec![0.0; n];
    // Difference form keeps the stencils exact on constant series.
    out[0] = (4.0 * (vals[1] - vals[0]) - (vals[2] - vals[0])) / (2.0 * dt);
    for i in 1..n - 1 {
        out[i] = (vals[i + 1] - vals[i - 1]) / (2.0 * dt);
    }
    out[n - 1] =
        (4.0 * (vals[n - 1] - vals[n - 2]) - (vals[n - 1] - vals[n - 3])) / (2.0 * dt);
    out
}

/// Quadratic Savitzky-Golay smoothing with half-width `half`. A quadratic
/// least-squares fit over the window evaluates at the center as a weighted
/// average with weights proportional to (3m^2 - 1 - 5j^2).
fn smooth_series(vals: &[f64], half: usize) -> Vec<f64> {
    let n = vals.len();
    if half == 0 || n < 2 * half + 1 {
        return vals.to_vec();
    }
    let m = half as f64;
    let norm: f64 = (-(half as isize)..=half as isize)
        .map(|j| 3.0 * m * (m + 1.0) - 1.0 - 5.0 * (j * j) as f64)
        .sum();
    let mut out = vals.to_vec();
    for i in half..n - half {
        let mut acc = 0.0;
        for j in -(half as isize)..=half as isize {
            let w = 3.0 * m * (m + 1.0) - 1.0 - 5.0 * (j * j) as f64;
            acc += w * vals[(i as isize + j) as usize];
        }
        out[i] = acc / norm;
    }
    out
}

/// Estimate (r_dot, z1_dot, z2_dot) on the trajectory's uniform grid.
/// `smoothing_half_width` = 0 disables the optional pre-smoothing.
pub fn estimate_derivatives(
    traj: &ChannelTrajectory,
    smoothing_half_width: usize,
) -> Result<Derivatives, MeasureError> {
    let n = traj.points.len();
    if n < 3 {
        return Err(MeasureError::InsufficientData(n));
    }
    let dt = traj.dt;
    let mut comp: Vec<Vec<f64>> = (0..5)
        .map(|c| {
            traj.points
                .iter()
                .map(|p| match c {
                    0 => p.r,
                    1 => p.z1.re,
                    2 => p.z1.im,
                    3 => p.z2.re,
                    _ => p.z2.im,
                })
                .collect()
        })
        .collect();
    if smoothing_half_width > 0 {
        for series in comp.iter_mut() {
            *series = smooth_series(series, smoothing_half_width);
        }
    }
    let d: Vec<Vec<f64>> = comp.iter().map(|s| diff_series(s, dt)).collect();
    Ok(Derivatives {
        r_dot: d[0].clone(),
        z1_dot: d[1]
            .iter()
            .zip(&d[2])
            .map(|(re, im)| C64::new(*re, *im))
            .collect(),
        z2_dot: d[3]
            .iter()
            .zip(&d[4])
            .map(|(re, im)| C64::new(*re, *im))
            .collect(),
    })
}

/// The three divisibility delta-quantities at one time point. `valid` is
/// false where the channel is not invertible within `tol`.
#[derive(Debug, Clone, Copy)]
pub struct DivisibilityDeltas {
    pub t: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta_q: f64,
    pub valid: bool,
}

/// delta1 = -Re[z1_dot z1* - z2_dot z2*]/D, delta_q = -r_dot/(2r-1),
/// delta2 = |z2_dot z1 - z1_dot z2| / |D| with D = |z1|^2 - |z2|^2.
pub fn divisibility_deltas(
    traj: &ChannelTrajectory,
    derivs: &Derivatives,
    tol: f64,
) -> Vec<DivisibilityDeltas> {
    traj.points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = 2.0 * p.r - 1.0;
            let dz = p.z1.norm_sqr() - p.z2.norm_sqr();
            if d.abs() <= tol || dz.abs() <= tol {
                return DivisibilityDeltas {
                    t: p.t,
                    delta1: 0.0,
                    delta2: 0.0,
                    delta_q: 0.0,
                    valid: false,
                };
            }
            let z1d = derivs.z1_dot[i];
            let z2d = derivs.z2_dot[i];
            DivisibilityDeltas {
                t: p.t,
                delta1: -(z1d * p.z1.conj() - z2d * p.z2.conj()).re / dz,
                delta2: (z2d * p.z1 - z1d * p.z2).norm() / dz.abs(),
                delta_q: -derivs.r_dot[i] / d,
                valid: true,
            }
        })
        .collect()
}

/// g(t) = (|d1 - dq| + |dq + d2| + |dq - d2| - dq - d1)/2; non-negative, and
/// zero exactly when d2 <= dq <= d1. The formula is non-negative up to
/// rounding, so the result is clamped at zero.
pub fn g_of_t(d: &DivisibilityDeltas) -> Option<f64> {
    if !d.valid {
        return None;
    }
    Some(
        (((d.delta1 - d.delta_q).abs() + (d.delta_q + d.delta2).abs()
            + (d.delta_q - d.delta2).abs()
            - d.delta_q
            - d.delta1)
            / 2.0)
            .max(0.0),
    )
}

/// Divisibility measure: trapezoidal integral of g over valid points, as a
/// running series over the grid. Intervals touching a non-invertible point
/// contribute nothing, and the two boundary points are excluded as well:
/// their one-sided stencils carry a phase-curvature bias that central
/// differences cancel, which would otherwise leak into the integral.
pub fn nm_rhp_series(deltas: &[DivisibilityDeltas], dt: f64) -> Vec<f64> {
    let n = deltas.len();
    let g: Vec<Option<f64>> = deltas.iter().map(g_of_t).collect();
    let mut out = Vec::with_capacity(n);
    let mut acc = 0.0;
    for i in 0..n {
        if i >= 2 && i + 1 < n {
            if let (Some(a), Some(b)) = (g[i - 1], g[i]) {
                acc += 0.5 * dt * (a + b);
            }
        }
        out.push(acc);
    }
    out
}

/// Divisibility measure at the end of the trajectory, with the g(t) series.
pub fn nm_rhp(
    traj: &ChannelTrajectory,
    derivs: &Derivatives,
    tol: f64,
) -> (f64, Vec<Option<f64>>) {
    let deltas = divisibility_deltas(traj, derivs, tol);
    let series = nm_rhp_series(&deltas, traj.dt);
    let g = deltas.iter().map(g_of_t).collect();
    (series.last().copied().unwrap_or(0.0), g)
}

/// Initial Bloch-vector difference of a state pair: direction (theta, phi)
/// and length `r_scale` (2 for antipodal pure states).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlochPair {
    pub theta: f64,
    pub phi: f64,
    pub r_scale: f64,
}

/// Trace distance between the evolved pair:
/// T = R/2 sqrt((2r-1)^2 cos^2(theta) + |z1 + z2 e^{-2i phi}|^2 sin^2(theta)).
/// The length enters as an exact multiplicative factor.
pub fn trace_distance(p: &ChannelPoint, pair: &BlochPair) -> f64 {
    pair.r_scale * unit_trace_distance(p, pair.theta, pair.phi)
}

fn unit_trace_distance(p: &ChannelPoint, theta: f64, phi: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    let d = 2.0 * p.r - 1.0;
    let m = (p.z1 + p.z2 * C64::from_polar(1.0, -2.0 * phi)).norm_sqr();
    0.5 * (d * d * c * c + m * s * s).sqrt()
}

/// Maximization grid over initial-state pairs: theta in [0, pi/2] and phi in
/// [0, pi), exploiting the symmetries of the trace-distance formula.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StateGrid {
    pub n_theta: usize,
    pub n_phi: usize,
}

impl Default for StateGrid {
    fn default() -> Self {
        StateGrid {
            n_theta: 31,
            n_phi: 31,
        }
    }
}

impl StateGrid {
    fn pairs(&self, r_scale: f64) -> Vec<BlochPair> {
        assert!(self.n_theta >= 2 && self.n_phi >= 2, "state grid too coarse");
        let mut out = Vec::with_capacity(self.n_theta * self.n_phi);
        for it in 0..self.n_theta {
            let theta =
                std::f64::consts::FRAC_PI_2 * it as f64 / (self.n_theta - 1) as f64;
            for ip in 0..self.n_phi {
                let phi = std::f64::consts::PI * ip as f64 / self.n_phi as f64;
                out.push(BlochPair {
                    theta,
                    phi,
                    r_scale,
                });
            }
        }
        out
    }
}

/// Derivative of a trace-distance series via the shared difference stencils.
fn sigma_series(t_series: &[f64], dt: f64) -> Vec<f64> {
    diff_series(t_series, dt)
}

/// Integral over the positive part of sigma, as a running trapezoid series.
fn positive_part_integral(sigma: &[f64], dt: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(sigma.len());
    let mut acc = 0.0;
    for i in 0..sigma.len() {
        if i > 0 {
            acc += 0.5 * dt * (sigma[i - 1].max(0.0) + sigma[i].max(0.0));
        }
        out.push(acc);
    }
    out
}

#[derive(Debug, Clone)]
pub struct BlpResult {
    pub value: f64,
    pub argmax: BlochPair,
    /// Measure as a function of the evaluation horizon (same grid).
    pub horizon: Vec<f64>,
}

/// Distinguishability-backflow measure: for each pair on the grid, integrate
/// the positive part of dT/dt; return the maximum over pairs. Ties resolve
/// to the smallest theta, then smallest phi.
pub fn nm_blp(traj: &ChannelTrajectory, grid: &StateGrid, r_scale: f64) -> BlpResult {
    let n = traj.points.len();
    let pairs = grid.pairs(r_scale);
    let mut best_value = f64::NEG_INFINITY;
    let mut best_pair = pairs[0];
    let mut horizon = vec![0.0; n];
    if n < 3 {
        return BlpResult {
            value: 0.0,
            argmax: best_pair,
            horizon,
        };
    }
    let mut t_series = vec![0.0; n];
    for pair in &pairs {
        for (i, p) in traj.points.iter().enumerate() {
            t_series[i] = trace_distance(p, pair);
        }
        let sigma = sigma_series(&t_series, traj.dt);
        let running = positive_part_integral(&sigma, traj.dt);
        for i in 0..n {
            if running[i] > horizon[i] {
                horizon[i] = running[i];
            }
        }
        let v = running[n - 1];
        if v > best_value {
            best_value = v;
            best_pair = *pair;
        }
    }
    BlpResult {
        value: best_value.max(0.0),
        argmax: best_pair,
        horizon,
    }
}

#[derive(Debug, Clone)]
pub struct MdrResult {
    pub value: f64,
    pub argmax: BlochPair,
    pub t_recover: f64,
    pub t_min: f64,
    pub horizon: Vec<f64>,
}

/// Maximal distinguishability recovery: max over pairs and times
/// t >= t1 >= t2 >= 0 of T(t1) - T(t2), via a running-minimum scan per pair.
pub fn nm_mdr(traj: &ChannelTrajectory, grid: &StateGrid, r_scale: f64) -> MdrResult {
    let n = traj.points.len();
    let pairs = grid.pairs(r_scale);
    let mut best = MdrResult {
        value: 0.0,
        argmax: pairs[0],
        t_recover: 0.0,
        t_min: 0.0,
        horizon: vec![0.0; n],
    };
    let mut t_series = vec![0.0; n];
    for pair in &pairs {
        for (i, p) in traj.points.iter().enumerate() {
            t_series[i] = trace_distance(p, pair);
        }
        let mut run_min = f64::INFINITY;
        let mut run_min_t = 0.0;
        let mut pair_best = 0.0f64;
        let mut pair_t1 = 0.0;
        let mut pair_t2 = 0.0;
        for i in 0..n {
            let t = traj.points[i].t;
            if t_series[i] < run_min {
                run_min = t_series[i];
                run_min_t = t;
            }
            let recovery = t_series[i] - run_min;
            if recovery > pair_best {
                pair_best = recovery;
                pair_t1 = t;
                pair_t2 = run_min_t;
            }
            if pair_best > best.horizon[i] {
                best.horizon[i] = pair_best;
            }
        }
        if pair_best > best.value {
            best.value = pair_best;
            best.argmax = *pair;
            best.t_recover = pair_t1;
            best.t_min = pair_t2;
        }
    }
    best
}

/// Contractivity delta-quantities and the largest derivative of M(phi).
#[derive(Debug, Clone, Copy)]
pub struct ContractivityDeltas {
    pub t: f64,
    pub delta_q: f64,
    pub delta1_c: f64,
    pub delta2_c: f64,
    /// dA/dt + 2|dZ/dt| with A = |z1|^2 + |z2|^2 and Z = z1 z2*;
    /// equals 2 (delta2_c - delta1_c).
    pub m_dot_max: f64,
}

/// delta1_c = -Re(z1_dot z1* + z2_dot z2*), delta2_c = |z1_dot z2* + z1 z2_dot*|.
/// The pair is contractive at t iff delta_q >= 0 and delta1_c >= delta2_c.
pub fn contractivity_deltas(
    traj: &ChannelTrajectory,
    derivs: &Derivatives,
) -> Vec<ContractivityDeltas> {
    traj.points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let z1d = derivs.z1_dot[i];
            let z2d = derivs.z2_dot[i];
            let delta1_c = -(z1d * p.z1.conj() + z2d * p.z2.conj()).re;
            let delta2_c = (z1d * p.z2.conj() + p.z1 * z2d.conj()).norm();
            let d = 2.0 * p.r - 1.0;
            let delta_q = if d.abs() > 0.0 {
                -derivs.r_dot[i] / d
            } else {
                0.0
            };
            ContractivityDeltas {
                t: p.t,
                delta_q,
                delta1_c,
                delta2_c,
                m_dot_max: 2.0 * (delta2_c - delta1_c),
            }
        })
        .collect()
}

/// dT/dt along one fixed state pair (the maximizer found by `nm_blp`).
pub fn sigma_max(traj: &ChannelTrajectory, pair: &BlochPair) -> Vec<f64> {
    let t_series: Vec<f64> = traj
        .points
        .iter()
        .map(|p| trace_distance(p, pair))
        .collect();
    if t_series.len() < 3 {
        return vec![0.0; t_series.len()];
    }
    sigma_series(&t_series, traj.dt)
}

/// Purity of the evolved sigma_y eigenstate: P = 1/2 + |z1 - z2|^2 / 2.
pub fn purity(p: &ChannelPoint) -> f64 {
    0.5 + 0.5 * (p.z1 - p.z2).norm_sqr()
}

/// First time the purity drops to the threshold, linearly interpolated
/// between grid points. Later re-crossings are ignored.
pub fn ending_time(traj: &ChannelTrajectory) -> Result<f64, MeasureError> {
    let mut min_purity = f64::INFINITY;
    let mut t_min = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    for p in &traj.points {
        let pur = purity(p);
        if pur < min_purity {
            min_purity = pur;
            t_min = p.t;
        }
        if pur <= ENDING_PURITY {
            return Ok(match prev {
                Some((t0, p0)) if p0 > ENDING_PURITY => {
                    t0 + (p.t - t0) * (p0 - ENDING_PURITY) / (p0 - pur)
                }
                _ => p.t,
            });
        }
        prev = Some((p.t, pur));
    }
    Err(MeasureError::EndingTimeNotReached {
        threshold: ENDING_PURITY,
        min_purity,
        t_min,
    })
}

/// Per-point record of every local criterion, for export.
#[derive(Debug, Clone)]
pub struct CriteriaSeries {
    pub t: Vec<f64>,
    pub divisibility: Vec<DivisibilityDeltas>,
    pub g: Vec<Option<f64>>,
    pub contractivity: Vec<ContractivityDeltas>,
    pub sigma_max: Vec<f64>,
    pub blp_argmax: BlochPair,
}

/// Evaluate all local criteria on a (truncated) trajectory.
pub fn criteria_series(
    traj: &ChannelTrajectory,
    tol: f64,
    grid: &StateGrid,
    r_scale: f64,
    smoothing_half_width: usize,
) -> Result<CriteriaSeries, MeasureError> {
    let derivs = estimate_derivatives(traj, smoothing_half_width)?;
    let divisibility = divisibility_deltas(traj, &derivs, tol);
    let g = divisibility.iter().map(g_of_t).collect();
    let contractivity = contractivity_deltas(traj, &derivs);
    let blp = nm_blp(traj, grid, r_scale);
    let sigma = sigma_max(traj, &blp.argmax);
    Ok(CriteriaSeries {
        t: traj.points.iter().map(|p| p.t).collect(),
        divisibility,
        g,
        contractivity,
        sigma_max: sigma,
        blp_argmax: blp.argmax,
    })
}

/// Per-point summary of one parameter point.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct NMReport {
    pub delta: f64,
    pub lambda: f64,
    pub env_dim: usize,
    pub n_samples: usize,
    pub master_seed: u64,
    /// Process ending time; equals the evaluation horizon when the purity
    /// threshold was never reached (then `t_end_reached` is false).
    pub t_end: f64,
    pub t_end_reached: bool,
    pub nm_rhp: f64,
    pub nm_blp: f64,
    pub nm_mdr: f64,
    pub blp_argmax: BlochPair,
    pub mdr_argmax: BlochPair,
    pub mdr_t_recover: f64,
    pub mdr_t_min: f64,
    /// Bloch-pair length convention used for BLP/MDR.
    pub blp_r: f64,
    pub state_grid: StateGrid,
    pub invert_tol: f64,
}

/// Export the criterion time series as CSV:
/// `t, delta1, delta2, deltaq, g, delta1C, delta2C, sigma_max, valid`.
pub fn write_criteria_csv(path: &Path, series: &CriteriaSeries, blp_r: f64) -> std::io::Result<()> {
    let mut out = String::new();
    writeln!(
        out,
        "# blp_R={} argmax_theta={} argmax_phi={}",
        fmt(blp_r),
        fmt(series.blp_argmax.theta),
        fmt(series.blp_argmax.phi)
    )
    .unwrap();
    writeln!(out, "t,delta1,delta2,deltaq,g,delta1C,delta2C,sigma_max,valid").unwrap();
    for i in 0..series.t.len() {
        let d = &series.divisibility[i];
        let c = &series.contractivity[i];
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            fmt(series.t[i]),
            fmt(d.delta1),
            fmt(d.delta2),
            fmt(d.delta_q),
            fmt(series.g[i].unwrap_or(f64::NAN)),
            fmt(c.delta1_c),
            fmt(c.delta2_c),
            fmt(series.sigma_max[i]),
            if d.valid { 1 } else { 0 }
        )
        .unwrap();
    }
    crate::fsutil::write_atomic(path, out.as_bytes())
}

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ModelParams;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn synthetic_traj(
        dt: f64,
        n: usize,
        f: impl Fn(f64) -> (f64, C64, C64),
    ) -> ChannelTrajectory {
        let params = ModelParams {
            delta: 1.0,
            lambda: 0.0,
            env_dim: 2,
            n_samples: 1,
            master_seed: 0,
        };
        let points: Vec<ChannelPoint> = (0..n)
            .map(|i| {
                let t = i as f64 * dt;
                let (r, z1, z2) = f(t);
                ChannelPoint { t, r, z1, z2 }
            })
            .collect();
        let se = vec![Default::default(); n];
        ChannelTrajectory {
            params,
            dt,
            points,
            se,
            n_accumulated: 1,
        }
    }

    fn unitary_traj(delta: f64, dt: f64, n: usize) -> ChannelTrajectory {
        synthetic_traj(dt, n, |t| {
            (1.0, C64::from_polar(1.0, -delta * t), C64::new(0.0, 0.0))
        })
    }

    #[test]
    fn derivatives_exact_for_quadratics() {
        let dt = 0.1;
        let traj = synthetic_traj(dt, 20, |t| {
            (t * t, C64::new(t * t, -t * t), C64::new(0.5 * t * t, 0.0))
        });
        let d = estimate_derivatives(&traj, 0).unwrap();
        for i in 0..20 {
            let t = i as f64 * dt;
            assert_abs_diff_eq!(d.r_dot[i], 2.0 * t, epsilon = 1e-10);
            assert_abs_diff_eq!(d.z1_dot[i].re, 2.0 * t, epsilon = 1e-10);
            assert_abs_diff_eq!(d.z1_dot[i].im, -2.0 * t, epsilon = 1e-10);
            assert_abs_diff_eq!(d.z2_dot[i].re, t, epsilon = 1e-10);
        }
    }

    #[test]
    fn derivatives_of_constant_are_zero() {
        let traj = synthetic_traj(0.2, 10, |_| (0.7, C64::new(0.3, 0.1), C64::new(0.0, 0.0)));
        let d = estimate_derivatives(&traj, 0).unwrap();
        for i in 0..10 {
            assert_eq!(d.r_dot[i], 0.0);
            assert_eq!(d.z1_dot[i], C64::new(0.0, 0.0));
        }
    }

    #[test]
    fn derivatives_match_analytic_phase() {
        let delta = 0.9;
        let dt = 0.05;
        let traj = unitary_traj(delta, dt, 200);
        let d = estimate_derivatives(&traj, 0).unwrap();
        for i in (1..199).step_by(17) {
            let t = i as f64 * dt;
            let expect = -C64::i() * delta * C64::from_polar(1.0, -delta * t);
            let err = (d.z1_dot[i] - expect).norm();
            assert!(err < delta.powi(3) * dt * dt, "err {err}");
        }
    }

    #[test]
    fn too_few_points_is_an_error() {
        let traj = synthetic_traj(0.1, 2, |_| (1.0, C64::new(1.0, 0.0), C64::new(0.0, 0.0)));
        assert!(matches!(
            estimate_derivatives(&traj, 0),
            Err(MeasureError::InsufficientData(2))
        ));
    }

    #[test]
    fn unitary_trajectory_has_zero_deltas_and_measures() {
        let traj = unitary_traj(0.7, 0.1, 120);
        let derivs = estimate_derivatives(&traj, 0).unwrap();
        let deltas = divisibility_deltas(&traj, &derivs, 1e-6);
        // Interior points: the one-sided boundary stencils leave an
        // O(dt^3) bias in delta1 that central differences cancel.
        for d in &deltas[1..119] {
            assert!(d.valid);
            assert!(d.delta1.abs() < 1e-10);
            assert!(d.delta2.abs() < 1e-10);
            assert!(d.delta_q.abs() < 1e-10);
            assert!(g_of_t(d).unwrap() < 1e-10);
        }
        let (rhp, _) = nm_rhp(&traj, &derivs, 1e-6);
        assert!(rhp < 1e-10);
        let grid = StateGrid::default();
        let blp = nm_blp(&traj, &grid, 2.0);
        assert!(blp.value < 1e-10);
        let mdr = nm_mdr(&traj, &grid, 2.0);
        assert!(mdr.value < 1e-10);
        let con = contractivity_deltas(&traj, &derivs);
        for c in &con[1..119] {
            assert!(c.delta1_c.abs() < 1e-10);
            assert!(c.delta2_c.abs() < 1e-10);
        }
    }

    #[test]
    fn g_formula_arithmetic() {
        let ok = DivisibilityDeltas {
            t: 0.0,
            delta1: 0.5,
            delta2: 0.1,
            delta_q: 0.2,
            valid: true,
        };
        assert_eq!(g_of_t(&ok).unwrap(), 0.0);
        let bad = DivisibilityDeltas {
            t: 0.0,
            delta1: 0.1,
            delta2: 0.3,
            delta_q: 0.2,
            valid: true,
        };
        assert_abs_diff_eq!(g_of_t(&bad).unwrap(), 0.2, epsilon = 1e-15);
        let invalid = DivisibilityDeltas {
            valid: false,
            ..bad
        };
        assert!(g_of_t(&invalid).is_none());
    }

    #[test]
    fn invalid_points_are_flagged_not_thrown() {
        // r = 1/2 makes the population block singular.
        let traj = synthetic_traj(1.0, 10, |t| {
            let r = if (1.0 - 0.1 * t) > 0.55 { 1.0 - 0.1 * t } else { 0.5 };
            (r, C64::new(0.8, 0.0), C64::new(0.0, 0.0))
        });
        let derivs = estimate_derivatives(&traj, 0).unwrap();
        let deltas = divisibility_deltas(&traj, &derivs, 1e-6);
        assert!(deltas.iter().any(|d| !d.valid));
        assert!(deltas[0].valid);
    }

    #[test]
    fn pure_decay_is_markovian_by_contractivity() {
        let gamma = 0.4;
        let traj = synthetic_traj(0.05, 100, |t| {
            (1.0, C64::new((-gamma * t).exp(), 0.0), C64::new(0.0, 0.0))
        });
        let derivs = estimate_derivatives(&traj, 0).unwrap();
        let con = contractivity_deltas(&traj, &derivs);
        for (i, c) in con.iter().enumerate() {
            let t = traj.points[i].t;
            let expect = gamma * (-2.0 * gamma * t).exp();
            assert!((c.delta1_c - expect).abs() < 1e-3, "t={t}");
            assert!(c.delta2_c.abs() < 1e-12);
            assert!(c.m_dot_max <= 1e-12);
            assert_abs_diff_eq!(
                c.m_dot_max,
                2.0 * (c.delta2_c - c.delta1_c),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn monotone_contraction_gives_zero_blp_and_mdr() {
        // |z1| decreasing, z2 = 0, r = 1/2 + |z1|/2: T decreases for every
        // pair, so there is no backflow and no recovery.
        let traj = synthetic_traj(0.1, 80, |t| {
            let a = (-0.3 * t).exp();
            (0.5 + 0.5 * a, C64::new(a, 0.0), C64::new(0.0, 0.0))
        });
        let grid = StateGrid::default();
        let blp = nm_blp(&traj, &grid, 2.0);
        assert!(blp.value <= 0.0 + 1e-14);
        let mdr = nm_mdr(&traj, &grid, 2.0);
        assert_eq!(mdr.value, 0.0);
    }

    #[test]
    fn trace_distance_trivia() {
        let p0 = ChannelPoint {
            t: 0.0,
            r: 1.0,
            z1: C64::new(1.0, 0.0),
            z2: C64::new(0.0, 0.0),
        };
        // Orthogonal pure pair at t = 0.
        for (theta, phi) in [(0.0, 0.0), (0.7, 1.1), (1.3, 2.9)] {
            let pair = BlochPair {
                theta,
                phi,
                r_scale: 2.0,
            };
            assert_abs_diff_eq!(trace_distance(&p0, &pair), 1.0, epsilon = 1e-14);
        }
        // theta = 0 collapses to R |2r-1| / 2.
        let p = ChannelPoint {
            t: 1.0,
            r: 0.81,
            z1: C64::new(0.3, 0.2),
            z2: C64::new(0.05, -0.02),
        };
        let pair = BlochPair {
            theta: 0.0,
            phi: 0.4,
            r_scale: 1.3,
        };
        assert_abs_diff_eq!(
            trace_distance(&p, &pair),
            1.3 * (2.0 * 0.81f64 - 1.0).abs() / 2.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn ending_time_trivia() {
        // t = 0 has purity exactly 1.
        let traj = unitary_traj(0.3, 0.1, 50);
        assert_abs_diff_eq!(purity(&traj.points[0]), 1.0, epsilon = 1e-15);
        // Unitary trajectory never crosses.
        match ending_time(&traj) {
            Err(MeasureError::EndingTimeNotReached { min_purity, .. }) => {
                assert!(min_purity > 0.99)
            }
            other => panic!("expected not-reached, got {other:?}"),
        }
        // Purity = 1/2 + |z1|^2/2 with |z1|^2 = 1 - 0.1 t crosses 0.51 when
        // |z1|^2 = 0.02, i.e. at t = 9.8, between grid points.
        let traj = synthetic_traj(1.0, 11, |t| {
            let a = (1.0 - 0.1 * t).max(0.0);
            (1.0, C64::new(a.sqrt(), 0.0), C64::new(0.0, 0.0))
        });
        let te = ending_time(&traj).unwrap();
        assert_abs_diff_eq!(te, 9.8, epsilon = 1e-12);
    }

    #[test]
    fn sigma_max_integral_matches_blp_exactly() {
        // Oscillating coherence produces genuine backflow; the positive-part
        // trapezoid of sigma at the argmax pair must reproduce the BLP value.
        let traj = synthetic_traj(0.05, 400, |t| {
            let a = (-0.1 * t).exp() * (0.6 + 0.4 * (1.3 * t).cos());
            (
                0.5 + 0.5 * (-0.05 * t).exp(),
                C64::from_polar(a.min(1.0), -0.4 * t),
                C64::new(0.0, 0.0),
            )
        });
        let grid = StateGrid::default();
        let blp = nm_blp(&traj, &grid, 2.0);
        assert!(blp.value > 0.01);
        let sigma = sigma_max(&traj, &blp.argmax);
        let integral = positive_part_integral(&sigma, traj.dt);
        let rel = (integral.last().unwrap() - blp.value).abs() / blp.value;
        assert!(rel < 1e-10, "relative mismatch {rel}");
    }

    #[test]
    fn horizon_series_are_monotone() {
        let traj = synthetic_traj(0.05, 300, |t| {
            let a = (-0.2 * t).exp() * (0.7 + 0.3 * (2.0 * t).cos());
            (
                0.5 + 0.5 * (-0.15 * t).exp(),
                C64::from_polar(a.min(1.0), -0.8 * t),
                C64::from_polar(0.05 * (1.0 - (-t).exp()), 0.3 * t),
            )
        });
        let derivs = estimate_derivatives(&traj, 0).unwrap();
        let deltas = divisibility_deltas(&traj, &derivs, 1e-6);
        let rhp = nm_rhp_series(&deltas, traj.dt);
        let grid = StateGrid::default();
        let blp = nm_blp(&traj, &grid, 2.0);
        let mdr = nm_mdr(&traj, &grid, 2.0);
        for series in [&rhp, &blp.horizon, &mdr.horizon] {
            for w in series.windows(2) {
                assert!(w[1] >= w[0] - 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn trace_distance_matches_eigenvalue_oracle(
            r in 0.0f64..=1.0,
            m1 in 0.0f64..=1.0,
            p1 in 0.0f64..std::f64::consts::TAU,
            m2 in 0.0f64..=1.0,
            p2 in 0.0f64..std::f64::consts::TAU,
            theta in 0.0f64..=std::f64::consts::PI,
            phi in 0.0f64..std::f64::consts::TAU,
            scale in 0.01f64..=2.0,
        ) {
            let p = ChannelPoint {
                t: 0.0,
                r,
                z1: C64::from_polar(m1 * r, p1),
                z2: C64::from_polar(m2 * (1.0 - r), p2),
            };
            let pair = BlochPair { theta, phi, r_scale: scale };
            // Evolved difference operator in the Bloch parametrization:
            // Lambda[c . sigma / 2] for c = R (sin cos, sin sin, cos).
            let (st, ct) = theta.sin_cos();
            let (sp, cp) = phi.sin_cos();
            let c = [scale * st * cp, scale * st * sp, scale * ct];
            let zx = p.z1 + p.z2;
            let zy = C64::i() * (p.z1 - p.z2);
            let off = (c[0] * zx + c[1] * zy) / 2.0;
            let diag = c[2] * (2.0 * r - 1.0) / 2.0;
            // Hermitian traceless [[a, b*], [b, -a]]: |lambda| = sqrt(a^2+|b|^2).
            let oracle = 2.0 * (diag * diag + off.norm_sqr()).sqrt() / 2.0;
            let ours = trace_distance(&p, &pair);
            prop_assert!((ours - oracle).abs() < 1e-12, "{ours} vs {oracle}");
        }

        #[test]
        fn trace_distance_homogeneity_is_exact(
            r in 0.0f64..=1.0,
            theta in 0.0f64..=std::f64::consts::PI,
            phi in 0.0f64..std::f64::consts::TAU,
            scale in 0.01f64..=2.0,
        ) {
            let p = ChannelPoint {
                t: 0.0,
                r,
                z1: C64::from_polar(0.7 * r, 1.0),
                z2: C64::from_polar(0.2 * (1.0 - r), 2.0),
            };
            let unit = BlochPair { theta, phi, r_scale: 1.0 };
            let scaled = BlochPair { theta, phi, r_scale: scale };
            prop_assert_eq!(
                trace_distance(&p, &scaled),
                scale * trace_distance(&p, &unit)
            );
        }

        #[test]
        fn g_zero_iff_double_inequality(
            d1 in -1.0f64..1.0,
            dq in -1.0f64..1.0,
            d2 in 0.0f64..1.0,
        ) {
            let d = DivisibilityDeltas {
                t: 0.0,
                delta1: d1,
                delta2: d2,
                delta_q: dq,
                valid: true,
            };
            let g = g_of_t(&d).unwrap();
            prop_assert!(g >= 0.0);
            let scale = 1.0 + d1.abs() + d2.abs() + dq.abs();
            let holds = d2 <= dq + 1e-12 * scale && dq <= d1 + 1e-12 * scale;
            prop_assert_eq!(g <= 1e-12 * scale, holds, "g={} deltas=({},{},{})", g, d1, dq, d2);
        }
    }
}
