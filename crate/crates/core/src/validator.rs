//! Independent check of learned pulses: spline interpolation and fixed-step
//! RK4 integration of the Schrödinger and Lindblad equations.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{uhlmann_fidelity, CMatrix, CVector};
use crate::pinn::TimeGrid;
use crate::system::{build_liouvillian, SystemSpec, N_CONTROLS};

pub const DEFAULT_SUBSTEPS: usize = 10;

/// Natural cubic spline through `(t_i, y_i)`, constant outside the knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalSpline {
    knots: Vec<f64>,
    values: Vec<f64>,
    /// Second derivatives at the knots.
    curvature: Vec<f64>,
}

impl NaturalSpline {
    pub fn new(knots: &[f64], values: &[f64]) -> Result<Self> {
        let n = knots.len();
        if n < 3 {
            return Err(Error::TooFewSamples(n));
        }
        if values.len() != n {
            return Err(Error::ShapeMismatch {
                op: "spline",
                lhs: (n, 1),
                rhs: (values.len(), 1),
            });
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("spline", "knots must be strictly increasing"));
        }
        let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
        // Tridiagonal system for the interior second derivatives (Thomas algorithm).
        let m = n - 2;
        let mut diag = vec![0.0; m];
        let mut upper = vec![0.0; m];
        let mut rhs = vec![0.0; m];
        for i in 0..m {
            diag[i] = 2.0 * (h[i] + h[i + 1]);
            upper[i] = h[i + 1];
            rhs[i] = 6.0 * ((values[i + 2] - values[i + 1]) / h[i + 1] - (values[i + 1] - values[i]) / h[i]);
        }
        for i in 1..m {
            let w = h[i] / diag[i - 1];
            diag[i] -= w * upper[i - 1];
            rhs[i] -= w * rhs[i - 1];
        }
        let mut curvature = vec![0.0; n];
        for i in (0..m).rev() {
            let next = if i + 1 < m { curvature[i + 2] } else { 0.0 };
            curvature[i + 1] = (rhs[i] - upper[i] * next) / diag[i];
        }
        Ok(Self {
            knots: knots.to_vec(),
            values: values.to_vec(),
            curvature,
        })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.knots.len();
        if t <= self.knots[0] {
            return self.values[0];
        }
        if t >= self.knots[n - 1] {
            return self.values[n - 1];
        }
        let i = self.knots.partition_point(|&k| k <= t).saturating_sub(1).min(n - 2);
        let (t0, t1) = (self.knots[i], self.knots[i + 1]);
        let h = t1 - t0;
        let a = (t1 - t) / h;
        let b = (t - t0) / h;
        let (m0, m1) = (self.curvature[i], self.curvature[i + 1]);
        a * self.values[i] + b * self.values[i + 1] + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0
    }
}

/// Control samples on a grid together with their interpolating splines.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseSchedule {
    pub grid: TimeGrid,
    /// `N × 4`.
    pub samples: Array2<f64>,
    splines: Vec<NaturalSpline>,
}

impl PulseSchedule {
    pub fn controls_at(&self, t: f64) -> [f64; N_CONTROLS] {
        let mut u = [0.0; N_CONTROLS];
        for (j, s) in self.splines.iter().enumerate() {
            u[j] = s.eval(t);
        }
        u
    }

    pub fn spline(&self, j: usize) -> &NaturalSpline {
        &self.splines[j]
    }
}

/// Fits one natural spline per control column at the grid points.
pub fn build_spline(samples: &Array2<f64>, grid: &TimeGrid) -> Result<PulseSchedule> {
    if samples.nrows() < 3 {
        return Err(Error::TooFewSamples(samples.nrows()));
    }
    if samples.nrows() != grid.n || samples.ncols() != N_CONTROLS {
        return Err(Error::ShapeMismatch {
            op: "build_spline",
            lhs: samples.dim(),
            rhs: (grid.n, N_CONTROLS),
        });
    }
    let knots = grid.points().to_vec();
    let splines = (0..N_CONTROLS)
        .map(|j| NaturalSpline::new(&knots, &samples.column(j).to_vec()))
        .collect::<Result<_>>()?;
    Ok(PulseSchedule {
        grid: *grid,
        samples: samples.clone(),
        splines,
    })
}

/// Classic RK4 for `ẋ = G(t) x` over `intervals` steps of `dt`, each split
/// into `substeps`. Returns the state at every interval boundary.
pub fn rk4_linear(
    generator: impl Fn(f64) -> CMatrix,
    x0: &CVector,
    t0: f64,
    dt: f64,
    intervals: usize,
    substeps: usize,
    mut after_step: impl FnMut(CVector) -> CVector,
) -> Result<(Vec<f64>, Vec<CVector>)> {
    if substeps == 0 {
        return Err(Error::config("substeps", "must be >= 1"));
    }
    let h = dt / substeps as f64;
    let mut times = vec![t0];
    let mut states = vec![x0.clone()];
    let mut x = x0.clone();
    for k in 0..intervals {
        for s in 0..substeps {
            let t = t0 + k as f64 * dt + s as f64 * h;
            let g0 = generator(t);
            let gm = generator(t + 0.5 * h);
            let g1 = generator(t + h);
            let k1 = g0.matvec(&x)?;
            let k2 = gm.matvec(&x.add(&k1.scale(0.5 * h))?)?;
            let k3 = gm.matvec(&x.add(&k2.scale(0.5 * h))?)?;
            let k4 = g1.matvec(&x.add(&k3.scale(h))?)?;
            let incr = k1.add(&k2.scale(2.0))?.add(&k3.scale(2.0))?.add(&k4)?;
            x = after_step(x.add(&incr.scale(h / 6.0))?);
        }
        times.push(t0 + (k + 1) as f64 * dt);
        states.push(x.clone());
    }
    Ok((times, states))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionResult {
    pub times: Vec<f64>,
    pub states: Option<Vec<CVector>>,
    pub densities: Option<Vec<CMatrix>>,
    /// `len(times) × 4` computational-basis populations.
    pub populations: Array2<f64>,
    /// Largest `|‖x‖ − 1|` (Schrödinger) or `|tr ρ − 1|` (Lindblad).
    pub max_norm_deviation: f64,
    /// Smallest density eigenvalue seen (Lindblad only).
    pub min_eigenvalue: Option<f64>,
    /// Largest Frobenius norm removed by re-symmetrization (Lindblad only).
    pub max_symmetrization: Option<f64>,
}

impl EvolutionResult {
    pub fn final_density(&self) -> CMatrix {
        match (&self.densities, &self.states) {
            (Some(d), _) => d.last().expect("nonempty").clone(),
            (None, Some(s)) => {
                let x = s.last().expect("nonempty");
                x.outer(x)
            }
            (None, None) => unreachable!("evolution stores states or densities"),
        }
    }

    /// `⟨ψ|ρ(T)|ψ⟩` for a pure reference state `ψ`.
    pub fn fidelity_to(&self, psi: &CVector) -> Result<f64> {
        let rho = self.final_density();
        Ok(psi.inner(&rho.matvec(psi)?).re.clamp(0.0, 1.0))
    }

    pub fn final_populations(&self) -> Array1<f64> {
        self.populations.row(self.populations.nrows() - 1).to_owned()
    }
}

/// Integrates `ẋ = −iH(t)x` over `[0, T]` without renormalization.
pub fn rk4_schrodinger(
    sys: &SystemSpec,
    schedule: &PulseSchedule,
    x0: &CVector,
    substeps_per_interval: usize,
) -> Result<EvolutionResult> {
    let minus_i = num_complex::Complex64::new(0.0, -1.0);
    let generator = |t: f64| sys.total_hamiltonian(&schedule.controls_at(t)).scale_complex(minus_i);
    let grid = schedule.grid;
    let (times, states) = rk4_linear(generator, x0, 0.0, grid.dt(), grid.n, substeps_per_interval, |x| x)?;
    let mut populations = Array2::zeros((states.len(), x0.dim()));
    let mut dev: f64 = 0.0;
    for (k, x) in states.iter().enumerate() {
        for a in 0..x0.dim() {
            populations[[k, a]] = x.get(a).norm_sqr();
        }
        dev = dev.max((x.euclidean_norm() - 1.0).abs());
    }
    Ok(EvolutionResult {
        times,
        states: Some(states),
        densities: None,
        populations,
        max_norm_deviation: dev,
        min_eigenvalue: None,
        max_symmetrization: None,
    })
}

/// Integrates `vec ρ̇ = L(t) vec ρ` with a generic generator, re-symmetrizing
/// `ρ` after every substep.
pub fn rk4_density(
    liouvillian: impl Fn(f64) -> Result<CMatrix>,
    rho0: &CMatrix,
    dt: f64,
    intervals: usize,
    substeps_per_interval: usize,
) -> Result<EvolutionResult> {
    let d = rho0.rows();
    // Build generators up front so errors surface before integrating.
    let mut cache = Vec::with_capacity(2 * intervals * substeps_per_interval + 1);
    let h = dt / substeps_per_interval.max(1) as f64;
    for i in 0..=(2 * intervals * substeps_per_interval) {
        cache.push(liouvillian(i as f64 * 0.5 * h)?);
    }
    let generator = |t: f64| {
        let idx = (t / (0.5 * h)).round() as usize;
        cache[idx.min(cache.len() - 1)].clone()
    };
    let mut max_sym: f64 = 0.0;
    let symmetrize = |v: CVector| -> CVector {
        let rho = CMatrix::unvec(&v, d).expect("square density");
        let herm = rho.add(&rho.adjoint()).expect("same shape").scale(0.5);
        max_sym = max_sym.max(herm.sub(&rho).expect("same shape").frobenius_norm());
        herm.vec()
    };
    let (times, vecs) = rk4_linear(generator, &rho0.vec(), 0.0, dt, intervals, substeps_per_interval, symmetrize)?;
    let mut populations = Array2::zeros((vecs.len(), d));
    let mut densities = Vec::with_capacity(vecs.len());
    let mut dev: f64 = 0.0;
    let mut min_eig = f64::INFINITY;
    for (k, v) in vecs.iter().enumerate() {
        let rho = CMatrix::unvec(v, d)?;
        for a in 0..d {
            populations[[k, a]] = rho.get(a, a).re;
        }
        dev = dev.max((rho.trace()?.re - 1.0).abs());
        let (eigs, _) = rho.hermitian_eig()?;
        min_eig = min_eig.min(eigs[0]);
        densities.push(rho);
    }
    Ok(EvolutionResult {
        times,
        states: None,
        densities: Some(densities),
        populations,
        max_norm_deviation: dev,
        min_eigenvalue: Some(min_eig),
        max_symmetrization: Some(max_sym),
    })
}

/// Lindblad evolution of `rho0` under the spline-interpolated controls.
pub fn rk4_lindblad(
    sys: &SystemSpec,
    schedule: &PulseSchedule,
    rho0: &CMatrix,
    collapse: &[CMatrix],
    substeps_per_interval: usize,
) -> Result<EvolutionResult> {
    if substeps_per_interval == 0 {
        return Err(Error::config("substeps", "must be >= 1"));
    }
    crate::linalg::check_density(rho0, 1e-8)?;
    let grid = schedule.grid;
    rk4_density(
        |t| build_liouvillian(&sys.total_hamiltonian(&schedule.controls_at(t)), collapse),
        rho0,
        grid.dt(),
        grid.n,
        substeps_per_interval,
    )
}

/// Uhlmann fidelity of the final states reached from `x0` under two pulse
/// sets, both evolved with the noiseless Lindblad integrator.
pub fn crosscheck(
    sys: &SystemSpec,
    pulses_closed: &PulseSchedule,
    pulses_open: &PulseSchedule,
    x0: &CVector,
    substeps_per_interval: usize,
) -> Result<f64> {
    if pulses_closed.grid != pulses_open.grid {
        return Err(Error::config("crosscheck", "pulse schedules use different grids"));
    }
    let rho0 = x0.outer(x0);
    let a = rk4_lindblad(sys, pulses_closed, &rho0, &[], substeps_per_interval)?;
    let b = rk4_lindblad(sys, pulses_open, &rho0, &[], substeps_per_interval)?;
    uhlmann_fidelity(&a.final_density(), &b.final_density())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::build_system;
    use num_complex::Complex64;
    use std::f64::consts::PI;

    #[test]
    fn three_point_natural_spline() {
        // Interior curvature M1 solves 2(h0+h1)M1 = 6(Δ1 − Δ0): 4M1 = −12.
        let s = NaturalSpline::new(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0]).unwrap();
        // S(t) on [0,1] = t + M1 (t³ − t)/6 with M1 = −3.
        let want = 0.5 - 3.0 * (0.125 - 0.5) / 6.0;
        assert!((s.eval(0.5) - want).abs() < 1e-15);
        assert!((s.eval(0.5) - 0.6875).abs() < 1e-15);
    }

    #[test]
    fn spline_reproduces_lines_and_clamps() {
        let t: Vec<f64> = (0..6).map(|k| k as f64 * 0.3).collect();
        let y: Vec<f64> = t.iter().map(|t| 2.0 * t - 1.0).collect();
        let s = NaturalSpline::new(&t, &y).unwrap();
        for k in 0..5 {
            let m = 0.5 * (t[k] + t[k + 1]);
            assert!((s.eval(m) - (2.0 * m - 1.0)).abs() < 1e-12);
        }
        assert_eq!(s.eval(-1.0), y[0]);
        assert_eq!(s.eval(10.0), y[5]);
        assert!(matches!(NaturalSpline::new(&t[..2], &y[..2]), Err(Error::TooFewSamples(2))));
    }

    #[test]
    fn schedule_interpolates_samples() {
        let grid = TimeGrid::new(20, 2.0);
        let samples = Array2::from_shape_fn((20, 4), |(k, j)| (k as f64 * 0.7 + j as f64).sin());
        let sched = build_spline(&samples, &grid).unwrap();
        for (k, &t) in grid.points().iter().enumerate() {
            let u = sched.controls_at(t);
            for j in 0..4 {
                assert!((u[j] - samples[[k, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scalar_rotation_rk4() {
        let g = |_t: f64| CMatrix::from_fn(1, 1, |_, _| Complex64::new(0.0, -1.0));
        let x0 = CVector::basis(1, 0);
        let (_, xs) = rk4_linear(g, &x0, 0.0, 0.01, 100, 1, |x| x).unwrap();
        let want = Complex64::from_polar(1.0, -1.0);
        assert!((xs[100].get(0) - want).norm() < 1e-8);
    }

    #[test]
    fn drift_only_evolution() {
        let sys = build_system();
        let grid = TimeGrid::new(200, PI);
        let sched = build_spline(&Array2::zeros((200, 4)), &grid).unwrap();
        let x0 = CVector::basis(4, 1);
        let res = rk4_schrodinger(&sys, &sched, &x0, DEFAULT_SUBSTEPS).unwrap();
        let last = res.states.as_ref().unwrap().last().unwrap().clone();
        let want = CVector::from_complex(&[
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, -1.0),
            Complex64::new(0.0, 0.0),
            Complex64::new(0.0, 0.0),
        ]);
        assert!(last.add(&want.scale(-1.0)).unwrap().euclidean_norm() < 1e-6, "{last:?}");
        assert!(res.max_norm_deviation < 1e-8);
    }
}
