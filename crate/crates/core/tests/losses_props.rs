use ndarray::Array2;
use num_complex::Complex64;
use proptest::prelude::*;
use pulsepinn::autodiff::DiffGraph;
use pulsepinn::linalg::{CMatrix, CVar, CVector};
use pulsepinn::losses::{
    channel_trotter, closed_residual_loss, closed_total_loss, open_process_fidelity, open_residual_loss,
    open_total_loss, propagator_product, record_closed_objective, record_open_fidelity, record_open_objective,
    unitary_process_fidelity, LossWeights,
};
use pulsepinn::pinn::{record_network, record_state, Activation, InitScheme, ParamVars, PinnModel, TimeGrid};
use pulsepinn::system::{build_collapse_ops, build_liouvillian, build_system, gate_matrix, Gate, SystemSpec};

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn dist(a: &CMatrix, b: &CMatrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm()
}

fn complex_matrix(n: usize) -> impl Strategy<Value = CMatrix> {
    prop::collection::vec(-1.0..1.0f64, 2 * n * n).prop_map(move |v| {
        CMatrix::new(
            Array2::from_shape_vec((n, n), v[..n * n].to_vec()).unwrap(),
            Array2::from_shape_vec((n, n), v[n * n..].to_vec()).unwrap(),
        )
        .unwrap()
    })
}

fn unitary() -> impl Strategy<Value = CMatrix> {
    complex_matrix(4).prop_map(|a| a.add(&a.adjoint()).unwrap().scale_complex(c(0.0, -1.5)).expm().unwrap())
}

fn controls(max_n: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_n).prop_flat_map(|n| {
        prop::collection::vec(-2.0..2.0f64, 4 * n).prop_map(move |v| Array2::from_shape_vec((n, 4), v).unwrap())
    })
}

/// Smooth control law used by the integrator oracles.
fn smooth_u(t: f64) -> [f64; 4] {
    [0.6 * (1.3 * t).sin(), 0.4 * (0.7 * t + 0.3).cos(), -0.5 * (2.1 * t).sin(), 0.3 * t.cos()]
}

fn sampled(grid: &TimeGrid) -> Array2<f64> {
    let mut u = Array2::zeros((grid.n, 4));
    for (k, t) in grid.points().iter().enumerate() {
        for (j, v) in smooth_u(*t).iter().enumerate() {
            u[[k, j]] = *v;
        }
    }
    u
}

/// Classic RK4 on `Ẏ = f(t, Y)` with `steps` steps of `h`; returns every point.
fn rk4(f: impl Fn(f64, &CMatrix) -> CMatrix, y0: &CMatrix, t0: f64, h: f64, steps: usize) -> Vec<CMatrix> {
    let axpy = |y: &CMatrix, k: &CMatrix, a: f64| y.add(&k.scale(a)).unwrap();
    let mut out = vec![y0.clone()];
    let mut y = y0.clone();
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let k1 = f(t, &y);
        let k2 = f(t + 0.5 * h, &axpy(&y, &k1, 0.5 * h));
        let k3 = f(t + 0.5 * h, &axpy(&y, &k2, 0.5 * h));
        let k4 = f(t + h, &axpy(&y, &k3, h));
        let incr = k1.add(&k2.scale(2.0)).unwrap().add(&k3.scale(2.0)).unwrap().add(&k4).unwrap();
        y = axpy(&y, &incr, h / 6.0);
        out.push(y.clone());
    }
    out
}

fn lindblad_rhs(sys: &SystemSpec, collapse: &[CMatrix], t: f64, rho: &CMatrix) -> CMatrix {
    let h = sys.total_hamiltonian(&smooth_u(t));
    let comm = h.matmul(rho).unwrap().sub(&rho.matmul(&h).unwrap()).unwrap();
    let mut out = comm.scale_complex(c(0.0, -1.0));
    for op in collapse {
        let cdc = op.adjoint().matmul(op).unwrap();
        let jump = op.matmul(rho).unwrap().matmul(&op.adjoint()).unwrap();
        let anti = cdc.matmul(rho).unwrap().add(&rho.matmul(&cdc).unwrap()).unwrap().scale(0.5);
        out = out.add(&jump).unwrap().sub(&anti).unwrap();
    }
    out
}

fn column(m: &CMatrix) -> CVector {
    CVector::new(m.re.column(0).to_owned(), m.im.column(0).to_owned()).unwrap()
}

fn small_model(act: Activation, seed: u64) -> PinnModel {
    PinnModel::with_widths(&[1, 12, 12, 12], act, 1.0, InitScheme::Custom, seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn propagator_is_unitary(u in controls(30), t_final in 0.1..10.0f64) {
        let grid = TimeGrid::new(u.nrows(), t_final);
        let (p, steps) = propagator_product(&build_system(), &u, &grid, true).unwrap();
        prop_assert!(p.unitarity_deviation() < 1e-8);
        prop_assert_eq!(steps.len(), u.nrows());
        prop_assert!(dist(steps.last().unwrap(), &p) == 0.0);
    }

    #[test]
    fn noiseless_channel_is_conjugation(u in controls(20), t_final in 0.1..5.0f64) {
        let sys = build_system();
        let grid = TimeGrid::new(u.nrows(), t_final);
        let (p, _) = propagator_product(&sys, &u, &grid, false).unwrap();
        let e = channel_trotter(&sys, &u, &[], &grid).unwrap();
        prop_assert!(dist(&e, &p.conj().kron(&p)) < 1e-8);
    }

    #[test]
    fn channel_preserves_trace(u in controls(20), t_final in 0.1..5.0f64, ga in 0.0..0.2f64, ge in 0.0..0.2f64, x in complex_matrix(4)) {
        let grid = TimeGrid::new(u.nrows(), t_final);
        let e = channel_trotter(&build_system(), &u, &build_collapse_ops(ga, ge).unwrap(), &grid).unwrap();
        let out = CMatrix::unvec(&e.matvec(&x.vec()).unwrap(), 4).unwrap();
        prop_assert!((out.trace().unwrap() - x.trace().unwrap()).norm() < 1e-10);
    }

    #[test]
    fn open_fidelity_reduces_to_unitary_fidelity(u in unitary(), v in unitary()) {
        let e = u.conj().kron(&u);
        let want = unitary_process_fidelity(&v, &u).unwrap();
        let plain = open_process_fidelity(&e, &v).unwrap();
        prop_assert!((plain - want).abs() < 1e-8, "{plain} vs {want}");
        let mut g = DiffGraph::new();
        let ev = CVar::input(&mut g, &e).unwrap();
        let node = record_open_fidelity(&mut g, ev, &v).unwrap();
        prop_assert!((g.scalar(node) - want).abs() < 1e-8);
    }

    #[test]
    fn unitary_fidelity_ignores_global_phase(u in unitary(), phi in -3.2..3.2f64) {
        let f = unitary_process_fidelity(&u.scale_complex(Complex64::from_polar(1.0, phi)), &u).unwrap();
        prop_assert!((f - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noiseless_open_loss_matches_closed(seed in 0u64..500, gate_idx in 0usize..6) {
        let gate = Gate::ALL[gate_idx];
        let sys = build_system();
        let grid = TimeGrid::new(12, 2.0);
        let model = small_model(Activation::Sin, seed);
        let x0 = gate.default_x0();
        let target = gate_matrix(gate, std::f64::consts::PI);
        let closed = closed_total_loss(&sys, &model, &grid, &x0, &target).unwrap();
        let open = open_total_loss(&sys, &model, &grid, &x0, &target).unwrap();
        prop_assert!((closed.l_fid - open.l_fid).abs() < 1e-6);
        prop_assert!(open.l_trace < 1e-24);
        prop_assert!(closed.l_model >= 0.0 && open.l_model >= 0.0);
    }
}

#[test]
fn trotter_channel_converges_at_first_order() {
    let sys = build_system();
    let collapse = build_collapse_ops(0.05, 0.05).unwrap();
    let t_final = 2.0;
    let fine = 4000;
    let reference = rk4(
        |t, e| build_liouvillian(&sys.total_hamiltonian(&smooth_u(t)), &collapse).unwrap().matmul(e).unwrap(),
        &CMatrix::identity(16),
        0.0,
        t_final / fine as f64,
        fine,
    )
    .pop()
    .unwrap();
    let errs: Vec<f64> = [25, 50, 100]
        .iter()
        .map(|&n| {
            let grid = TimeGrid::new(n, t_final);
            dist(&channel_trotter(&sys, &sampled(&grid), &collapse, &grid).unwrap(), &reference)
        })
        .collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.6..=2.4).contains(&ratio), "errors {errs:?}");
    }
}

#[test]
fn exact_schrodinger_solution_has_no_residual() {
    let sys = build_system();
    let grid = TimeGrid::new(10, 1.0);
    let h = 1e-3;
    let per = (grid.dt() / h).round() as usize;
    let x_start = CMatrix::new(
        Array2::from_shape_vec((4, 1), vec![0.5, -0.1, 0.3, 0.2]).unwrap(),
        Array2::from_shape_vec((4, 1), vec![0.1, 0.6, -0.2, 0.4]).unwrap(),
    )
    .unwrap();
    let x_start = x_start.scale(1.0 / x_start.frobenius_norm());
    // index i ↔ time (i − 1)·h
    let path = rk4(
        |t, x| sys.total_hamiltonian(&smooth_u(t)).scale_complex(c(0.0, -1.0)).matmul(x).unwrap(),
        &x_start,
        -h,
        h,
        grid.n * per + 2,
    );
    let idx = |k: usize| k * per + 1;
    let states: Vec<CVector> = (0..grid.n).map(|k| column(&path[idx(k)])).collect();
    let derivs: Vec<CVector> = (0..grid.n)
        .map(|k| column(&path[idx(k) + 1].sub(&path[idx(k) - 1]).unwrap().scale(0.5 / h)))
        .collect();
    let loss = closed_residual_loss(&sys, &states, &derivs, &sampled(&grid)).unwrap();
    assert!(loss < 1e-8, "{loss}");
}

#[test]
fn exact_lindblad_solution_has_no_residual() {
    let sys = build_system().with_rates(0.05, 0.02).unwrap();
    let collapse = sys.collapse_ops().unwrap();
    let grid = TimeGrid::new(10, 1.0);
    let h = 1e-3;
    let per = (grid.dt() / h).round() as usize;
    let psi = CVector::from_complex(&[c(0.5, 0.1), c(-0.1, 0.6), c(0.3, -0.2), c(0.2, 0.4)]).normalized();
    let rho_start = psi.outer(&psi).scale(0.8).add(&CMatrix::identity(4).scale(0.05)).unwrap();
    let path = rk4(|t, r| lindblad_rhs(&sys, &collapse, t, r), &rho_start, -h, h, grid.n * per + 2);
    let idx = |k: usize| k * per + 1;
    let dens: Vec<CMatrix> = (0..grid.n).map(|k| path[idx(k)].clone()).collect();
    let derivs: Vec<CMatrix> = (0..grid.n)
        .map(|k| path[idx(k) + 1].sub(&path[idx(k) - 1]).unwrap().scale(0.5 / h))
        .collect();
    let loss = open_residual_loss(&sys, &collapse, &dens, &derivs, &sampled(&grid)).unwrap();
    assert!(loss < 1e-8, "{loss}");
}

/// Tape gradient of the full objective against central differences in a spread of weights.
fn check_objective_gradient(open: bool) {
    let sys = build_system().with_rates(0.02, 0.01).unwrap();
    let collapse = sys.collapse_ops().unwrap();
    let grid = TimeGrid::new(6, 1.5);
    let gate = Gate::Cnot;
    let target = gate_matrix(gate, std::f64::consts::PI);
    let x0 = gate.default_x0();
    let model = small_model(Activation::Sin, 11);
    let total = |m: &PinnModel| {
        if open {
            open_total_loss(&sys, m, &grid, &x0, &target).unwrap().l_total
        } else {
            closed_total_loss(&sys, m, &grid, &x0, &target).unwrap().l_total
        }
    };

    let mut g = DiffGraph::new();
    let params = ParamVars::inputs(&mut g, &model).unwrap();
    let out = record_network(&mut g, &model, &params, &grid.points()).unwrap();
    let traj = record_state(&mut g, &out, &x0).unwrap();
    let w = LossWeights::default();
    let obj = if open {
        record_open_objective(&mut g, &sys, &collapse, &traj, &grid, &target, &w).unwrap()
    } else {
        record_closed_objective(&mut g, &sys, &traj, &grid, &target, &w).unwrap()
    };
    assert!((g.scalar(obj.total) - total(&model)).abs() < 1e-12);
    let adj = g.backward(obj.total).unwrap();

    let step = 1e-6;
    for (l, &(wid, bid)) in params.layers.iter().enumerate() {
        let gw = adj.get(wid);
        let gb = adj.get(bid);
        let (rows, cols) = model.layers[l].weight.dim();
        for &(i, j) in &[(0, 0), (rows - 1, cols - 1), (rows / 2, cols / 3)] {
            let (mut p, mut m) = (model.clone(), model.clone());
            p.layers[l].weight[[i, j]] += step;
            m.layers[l].weight[[i, j]] -= step;
            let fd = (total(&p) - total(&m)) / (2.0 * step);
            let err = (gw[[i, j]] - fd).abs() / fd.abs().max(gw[[i, j]].abs()).max(1e-2);
            assert!(err < 1e-5, "layer {l} w[{i},{j}]: {} vs {fd}", gw[[i, j]]);
        }
        let k = rows / 2;
        let (mut p, mut m) = (model.clone(), model.clone());
        p.layers[l].bias[k] += step;
        m.layers[l].bias[k] -= step;
        let fd = (total(&p) - total(&m)) / (2.0 * step);
        let err = (gb[[0, k]] - fd).abs() / fd.abs().max(gb[[0, k]].abs()).max(1e-2);
        assert!(err < 1e-5, "layer {l} b[{k}]: {} vs {fd}", gb[[0, k]]);
    }
}

#[test]
fn closed_objective_gradient_matches_finite_differences() {
    check_objective_gradient(false);
}

#[test]
fn open_objective_gradient_matches_finite_differences() {
    check_objective_gradient(true);
}
