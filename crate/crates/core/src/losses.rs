//! Loss terms for the closed (Schrödinger) and open (Lindblad) models.
//!
//! Each term has a `record_*` form that builds it on a [`DiffGraph`] and a
//! plain convenience wrapper that evaluates it for a model or for raw values.
//! Controls for step `k` are sampled at the left endpoint `t_k`.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{DiffGraph, NodeId};
use crate::error::{Error, Result};
use crate::linalg::{matexp_blocks, tile_rows, CMatrix, CVar, CVector, DEFAULT_TAYLOR_ORDER};
use crate::pinn::{record_network, record_state, ParamVars, PinnModel, StateTrajectory, TimeGrid};
use crate::system::{commutator_superop, dissipator_superop, pauli_basis_2q, SystemSpec, DIM};

/// Relative weights of the loss terms; all 1 reproduces the plain sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub fid: f64,
    pub model: f64,
    pub trace: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            fid: 1.0,
            model: 1.0,
            trace: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedLossBreakdown {
    pub l_model: f64,
    pub l_fid: f64,
    pub l_total: f64,
    pub fidelity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenLossBreakdown {
    pub l_model: f64,
    pub l_fid: f64,
    pub l_trace: f64,
    pub l_total: f64,
    pub fidelity: f64,
}

fn is_zero(m: &Array2<f64>) -> bool {
    m.iter().all(|&v| v == 0.0)
}

/// Scales `m` by the column `u` block-wise, skipping identically zero parts.
fn scaled_term(g: &mut DiffGraph, u: NodeId, m: &CMatrix) -> Result<(Option<NodeId>, Option<NodeId>)> {
    let part = |g: &mut DiffGraph, a: &Array2<f64>| -> Result<Option<NodeId>> {
        if is_zero(a) {
            return Ok(None);
        }
        let c = g.constant(a.clone())?;
        Ok(Some(g.scale_blocks(u, c)?))
    };
    Ok((part(g, &m.re)?, part(g, &m.im)?))
}

fn add_opt(g: &mut DiffGraph, acc: NodeId, term: Option<NodeId>) -> Result<NodeId> {
    match term {
        Some(t) => g.add(acc, t),
        None => Ok(acc),
    }
}

/// Stack of `base + Σ_j u_j(t_k) terms_j` for every row `k` of `controls`.
pub fn record_stacked_generator(
    g: &mut DiffGraph,
    base: &CMatrix,
    terms: &[CMatrix],
    controls: NodeId,
) -> Result<CVar> {
    let blocks = g.shape(controls).0;
    let mut re = g.constant(tile_rows(&base.re, blocks))?;
    let mut im = g.constant(tile_rows(&base.im, blocks))?;
    for (j, term) in terms.iter().enumerate() {
        let u = g.slice_cols(controls, j, 1)?;
        let (tr, ti) = scaled_term(g, u, term)?;
        re = add_opt(g, re, tr)?;
        im = add_opt(g, im, ti)?;
    }
    Ok(CVar { re, im })
}

/// Row-wise action `r_k ↦ (base + Σ_j u_j(t_k) terms_j) r_k` on an `N × d`
/// matrix whose rows are the vectors `r_k`.
pub fn record_apply_rows(
    g: &mut DiffGraph,
    rows: CVar,
    base: &CMatrix,
    terms: &[CMatrix],
    controls: NodeId,
) -> Result<CVar> {
    let base_t = CVar::constant(g, &base.transpose())?;
    let mut acc = rows.matmul(g, base_t)?;
    for (j, term) in terms.iter().enumerate() {
        let u = g.slice_cols(controls, j, 1)?;
        let tt = CVar::constant(g, &term.transpose())?;
        let p = rows.matmul(g, tt)?;
        let pr = g.mul(u, p.re)?;
        let pi = g.mul(u, p.im)?;
        acc = CVar {
            re: g.add(acc.re, pr)?,
            im: g.add(acc.im, pi)?,
        };
    }
    Ok(acc)
}

/// Time-ordered product `E_{N−1} ⋯ E_0` of stacked step operators.
fn record_ordered_product(g: &mut DiffGraph, steps: CVar, d: usize, keep_steps: bool) -> Result<(CVar, Vec<CVar>)> {
    let blocks = g.shape(steps.re).0 / d;
    if blocks == 0 {
        return Ok((CVar::constant(g, &CMatrix::identity(d))?, Vec::new()));
    }
    let mut acc = steps.slice_rows(g, 0, d)?;
    let mut kept = Vec::new();
    if keep_steps {
        kept.push(acc);
    }
    for k in 1..blocks {
        let e = steps.slice_rows(g, k * d, d)?;
        acc = e.matmul(g, acc)?;
        if keep_steps {
            kept.push(acc);
        }
    }
    Ok((acc, kept))
}

#[derive(Debug, Clone)]
pub struct RecordedPropagation {
    pub final_op: CVar,
    /// Cumulative operators after each step, when requested.
    pub steps: Vec<CVar>,
}

/// `U_{k+1} = exp(−i H(t_k) Δt) U_k` from `U_0 = I`.
pub fn record_propagator(
    g: &mut DiffGraph,
    sys: &SystemSpec,
    controls: NodeId,
    grid: &TimeGrid,
    keep_steps: bool,
) -> Result<RecordedPropagation> {
    let blocks = g.shape(controls).0;
    if blocks == 0 {
        return Ok(RecordedPropagation {
            final_op: CVar::constant(g, &CMatrix::identity(DIM))?,
            steps: Vec::new(),
        });
    }
    let h = record_stacked_generator(g, &sys.drift, &sys.controls, controls)?;
    let dt = grid.dt();
    // −iΔt (Hr + i Hi) = Δt Hi − iΔt Hr
    let a = CVar {
        re: g.scale(h.im, dt)?,
        im: g.scale(h.re, -dt)?,
    };
    let steps = matexp_blocks(g, a, blocks, DEFAULT_TAYLOR_ORDER, None)?;
    let (final_op, steps) = record_ordered_product(g, steps, DIM, keep_steps)?;
    Ok(RecordedPropagation { final_op, steps })
}

/// `E_tot = exp(Δt L_{N−1}) ⋯ exp(Δt L_0)` with `L_k` the Liouvillian at `t_k`.
pub fn record_channel(
    g: &mut DiffGraph,
    sys: &SystemSpec,
    collapse: &[CMatrix],
    controls: NodeId,
    grid: &TimeGrid,
) -> Result<CVar> {
    let blocks = g.shape(controls).0;
    let d2 = DIM * DIM;
    if blocks == 0 {
        return CVar::constant(g, &CMatrix::identity(d2));
    }
    let base = commutator_superop(&sys.drift).add(&dissipator_superop(collapse, DIM)?)?;
    let terms: Vec<CMatrix> = sys.controls.iter().map(commutator_superop).collect();
    let l = record_stacked_generator(g, &base, &terms, controls)?;
    let a = l.scale(g, grid.dt())?;
    let steps = matexp_blocks(g, a, blocks, DEFAULT_TAYLOR_ORDER, None)?;
    Ok(record_ordered_product(g, steps, d2, false)?.0)
}

fn controls_constant(g: &mut DiffGraph, controls: &Array2<f64>) -> Result<NodeId> {
    if controls.nrows() > 0 && controls.ncols() != 4 {
        return Err(Error::ShapeMismatch {
            op: "controls",
            lhs: controls.dim(),
            rhs: (controls.nrows(), 4),
        });
    }
    g.constant(controls.clone())
}

/// Final propagator (and the cumulative one after every step if asked).
pub fn propagator_product(
    sys: &SystemSpec,
    controls: &Array2<f64>,
    grid: &TimeGrid,
    keep_steps: bool,
) -> Result<(CMatrix, Vec<CMatrix>)> {
    let mut g = DiffGraph::new();
    if controls.nrows() == 0 {
        return Ok((CMatrix::identity(DIM), Vec::new()));
    }
    let u = controls_constant(&mut g, controls)?;
    let p = record_propagator(&mut g, sys, u, grid, keep_steps)?;
    Ok((p.final_op.value(&g), p.steps.iter().map(|s| s.value(&g)).collect()))
}

pub fn channel_trotter(
    sys: &SystemSpec,
    controls: &Array2<f64>,
    collapse: &[CMatrix],
    grid: &TimeGrid,
) -> Result<CMatrix> {
    if controls.nrows() == 0 {
        return Ok(CMatrix::identity(DIM * DIM));
    }
    let mut g = DiffGraph::new();
    let u = controls_constant(&mut g, controls)?;
    Ok(record_channel(&mut g, sys, collapse, u, grid)?.value(&g))
}

/// `|tr(U_targ U†)|² / d²`.
pub fn unitary_process_fidelity(u_targ: &CMatrix, u: &CMatrix) -> Result<f64> {
    let d = u.rows() as f64;
    Ok(u_targ.matmul(&u.adjoint())?.trace()?.norm_sqr() / (d * d))
}

/// Recorded form of [`unitary_process_fidelity`].
pub fn record_unitary_fidelity(g: &mut DiffGraph, u_targ: &CMatrix, u: CVar) -> Result<NodeId> {
    let d = u_targ.rows() as f64;
    let tr = g.constant(u_targ.re.clone())?;
    let ti = g.constant(u_targ.im.clone())?;
    // tr(A B†) = Σ A_ij conj(B_ij)
    let a = g.mul(tr, u.re)?;
    let b = g.mul(ti, u.im)?;
    let re = g.add(a, b)?;
    let re = g.sum(re)?;
    let c = g.mul(ti, u.re)?;
    let e = g.mul(tr, u.im)?;
    let im = g.sub(c, e)?;
    let im = g.sum(im)?;
    let re2 = g.square(re)?;
    let im2 = g.square(im)?;
    let n2 = g.add(re2, im2)?;
    g.scale(n2, 1.0 / (d * d))
}

/// `(1/d³) Σ_P tr(U_targ P† U_targ† E(P))` over the two-qubit Pauli basis.
pub fn open_process_fidelity(e_tot: &CMatrix, u_targ: &CMatrix) -> Result<f64> {
    let basis = pauli_basis_2q();
    let d = u_targ.rows();
    if e_tot.shape() != (d * d, d * d) {
        return Err(Error::ShapeMismatch {
            op: "open_process_fidelity",
            lhs: e_tot.shape(),
            rhs: (d * d, d * d),
        });
    }
    let mut acc = num_complex::Complex64::new(0.0, 0.0);
    for p in &basis {
        let mapped = CMatrix::unvec(&e_tot.matvec(&p.vec())?, d)?;
        let m = u_targ.matmul(&p.adjoint())?.matmul(&u_targ.adjoint())?;
        acc += m.matmul(&mapped)?.trace()?;
    }
    let f = acc / (d * d * d) as f64;
    if f.im.abs() >= 1e-8 || f.re < -1e-6 || f.re > 1.0 + 1e-6 {
        return Err(Error::NonPhysicalFidelity(f.re));
    }
    Ok(f.re.clamp(0.0, 1.0))
}

/// Recorded real part of the open process fidelity (not clamped).
pub fn record_open_fidelity(g: &mut DiffGraph, e_tot: CVar, u_targ: &CMatrix) -> Result<NodeId> {
    let basis = pauli_basis_2q();
    let d = u_targ.rows();
    let d2 = d * d;
    // Column p of `paulis` is vec(P_p); column p of `weights` is vec(M_pᵀ)
    // with M_p = U P_p† U†, so tr(M_p E(P_p)) = Σ_r weights[r,p]·(E·paulis)[r,p].
    let mut paulis = CMatrix::zeros(d2, basis.len());
    let mut weights = CMatrix::zeros(d2, basis.len());
    for (p, op) in basis.iter().enumerate() {
        let vp = op.vec();
        let m = u_targ.matmul(&op.adjoint())?.matmul(&u_targ.adjoint())?;
        let vm = m.transpose().vec();
        for r in 0..d2 {
            paulis.set(r, p, vp.get(r));
            weights.set(r, p, vm.get(r));
        }
    }
    let pv = CVar::constant(g, &paulis)?;
    let mapped = e_tot.matmul(g, pv)?;
    let wr = g.constant(weights.re)?;
    let wi = g.constant(weights.im)?;
    let a = g.mul(mapped.re, wr)?;
    let b = g.mul(mapped.im, wi)?;
    let re = g.sub(a, b)?;
    let re = g.sum(re)?;
    g.scale(re, 1.0 / (d2 * d) as f64)
}

/// `(1/N) Σ_k ‖ẋ(t_k) + i H(t_k) x(t_k)‖²`.
pub fn record_closed_model_loss(g: &mut DiffGraph, sys: &SystemSpec, traj: &StateTrajectory) -> Result<NodeId> {
    let n = g.shape(traj.x.re).0.max(1) as f64;
    let hx = record_apply_rows(g, traj.x, &sys.drift, &sys.controls, traj.controls)?;
    let ihx = hx.mul_i(g)?;
    let residual = traj.dx.add(g, ihx)?;
    let sq = residual.squared_norm(g)?;
    g.scale(sq, 1.0 / n)
}

/// Vectorized `ρ = x x†` per row and its time derivative `ẋx† + xẋ†`, `N × 16`.
pub fn record_density(g: &mut DiffGraph, traj: &StateTrajectory) -> Result<(CVar, CVar)> {
    let d = DIM;
    // vec(ρ)[a + d·b] = x_a · conj(x_b)
    let mut pick_a = Array2::zeros((d, d * d));
    let mut pick_b = Array2::zeros((d, d * d));
    for b in 0..d {
        for a in 0..d {
            pick_a[[a, a + d * b]] = 1.0;
            pick_b[[b, a + d * b]] = 1.0;
        }
    }
    let sa = g.constant(pick_a)?;
    let sb = g.constant(pick_b)?;
    let spread = |g: &mut DiffGraph, v: CVar, s: NodeId| -> Result<CVar> {
        Ok(CVar {
            re: g.matmul(v.re, s)?,
            im: g.matmul(v.im, s)?,
        })
    };
    let xa = spread(g, traj.x, sa)?;
    let xb = spread(g, traj.x, sb)?;
    let dxa = spread(g, traj.dx, sa)?;
    let dxb = spread(g, traj.dx, sb)?;

    // p · conj(q)
    let times_conj = |g: &mut DiffGraph, p: CVar, q: CVar| -> Result<CVar> {
        let rr = g.mul(p.re, q.re)?;
        let ii = g.mul(p.im, q.im)?;
        let ir = g.mul(p.im, q.re)?;
        let ri = g.mul(p.re, q.im)?;
        Ok(CVar {
            re: g.add(rr, ii)?,
            im: g.sub(ir, ri)?,
        })
    };
    let rho = times_conj(g, xa, xb)?;
    let d1 = times_conj(g, dxa, xb)?;
    let d2 = times_conj(g, xa, dxb)?;
    let drho = d1.add(g, d2)?;
    Ok((rho, drho))
}

/// `(1/N) Σ_k ‖ρ̇(t_k) − L_k ρ(t_k)‖_F²` on vectorized rows.
pub fn record_open_model_loss(
    g: &mut DiffGraph,
    sys: &SystemSpec,
    collapse: &[CMatrix],
    vec_rho: CVar,
    vec_drho: CVar,
    controls: NodeId,
) -> Result<NodeId> {
    let n = g.shape(vec_rho.re).0.max(1) as f64;
    let base = commutator_superop(&sys.drift).add(&dissipator_superop(collapse, DIM)?)?;
    let terms: Vec<CMatrix> = sys.controls.iter().map(commutator_superop).collect();
    let lrho = record_apply_rows(g, vec_rho, &base, &terms, controls)?;
    let residual = vec_drho.sub(g, lrho)?;
    let sq = residual.squared_norm(g)?;
    g.scale(sq, 1.0 / n)
}

/// `(1/N) Σ_k (tr ρ(t_k) − 1)²` from vectorized rows.
pub fn record_trace_loss(g: &mut DiffGraph, vec_rho: CVar) -> Result<NodeId> {
    let (n, cols) = g.shape(vec_rho.re);
    let d = (cols as f64).sqrt().round() as usize;
    let mut tr = g.slice_cols(vec_rho.re, 0, 1)?;
    for a in 1..d {
        let c = g.slice_cols(vec_rho.re, a * (d + 1), 1)?;
        tr = g.add(tr, c)?;
    }
    let dev = g.add_scalar(tr, -1.0)?;
    let sq = g.square(dev)?;
    let s = g.sum(sq)?;
    g.scale(s, 1.0 / n.max(1) as f64)
}

/// Network state on a grid, recorded with constant weights.
fn evaluation_trajectory(g: &mut DiffGraph, model: &PinnModel, times: &Array1<f64>, x0: &CVector) -> Result<StateTrajectory> {
    let params = ParamVars::constants(g, model)?;
    let out = record_network(g, model, &params, times)?;
    record_state(g, &out, x0)
}

pub fn closed_model_loss(sys: &SystemSpec, model: &PinnModel, grid: &TimeGrid, x0: &CVector) -> Result<f64> {
    let mut g = DiffGraph::new();
    let traj = evaluation_trajectory(&mut g, model, &grid.points(), x0)?;
    let l = record_closed_model_loss(&mut g, sys, &traj)?;
    Ok(g.scalar(l))
}

/// Closed residual loss for explicitly given states, derivatives and controls.
pub fn closed_residual_loss(sys: &SystemSpec, states: &[CVector], derivatives: &[CVector], controls: &Array2<f64>) -> Result<f64> {
    let mut g = DiffGraph::new();
    let traj = constant_trajectory(&mut g, states, derivatives, controls)?;
    let l = record_closed_model_loss(&mut g, sys, &traj)?;
    Ok(g.scalar(l))
}

fn rows_of(vs: &[CVector]) -> CMatrix {
    let d = vs.first().map_or(0, CVector::dim);
    let mut m = CMatrix::zeros(vs.len(), d);
    for (k, v) in vs.iter().enumerate() {
        m.re.row_mut(k).assign(&v.re);
        m.im.row_mut(k).assign(&v.im);
    }
    m
}

fn constant_trajectory(
    g: &mut DiffGraph,
    states: &[CVector],
    derivatives: &[CVector],
    controls: &Array2<f64>,
) -> Result<StateTrajectory> {
    if states.len() != derivatives.len() || states.len() != controls.nrows() {
        return Err(Error::ShapeMismatch {
            op: "trajectory",
            lhs: (states.len(), derivatives.len()),
            rhs: controls.dim(),
        });
    }
    Ok(StateTrajectory {
        x: CVar::constant(g, &rows_of(states))?,
        dx: CVar::constant(g, &rows_of(derivatives))?,
        controls: controls_constant(g, controls)?,
    })
}

/// `ρ(t)` and `ρ̇(t)` of the model's ansatz at one time.
pub fn density_and_derivative(model: &PinnModel, t: f64, x0: &CVector) -> Result<(CMatrix, CMatrix)> {
    let mut g = DiffGraph::new();
    let traj = evaluation_trajectory(&mut g, model, &Array1::from_elem(1, t), x0)?;
    let (rho, drho) = record_density(&mut g, &traj)?;
    let unrow = |v: CVar, g: &DiffGraph| -> Result<CMatrix> {
        let m = v.value(g);
        CMatrix::unvec(&CVector::new(m.re.row(0).to_owned(), m.im.row(0).to_owned())?, DIM)
    };
    Ok((unrow(rho, &g)?, unrow(drho, &g)?))
}

pub fn open_model_loss(
    sys: &SystemSpec,
    model: &PinnModel,
    grid: &TimeGrid,
    x0: &CVector,
    collapse: &[CMatrix],
) -> Result<f64> {
    let mut g = DiffGraph::new();
    let traj = evaluation_trajectory(&mut g, model, &grid.points(), x0)?;
    let (rho, drho) = record_density(&mut g, &traj)?;
    let l = record_open_model_loss(&mut g, sys, collapse, rho, drho, traj.controls)?;
    Ok(g.scalar(l))
}

/// Open residual loss for explicitly given densities, derivatives and controls.
pub fn open_residual_loss(
    sys: &SystemSpec,
    collapse: &[CMatrix],
    densities: &[CMatrix],
    derivatives: &[CMatrix],
    controls: &Array2<f64>,
) -> Result<f64> {
    let mut g = DiffGraph::new();
    let vecs = |ms: &[CMatrix]| ms.iter().map(CMatrix::vec).collect::<Vec<_>>();
    let traj = constant_trajectory(&mut g, &vecs(densities), &vecs(derivatives), controls)?;
    let l = record_open_model_loss(&mut g, sys, collapse, traj.x, traj.dx, traj.controls)?;
    Ok(g.scalar(l))
}

pub fn trace_loss(model: &PinnModel, grid: &TimeGrid, x0: &CVector) -> Result<f64> {
    let mut g = DiffGraph::new();
    let traj = evaluation_trajectory(&mut g, model, &grid.points(), x0)?;
    let (rho, _) = record_density(&mut g, &traj)?;
    let l = record_trace_loss(&mut g, rho)?;
    Ok(g.scalar(l))
}

/// Trace loss of explicitly given density matrices.
pub fn trace_loss_of(densities: &[CMatrix]) -> Result<f64> {
    let mut g = DiffGraph::new();
    let rows: Vec<CVector> = densities.iter().map(CMatrix::vec).collect();
    let v = CVar::constant(&mut g, &rows_of(&rows))?;
    let l = record_trace_loss(&mut g, v)?;
    Ok(g.scalar(l))
}

/// Everything the trainer needs from one recorded objective.
#[derive(Debug, Clone)]
pub struct RecordedObjective {
    pub total: NodeId,
    pub l_model: NodeId,
    pub l_fid: NodeId,
    pub l_trace: Option<NodeId>,
    /// Raw (unclamped) fidelity node.
    pub fidelity: NodeId,
    /// Final propagator (closed) or channel (open).
    pub operator: CVar,
    pub controls: NodeId,
}

impl RecordedObjective {
    pub fn closed_breakdown(&self, g: &DiffGraph) -> ClosedLossBreakdown {
        ClosedLossBreakdown {
            l_model: g.scalar(self.l_model),
            l_fid: g.scalar(self.l_fid),
            l_total: g.scalar(self.total),
            fidelity: g.scalar(self.fidelity).clamp(0.0, 1.0),
        }
    }

    pub fn open_breakdown(&self, g: &DiffGraph) -> OpenLossBreakdown {
        OpenLossBreakdown {
            l_model: g.scalar(self.l_model),
            l_fid: g.scalar(self.l_fid),
            l_trace: self.l_trace.map_or(0.0, |t| g.scalar(t)),
            l_total: g.scalar(self.total),
            fidelity: g.scalar(self.fidelity).clamp(0.0, 1.0),
        }
    }
}

fn weighted_sum(g: &mut DiffGraph, terms: &[(NodeId, f64)]) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for &(node, w) in terms {
        let t = if w == 1.0 { node } else { g.scale(node, w)? };
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    acc.ok_or(Error::ShapeMismatch {
        op: "loss",
        lhs: (0, 0),
        rhs: (1, 1),
    })
}

/// `L_fid + L_model` for the closed model.
pub fn record_closed_objective(
    g: &mut DiffGraph,
    sys: &SystemSpec,
    traj: &StateTrajectory,
    grid: &TimeGrid,
    u_targ: &CMatrix,
    weights: &LossWeights,
) -> Result<RecordedObjective> {
    let l_model = record_closed_model_loss(g, sys, traj)?;
    let prop = record_propagator(g, sys, traj.controls, grid, false)?;
    let fidelity = record_unitary_fidelity(g, u_targ, prop.final_op)?;
    let neg = g.scale(fidelity, -1.0)?;
    let l_fid = g.add_scalar(neg, 1.0)?;
    let total = weighted_sum(g, &[(l_fid, weights.fid), (l_model, weights.model)])?;
    Ok(RecordedObjective {
        total,
        l_model,
        l_fid,
        l_trace: None,
        fidelity,
        operator: prop.final_op,
        controls: traj.controls,
    })
}

/// `L_fid + L_model + L_trace` for the open model.
pub fn record_open_objective(
    g: &mut DiffGraph,
    sys: &SystemSpec,
    collapse: &[CMatrix],
    traj: &StateTrajectory,
    grid: &TimeGrid,
    u_targ: &CMatrix,
    weights: &LossWeights,
) -> Result<RecordedObjective> {
    let (rho, drho) = record_density(g, traj)?;
    let l_model = record_open_model_loss(g, sys, collapse, rho, drho, traj.controls)?;
    let l_trace = record_trace_loss(g, rho)?;
    let channel = record_channel(g, sys, collapse, traj.controls, grid)?;
    let fidelity = record_open_fidelity(g, channel, u_targ)?;
    let neg = g.scale(fidelity, -1.0)?;
    let l_fid = g.add_scalar(neg, 1.0)?;
    let total = weighted_sum(
        g,
        &[(l_fid, weights.fid), (l_model, weights.model), (l_trace, weights.trace)],
    )?;
    Ok(RecordedObjective {
        total,
        l_model,
        l_fid,
        l_trace: Some(l_trace),
        fidelity,
        operator: channel,
        controls: traj.controls,
    })
}

pub fn closed_total_loss(
    sys: &SystemSpec,
    model: &PinnModel,
    grid: &TimeGrid,
    x0: &CVector,
    u_targ: &CMatrix,
) -> Result<ClosedLossBreakdown> {
    let mut g = DiffGraph::new();
    let traj = evaluation_trajectory(&mut g, model, &grid.points(), x0)?;
    let obj = record_closed_objective(&mut g, sys, &traj, grid, u_targ, &LossWeights::default())?;
    Ok(obj.closed_breakdown(&g))
}

pub fn open_total_loss(
    sys: &SystemSpec,
    model: &PinnModel,
    grid: &TimeGrid,
    x0: &CVector,
    u_targ: &CMatrix,
) -> Result<OpenLossBreakdown> {
    let collapse = sys.collapse_ops()?;
    let mut g = DiffGraph::new();
    let traj = evaluation_trajectory(&mut g, model, &grid.points(), x0)?;
    let obj = record_open_objective(&mut g, sys, &collapse, &traj, grid, u_targ, &LossWeights::default())?;
    Ok(obj.open_breakdown(&g))
}

/// Rows of an `N × 4` control matrix as `[f64; 4]`.
pub fn control_rows(controls: &Array2<f64>) -> Vec<[f64; 4]> {
    controls
        .axis_iter(Axis(0))
        .map(|r| [r[0], r[1], r[2], r[3]])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{build_system, gate_matrix, Gate};
    use num_complex::Complex64;
    use std::f64::consts::PI;

    #[test]
    fn empty_grid_gives_identity() {
        let sys = build_system();
        let (u, steps) = propagator_product(&sys, &Array2::zeros((0, 4)), &TimeGrid::new(0, 1.0), true).unwrap();
        assert_eq!(u, CMatrix::identity(4));
        assert!(steps.is_empty());
    }

    #[test]
    fn drift_only_propagator_is_minus_i() {
        let sys = build_system();
        let grid = TimeGrid::new(200, PI);
        let (u, steps) = propagator_product(&sys, &Array2::zeros((200, 4)), &grid, true).unwrap();
        let want = CMatrix::identity(4).scale_complex(Complex64::new(0.0, -1.0));
        assert!(u.sub(&want).unwrap().frobenius_norm() < 1e-4);
        assert_eq!(steps.len(), 200);
        assert_eq!(steps[199], u);
    }

    #[test]
    fn unitary_fidelity_spot_values() {
        let cnot = gate_matrix(Gate::Cnot, 0.0);
        assert!((unitary_process_fidelity(&cnot, &cnot).unwrap() - 1.0).abs() < 1e-15);
        let phased = cnot.scale_complex(Complex64::from_polar(1.0, 0.7));
        assert!((unitary_process_fidelity(&phased, &cnot).unwrap() - 1.0).abs() < 1e-14);
        let f = unitary_process_fidelity(&cnot, &CMatrix::identity(4)).unwrap();
        assert!((f - 0.25).abs() < 1e-15);
    }

    #[test]
    fn identity_channel_fidelity() {
        let f = open_process_fidelity(&CMatrix::identity(16), &CMatrix::identity(4)).unwrap();
        assert!((f - 1.0).abs() < 1e-14);
    }

    #[test]
    fn depolarizing_channel_fidelity() {
        // E(A) = tr(A)/4 · I  ⇔  vec(E(A)) = vec(I)/4 · vec(I)ᵀ vec(A)
        let vi = CMatrix::identity(4).vec();
        let e = CMatrix::from_fn(16, 16, |r, c| Complex64::new(vi.re[r] * vi.re[c] / 4.0, 0.0));
        for gate in Gate::ALL {
            let f = open_process_fidelity(&e, &gate_matrix(gate, PI)).unwrap();
            assert!((f - 1.0 / 16.0).abs() < 1e-14, "{gate}");
        }
    }

    #[test]
    fn trace_loss_synthetic() {
        let rho = CMatrix::identity(4).scale(1.1 / 4.0);
        let l = trace_loss_of(&vec![rho; 5]).unwrap();
        assert!((l - 0.01).abs() < 1e-14);
    }

    #[test]
    fn constant_excited_state_residual() {
        // ρ = |10⟩⟨10| frozen, no drive: ‖−i[H_d, ρ]‖_F² = 2 at every step.
        let sys = build_system();
        let x = CVector::basis(4, 2);
        let rho = x.outer(&x);
        let n = 10;
        let l = open_residual_loss(&sys, &[], &vec![rho; n], &vec![CMatrix::zeros(4, 4); n], &Array2::zeros((n, 4))).unwrap();
        assert!((l - 2.0).abs() < 1e-13);
    }

    #[test]
    fn singlet_residual() {
        let sys = build_system();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let singlet = CVector::from_complex(&[
            Complex64::new(0.0, 0.0),
            Complex64::new(s, 0.0),
            Complex64::new(-s, 0.0),
            Complex64::new(0.0, 0.0),
        ]);
        let n = 7;
        let l = closed_residual_loss(&sys, &vec![singlet; n], &vec![CVector::zeros(4); n], &Array2::zeros((n, 4))).unwrap();
        assert!((l - 2.25).abs() < 1e-13);
    }
}
