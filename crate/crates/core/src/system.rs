//! Two-qubit Heisenberg system with transverse single-qubit drives.
//!
//! Basis ordering is `|00⟩, |01⟩, |10⟩, |11⟩` with qubit 1 the left tensor
//! factor; `|g⟩ ↦ 0`, `|e⟩ ↦ 1`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CMatrix, CVector};

pub const DIM: usize = 4;
pub const N_CONTROLS: usize = 4;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn sigma_x() -> CMatrix {
    CMatrix::from_rows(&[vec![c(0., 0.), c(1., 0.)], vec![c(1., 0.), c(0., 0.)]])
}

pub fn sigma_y() -> CMatrix {
    CMatrix::from_rows(&[vec![c(0., 0.), c(0., -1.)], vec![c(0., 1.), c(0., 0.)]])
}

pub fn sigma_z() -> CMatrix {
    CMatrix::diag(&[c(1., 0.), c(-1., 0.)])
}

/// The scaled identity `I/2` used in the control Hamiltonians.
pub fn scaled_identity() -> CMatrix {
    CMatrix::identity(2).scale(0.5)
}

/// `|g⟩⟨e|`
pub fn sigma_ge() -> CMatrix {
    CMatrix::from_rows(&[vec![c(0., 0.), c(1., 0.)], vec![c(0., 0.), c(0., 0.)]])
}

/// `|e⟩⟨g|`
pub fn sigma_eg() -> CMatrix {
    sigma_ge().transpose()
}

#[derive(Debug, Clone)]
pub struct SystemSpec {
    pub drift: CMatrix,
    pub controls: Vec<CMatrix>,
    pub gamma_abs: f64,
    pub gamma_em: f64,
}

/// Drift `½(XX + YY + ZZ)` and controls `(X⊗S_I, Y⊗S_I, S_I⊗X, S_I⊗Y)`.
pub fn build_system() -> SystemSpec {
    let (x, y, z, si) = (sigma_x(), sigma_y(), sigma_z(), scaled_identity());
    let drift = x
        .kron(&x)
        .add(&y.kron(&y))
        .and_then(|m| m.add(&z.kron(&z)))
        .expect("equal shapes")
        .scale(0.5);
    let controls = vec![x.kron(&si), y.kron(&si), si.kron(&x), si.kron(&y)];
    SystemSpec {
        drift,
        controls,
        gamma_abs: 0.0,
        gamma_em: 0.0,
    }
}

impl SystemSpec {
    pub fn with_rates(mut self, gamma_abs: f64, gamma_em: f64) -> Result<Self> {
        check_rate(gamma_abs)?;
        check_rate(gamma_em)?;
        self.gamma_abs = gamma_abs;
        self.gamma_em = gamma_em;
        Ok(self)
    }

    /// `H = H_d + Σ u_j H_c^(j)`.
    pub fn total_hamiltonian(&self, u: &[f64]) -> CMatrix {
        let mut h = self.drift.clone();
        for (uj, hj) in u.iter().zip(&self.controls) {
            h = h.add(&hj.scale(*uj)).expect("4x4 operators");
        }
        h
    }

    pub fn collapse_ops(&self) -> Result<Vec<CMatrix>> {
        build_collapse_ops(self.gamma_abs, self.gamma_em)
    }
}

fn check_rate(g: f64) -> Result<()> {
    if g < 0.0 || !g.is_finite() {
        return Err(Error::NegativeRate(g));
    }
    Ok(())
}

/// `C₁ = √γ_abs σ_eg⊗I`, `C₂ = √γ_em σ_ge⊗I`, `C₃ = √γ_abs I⊗σ_eg`,
/// `C₄ = √γ_em I⊗σ_ge`.
pub fn build_collapse_ops(gamma_abs: f64, gamma_em: f64) -> Result<Vec<CMatrix>> {
    check_rate(gamma_abs)?;
    check_rate(gamma_em)?;
    let id = CMatrix::identity(2);
    let (ra, re) = (gamma_abs.sqrt(), gamma_em.sqrt());
    Ok(vec![
        sigma_eg().kron(&id).scale(ra),
        sigma_ge().kron(&id).scale(re),
        id.kron(&sigma_eg()).scale(ra),
        id.kron(&sigma_ge()).scale(re),
    ])
}

/// Superoperator of `−i[H, ·]` under column stacking.
pub fn commutator_superop(h: &CMatrix) -> CMatrix {
    let id = CMatrix::identity(h.rows());
    id.kron(h)
        .sub(&h.transpose().kron(&id))
        .expect("square operator")
        .scale_complex(c(0.0, -1.0))
}

/// Superoperator of the dissipator `Σ C ρ C† − ½{C†C, ρ}` under column stacking.
pub fn dissipator_superop(collapse: &[CMatrix], d: usize) -> Result<CMatrix> {
    let id = CMatrix::identity(d);
    let mut out = CMatrix::zeros(d * d, d * d);
    for op in collapse {
        if op.shape() != (d, d) {
            return Err(Error::ShapeMismatch {
                op: "liouvillian",
                lhs: op.shape(),
                rhs: (d, d),
            });
        }
        let cdc = op.adjoint().matmul(op)?;
        out = out
            .add(&op.conj().kron(op))?
            .sub(&id.kron(&cdc).scale(0.5))?
            .sub(&cdc.transpose().kron(&id).scale(0.5))?;
    }
    Ok(out)
}

/// `L = −i(I⊗H − Hᵀ⊗I) + Σ [C̄⊗C − ½ I⊗C†C − ½ (C†C)ᵀ⊗I]`.
pub fn build_liouvillian(h: &CMatrix, collapse: &[CMatrix]) -> Result<CMatrix> {
    if h.rows() != h.cols() {
        return Err(Error::ShapeMismatch {
            op: "liouvillian",
            lhs: h.shape(),
            rhs: (h.cols(), h.rows()),
        });
    }
    commutator_superop(h).add(&dissipator_superop(collapse, h.rows())?)
}

/// The 16 operators `σ_μ ⊗ σ_ν`, `μ, ν ∈ {0, x, y, z}`, `μ` major.
pub fn pauli_basis_2q() -> Vec<CMatrix> {
    let single = [CMatrix::identity(2), sigma_x(), sigma_y(), sigma_z()];
    let mut out = Vec::with_capacity(16);
    for a in &single {
        for b in &single {
            out.push(a.kron(b));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gate {
    Cnot,
    Swap,
    Qft2,
    Hh,
    Crz,
    Cp,
}

impl Gate {
    pub const ALL: [Gate; 6] = [Gate::Cnot, Gate::Swap, Gate::Qft2, Gate::Hh, Gate::Crz, Gate::Cp];

    pub fn as_str(self) -> &'static str {
        match self {
            Gate::Cnot => "cnot",
            Gate::Swap => "swap",
            Gate::Qft2 => "qft2",
            Gate::Hh => "hh",
            Gate::Crz => "crz",
            Gate::Cp => "cp",
        }
    }

    pub fn takes_angle(self) -> bool {
        matches!(self, Gate::Crz | Gate::Cp)
    }

    /// Computational-basis state the gate is trained from unless overridden.
    pub fn default_x0(self) -> CVector {
        let k = match self {
            Gate::Cnot | Gate::Crz | Gate::Cp => 2,
            Gate::Swap | Gate::Qft2 => 1,
            Gate::Hh => 0,
        };
        CVector::basis(DIM, k)
    }
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Gate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cnot" => Ok(Gate::Cnot),
            "swap" => Ok(Gate::Swap),
            "qft2" | "qft" => Ok(Gate::Qft2),
            "hh" | "h⊗h" => Ok(Gate::Hh),
            "crz" => Ok(Gate::Crz),
            "cp" => Ok(Gate::Cp),
            _ => Err(Error::UnknownGate(s.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GateTarget {
    pub gate: Gate,
    pub theta: f64,
    pub matrix: CMatrix,
    pub default_x0: CVector,
}

pub const DEFAULT_THETA: f64 = PI;

pub fn gate_matrix(gate: Gate, theta: f64) -> CMatrix {
    let (o, l) = (c(0., 0.), c(1., 0.));
    match gate {
        Gate::Cnot => CMatrix::from_rows(&[
            vec![l, o, o, o],
            vec![o, l, o, o],
            vec![o, o, o, l],
            vec![o, o, l, o],
        ]),
        Gate::Swap => CMatrix::from_rows(&[
            vec![l, o, o, o],
            vec![o, o, l, o],
            vec![o, l, o, o],
            vec![o, o, o, l],
        ]),
        Gate::Qft2 => CMatrix::from_fn(DIM, DIM, |j, k| c(0.0, 1.0).powu((j * k) as u32) * 0.5),
        Gate::Hh => {
            let h = CMatrix::from_rows(&[vec![l, l], vec![l, c(-1., 0.)]]).scale(std::f64::consts::FRAC_1_SQRT_2);
            h.kron(&h)
        }
        Gate::Crz => CMatrix::diag(&[
            l,
            l,
            Complex64::from_polar(1.0, -theta / 2.0),
            Complex64::from_polar(1.0, theta / 2.0),
        ]),
        Gate::Cp => CMatrix::diag(&[l, l, l, Complex64::from_polar(1.0, theta)]),
    }
}

/// Looks up a gate by its CLI name; `theta` is used by `crz` and `cp` and
/// defaults to π.
pub fn gate_target(name: &str, theta: Option<f64>) -> Result<GateTarget> {
    let gate: Gate = name.parse()?;
    Ok(target_for(gate, theta.unwrap_or(DEFAULT_THETA)))
}

pub fn target_for(gate: Gate, theta: f64) -> GateTarget {
    GateTarget {
        gate,
        theta,
        matrix: gate_matrix(gate, theta),
        default_x0: gate.default_x0(),
    }
}
