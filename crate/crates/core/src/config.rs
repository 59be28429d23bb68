//! Run configuration shared by the trainer and the command line.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CMatrix, CVector};
use crate::losses::LossWeights;
use crate::pinn::{Activation, InitScheme, TimeGrid};
use crate::system::{target_for, Gate, GateTarget, DEFAULT_THETA};

pub const SEED_ENV: &str = "PULSEPINN_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Schrodinger,
    Lindblad,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Schrodinger => "schrodinger",
            ModelKind::Lindblad => "lindblad",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "schrodinger" | "closed" => Ok(ModelKind::Schrodinger),
            "lindblad" | "open" => Ok(ModelKind::Lindblad),
            other => Err(Error::config("model", format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub gate: Gate,
    pub theta: f64,
    pub gamma_abs: f64,
    pub gamma_em: f64,
    pub omega0: f64,
    pub activation: Activation,
    pub init: InitScheme,
    pub epochs: usize,
    pub lr: f64,
    pub n_steps: usize,
    pub t_final: f64,
    pub seed: u64,
    /// Initial state as `[re, im]` pairs.
    pub x0_override: Option<[[f64; 2]; 4]>,
    pub loss_weights: LossWeights,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Schrodinger,
            gate: Gate::Cnot,
            theta: DEFAULT_THETA,
            gamma_abs: 0.0,
            gamma_em: 0.0,
            omega0: 1.0,
            activation: Activation::Sin,
            init: InitScheme::Custom,
            epochs: 5000,
            lr: 1e-6,
            n_steps: 200,
            t_final: 10.0,
            seed: 0,
            x0_override: None,
            loss_weights: LossWeights::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Replaces the seed with `PULSEPINN_SEED` when that variable is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::config("seed", format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |field: &'static str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be finite and >= 0, got {v}")))
            }
        };
        finite_nonneg("gamma_abs", self.gamma_abs)?;
        finite_nonneg("gamma_em", self.gamma_em)?;
        if !(self.omega0.is_finite() && self.omega0 > 0.0) {
            return Err(Error::config("omega0", format!("must be > 0, got {}", self.omega0)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", format!("must be > 0, got {}", self.lr)));
        }
        if self.n_steps < 2 {
            return Err(Error::config("n_steps", format!("must be >= 2, got {}", self.n_steps)));
        }
        if !(self.t_final.is_finite() && self.t_final > 0.0) {
            return Err(Error::config("t_final", format!("must be > 0, got {}", self.t_final)));
        }
        if !self.theta.is_finite() {
            return Err(Error::config("theta", "must be finite"));
        }
        let w = &self.loss_weights;
        for (field, v) in [("loss_weights.fid", w.fid), ("loss_weights.model", w.model), ("loss_weights.trace", w.trace)] {
            finite_nonneg(field, v)?;
        }
        if let Some(x0) = &self.x0_override {
            let norm = x0.iter().map(|[r, i]| r * r + i * i).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() < 1e-9) {
                return Err(Error::config("x0_override", format!("must have unit norm, got {norm}")));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.n_steps, self.t_final)
    }

    pub fn target(&self) -> GateTarget {
        target_for(self.gate, self.theta)
    }

    pub fn x0(&self) -> CVector {
        match &self.x0_override {
            Some(x0) => CVector::from_complex(&x0.map(|[r, i]| Complex64::new(r, i))),
            None => self.gate.default_x0(),
        }
    }

    pub fn target_matrix(&self) -> CMatrix {
        self.target().matrix
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.x0(), Gate::Cnot.default_x0());
    }

    #[test]
    fn rejects_bad_fields() {
        let bad = [
            RunConfig { gamma_abs: -1.0, ..Default::default() },
            RunConfig { n_steps: 1, ..Default::default() },
            RunConfig { lr: 0.0, ..Default::default() },
            RunConfig { x0_override: Some([[1.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 0.0]]), ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config { .. })));
        }
    }

    #[test]
    fn json_round_trip_and_partial() {
        let c = RunConfig { gate: Gate::Swap, lr: 1e-3, ..Default::default() };
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: RunConfig = serde_json::from_str(r#"{"gate": "qft2", "epochs": 3}"#).unwrap();
        assert_eq!(partial.gate, Gate::Qft2);
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.n_steps, 200);
        assert!(serde_json::from_str::<RunConfig>(r#"{"gate": "toffoli"}"#).is_err());
    }
}
