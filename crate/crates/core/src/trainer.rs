//! Adam training loop and parameter sweeps.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::DiffGraph;
use crate::config::{ModelKind, RunConfig};
use crate::error::{Error, Result};
use crate::linalg::{CMatrix, CVector};
use crate::losses::{
    open_process_fidelity, record_closed_objective, record_open_objective, unitary_process_fidelity, RecordedObjective,
};
use crate::pinn::{record_network, record_state, Activation, ParamVars, PinnModel};
use crate::system::{build_system, Gate, SystemSpec};

/// Adam optimizer state; moments are allocated on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(1e-6)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn ensure_shapes(&mut self, params: &[&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        let mismatch = |p: usize, g: usize| Error::ShapeMismatch {
            op: "adam_step",
            lhs: (p, 1),
            rhs: (g, 1),
        };
        if params.len() != grads.len() {
            return Err(mismatch(params.len(), grads.len()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(mismatch(p.len(), g.len()));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(mismatch(self.m.len(), params.len()));
        }
        for (m, p) in self.m.iter().zip(params) {
            if m.len() != p.len() {
                return Err(mismatch(m.len(), p.len()));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of every parameter block in place.
pub fn adam_step(state: &mut AdamState, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
    state.ensure_shapes(params, grads)?;
    for (idx, g) in grads.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                epoch: state.step as usize + 1,
                param: format!("block {idx}"),
            });
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= state.lr * mh / (vh.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_total: f64,
    pub l_model: f64,
    pub l_fid: f64,
    pub l_trace: Option<f64>,
    pub fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortInfo {
    /// Epoch during which the run stopped.
    pub epoch: usize,
    pub reason: String,
    pub numerical: bool,
}

#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub config: RunConfig,
    /// Losses recorded before each update, one per completed epoch.
    pub history: Vec<EpochRecord>,
    /// Losses of the final weights.
    pub final_losses: Option<EpochRecord>,
    pub times: Array1<f64>,
    /// `N × 4` control samples of the final weights.
    pub controls: Array2<f64>,
    /// Final propagator (closed) or channel (open).
    pub final_operator: Option<CMatrix>,
    pub final_fidelity: Option<f64>,
    /// Largest `‖U†U − I‖_F` seen over the closed-model epochs.
    pub max_unitarity_deviation: Option<f64>,
    pub wall_clock_s: f64,
    pub seed: u64,
    pub model: PinnModel,
    pub abort: Option<AbortInfo>,
}

impl TrainRecord {
    pub fn is_complete(&self) -> bool {
        self.abort.is_none()
    }
}

/// Loss breakdown, controls and final operator for fixed weights.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub losses: EpochRecord,
    pub controls: Array2<f64>,
    pub operator: CMatrix,
    /// Fidelity recomputed from the operator outside the tape.
    pub fidelity: f64,
}

struct Problem {
    sys: SystemSpec,
    collapse: Vec<CMatrix>,
    x0: CVector,
    target: CMatrix,
}

impl Problem {
    fn new(config: &RunConfig) -> Result<Self> {
        let (sys, collapse) = match config.model {
            ModelKind::Schrodinger => (build_system(), Vec::new()),
            ModelKind::Lindblad => {
                let sys = build_system().with_rates(config.gamma_abs, config.gamma_em)?;
                let collapse = sys.collapse_ops()?;
                (sys, collapse)
            }
        };
        Ok(Self {
            sys,
            collapse,
            x0: config.x0(),
            target: config.target_matrix(),
        })
    }

    fn record(&self, g: &mut DiffGraph, config: &RunConfig, model: &PinnModel, params: &ParamVars) -> Result<RecordedObjective> {
        let grid = config.grid();
        let out = record_network(g, model, params, &grid.points())?;
        let traj = record_state(g, &out, &self.x0)?;
        match config.model {
            ModelKind::Schrodinger => record_closed_objective(g, &self.sys, &traj, &grid, &self.target, &config.loss_weights),
            ModelKind::Lindblad => {
                record_open_objective(g, &self.sys, &self.collapse, &traj, &grid, &self.target, &config.loss_weights)
            }
        }
    }

    fn epoch_record(&self, g: &DiffGraph, obj: &RecordedObjective, epoch: usize) -> EpochRecord {
        EpochRecord {
            epoch,
            l_total: g.scalar(obj.total),
            l_model: g.scalar(obj.l_model),
            l_fid: g.scalar(obj.l_fid),
            l_trace: obj.l_trace.map(|t| g.scalar(t)),
            fidelity: g.scalar(obj.fidelity).clamp(0.0, 1.0),
        }
    }

    fn operator_fidelity(&self, operator: &CMatrix) -> Result<f64> {
        if operator.rows() == self.target.rows() {
            unitary_process_fidelity(&self.target, operator)
        } else {
            open_process_fidelity(operator, &self.target)
        }
    }
}

/// Evaluates the configured objective at the given weights without updating them.
pub fn evaluate(config: &RunConfig, model: &PinnModel) -> Result<Evaluation> {
    let problem = Problem::new(config)?;
    evaluate_problem(&problem, config, model, 0)
}

fn evaluate_problem(problem: &Problem, config: &RunConfig, model: &PinnModel, epoch: usize) -> Result<Evaluation> {
    let mut g = DiffGraph::new();
    let params = ParamVars::constants(&mut g, model)?;
    let obj = problem.record(&mut g, config, model, &params)?;
    let operator = obj.operator.value(&g);
    Ok(Evaluation {
        losses: problem.epoch_record(&g, &obj, epoch),
        controls: g.value(obj.controls).clone(),
        fidelity: problem.operator_fidelity(&operator)?,
        operator,
    })
}

fn train_epoch(
    problem: &Problem,
    config: &RunConfig,
    model: &mut PinnModel,
    adam: &mut AdamState,
    epoch: usize,
) -> Result<(EpochRecord, CMatrix)> {
    let mut g = DiffGraph::new();
    let params = ParamVars::inputs(&mut g, model)?;
    let obj = problem.record(&mut g, config, model, &params)?;
    let record = problem.epoch_record(&g, &obj, epoch);
    let operator = obj.operator.value(&g);
    let adjoints = g.backward(obj.total).map_err(|e| match e {
        Error::NonFiniteValue { op, node } => Error::NonFiniteGradient {
            epoch,
            param: format!("adjoint of {op} node {node}"),
        },
        other => other,
    })?;

    let mut grads = Vec::with_capacity(2 * params.layers.len());
    for (idx, &(w, b)) in params.layers.iter().enumerate() {
        for (name, node) in [("weight", w), ("bias", b)] {
            let grad = adjoints.get(node).as_standard_layout().into_owned();
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    epoch,
                    param: format!("layer {idx} {name}"),
                });
            }
            grads.push(grad);
        }
    }
    let grad_slices: Vec<&[f64]> = grads.iter().map(|a| a.as_slice().expect("standard layout")).collect();
    let mut param_slices: Vec<&mut [f64]> = Vec::with_capacity(grads.len());
    for layer in model.layers.iter_mut() {
        param_slices.push(layer.weight.as_slice_mut().expect("standard layout"));
        param_slices.push(layer.bias.as_slice_mut().expect("standard layout"));
    }
    adam_step(adam, &mut param_slices, &grad_slices)?;
    Ok((record, operator))
}

/// Trains one model. Failures inside the loop stop training and are reported
/// through [`TrainRecord::abort`] together with everything recorded so far.
pub fn train(config: &RunConfig) -> Result<TrainRecord> {
    config.validate()?;
    let start = Instant::now();
    let problem = Problem::new(config)?;
    let mut model = PinnModel::new(config.activation, config.omega0, config.init, config.seed);
    let mut adam = AdamState::new(config.lr);
    let mut history = Vec::with_capacity(config.epochs);
    let mut max_dev: Option<f64> = None;
    let mut abort = None;

    for epoch in 1..=config.epochs {
        match train_epoch(&problem, config, &mut model, &mut adam, epoch) {
            Ok((record, operator)) => {
                if config.model == ModelKind::Schrodinger {
                    let dev = operator.unitarity_deviation();
                    max_dev = Some(max_dev.map_or(dev, |m| m.max(dev)));
                }
                if epoch % 500 == 0 || epoch == 1 {
                    log::info!(
                        "{} {} epoch {epoch}: l_total {:.6e} fidelity {:.6}",
                        config.model,
                        config.gate,
                        record.l_total,
                        record.fidelity
                    );
                }
                history.push(record);
            }
            Err(e) => {
                log::error!("training stopped at epoch {epoch}: {e}");
                abort = Some(AbortInfo {
                    epoch,
                    reason: e.to_string(),
                    numerical: e.is_numerical(),
                });
                break;
            }
        }
    }

    let grid = config.grid();
    let (final_losses, controls, final_operator, final_fidelity) =
        match evaluate_problem(&problem, config, &model, history.len()) {
            Ok(ev) => (Some(ev.losses), ev.controls, Some(ev.operator), Some(ev.fidelity)),
            Err(e) => {
                if abort.is_none() {
                    abort = Some(AbortInfo {
                        epoch: history.len(),
                        reason: e.to_string(),
                        numerical: e.is_numerical(),
                    });
                }
                (None, model.controls(&grid), None, None)
            }
        };

    Ok(TrainRecord {
        config: config.clone(),
        history,
        final_losses,
        times: grid.points(),
        controls,
        final_operator,
        final_fidelity,
        max_unitarity_deviation: max_dev,
        wall_clock_s: start.elapsed().as_secs_f64(),
        seed: config.seed,
        model,
        abort,
    })
}

/// Cartesian grid of runs around a base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub base: RunConfig,
    pub gates: Vec<Gate>,
    /// Symmetric rates, `gamma_abs = gamma_em = γ`.
    pub gammas: Vec<f64>,
    pub omega0s: Vec<f64>,
    pub activations: Vec<Activation>,
    pub seeds: Vec<u64>,
}

pub const DEFAULT_GAMMAS: [f64; 5] = [0.0, 1e-5, 1e-3, 1e-2, 1e-1];

impl Default for SweepGrid {
    fn default() -> Self {
        let base = RunConfig {
            model: ModelKind::Lindblad,
            out_dir: PathBuf::from("runs/sweep"),
            ..RunConfig::default()
        };
        Self {
            gates: Gate::ALL.to_vec(),
            gammas: DEFAULT_GAMMAS.to_vec(),
            omega0s: vec![base.omega0],
            activations: vec![base.activation],
            seeds: vec![base.seed],
            base,
        }
    }
}

impl SweepGrid {
    pub fn len(&self) -> usize {
        self.gates.len() * self.gammas.len() * self.omega0s.len() * self.activations.len() * self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One configuration per grid point, each with its own output directory.
    pub fn configs(&self) -> Vec<RunConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &gate in &self.gates {
            for &gamma in &self.gammas {
                for &omega0 in &self.omega0s {
                    for &activation in &self.activations {
                        for &seed in &self.seeds {
                            let name = format!("{gate}_g{gamma:e}_w{omega0}_{activation}_s{seed}");
                            out.push(RunConfig {
                                gate,
                                gamma_abs: gamma,
                                gamma_em: gamma,
                                omega0,
                                activation,
                                seed,
                                out_dir: self.base.out_dir.join(name),
                                ..self.base.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub config: RunConfig,
    pub outcome: std::result::Result<TrainRecord, String>,
}

/// Runs every grid point on up to `workers` threads, in grid order.
pub fn sweep(grid: &SweepGrid, workers: usize) -> Result<Vec<SweepEntry>> {
    if grid.is_empty() {
        return Err(Error::config("sweep", "grid has no points"));
    }
    let configs = grid.configs();
    let workers = workers.clamp(1, configs.len());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;
    Ok(pool.install(|| {
        configs
            .into_par_iter()
            .map(|config| {
                let outcome = train(&config).map_err(|e| e.to_string());
                SweepEntry { config, outcome }
            })
            .collect()
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step() {
        let mut theta = vec![0.0];
        let mut st = AdamState::new(1e-3);
        adam_step(&mut st, &mut [theta.as_mut_slice()], &[&[2.0]]).unwrap();
        // m̂ = 2, v̂ = 4 → −lr·2/(2 + ε)
        let want = -1e-3 * 2.0 / (2.0 + 1e-8);
        assert!((theta[0] - want).abs() < 1e-18);
        assert!((theta[0] + 9.99999995e-4).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut theta = vec![0.3, -1.2];
        let mut st = AdamState::new(1e-2);
        for _ in 0..3 {
            adam_step(&mut st, &mut [theta.as_mut_slice()], &[&[0.0, 0.0]]).unwrap();
        }
        assert_eq!(theta, vec![0.3, -1.2]);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn adam_rejects_bad_input() {
        let mut theta = vec![0.0, 0.0];
        let mut st = AdamState::default();
        assert!(matches!(
            adam_step(&mut st, &mut [theta.as_mut_slice()], &[&[1.0]]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            adam_step(&mut st, &mut [theta.as_mut_slice()], &[&[f64::NAN, 0.0]]),
            Err(Error::NonFiniteGradient { .. })
        ));
    }

    fn tiny() -> RunConfig {
        RunConfig {
            epochs: 2,
            n_steps: 8,
            t_final: 1.0,
            lr: 1e-3,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_epochs_reports_initial_state() {
        let config = RunConfig { epochs: 0, ..tiny() };
        let rec = train(&config).unwrap();
        assert!(rec.history.is_empty());
        let model = PinnModel::new(config.activation, config.omega0, config.init, config.seed);
        assert_eq!(rec.model, model);
        assert_eq!(rec.controls, model.controls(&config.grid()));
        let ev = evaluate(&config, &model).unwrap();
        assert_eq!(rec.final_losses, Some(ev.losses));
    }

    #[test]
    fn history_and_final_fidelity_agree() {
        for model in [ModelKind::Schrodinger, ModelKind::Lindblad] {
            let rec = train(&RunConfig { model, ..tiny() }).unwrap();
            assert!(rec.is_complete());
            assert_eq!(rec.history.len(), 2);
            assert_eq!(rec.history[1].epoch, 2);
            let f = rec.final_losses.unwrap().fidelity;
            assert!((f - rec.final_fidelity.unwrap()).abs() < 1e-8);
        }
    }

    #[test]
    fn empty_sweep_is_an_error() {
        let grid = SweepGrid {
            gates: vec![],
            ..SweepGrid::default()
        };
        assert!(sweep(&grid, 1).is_err());
    }

    #[test]
    fn sweep_expands_grid() {
        let grid = SweepGrid::default();
        assert_eq!(grid.configs().len(), 30);
        let c = &grid.configs()[7];
        assert_eq!(c.gamma_abs, c.gamma_em);
        assert!(c.out_dir.starts_with("runs/sweep"));
    }
}
