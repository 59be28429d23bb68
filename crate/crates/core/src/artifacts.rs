//! On-disk run directories: writers, readers and the validation step.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{ModelKind, RunConfig};
use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use crate::losses::density_and_derivative;
use crate::pinn::{Histogram, LayerDiagnostics, PinnModel, TimeGrid, WeightsFile};
use crate::system::build_system;
use crate::trainer::{SweepEntry, TrainRecord};
use crate::validator::{build_spline, crosscheck, rk4_lindblad, rk4_schrodinger, EvolutionResult, PulseSchedule};

pub const CONFIG_FILE: &str = "config.json";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const CONTROLS_FILE: &str = "controls.csv";
pub const POPULATIONS_FILE: &str = "populations.csv";
pub const OPERATOR_FILE: &str = "final_operator.json";
pub const REPORT_FILE: &str = "report.json";
pub const WEIGHTS_FILE: &str = "weights.json";
/// Wall-clock timing lives apart from the reproducible artifacts.
pub const TIMING_FILE: &str = "timing.json";
pub const ABORT_FILE: &str = "abort.json";
pub const VALIDATION_DIR: &str = "validation";
pub const SUMMARY_FILE: &str = "summary.csv";

pub const POPULATION_HEADER: [&str; 5] = ["t", "p00", "p01", "p10", "p11"];
pub const CONTROL_HEADER: [&str; 5] = ["t", "u1", "u2", "u3", "u4"];

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.into_iter().map(fmt))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorFile {
    /// `propagator` or `channel`.
    pub kind: String,
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

impl OperatorFile {
    pub fn new(kind: &str, m: &CMatrix) -> Self {
        let rows = |a: &Array2<f64>| a.outer_iter().map(|r| r.to_vec()).collect();
        Self {
            kind: kind.to_string(),
            re: rows(&m.re),
            im: rows(&m.im),
        }
    }

    pub fn matrix(&self) -> Result<CMatrix> {
        let to = |v: &Vec<Vec<f64>>| -> Result<Array2<f64>> {
            let n = v.len();
            let m = v.first().map_or(0, Vec::len);
            Array2::from_shape_vec((n, m), v.concat()).map_err(|e| Error::config("final_operator", e.to_string()))
        };
        CMatrix::new(to(&self.re)?, to(&self.im)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub gate: String,
    pub model: ModelKind,
    pub status: String,
    pub epochs_completed: usize,
    pub final_fidelity: Option<f64>,
    pub l_total: Option<f64>,
    pub l_model: Option<f64>,
    pub l_fid: Option<f64>,
    pub l_trace: Option<f64>,
    pub max_unitarity_deviation: Option<f64>,
    pub seed: u64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_s: f64,
}

/// Populations `|x_a(t_k)|²` of the trained ansatz on the grid.
pub fn ansatz_populations(model: &PinnModel, config: &RunConfig) -> Result<Array2<f64>> {
    let grid = config.grid();
    let x0 = config.x0();
    let times = grid.points();
    let mut pops = Array2::zeros((times.len(), 4));
    for (k, &t) in times.iter().enumerate() {
        let (rho, _) = density_and_derivative(model, t, &x0)?;
        for a in 0..4 {
            pops[[k, a]] = rho.get(a, a).re;
        }
    }
    Ok(pops)
}

/// Writes every artifact of a (possibly aborted) run into `dir`.
pub fn write_run(dir: &Path, record: &TrainRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    let config = &record.config;
    write_json(&dir.join(CONFIG_FILE), config)?;

    let open = config.model == ModelKind::Lindblad;
    let mut header = vec!["epoch", "l_total", "l_model", "l_fid"];
    if open {
        header.push("l_trace");
    }
    header.push("fidelity");
    write_rows(
        &dir.join(LOSS_CURVE_FILE),
        &header,
        record.history.iter().map(|e| {
            let mut row = vec![e.epoch as f64, e.l_total, e.l_model, e.l_fid];
            if open {
                row.push(e.l_trace.unwrap_or(0.0));
            }
            row.push(e.fidelity);
            row
        }),
    )?;

    write_rows(
        &dir.join(CONTROLS_FILE),
        &CONTROL_HEADER,
        record
            .times
            .iter()
            .zip(record.controls.outer_iter())
            .map(|(&t, u)| std::iter::once(t).chain(u.iter().copied()).collect()),
    )?;

    if let Ok(pops) = ansatz_populations(&record.model, config) {
        write_rows(
            &dir.join(POPULATIONS_FILE),
            &POPULATION_HEADER,
            record
                .times
                .iter()
                .zip(pops.outer_iter())
                .map(|(&t, p)| std::iter::once(t).chain(p.iter().copied()).collect()),
        )?;
    }

    if let Some(op) = &record.final_operator {
        let kind = if open { "channel" } else { "propagator" };
        write_json(&dir.join(OPERATOR_FILE), &OperatorFile::new(kind, op))?;
    }

    let fl = record.final_losses;
    let report = RunReport {
        gate: config.gate.to_string(),
        model: config.model,
        status: match &record.abort {
            None => "ok".into(),
            Some(_) => "aborted".into(),
        },
        epochs_completed: record.history.len(),
        final_fidelity: record.final_fidelity,
        l_total: fl.map(|l| l.l_total),
        l_model: fl.map(|l| l.l_model),
        l_fid: fl.map(|l| l.l_fid),
        l_trace: fl.and_then(|l| l.l_trace),
        max_unitarity_deviation: record.max_unitarity_deviation,
        seed: record.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write_json(&dir.join(REPORT_FILE), &report)?;
    write_json(&dir.join(WEIGHTS_FILE), &WeightsFile::from(&record.model))?;
    write_json(
        &dir.join(TIMING_FILE),
        &Timing {
            wall_clock_s: record.wall_clock_s,
        },
    )?;
    if let Some(abort) = &record.abort {
        write_json(&dir.join(ABORT_FILE), abort)?;
    }
    Ok(())
}

pub fn read_config(dir: &Path) -> Result<RunConfig> {
    read_json(&dir.join(CONFIG_FILE))
}

pub fn read_report(dir: &Path) -> Result<RunReport> {
    read_json(&dir.join(REPORT_FILE))
}

pub fn read_weights(dir: &Path) -> Result<PinnModel> {
    PinnModel::try_from(read_json::<WeightsFile>(&dir.join(WEIGHTS_FILE))?)
}

pub fn read_operator(dir: &Path) -> Result<CMatrix> {
    read_json::<OperatorFile>(&dir.join(OPERATOR_FILE))?.matrix()
}

/// Reads `controls.csv` and the uniform grid it was sampled on.
pub fn read_controls(path: &Path, t_final: f64) -> Result<(TimeGrid, Array2<f64>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CONTROL_HEADER {
        return Err(Error::config("controls.csv", format!("unexpected header {header:?}")));
    }
    let mut values = Vec::new();
    let mut n = 0;
    for rec in r.records() {
        let rec = rec?;
        for field in rec.iter().skip(1) {
            values.push(
                field
                    .parse::<f64>()
                    .map_err(|e| Error::config("controls.csv", format!("row {n}: {e}")))?,
            );
        }
        n += 1;
    }
    let samples = Array2::from_shape_vec((n, 4), values).map_err(|e| Error::config("controls.csv", e.to_string()))?;
    Ok((TimeGrid::new(n, t_final), samples))
}

pub fn read_schedule(dir: &Path) -> Result<(RunConfig, PulseSchedule)> {
    let controls = dir.join(CONTROLS_FILE);
    if !controls.exists() {
        return Err(Error::MissingArtifact(controls));
    }
    let config = read_config(dir)?;
    let (grid, samples) = read_controls(&controls, config.t_final)?;
    Ok((config, build_spline(&samples, &grid)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub gate: String,
    pub model: ModelKind,
    pub substeps: usize,
    /// `⟨ψ|ρ(T)|ψ⟩` with `ψ = U_targ x0`.
    pub state_fidelity: f64,
    pub final_populations: [f64; 4],
    pub max_norm_deviation: f64,
    pub min_eigenvalue: Option<f64>,
    pub max_symmetrization: Option<f64>,
    /// Process fidelity reported by the trainer, when available.
    pub trained_fidelity: Option<f64>,
    pub paired_run: Option<PathBuf>,
    pub crosscheck_fidelity: Option<f64>,
}

/// Evolves `x0` under a run's spline-interpolated controls.
pub fn evolve_run(dir: &Path, substeps: usize) -> Result<(RunConfig, EvolutionResult)> {
    let (config, schedule) = read_schedule(dir)?;
    let x0 = config.x0();
    let evolution = match config.model {
        ModelKind::Schrodinger => rk4_schrodinger(&build_system(), &schedule, &x0, substeps)?,
        ModelKind::Lindblad => {
            let sys = build_system().with_rates(config.gamma_abs, config.gamma_em)?;
            rk4_lindblad(&sys, &schedule, &x0.outer(&x0), &sys.collapse_ops()?, substeps)?
        }
    };
    Ok((config, evolution))
}

/// Validates a run directory and writes `validation/` inside it.
pub fn validate_run(dir: &Path, paired: Option<&Path>, substeps: usize) -> Result<ValidationReport> {
    let (config, evolution) = evolve_run(dir, substeps)?;
    let psi = config.target_matrix().matvec(&config.x0())?;
    let crosscheck_fidelity = match paired {
        Some(other) => {
            let (_, mine) = read_schedule(dir)?;
            let (_, theirs) = read_schedule(other)?;
            Some(crosscheck(&build_system(), &mine, &theirs, &config.x0(), substeps)?)
        }
        None => None,
    };
    let fp = evolution.final_populations();
    let report = ValidationReport {
        gate: config.gate.to_string(),
        model: config.model,
        substeps,
        state_fidelity: evolution.fidelity_to(&psi)?,
        final_populations: [fp[0], fp[1], fp[2], fp[3]],
        max_norm_deviation: evolution.max_norm_deviation,
        min_eigenvalue: evolution.min_eigenvalue,
        max_symmetrization: evolution.max_symmetrization,
        trained_fidelity: read_report(dir).ok().and_then(|r| r.final_fidelity),
        paired_run: paired.map(Path::to_path_buf),
        crosscheck_fidelity,
    };
    let out = dir.join(VALIDATION_DIR);
    fs::create_dir_all(&out)?;
    write_rows(
        &out.join(POPULATIONS_FILE),
        &POPULATION_HEADER,
        evolution
            .times
            .iter()
            .zip(evolution.populations.outer_iter())
            .map(|(&t, p)| std::iter::once(t).chain(p.iter().copied()).collect()),
    )?;
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Writes one row per sweep entry and each successful run's directory.
pub fn write_sweep(out_dir: &Path, entries: &[SweepEntry]) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join(SUMMARY_FILE))?;
    w.write_record([
        "gate",
        "gamma",
        "omega0",
        "activation",
        "seed",
        "final_fidelity",
        "wall_clock_s",
        "status",
    ])?;
    for e in entries {
        let c = &e.config;
        let (fid, wall, status) = match &e.outcome {
            Ok(rec) => {
                write_run(&c.out_dir, rec)?;
                let status = match &rec.abort {
                    None => "ok".to_string(),
                    Some(a) => format!("aborted: {}", a.reason),
                };
                (rec.final_fidelity.map(fmt).unwrap_or_default(), fmt(rec.wall_clock_s), status)
            }
            Err(msg) => (String::new(), String::new(), format!("failed: {msg}")),
        };
        w.write_record([
            c.gate.to_string(),
            fmt(c.gamma_abs),
            fmt(c.omega0),
            c.activation.to_string(),
            c.seed.to_string(),
            fid,
            wall,
            status,
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_histogram(path: &Path, h: &Histogram) -> Result<()> {
    write_rows(
        path,
        &["bin_center", "count"],
        h.bin_centers().into_iter().zip(&h.counts).map(|(c, &n)| vec![c, n as f64]),
    )
}

/// One CSV per layer and kind: `layer{i}_{post_linear,post_activation,gradient}.csv`
/// and `layer{i}_spectrum.csv`, plus `summary.json` with the moments.
pub fn write_diagnostics(dir: &Path, diags: &[LayerDiagnostics]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for d in diags {
        let i = d.layer;
        write_histogram(&dir.join(format!("layer{i}_post_linear.csv")), &d.post_linear)?;
        if let Some(h) = &d.post_activation {
            write_histogram(&dir.join(format!("layer{i}_post_activation.csv")), h)?;
        }
        write_histogram(&dir.join(format!("layer{i}_gradient.csv")), &d.gradient)?;
        write_rows(
            &dir.join(format!("layer{i}_spectrum.csv")),
            &["frequency_bin", "magnitude"],
            d.spectrum.iter().enumerate().map(|(k, &m)| vec![k as f64, m]),
        )?;
    }
    #[derive(Serialize)]
    struct Moments {
        layer: usize,
        post_linear_std: f64,
        post_activation_std: Option<f64>,
        gradient_std: f64,
    }
    let moments: Vec<Moments> = diags
        .iter()
        .map(|d| Moments {
            layer: d.layer,
            post_linear_std: d.post_linear.std,
            post_activation_std: d.post_activation.as_ref().map(|h| h.std),
            gradient_std: d.gradient.std,
        })
        .collect();
    write_json(&dir.join("summary.json"), &moments)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operator_file_round_trip() {
        let m = CMatrix::from_fn(3, 3, |i, j| num_complex::Complex64::new(i as f64 + 0.1, j as f64 - 0.3));
        let back = OperatorFile::new("propagator", &m).matrix().unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn missing_controls_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_schedule(dir.path()), Err(Error::MissingArtifact(_))));
        assert!(matches!(validate_run(dir.path(), None, 10), Err(Error::MissingArtifact(_))));
    }
}
