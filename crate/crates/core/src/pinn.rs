//! The pulse network: `t ↦ (N_x(t), N_u(t))`, the normalized state ansatz
//! and its exact time derivative.
//!
//! The time derivative is recorded on the tape next to the primal pass
//! (dual-number chain rule, layer by layer), so the residual losses can be
//! differentiated with respect to the weights in a single reverse sweep.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::autodiff::{DiffGraph, NodeId};
use crate::error::{Error, Result};
use crate::linalg::{CVar, CVector};

pub const HIDDEN_WIDTH: usize = 200;
pub const HIDDEN_LAYERS: usize = 4;
/// 4 real + 4 imaginary state components, then 4 controls.
pub const OUTPUT_DIM: usize = 12;
pub const STATE_DIM: usize = 4;
pub const HISTOGRAM_BINS: usize = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Sin,
    Tanh,
    Relu,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Sin => "sin",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sin" => Ok(Activation::Sin),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            _ => Err(Error::config("activation", format!("unknown activation `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// Frequency-scaled uniform ranges matched to sine activations.
    #[default]
    Custom,
    /// Conventional fan-in rule `U(±1/√n_in)` for weights and biases.
    Default,
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitScheme::Custom => "custom",
            InitScheme::Default => "default",
        })
    }
}

impl FromStr for InitScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "custom" => Ok(InitScheme::Custom),
            "default" => Ok(InitScheme::Default),
            _ => Err(Error::config("init", format!("unknown init scheme `{s}`"))),
        }
    }
}

/// Uniform grid `t_k = k·Δt`, `k = 0 … n−1`, `Δt = t_final / n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub n: usize,
    pub t_final: f64,
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self { n: 200, t_final: 10.0 }
    }
}

impl TimeGrid {
    pub fn new(n: usize, t_final: f64) -> Self {
        Self { n, t_final }
    }

    pub fn dt(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.t_final / self.n as f64
        }
    }

    pub fn points(&self) -> Array1<f64> {
        let dt = self.dt();
        Array1::from_iter((0..self.n).map(|k| k as f64 * dt))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out × in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }
    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PinnModel {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub omega0: f64,
    pub init_scheme: InitScheme,
    pub rng_seed: u64,
}

/// `1 → w → … → w → 12` with `hidden` hidden maps after the input map.
pub fn layer_widths(hidden_width: usize, hidden_layers: usize) -> Vec<usize> {
    let mut w = vec![1];
    w.extend(std::iter::repeat(hidden_width).take(hidden_layers + 1));
    w.push(OUTPUT_DIM);
    w
}

impl PinnModel {
    /// The standard `1→200→200→200→200→200→12` network, initialized.
    pub fn new(activation: Activation, omega0: f64, init_scheme: InitScheme, rng_seed: u64) -> Self {
        Self::with_widths(&layer_widths(HIDDEN_WIDTH, HIDDEN_LAYERS), activation, omega0, init_scheme, rng_seed)
    }

    pub fn with_widths(
        widths: &[usize],
        activation: Activation,
        omega0: f64,
        init_scheme: InitScheme,
        rng_seed: u64,
    ) -> Self {
        assert!(widths.len() >= 2 && widths[0] == 1 && *widths.last().unwrap() == OUTPUT_DIM);
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                weight: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        let mut model = Self {
            layers,
            activation,
            omega0,
            init_scheme,
            rng_seed,
        };
        model.init_weights();
        model
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].fan_in()];
        w.extend(self.layers.iter().map(Layer::fan_out));
        w
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Re-draws every weight from the model's seed and scheme. Layers are
    /// filled in order, weights row-major before biases.
    pub fn init_weights(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            let n_in = layer.fan_in() as f64;
            match self.init_scheme {
                InitScheme::Custom => {
                    let bound = if idx == 0 {
                        1.0 / n_in
                    } else {
                        (6.0 / n_in).sqrt() / self.omega0
                    };
                    layer.weight.mapv_inplace(|_| rng.random_range(-bound..=bound));
                    layer.bias.fill(0.0);
                }
                InitScheme::Default => {
                    let bound = 1.0 / n_in.sqrt();
                    layer.weight.mapv_inplace(|_| rng.random_range(-bound..=bound));
                    layer.bias.mapv_inplace(|_| rng.random_range(-bound..=bound));
                }
            }
        }
    }

    /// Frequency factor applied inside hidden activations.
    fn hidden_scale(&self) -> f64 {
        match self.activation {
            Activation::Sin => self.omega0,
            Activation::Tanh | Activation::Relu => 1.0,
        }
    }

    fn act(&self, x: f64) -> f64 {
        match self.activation {
            Activation::Sin => x.sin(),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Plain forward pass over a batch of times; returns `N × 12`.
    pub fn forward_batch(&self, times: &Array1<f64>) -> Array2<f64> {
        let mut h = times.clone().insert_axis(Axis(1));
        let last = self.layers.len() - 1;
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t()) + &layer.bias;
            if idx == last {
                return z;
            }
            let scale = if idx == 0 { 1.0 } else { self.hidden_scale() };
            z.mapv_inplace(|v| self.act(scale * v));
            h = z;
        }
        unreachable!("network has an output layer")
    }

    /// `(N_x(t), N_u(t))` at a single time.
    pub fn forward(&self, t: f64) -> (CVector, [f64; 4]) {
        let y = self.forward_batch(&Array1::from_elem(1, t));
        let row = y.row(0);
        let nx = CVector {
            re: row.slice(s![0..4]).to_owned(),
            im: row.slice(s![4..8]).to_owned(),
        };
        (nx, [row[8], row[9], row[10], row[11]])
    }

    /// Control samples `u_j(t_k)` on a grid, `N × 4`.
    pub fn controls(&self, grid: &TimeGrid) -> Array2<f64> {
        self.forward_batch(&grid.points()).slice(s![.., 8..12]).to_owned()
    }

    pub fn state(&self, t: f64, x0: &CVector) -> Result<CVector> {
        Ok(self.state_and_derivative(t, x0)?.0)
    }

    pub fn state_time_derivative(&self, t: f64, x0: &CVector) -> Result<CVector> {
        Ok(self.state_and_derivative(t, x0)?.1)
    }

    pub fn state_and_derivative(&self, t: f64, x0: &CVector) -> Result<(CVector, CVector)> {
        let mut g = DiffGraph::new();
        let params = ParamVars::constants(&mut g, self)?;
        let out = record_network(&mut g, self, &params, &Array1::from_elem(1, t))?;
        let traj = record_state(&mut g, &out, x0)?;
        let row = |id: NodeId, g: &DiffGraph| g.value(id).row(0).to_owned();
        let x = CVector::new(row(traj.x.re, &g), row(traj.x.im, &g))?;
        let dx = CVector::new(row(traj.dx.re, &g), row(traj.dx.im, &g))?;
        Ok((x, dx))
    }
}

/// Tape handles for the weights and biases of each layer.
#[derive(Debug, Clone)]
pub struct ParamVars {
    /// `(weight (out×in), bias (1×out))` per layer.
    pub layers: Vec<(NodeId, NodeId)>,
}

impl ParamVars {
    /// Registers the parameters as differentiable inputs.
    pub fn inputs(g: &mut DiffGraph, model: &PinnModel) -> Result<Self> {
        Self::register(g, model, true)
    }

    /// Registers the parameters as constants (evaluation only).
    pub fn constants(g: &mut DiffGraph, model: &PinnModel) -> Result<Self> {
        Self::register(g, model, false)
    }

    fn register(g: &mut DiffGraph, model: &PinnModel, differentiable: bool) -> Result<Self> {
        let mut layers = Vec::with_capacity(model.layers.len());
        for layer in &model.layers {
            let b = layer.bias.clone().insert_axis(Axis(0));
            let (w, b) = if differentiable {
                (g.input(layer.weight.clone())?, g.input(b)?)
            } else {
                (g.constant(layer.weight.clone())?, g.constant(b)?)
            };
            layers.push((w, b));
        }
        Ok(Self { layers })
    }
}

/// Network output on the tape together with its time derivative.
#[derive(Debug, Clone, Copy)]
pub struct NetworkOutput {
    /// The time column, `N × 1`, recorded as an input so it can be seeded.
    pub t: NodeId,
    /// `N × 12`.
    pub y: NodeId,
    /// `dy/dt`, `N × 12`, built from tape primitives.
    pub dy_dt: NodeId,
}

/// Records the forward pass and, alongside it, the exact `dy/dt`.
pub fn record_network(
    g: &mut DiffGraph,
    model: &PinnModel,
    params: &ParamVars,
    times: &Array1<f64>,
) -> Result<NetworkOutput> {
    let t = g.input(times.clone().insert_axis(Axis(1)))?;
    let last = params.layers.len() - 1;
    let (mut h, mut dh) = (t, None::<NodeId>);
    for (idx, &(w, b)) in params.layers.iter().enumerate() {
        let wt = g.transpose(w)?;
        let lin = g.matmul(h, wt)?;
        let lin = g.add(lin, b)?;
        // dt/dt = 1 on every row, so the input layer's tangent is just Wᵀ.
        let dlin = match dh {
            None => wt,
            Some(dh) => g.matmul(dh, wt)?,
        };
        if idx == last {
            return Ok(NetworkOutput { t, y: lin, dy_dt: dlin });
        }
        let scale = if idx == 0 { 1.0 } else { model.hidden_scale() };
        let (z, dz) = if scale != 1.0 {
            (g.scale(lin, scale)?, g.scale(dlin, scale)?)
        } else {
            (lin, dlin)
        };
        let (a, da) = match model.activation {
            Activation::Sin => {
                let a = g.sin(z)?;
                let c = g.cos(z)?;
                (a, g.mul(c, dz)?)
            }
            Activation::Tanh => {
                let a = g.tanh(z)?;
                let a2 = g.square(a)?;
                let slope = g.scale(a2, -1.0)?;
                let slope = g.add_scalar(slope, 1.0)?;
                (a, g.mul(slope, dz)?)
            }
            Activation::Relu => {
                let a = g.relu(z)?;
                let mask = g.step(z)?;
                (a, g.mul(mask, dz)?)
            }
        };
        h = a;
        dh = Some(da);
    }
    unreachable!("network has an output layer")
}

/// State trajectory `x(t_k)` with derivatives and the control columns.
#[derive(Debug, Clone, Copy)]
pub struct StateTrajectory {
    /// `N × 4`.
    pub x: CVar,
    /// `dx/dt`, `N × 4`.
    pub dx: CVar,
    /// `N × 4` control amplitudes.
    pub controls: NodeId,
}

/// `x(t) = (x0 + (1 − e^{−t}) N_x(t)) / ‖·‖` and its time derivative.
pub fn record_state(g: &mut DiffGraph, out: &NetworkOutput, x0: &CVector) -> Result<StateTrajectory> {
    let nr = g.slice_cols(out.y, 0, STATE_DIM)?;
    let ni = g.slice_cols(out.y, STATE_DIM, STATE_DIM)?;
    let dnr = g.slice_cols(out.dy_dt, 0, STATE_DIM)?;
    let dni = g.slice_cols(out.dy_dt, STATE_DIM, STATE_DIM)?;
    let controls = g.slice_cols(out.y, 2 * STATE_DIM, 4)?;

    let neg_t = g.neg(out.t)?;
    let decay = g.exp(neg_t)?;
    let env = g.scale(decay, -1.0)?;
    let env = g.add_scalar(env, 1.0)?;

    let x0r = g.constant(x0.re.clone().insert_axis(Axis(0)))?;
    let x0i = g.constant(x0.im.clone().insert_axis(Axis(0)))?;

    // v = x0 + env·N, v' = e^{-t}·N + env·N'
    let part = |g: &mut DiffGraph, x0p: NodeId, n: NodeId, dn: NodeId| -> Result<(NodeId, NodeId)> {
        let en = g.mul(env, n)?;
        let v = g.add(x0p, en)?;
        let a = g.mul(decay, n)?;
        let b = g.mul(env, dn)?;
        Ok((v, g.add(a, b)?))
    };
    let (vr, dvr) = part(g, x0r, nr, dnr)?;
    let (vi, dvi) = part(g, x0i, ni, dni)?;

    let vr2 = g.square(vr)?;
    let vi2 = g.square(vi)?;
    let sq = g.add(vr2, vi2)?;
    let norm2 = g.sum_rows(sq)?;
    let norm = g.sqrt(norm2)?;
    {
        let nv = g.value(norm);
        let tv = g.value(out.t);
        if let Some((k, &n)) = nv.iter().enumerate().find(|(_, &n)| n < 1e-12) {
            return Err(Error::DegenerateState { t: tv[[k, 0]], norm: n });
        }
    }
    let xr = g.div(vr, norm)?;
    let xi = g.div(vi, norm)?;

    // ‖v‖' = Re⟨v, v'⟩ / ‖v‖ ; x' = (v' − x·‖v‖') / ‖v‖
    let pr = g.mul(vr, dvr)?;
    let pi = g.mul(vi, dvi)?;
    let p = g.add(pr, pi)?;
    let dot = g.sum_rows(p)?;
    let dnorm = g.div(dot, norm)?;
    let deriv = |g: &mut DiffGraph, dv: NodeId, x: NodeId| -> Result<NodeId> {
        let corr = g.mul(x, dnorm)?;
        let num = g.sub(dv, corr)?;
        g.div(num, norm)
    };
    let dxr = deriv(g, dvr, xr)?;
    let dxi = deriv(g, dvi, xi)?;

    Ok(StateTrajectory {
        x: CVar { re: xr, im: xi },
        dx: CVar { re: dxr, im: dxi },
        controls,
    })
}

/// Equal-width histogram over `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub mean: f64,
    pub std: f64,
}

impl Histogram {
    pub fn from_values<'a>(values: impl IntoIterator<Item = &'a f64>, bins: usize) -> Self {
        let vals: Vec<f64> = values.into_iter().copied().collect();
        let n = vals.len().max(1) as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let (mut lo, mut hi) = vals
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        if !(lo < hi) {
            let c = if lo.is_finite() { lo } else { 0.0 };
            lo = c - 0.5;
            hi = c + 0.5;
        }
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0u64; bins];
        for v in &vals {
            let k = (((v - lo) / width).floor() as usize).min(bins - 1);
            counts[k] += 1;
        }
        Self {
            lo,
            hi,
            counts,
            mean,
            std: var.sqrt(),
        }
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        let bins = self.counts.len();
        let w = (self.hi - self.lo) / bins as f64;
        (0..bins).map(|k| self.lo + (k as f64 + 0.5) * w).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub post_linear: Histogram,
    /// `None` for the linear output layer.
    pub post_activation: Option<Histogram>,
    /// Adjoints of the probe loss with respect to the post-linear values.
    pub gradient: Histogram,
    /// Mean magnitude of the DFT along the time grid, bins `0 … N/2`.
    pub spectrum: Vec<f64>,
}

/// Activation/gradient statistics of the model over a grid. The probe loss
/// for the gradient histograms is the sum of all network outputs.
pub fn diagnostics(model: &PinnModel, grid: &TimeGrid) -> Result<Vec<LayerDiagnostics>> {
    let mut g = DiffGraph::new();
    let params = ParamVars::inputs(&mut g, model)?;
    let mut h = g.constant(grid.points().insert_axis(Axis(1)))?;
    let last = params.layers.len() - 1;
    let mut taps = Vec::with_capacity(params.layers.len());
    for (idx, &(w, b)) in params.layers.iter().enumerate() {
        let wt = g.transpose(w)?;
        let lin = g.matmul(h, wt)?;
        let lin = g.add(lin, b)?;
        if idx == last {
            taps.push((lin, None));
            h = lin;
            break;
        }
        let scale = if idx == 0 { 1.0 } else { model.hidden_scale() };
        let z = if scale != 1.0 { g.scale(lin, scale)? } else { lin };
        let a = match model.activation {
            Activation::Sin => g.sin(z)?,
            Activation::Tanh => g.tanh(z)?,
            Activation::Relu => g.relu(z)?,
        };
        taps.push((lin, Some(a)));
        h = a;
    }
    let probe = g.sum(h)?;
    let adjoints = g.backward(probe)?;

    let mut planner = FftPlanner::<f64>::new();
    let mut result = Vec::with_capacity(taps.len());
    for (idx, &(lin, act)) in taps.iter().enumerate() {
        let lin_v = g.value(lin);
        let act_v = act.map(|a| g.value(a));
        result.push(LayerDiagnostics {
            layer: idx,
            post_linear: Histogram::from_values(lin_v.iter(), HISTOGRAM_BINS),
            post_activation: act_v.map(|a| Histogram::from_values(a.iter(), HISTOGRAM_BINS)),
            gradient: Histogram::from_values(adjoints.get(lin).iter(), HISTOGRAM_BINS),
            spectrum: mean_spectrum(&mut planner, act_v.unwrap_or(lin_v)),
        });
    }
    Ok(result)
}

fn mean_spectrum(planner: &mut FftPlanner<f64>, series: &Array2<f64>) -> Vec<f64> {
    let n = series.nrows();
    if n == 0 {
        return Vec::new();
    }
    let fft = planner.plan_fft_forward(n);
    let mut acc = vec![0.0; n / 2 + 1];
    for col in series.columns() {
        let mut buf: Vec<Complex<f64>> = col.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft.process(&mut buf);
        for (a, z) in acc.iter_mut().zip(&buf) {
            *a += z.norm();
        }
    }
    let m = series.ncols().max(1) as f64;
    acc.iter().map(|a| a / m).collect()
}

/// On-disk form of the weights: row-major arrays per layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsFile {
    pub activation: Activation,
    pub omega0: f64,
    pub init_scheme: InitScheme,
    pub seed: u64,
    pub layers: Vec<LayerFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerFile {
    pub fan_in: usize,
    pub fan_out: usize,
    /// `fan_out × fan_in`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl From<&PinnModel> for WeightsFile {
    fn from(m: &PinnModel) -> Self {
        WeightsFile {
            activation: m.activation,
            omega0: m.omega0,
            init_scheme: m.init_scheme,
            seed: m.rng_seed,
            layers: m
                .layers
                .iter()
                .map(|l| LayerFile {
                    fan_in: l.fan_in(),
                    fan_out: l.fan_out(),
                    weight: l.weight.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<WeightsFile> for PinnModel {
    type Error = Error;
    fn try_from(f: WeightsFile) -> Result<Self> {
        let mut layers = Vec::with_capacity(f.layers.len());
        for (i, l) in f.layers.into_iter().enumerate() {
            let weight = Array2::from_shape_vec((l.fan_out, l.fan_in), l.weight)
                .map_err(|e| Error::config(format!("layers[{i}].weight"), e.to_string()))?;
            if l.bias.len() != l.fan_out {
                return Err(Error::config(format!("layers[{i}].bias"), "length differs from fan_out"));
            }
            layers.push(Layer {
                weight,
                bias: Array1::from_vec(l.bias),
            });
        }
        if layers.is_empty() || layers[0].fan_in() != 1 || layers.last().unwrap().fan_out() != OUTPUT_DIM {
            return Err(Error::config("layers", "network must map 1 input to 12 outputs"));
        }
        Ok(PinnModel {
            layers,
            activation: f.activation,
            omega0: f.omega0,
            init_scheme: f.init_scheme,
            rng_seed: f.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(act: Activation, seed: u64) -> PinnModel {
        PinnModel::with_widths(&layer_widths(16, 2), act, 1.0, InitScheme::Custom, seed)
    }

    #[test]
    fn custom_bounds() {
        let m = PinnModel::new(Activation::Sin, 1.0, InitScheme::Custom, 7);
        assert!(m.layers[0].weight.iter().all(|w| w.abs() <= 1.0));
        let b = (6.0f64 / 200.0).sqrt();
        assert!((b - 0.173_205_080_756_887_7).abs() < 1e-15);
        for l in &m.layers[1..] {
            assert!(l.weight.iter().all(|w| w.abs() <= b));
            assert!(l.bias.iter().all(|&x| x == 0.0));
        }
        // the draw actually spans the range
        let max = m.layers[1].weight.iter().fold(0.0f64, |a, w| a.max(w.abs()));
        assert!(max > 0.95 * b);

        let m = PinnModel::new(Activation::Sin, 50.0, InitScheme::Custom, 7);
        let b50 = b / 50.0;
        assert!((b50 - 0.003_464_101_615_137_754).abs() < 1e-15);
        assert!(m.layers[2].weight.iter().all(|w| w.abs() <= b50));
    }

    #[test]
    fn default_scheme_bounds() {
        let m = PinnModel::new(Activation::Sin, 1.0, InitScheme::Default, 3);
        assert!(m.layers[0].weight.iter().all(|w| w.abs() <= 1.0));
        let b = 1.0 / 200f64.sqrt();
        for l in &m.layers[1..] {
            assert!(l.weight.iter().chain(l.bias.iter()).all(|w| w.abs() <= b));
        }
        assert!(m.layers[3].bias.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut m = small(Activation::Sin, 1);
        for l in &mut m.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        let (nx, nu) = m.forward(1.3);
        assert_eq!(nx, CVector::zeros(4));
        assert_eq!(nu, [0.0; 4]);
        let x0 = CVector::basis(4, 2);
        assert_eq!(m.state(3.0, &x0).unwrap(), x0);
        assert_eq!(m.state_time_derivative(3.0, &x0).unwrap(), CVector::zeros(4));
    }

    #[test]
    fn output_is_twelve_wide_and_deterministic() {
        let a = small(Activation::Sin, 11);
        let b = small(Activation::Sin, 11);
        assert_eq!(a, b);
        let y = a.forward_batch(&Array1::linspace(0.0, 1.0, 5));
        assert_eq!(y.dim(), (5, 12));
        assert_eq!(a.forward(0.4), b.forward(0.4));
    }

    #[test]
    fn state_starts_at_x0_and_stays_normalized() {
        let m = small(Activation::Sin, 5);
        let x0 = CVector::basis(4, 1);
        let x = m.state(0.0, &x0).unwrap();
        assert_eq!(x, x0);
        for t in [0.1, 1.0, 4.5, 9.9] {
            let x = m.state(t, &x0).unwrap();
            assert!((x.euclidean_norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        for act in [Activation::Sin, Activation::Tanh, Activation::Relu] {
            let m = small(act, 9);
            let times = Array1::linspace(0.0, 10.0, 7);
            let mut g = DiffGraph::new();
            let p = ParamVars::constants(&mut g, &m).unwrap();
            let out = record_network(&mut g, &m, &p, &times).unwrap();
            let diff = (g.value(out.y) - &m.forward_batch(&times)).mapv(f64::abs);
            assert!(diff.iter().all(|&d| d < 1e-13));
        }
    }

    #[test]
    fn degenerate_state_is_reported() {
        let mut m = small(Activation::Sin, 1);
        for l in &mut m.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
        // N_x ≡ −x0 / (1 − e^{−t}) at t = ln 2 (envelope ½) ⇒ N_x = −2 x0.
        let last = m.layers.len() - 1;
        m.layers[last].bias[0] = -2.0;
        let x0 = CVector::basis(4, 0);
        let r = m.state(std::f64::consts::LN_2, &x0);
        assert!(matches!(r, Err(Error::DegenerateState { .. })));
    }

    #[test]
    fn zero_model_diagnostics_are_point_masses() {
        let mut m = small(Activation::Sin, 1);
        for l in &mut m.layers {
            l.weight.fill(0.0);
        }
        let d = diagnostics(&m, &TimeGrid::new(20, 1.0)).unwrap();
        assert_eq!(d.len(), m.layers.len());
        for layer in &d {
            if let Some(h) = &layer.post_activation {
                assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
                assert!(h.lo < 0.0 && h.hi > 0.0);
            }
        }
    }

    #[test]
    fn weights_json_round_trip() {
        let m = small(Activation::Tanh, 4);
        let f = WeightsFile::from(&m);
        let text = serde_json::to_string(&f).unwrap();
        let back: PinnModel = serde_json::from_str::<WeightsFile>(&text).unwrap().try_into().unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn grid_points() {
        let g = TimeGrid::default();
        let p = g.points();
        assert_eq!(p.len(), 200);
        assert_eq!(g.dt(), 0.05);
        assert_eq!(p[0], 0.0);
        assert!(p.windows(2).into_iter().all(|w| w[1] > w[0]));
    }
}
