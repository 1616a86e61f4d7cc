//! Concrete experiments: the scalar divergent-orbit toy model, seeded
//! over/underparametrized scenarios, and the basin probe against a target
//! parameter vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::flow::{self, IntegratorConfig, Method, TerminalReason, Trajectory};
use crate::model::{Activation, LayerParams, Network, NetworkShape, ParamVector};
use crate::ode::{integrate_system, GradientSystem};
use crate::spectral::{self, DEFAULT_RANK_TOL};
use crate::{Dataset, Error, Result};

// ---------------------------------------------------------------------------
// Scalar toy model: x[Z] = Z / (Z^2 + 1), C = x^2 / 2.

pub fn toy1d_x(z: f64) -> f64 {
    z / (z * z + 1.0)
}

pub fn toy1d_cost(z: f64) -> f64 {
    let x = toy1d_x(z);
    0.5 * x * x
}

/// `-dC/dZ = Z (Z^2 - 1) / (Z^2 + 1)^3`.
pub fn toy1d_rhs(z: f64) -> f64 {
    let d = z * z + 1.0;
    z * (z * z - 1.0) / (d * d * d)
}

pub struct Toy1d;

impl GradientSystem for Toy1d {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, state: &[f64], out: &mut [f64]) -> f64 {
        out[0] = toy1d_rhs(state[0]);
        toy1d_cost(state[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toy1dVerdict {
    ConvergedToZero,
    Diverged,
    /// Neither criterion met, e.g. a start on the critical point `|Z| = 1`.
    Inconclusive,
}

#[derive(Debug, Clone)]
pub struct Toy1dRun {
    pub trajectory: Trajectory,
    pub verdict: Toy1dVerdict,
}

/// RKF45 at tight tolerances with a gradient threshold far below the tail
/// gradients of interest. The absolute tolerance sits below the threshold so
/// convergent orbits are step-limited by accuracy rather than stability.
pub fn toy1d_config(s_max: f64) -> IntegratorConfig {
    IntegratorConfig {
        method: Method::Rkf45,
        step: 1e-2,
        abs_tol: 1e-18,
        rel_tol: 1e-10,
        s_max,
        stop_grad_norm: 1e-14,
        record_every: 1,
        ..Default::default()
    }
}

pub fn toy1d_integrate(z0: f64, s_max: f64) -> Result<Toy1dRun> {
    toy1d_integrate_with(z0, &toy1d_config(s_max))
}

pub fn toy1d_integrate_with(z0: f64, cfg: &IntegratorConfig) -> Result<Toy1dRun> {
    if !z0.is_finite() {
        return Err(Error::InvalidArgument(format!("z0 must be finite, got {z0}")));
    }
    let trajectory = integrate_system(&Toy1d, &[z0], cfg)?;
    let end = trajectory.last().state[0].abs();
    let monotone_growth = trajectory
        .samples
        .windows(2)
        .all(|w| w[1].state[0].abs() >= w[0].state[0].abs());
    let verdict = if end < 1e-6 {
        Toy1dVerdict::ConvergedToZero
    } else if trajectory.terminal_reason == TerminalReason::Diverged || (end > 10.0 && monotone_growth) {
        Toy1dVerdict::Diverged
    } else {
        Toy1dVerdict::Inconclusive
    };
    Ok(Toy1dRun {
        trajectory,
        verdict,
    })
}

/// Least-squares slope of `log|Z|` against `log s` over samples with `s` in `window`.
pub fn toy1d_exponent_fit(traj: &Trajectory, window: (f64, f64)) -> Result<f64> {
    let points: Vec<(f64, f64)> = traj
        .samples
        .iter()
        .filter(|s| s.s >= window.0 && s.s <= window.1 && s.s > 0.0 && s.state[0] != 0.0)
        .map(|s| (s.s.ln(), s.state[0].abs().ln()))
        .collect();
    if points.len() < 10 {
        return Err(Error::InvalidArgument(format!(
            "exponent fit needs at least 10 samples in [{}, {}], found {}",
            window.0,
            window.1,
            points.len()
        )));
    }
    Ok(least_squares_slope(&points))
}

fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

// ---------------------------------------------------------------------------
// Network scenarios.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Overparam,
    Underparam,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Overparam => "overparam",
            Self::Underparam => "underparam",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overparam" => Ok(Self::Overparam),
            "underparam" => Ok(Self::Underparam),
            other => Err(Error::InvalidArgument(format!(
                "unknown regime `{other}` (expected overparam or underparam)"
            ))),
        }
    }
}

/// Description of the input law used by [`make_scenario`], recorded in reports.
pub const DATA_DISTRIBUTION: &str = "gaussian clusters along a random unit direction u: \
    class i centred at t_i = 3i - 1.5(Q-1) with N(0, 0.25^2) offsets along u truncated to |offset| <= 0.75, \
    plus N(0, 0.5^2) noise orthogonal to u; targets y_i ~ N(0, I_Q)";

/// Widest hidden layer tried when widening for the overparametrized regime.
pub const MAX_OVERPARAM_WIDTH: usize = 64;

/// Overparametrized hidden width per data point, before the cap.
pub const OVERPARAM_WIDTH_PER_SAMPLE: usize = 4;

const CLASS_SPACING: f64 = 3.0;
const ALONG_SD: f64 = 0.25;
const ALONG_CLIP: f64 = 0.75;
const ORTHO_SD: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub network: Network,
    pub data: Dataset,
    pub seed: u64,
    pub regime: Regime,
    /// A known zero-cost parameter point for this dataset.
    pub teacher: ParamVector,
}

impl ScenarioSpec {
    pub fn param_count(&self) -> usize {
        self.network.param_count()
    }

    pub fn stacked_len(&self) -> usize {
        self.data.stacked_len()
    }
}

fn overparam_hidden(q: usize, n: usize, qn: usize) -> Option<usize> {
    let k = |w: usize| NetworkShape {
        input_dim: q,
        hidden_dims: vec![w, w],
        output_dim: q,
    }
    .param_count();
    if k(MAX_OVERPARAM_WIDTH) <= qn {
        return None;
    }
    // Narrow layers see too few activation patterns for D to reach row rank QN.
    let start = (OVERPARAM_WIDTH_PER_SAMPLE * n).clamp(q, MAX_OVERPARAM_WIDTH);
    Some((start..=MAX_OVERPARAM_WIDTH).find(|&w| k(w) >= 2 * qn).unwrap_or(MAX_OVERPARAM_WIDTH))
}

/// Builds a seeded scenario. The underparametrized shape has
/// `M = M_l = Q = L = q`; the overparametrized shape keeps `M = Q = q` and uses
/// two hidden layers of width at least `4N`, widened further until `K >= 2 QN`,
/// all capped at [`MAX_OVERPARAM_WIDTH`].
pub fn make_scenario(regime: Regime, q: usize, n_per_class: usize, seed: u64) -> Result<ScenarioSpec> {
    if q == 0 || n_per_class == 0 {
        return Err(Error::InvalidArgument(
            "q and n_per_class must both be >= 1".into(),
        ));
    }
    let n = q * n_per_class;
    let qn = q * n;
    let shape = match regime {
        Regime::Underparam => {
            let shape = NetworkShape::new(q, vec![q; q], q)?;
            let k = shape.param_count();
            if k >= qn {
                let min_n = k / (q * q) + 1;
                return Err(Error::Unsatisfiable {
                    regime: "underparam",
                    k,
                    qn,
                    hint: format!("K < QN requires n_per_class >= {min_n}"),
                });
            }
            shape
        }
        Regime::Overparam => {
            let width = overparam_hidden(q, n, qn).ok_or_else(|| {
                let k = NetworkShape {
                    input_dim: q,
                    hidden_dims: vec![MAX_OVERPARAM_WIDTH; 2],
                    output_dim: q,
                }
                .param_count();
                Error::Unsatisfiable {
                    regime: "overparam",
                    k,
                    qn,
                    hint: format!(
                        "K > QN requires N < {} at hidden width {MAX_OVERPARAM_WIDTH}",
                        k.div_ceil(q)
                    ),
                }
            })?;
            NetworkShape::new(q, vec![width, width], q)?
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (data, direction) = clustered_data(&mut rng, q, n_per_class)?;
    let network = Network::new(shape, Activation::default())?;
    let teacher = teacher_params(&network.shape, &direction, &data)?;
    Ok(ScenarioSpec {
        network,
        data,
        seed,
        regime,
        teacher,
    })
}

fn class_center(i: usize, q: usize) -> f64 {
    CLASS_SPACING * i as f64 - 0.5 * CLASS_SPACING * (q as f64 - 1.0)
}

fn clustered_data<R: Rng>(rng: &mut R, q: usize, n_per_class: usize) -> Result<(Dataset, Vec<f64>)> {
    let gauss = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };
    let mut u: Vec<f64> = (0..q).map(|_| gauss(rng)).collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter_mut().for_each(|v| *v /= norm);

    let outputs: Vec<Vec<f64>> = (0..q).map(|_| (0..q).map(|_| gauss(rng)).collect()).collect();
    let mut inputs = Vec::with_capacity(q * n_per_class);
    let mut labels = Vec::with_capacity(q * n_per_class);
    for i in 0..q {
        for _ in 0..n_per_class {
            let along = loop {
                let t = ALONG_SD * gauss(rng);
                if t.abs() <= ALONG_CLIP {
                    break t;
                }
            };
            let noise: Vec<f64> = (0..q).map(|_| ORTHO_SD * gauss(rng)).collect();
            let proj: f64 = noise.iter().zip(&u).map(|(a, b)| a * b).sum();
            let t = class_center(i, q) + along;
            inputs.push((0..q).map(|c| t * u[c] + noise[c] - proj * u[c]).collect());
            labels.push(i);
        }
    }
    Ok((Dataset::new(inputs, outputs, labels)?, u))
}

/// Zero-cost parameters for clustered data, built from clamp units
/// `clamp(s, 0, 1) = sigma(1 - sigma(1 - s))` with `s_k = 2 (u.x - a_k)` placed
/// in the gap between class `k` and `k + 1`. Deeper hidden layers pass
/// `{0, 1}` through via `sigma(2g - 1)`, and the output layer sums the steps.
fn teacher_params(shape: &NetworkShape, u: &[f64], data: &Dataset) -> Result<ParamVector> {
    let q = data.q();
    let layouts = shape.layouts();
    let hidden = shape.hidden_layers();
    if q > 1 && (hidden < 2 || shape.hidden_dims.iter().any(|&w| w < q)) {
        return Err(Error::InvalidShape(
            "teacher construction needs two hidden layers of width >= Q".into(),
        ));
    }
    let mut layers: Vec<LayerParams> = layouts
        .iter()
        .map(|l| LayerParams {
            rows: l.rows,
            cols: l.cols,
            weights: vec![0.0; l.rows * l.cols],
            bias: vec![0.0; l.rows],
        })
        .collect();
    let scale = 2.0;
    let steps = q - 1;
    for (l, layer) in layers.iter_mut().enumerate().take(hidden) {
        for r in 0..layer.rows {
            layer.bias[r] = -1.0;
        }
        for k in 0..steps {
            match l {
                0 => {
                    // h_k = sigma(1 - s_k)
                    let a_k = class_center(k, q) + 1.0;
                    for c in 0..layer.cols {
                        layer.weights[k * layer.cols + c] = -scale * u[c];
                    }
                    layer.bias[k] = 1.0 + scale * a_k;
                }
                1 => {
                    // g_k = sigma(1 - h_k)
                    layer.weights[k * layer.cols + k] = -1.0;
                    layer.bias[k] = 1.0;
                }
                _ => {
                    layer.weights[k * layer.cols + k] = 2.0;
                    layer.bias[k] = -1.0;
                }
            }
        }
    }
    let out = layers.last_mut().expect("at least one layer");
    let y = data.outputs();
    for r in 0..q {
        out.bias[r] = y[0][r];
        for k in 0..steps {
            out.weights[r * out.cols + k] = y[k + 1][r] - y[k][r];
        }
    }
    ParamVector::from_layers(shape, &layers)
}

// ---------------------------------------------------------------------------
// Basin probe.

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    /// Radius for counting a trial as having reached the target parameters.
    pub delta: f64,
    /// A trial matches the target cost when `final_cost <= target_cost + cost_tol`.
    pub cost_tol: f64,
    pub rank_tol: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            delta: 1e-3,
            cost_tol: 1e-8,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub seed: u64,
    pub final_cost: f64,
    pub dist_to_target: f64,
    pub range_part: f64,
    pub corange_part: f64,
    pub rank: usize,
    pub final_s: f64,
    pub final_grad_norm: f64,
    pub terminal_reason: TerminalReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub trials: usize,
    pub cost_match_fraction: f64,
    pub param_match_fraction: f64,
    pub target_cost: f64,
    pub k: usize,
    pub qn: usize,
    pub regime: Regime,
    pub options: ProbeOptions,
    pub data_distribution: String,
    pub per_trial: Vec<TrialReport>,
}

/// Seeds for each trial, drawn in order from a dedicated stream of `seed`.
pub fn trial_seeds(seed: u64, trials: usize) -> Vec<u64> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    master.set_stream(1);
    (0..trials).map(|_| master.random()).collect()
}

/// Runs `trials` gradient flows from independent Gaussian initialisations and
/// compares where they end up with `z_target`.
pub fn basin_probe(
    spec: &ScenarioSpec,
    z_target: &ParamVector,
    trials: usize,
    cfg: &IntegratorConfig,
    opts: &ProbeOptions,
) -> Result<ProbeReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("basin probe needs at least one trial".into()));
    }
    spec.network.check_params(z_target)?;
    cfg.validate()?;
    let net = &spec.network;
    let data = &spec.data;
    let target_cost = crate::calculus::cost(&net.forward_all(z_target, data)?, data)?;

    let per_trial: Vec<TrialReport> = trial_seeds(spec.seed, trials)
        .into_par_iter()
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z0 = ParamVector::sample_gaussian(&net.shape, &mut rng);
            let traj = flow::integrate(net, &z0, data, cfg)?;
            let last = traj.last();
            let z_end = ParamVector::from_vec(&net.shape, last.state.clone())?;
            let diag = spectral::diagnose_point(net, &z_end, data, opts.rank_tol)?;
            let dist = z_end
                .as_slice()
                .iter()
                .zip(z_target.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            Ok(TrialReport {
                seed,
                final_cost: last.cost,
                dist_to_target: dist,
                range_part: diag.split.range_part,
                corange_part: diag.split.corange_part,
                rank: diag.analysis.rank,
                final_s: last.s,
                final_grad_norm: last.grad_norm,
                terminal_reason: traj.terminal_reason,
            })
        })
        .collect::<Result<_>>()?;

    let frac = |pred: &dyn Fn(&TrialReport) -> bool| {
        per_trial.iter().filter(|t| pred(t)).count() as f64 / trials as f64
    };
    Ok(ProbeReport {
        trials,
        cost_match_fraction: frac(&|t| t.final_cost <= target_cost + opts.cost_tol),
        param_match_fraction: frac(&|t| t.dist_to_target <= opts.delta),
        target_cost,
        k: spec.param_count(),
        qn: spec.stacked_len(),
        regime: spec.regime,
        options: *opts,
        data_distribution: DATA_DISTRIBUTION.to_string(),
        per_trial,
    })
}
