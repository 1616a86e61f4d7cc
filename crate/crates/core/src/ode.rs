//! Explicit Runge-Kutta integration of autonomous gradient systems
//! `ds y = -grad C(y)`.
//!
//! Two schemes are provided: classic fixed-step RK4 and Runge-Kutta-Fehlberg
//! 4(5) with local extrapolation (the fifth-order solution is propagated).

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A flow whose vector field is the negative gradient of a cost.
pub trait GradientSystem {
    fn dim(&self) -> usize;

    /// Writes `-grad C(state)` into `out` and returns `C(state)`.
    fn eval(&self, state: &[f64], out: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[serde(alias = "rk4-fixed")]
    Rk4,
    #[serde(alias = "rkf45-adaptive")]
    Rkf45,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rk4" | "rk4-fixed" => Ok(Self::Rk4),
            "rkf45" | "rkf45-adaptive" => Ok(Self::Rkf45),
            other => Err(Error::InvalidArgument(format!(
                "unknown integrator `{other}` (expected rk4 or rkf45)"
            ))),
        }
    }
}

/// Default bound on the Euclidean norm of the state before a run is labelled diverged.
pub const DEFAULT_DIVERGENCE_BOUND: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub method: Method,
    /// Fixed step for RK4, initial step for RKF45.
    pub step: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub s_max: f64,
    /// Halt once `|grad C|` drops to or below this value.
    pub stop_grad_norm: f64,
    /// Record every n-th accepted step (the first and last states are always recorded).
    pub record_every: usize,
    pub divergence_bound: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::Rkf45,
            step: 1e-2,
            abs_tol: 1e-9,
            rel_tol: 1e-9,
            s_max: 1e3,
            stop_grad_norm: 1e-10,
            record_every: 1,
            divergence_bound: DEFAULT_DIVERGENCE_BOUND,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
            }
        };
        positive("step", self.step)?;
        positive("abs_tol", self.abs_tol)?;
        positive("rel_tol", self.rel_tol)?;
        positive("s_max", self.s_max)?;
        positive("divergence_bound", self.divergence_bound)?;
        if !(self.stop_grad_norm >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "stop_grad_norm must be nonnegative, got {}",
                self.stop_grad_norm
            )));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidArgument("record_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    SMax,
    GradTol,
    Diverged,
}

impl std::fmt::Display for TerminalReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SMax => "s_max",
            Self::GradTol => "grad_tol",
            Self::Diverged => "diverged",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub s: f64,
    pub state: Vec<f64>,
    pub cost: f64,
    pub grad_norm: f64,
    /// Admissible cost increase since the previous sample, accumulated from the
    /// per-step error allowance `|grad C| * |tol_scale| + 4 eps_mach |C|`.
    pub cost_allowance: f64,
}

impl Sample {
    pub fn state_norm(&self) -> f64 {
        self.state.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub terminal_reason: TerminalReason,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl Trajectory {
    pub fn last(&self) -> &Sample {
        self.samples.last().expect("trajectory always holds the initial sample")
    }

    pub fn first(&self) -> &Sample {
        &self.samples[0]
    }
}

fn axpy_into(out: &mut [f64], y: &[f64], h: f64, terms: &[(f64, &[f64])]) {
    for i in 0..out.len() {
        let mut acc = 0.0;
        for (c, k) in terms {
            acc += c * k[i];
        }
        out[i] = y[i] + h * acc;
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cost_allowance(cfg: &IntegratorConfig, y: &[f64], y_new: &[f64], grad_norm: f64, cost: f64) -> f64 {
    let scale = y
        .iter()
        .zip(y_new)
        .map(|(a, b)| {
            let t = cfg.abs_tol + cfg.rel_tol * a.abs().max(b.abs());
            t * t
        })
        .sum::<f64>()
        .sqrt();
    grad_norm * scale + 4.0 * f64::EPSILON * cost.abs()
}

// Fehlberg 4(5) tableau.
const A2: [f64; 1] = [1.0 / 4.0];
const A3: [f64; 2] = [3.0 / 32.0, 9.0 / 32.0];
const A4: [f64; 3] = [1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0];
const A5: [f64; 4] = [439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0];
const A6: [f64; 5] = [-8.0 / 27.0, 2.0, -3544.0 / 2565.0, 1859.0 / 4104.0, -11.0 / 40.0];
const B5: [f64; 6] = [16.0 / 135.0, 0.0, 6656.0 / 12825.0, 28561.0 / 56430.0, -9.0 / 50.0, 2.0 / 55.0];
const B4: [f64; 6] = [25.0 / 216.0, 0.0, 1408.0 / 2565.0, 2197.0 / 4104.0, -1.0 / 5.0, 0.0];

struct Workspace {
    k: [Vec<f64>; 6],
    tmp: Vec<f64>,
    y_new: Vec<f64>,
    f_new: Vec<f64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            y_new: vec![0.0; n],
            f_new: vec![0.0; n],
        }
    }
}

fn rk4_step<S: GradientSystem + ?Sized>(sys: &S, y: &[f64], f: &[f64], h: f64, ws: &mut Workspace) {
    let [k1, k2, k3, k4, ..] = &mut ws.k;
    k1.copy_from_slice(f);
    axpy_into(&mut ws.tmp, y, h, &[(0.5, k1)]);
    sys.eval(&ws.tmp, k2);
    axpy_into(&mut ws.tmp, y, h, &[(0.5, k2)]);
    sys.eval(&ws.tmp, k3);
    axpy_into(&mut ws.tmp, y, h, &[(1.0, k3)]);
    sys.eval(&ws.tmp, k4);
    axpy_into(
        &mut ws.y_new,
        y,
        h,
        &[(1.0 / 6.0, k1), (1.0 / 3.0, k2), (1.0 / 3.0, k3), (1.0 / 6.0, k4)],
    );
}

/// One Fehlberg trial step. Returns the scaled error norm (`<= 1` means accept).
fn rkf45_step<S: GradientSystem + ?Sized>(
    sys: &S,
    cfg: &IntegratorConfig,
    y: &[f64],
    f: &[f64],
    h: f64,
    ws: &mut Workspace,
) -> f64 {
    let [k1, k2, k3, k4, k5, k6] = &mut ws.k;
    k1.copy_from_slice(f);
    axpy_into(&mut ws.tmp, y, h, &[(A2[0], k1)]);
    sys.eval(&ws.tmp, k2);
    axpy_into(&mut ws.tmp, y, h, &[(A3[0], k1), (A3[1], k2)]);
    sys.eval(&ws.tmp, k3);
    axpy_into(&mut ws.tmp, y, h, &[(A4[0], k1), (A4[1], k2), (A4[2], k3)]);
    sys.eval(&ws.tmp, k4);
    axpy_into(&mut ws.tmp, y, h, &[(A5[0], k1), (A5[1], k2), (A5[2], k3), (A5[3], k4)]);
    sys.eval(&ws.tmp, k5);
    axpy_into(
        &mut ws.tmp,
        y,
        h,
        &[(A6[0], k1), (A6[1], k2), (A6[2], k3), (A6[3], k4), (A6[4], k5)],
    );
    sys.eval(&ws.tmp, k6);

    let mut err: f64 = 0.0;
    for i in 0..y.len() {
        let ks = [k1[i], k2[i], k3[i], k4[i], k5[i], k6[i]];
        let mut high = 0.0;
        let mut diff = 0.0;
        for s in 0..6 {
            high += B5[s] * ks[s];
            diff += (B5[s] - B4[s]) * ks[s];
        }
        let yn = y[i] + h * high;
        ws.y_new[i] = yn;
        let scale = cfg.abs_tol + cfg.rel_tol * y[i].abs().max(yn.abs());
        let e = (h * diff).abs() / scale;
        if e.is_nan() {
            return f64::INFINITY;
        }
        err = err.max(e);
    }
    err
}

/// Integrates the gradient system from `y0` until `s_max`, the gradient-norm
/// threshold, or divergence.
pub fn integrate_system<S: GradientSystem + ?Sized>(
    sys: &S,
    y0: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    if y0.len() != sys.dim() {
        return Err(Error::DimensionMismatch {
            what: "initial state",
            expected: sys.dim(),
            found: y0.len(),
        });
    }
    let n = y0.len();
    let mut ws = Workspace::new(n);
    let mut y = y0.to_vec();
    let mut f = vec![0.0; n];
    let mut cost = sys.eval(&y, &mut f);
    let mut grad_norm = norm(&f);
    let mut samples = vec![Sample {
        s: 0.0,
        state: y.clone(),
        cost,
        grad_norm,
        cost_allowance: 0.0,
    }];
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    let traj = |samples, reason, acc, rej| Trajectory {
        samples,
        terminal_reason: reason,
        accepted_steps: acc,
        rejected_steps: rej,
    };

    if !cost.is_finite() || !finite(&y) || !finite(&f) || norm(&y) > cfg.divergence_bound {
        return Ok(traj(samples, TerminalReason::Diverged, 0, 0));
    }
    if grad_norm <= cfg.stop_grad_norm {
        return Ok(traj(samples, TerminalReason::GradTol, 0, 0));
    }

    let mut s = 0.0;
    let mut h = cfg.step;
    let mut accepted = 0usize;
    let mut rejected = 0usize;
    let mut allowance = 0.0;
    let mut last_recorded = 0usize;

    loop {
        if s >= cfg.s_max {
            if last_recorded != accepted {
                samples.push(Sample {
                    s,
                    state: y.clone(),
                    cost,
                    grad_norm,
                    cost_allowance: allowance,
                });
            }
            return Ok(traj(samples, TerminalReason::SMax, accepted, rejected));
        }
        let remaining = cfg.s_max - s;
        let last_step = h >= remaining - 1e-12 * cfg.s_max;
        let h_try = if last_step { remaining } else { h };

        let h_next = match cfg.method {
            Method::Rk4 => {
                rk4_step(sys, &y, &f, h_try, &mut ws);
                h
            }
            Method::Rkf45 => {
                let err = rkf45_step(sys, cfg, &y, &f, h_try, &mut ws);
                if err > 1.0 {
                    rejected += 1;
                    let factor = if err.is_finite() {
                        (0.9 * err.powf(-0.25)).max(0.1)
                    } else {
                        0.1
                    };
                    h = h_try * factor;
                    if h <= 1e-14 * s.max(1.0) {
                        return Ok(traj(samples, TerminalReason::Diverged, accepted, rejected));
                    }
                    continue;
                }
                let grow = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                h_try * grow
            }
        };

        let new_cost = sys.eval(&ws.y_new, &mut ws.f_new);
        if !new_cost.is_finite() || !finite(&ws.y_new) || !finite(&ws.f_new) {
            if last_recorded != accepted {
                samples.push(Sample {
                    s,
                    state: y.clone(),
                    cost,
                    grad_norm,
                    cost_allowance: allowance,
                });
            }
            return Ok(traj(samples, TerminalReason::Diverged, accepted, rejected));
        }
        let new_grad_norm = norm(&ws.f_new);
        allowance += cost_allowance(cfg, &y, &ws.y_new, grad_norm.max(new_grad_norm), cost.max(new_cost));

        s = if last_step {
            cfg.s_max
        } else if cfg.method == Method::Rk4 {
            (accepted + 1) as f64 * h_try
        } else {
            s + h_try
        };
        std::mem::swap(&mut y, &mut ws.y_new);
        std::mem::swap(&mut f, &mut ws.f_new);
        cost = new_cost;
        grad_norm = new_grad_norm;
        accepted += 1;
        h = h_next;

        let diverged = norm(&y) > cfg.divergence_bound;
        let stop = grad_norm <= cfg.stop_grad_norm;
        if accepted.is_multiple_of(cfg.record_every) || diverged || stop || s >= cfg.s_max {
            samples.push(Sample {
                s,
                state: y.clone(),
                cost,
                grad_norm,
                cost_allowance: allowance,
            });
            allowance = 0.0;
            last_recorded = accepted;
        }
        if diverged {
            return Ok(traj(samples, TerminalReason::Diverged, accepted, rejected));
        }
        if stop {
            return Ok(traj(samples, TerminalReason::GradTol, accepted, rejected));
        }
    }
}
