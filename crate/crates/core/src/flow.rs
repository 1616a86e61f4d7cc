//! Parameter-space gradient descent flow, the output-space comparison model,
//! and trajectory diagnostics.

use crate::calculus::{self, cost_and_gradient, grad_x_cost, jacobian};
use crate::model::{Network, ParamVector};
use crate::ode::{integrate_system, GradientSystem};
use crate::{Dataset, Error, Result};

pub use crate::ode::{IntegratorConfig, Method, Sample, TerminalReason, Trajectory};

/// `dZ/ds = -grad_Z C(x[Z])` as a gradient system on `R^K`.
pub struct ParamFlow<'a> {
    net: &'a Network,
    data: &'a Dataset,
}

impl<'a> ParamFlow<'a> {
    pub fn new(net: &'a Network, data: &'a Dataset) -> Result<Self> {
        net.check_data(data)?;
        Ok(Self { net, data })
    }
}

impl GradientSystem for ParamFlow<'_> {
    fn dim(&self) -> usize {
        self.net.param_count()
    }

    fn eval(&self, state: &[f64], out: &mut [f64]) -> f64 {
        let z = ParamVector::from_vec(&self.net.shape, state.to_vec()).expect("state length is K");
        let cg = cost_and_gradient(self.net, &z, self.data).expect("shapes checked at construction");
        for (o, g) in out.iter_mut().zip(&cg.grad_z) {
            *o = -g;
        }
        cg.cost
    }
}

/// `dx/ds = -grad_x C(x)` on `R^{QN}`.
pub struct ComparisonFlow<'a> {
    targets: Vec<f64>,
    data: &'a Dataset,
}

impl<'a> ComparisonFlow<'a> {
    pub fn new(data: &'a Dataset) -> Self {
        Self {
            targets: data.stacked_targets(),
            data,
        }
    }
}

impl GradientSystem for ComparisonFlow<'_> {
    fn dim(&self) -> usize {
        self.targets.len()
    }

    fn eval(&self, state: &[f64], out: &mut [f64]) -> f64 {
        let inv_n = 1.0 / self.data.n() as f64;
        let mut sq = 0.0;
        for ((o, x), y) in out.iter_mut().zip(state).zip(&self.targets) {
            let r = x - y;
            *o = -r * inv_n;
            sq += r * r;
        }
        0.5 * sq * inv_n
    }
}

pub fn z_flow_rhs(net: &Network, z: &ParamVector, data: &Dataset) -> Result<Vec<f64>> {
    Ok(calculus::grad_z_cost(net, z, data)?
        .into_iter()
        .map(|g| -g)
        .collect())
}

pub fn integrate(
    net: &Network,
    z0: &ParamVector,
    data: &Dataset,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    net.check_params(z0)?;
    let system = ParamFlow::new(net, data)?;
    integrate_system(&system, z0.as_slice(), cfg)
}

pub fn comparison_rhs(ux: &[f64], data: &Dataset) -> Result<Vec<f64>> {
    Ok(grad_x_cost(ux, data)?.into_iter().map(|g| -g).collect())
}

/// Closed-form solution `y_{omega(j)} + exp(-s/N) (x_j(0) - y_{omega(j)})`.
pub fn comparison_analytic(ux0: &[f64], data: &Dataset, s: f64) -> Result<Vec<f64>> {
    if ux0.len() != data.stacked_len() {
        return Err(Error::DimensionMismatch {
            what: "stacked outputs",
            expected: data.stacked_len(),
            found: ux0.len(),
        });
    }
    let decay = (-s / data.n() as f64).exp();
    Ok(ux0
        .iter()
        .zip(data.stacked_targets())
        .map(|(x, y)| y + decay * (x - y))
        .collect())
}

pub fn integrate_comparison(ux0: &[f64], data: &Dataset, cfg: &IntegratorConfig) -> Result<Trajectory> {
    integrate_system(&ComparisonFlow::new(data), ux0, cfg)
}

/// Second-order derivative at the middle of three non-uniformly spaced points.
fn three_point_weights(s: [f64; 3]) -> [f64; 3] {
    let h1 = s[1] - s[0];
    let h2 = s[2] - s[1];
    [
        -h2 / (h1 * (h1 + h2)),
        (h2 - h1) / (h1 * h2),
        h1 / (h2 * (h1 + h2)),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InducedResidual {
    pub s: f64,
    /// `|slope - rhs| / |rhs|` (zero when both vanish).
    pub relative: f64,
    pub slope_norm: f64,
    pub rhs_norm: f64,
}

/// Compares the finite-difference slope of `x(s) = x[Z(s)]` with the induced
/// field `-D D^T grad_x C` at each interior sample.
pub fn induced_flow_residual(
    net: &Network,
    traj: &Trajectory,
    data: &Dataset,
) -> Result<Vec<InducedResidual>> {
    if traj.samples.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "induced-flow residual needs at least 3 samples, got {}",
            traj.samples.len()
        )));
    }
    let params: Vec<ParamVector> = traj
        .samples
        .iter()
        .map(|s| ParamVector::from_vec(&net.shape, s.state.clone()))
        .collect::<Result<_>>()?;
    let outputs: Vec<Vec<f64>> = params
        .iter()
        .map(|z| net.forward_all(z, data))
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(traj.samples.len() - 2);
    for k in 1..traj.samples.len() - 1 {
        let w = three_point_weights([
            traj.samples[k - 1].s,
            traj.samples[k].s,
            traj.samples[k + 1].s,
        ]);
        let slope: Vec<f64> = (0..outputs[k].len())
            .map(|i| w[0] * outputs[k - 1][i] + w[1] * outputs[k][i] + w[2] * outputs[k + 1][i])
            .collect();
        let d = jacobian(net, &params[k], data)?;
        let gx = grad_x_cost(&outputs[k], data)?;
        let dt_g = d.transpose_mul(&gx);
        let rhs: Vec<f64> = (0..d.rows())
            .map(|r| -d.matrix().row(r).iter().zip(&dt_g).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let diff = slope.iter().zip(&rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let rhs_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        let slope_norm = slope.iter().map(|v| v * v).sum::<f64>().sqrt();
        let relative = if diff == 0.0 {
            0.0
        } else if rhs_norm == 0.0 {
            f64::INFINITY
        } else {
            diff / rhs_norm
        };
        out.push(InducedResidual {
            s: traj.samples[k].s,
            relative,
            slope_norm,
            rhs_norm,
        });
    }
    Ok(out)
}

/// Indices of samples whose cost exceeds the previous one by more than the
/// recorded integrator allowance.
pub fn monotonicity_violations(traj: &Trajectory) -> Vec<usize> {
    traj.samples
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1].cost > w[0].cost + w[1].cost_allowance)
        .map(|(k, _)| k + 1)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyPoint {
    pub s: f64,
    /// Finite-difference `dC/ds`.
    pub slope: f64,
    pub grad_norm_sq: f64,
    /// `|slope + |grad C|^2| / |grad C|^2`.
    pub relative: f64,
    /// The cost change is well resolved above the integrator allowance and
    /// `|grad C|^2` is nearly linear across the stencil.
    pub smooth: bool,
}

/// Largest relative change of `|grad C|^2` across a stencil counted as smooth.
pub const SMOOTH_VARIATION: f64 = 0.1;

/// Largest relative gap between the middle `|grad C|^2` and the linear
/// interpolation of its neighbours. The three-point slope error is about a
/// third of this gap; activation kinks crossed inside the stencil show up here.
pub const SMOOTH_CURVATURE: f64 = 0.01;

/// Checks `dC/ds = -|grad C|^2` at each interior sample.
pub fn energy_identity(traj: &Trajectory) -> Vec<EnergyPoint> {
    traj.samples
        .windows(3)
        .map(|w| {
            let weights = three_point_weights([w[0].s, w[1].s, w[2].s]);
            let slope = weights[0] * w[0].cost + weights[1] * w[1].cost + weights[2] * w[2].cost;
            let g2 = w[1].grad_norm * w[1].grad_norm;
            let relative = if g2 > 0.0 { (slope + g2).abs() / g2 } else { slope.abs() };
            let g_prev = w[0].grad_norm * w[0].grad_norm;
            let g_next = w[2].grad_norm * w[2].grad_norm;
            let resolved = (w[0].cost - w[2].cost).abs()
                >= 1e3 * (w[1].cost_allowance + w[2].cost_allowance)
                && (w[0].cost - w[2].cost).abs() >= 1e-8 * w[1].cost.abs();
            let (h1, h2) = (w[1].s - w[0].s, w[2].s - w[1].s);
            let interpolated = (h2 * g_prev + h1 * g_next) / (h1 + h2);
            let smooth = resolved
                && (g_next - g_prev).abs() <= SMOOTH_VARIATION * g2
                && (g2 - interpolated).abs() <= SMOOTH_CURVATURE * g2;
            EnergyPoint {
                s: w[1].s,
                slope,
                grad_norm_sq: g2,
                relative,
                smooth,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, NetworkShape};

    fn scalar_problem(n: usize, x0: f64, y: f64) -> (Vec<f64>, Dataset) {
        let data = Dataset::new(vec![vec![0.0]; n], vec![vec![y]], vec![0; n]).unwrap();
        (vec![x0; n], data)
    }

    #[test]
    fn comparison_analytic_examples() {
        let (ux0, data) = scalar_problem(1, 2.0, 0.0);
        let x = comparison_analytic(&ux0, &data, 1.0).unwrap();
        assert!((x[0] - 2.0 * (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(comparison_analytic(&ux0, &data, 0.0).unwrap(), ux0);
        let far = comparison_analytic(&ux0, &data, 1e3).unwrap();
        assert!(far[0].abs() < 1e-300);
    }

    #[test]
    fn comparison_rhs_is_negative_output_gradient() {
        let (ux0, data) = scalar_problem(2, 3.0, 1.0);
        assert_eq!(comparison_rhs(&ux0, &data).unwrap(), vec![-1.0, -1.0]);
        assert!(comparison_rhs(&[1.0], &data).is_err());
    }

    #[test]
    fn comparison_at_target_is_constant() {
        let (_, data) = scalar_problem(3, 0.0, 0.5);
        let traj = integrate_comparison(&data.stacked_targets(), &data, &IntegratorConfig::default()).unwrap();
        assert_eq!(traj.terminal_reason, TerminalReason::GradTol);
        assert_eq!(traj.last().state, data.stacked_targets());
    }

    #[test]
    fn perfect_fit_start_is_stationary() {
        // single affine layer fitting constant targets with zero weights
        let shape = NetworkShape::new(2, vec![], 1).unwrap();
        let net = Network::new(shape.clone(), Activation::default()).unwrap();
        let data = Dataset::new(vec![vec![1.0, 2.0], vec![-1.0, 0.5]], vec![vec![0.75]], vec![0, 0]).unwrap();
        let z0 = ParamVector::from_vec(&shape, vec![0.0, 0.0, 0.75]).unwrap();
        assert!(z_flow_rhs(&net, &z0, &data).unwrap().iter().all(|&v| v == 0.0));
        let traj = integrate(&net, &z0, &data, &IntegratorConfig::default()).unwrap();
        assert_eq!(traj.terminal_reason, TerminalReason::GradTol);
        assert_eq!(traj.last().state, z0.as_slice());
    }

    #[test]
    fn induced_residual_needs_three_samples() {
        let shape = NetworkShape::new(1, vec![], 1).unwrap();
        let net = Network::new(shape.clone(), Activation::default()).unwrap();
        let data = Dataset::new(vec![vec![1.0]], vec![vec![0.0]], vec![0]).unwrap();
        let z0 = ParamVector::zeros(&shape);
        let traj = integrate(&net, &z0, &data, &IntegratorConfig::default()).unwrap();
        assert!(induced_flow_residual(&net, &traj, &data).is_err());
    }

    #[test]
    fn three_point_weights_are_exact_for_quadratics() {
        let s = [0.3, 1.0, 2.5];
        let w = three_point_weights(s);
        let f = |t: f64| 2.0 * t * t - 3.0 * t + 1.0;
        let d = w[0] * f(s[0]) + w[1] * f(s[1]) + w[2] * f(s[2]);
        assert!((d - (4.0 * 1.0 - 3.0)).abs() < 1e-12);
    }
}
