//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use gradflow::calculus::{cost_and_gradient, jacobian};
use gradflow::flow::{
    self, comparison_analytic, energy_identity, integrate_comparison, monotonicity_violations, IntegratorConfig,
    Method, TerminalReason,
};
use gradflow::scenarios::{
    basin_probe, make_scenario, toy1d_exponent_fit, toy1d_integrate, ProbeOptions, Regime, Toy1dVerdict,
};
use gradflow::spectral::{self, analyze, projector_residuals, CostSplit, DEFAULT_RANK_TOL};
use gradflow::{Dataset, ParamVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn init(spec_seed: u64, net: &gradflow::Network) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(spec_seed + 100);
    ParamVector::sample_gaussian(&net.shape, &mut rng)
}

fn toy_dichotomy() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    for z0 in [0.3, 0.5, 0.9] {
        let run = toy1d_integrate(z0, 1e16).unwrap();
        let end = run.trajectory.last().state[0];
        if run.verdict != Toy1dVerdict::ConvergedToZero || end.abs() >= 1e-6 {
            failures.push(format!("z0={z0}: {:?} |Z|={:e}", run.verdict, end.abs()));
        }
    }
    let mut worst_cost: f64 = 0.0;
    for z0 in [1.5, 2.0, 5.0, -2.0] {
        let run = toy1d_integrate(z0, 1e16).unwrap();
        let last = run.trajectory.last();
        worst_cost = worst_cost.max(last.cost);
        if run.verdict != Toy1dVerdict::Diverged || last.cost >= 1e-8 {
            failures.push(format!("z0={z0}: {:?} C={:e}", run.verdict, last.cost));
        }
    }
    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(10) {
        failures.push(format!("runtime {elapsed:?}"));
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("7 orbits classified, divergent terminal cost <= {worst_cost:.2e}, {elapsed:.2?}")
        } else {
            failures.join("; ")
        },
    )
}

fn toy_exponent() -> Outcome {
    let start = Instant::now();
    let mut slopes = Vec::new();
    let mut pass = true;
    for z0 in [2.0, -2.0] {
        let run = toy1d_integrate(z0, 1e6).unwrap();
        let slope = toy1d_exponent_fit(&run.trajectory, (1e3, 1e6)).unwrap();
        pass &= (slope - 0.25).abs() <= 0.02;
        slopes.push(format!("z0={z0}: {slope:.4}"));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(30);
    outcome(pass, format!("{}, {elapsed:.2?}", slopes.join(", ")))
}

fn comparison_model() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for (seed, n, q) in [(1u64, 1usize, 1usize), (2, 4, 2), (3, 9, 3)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = |rng: &mut ChaCha8Rng| -> f64 { rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng) };
        let outputs: Vec<Vec<f64>> = (0..q).map(|_| (0..q).map(|_| g(&mut rng)).collect()).collect();
        let labels: Vec<usize> = (0..n).map(|j| j % q).collect();
        let data = Dataset::new(vec![vec![0.0; q]; n], outputs, labels).unwrap();
        let ux0: Vec<f64> = (0..n * q).map(|_| 2.0 * g(&mut rng)).collect();
        for s in [1.0, 5.0, 10.0] {
            let cfg = IntegratorConfig {
                method: Method::Rkf45,
                abs_tol: 1e-10,
                rel_tol: 1e-10,
                s_max: s,
                stop_grad_norm: 0.0,
                ..Default::default()
            };
            let traj = integrate_comparison(&ux0, &data, &cfg).unwrap();
            let last = traj.last();
            let exact = common::comparison_oracle(&ux0, &data, s);
            let lib = comparison_analytic(&ux0, &data, s).unwrap();
            let err = common::normwise_error(&last.state, &exact);
            worst = worst.max(err);
            pass &= last.s == s && err <= 1e-8 && common::normwise_error(&lib, &exact) <= 1e-14;
        }
    }
    outcome(pass, format!("3 instances x s in {{1,5,10}}, max relative error {worst:.2e}"))
}

fn gradient_correctness() -> Outcome {
    let h = gradflow::calculus::DEFAULT_FD_STEP;
    let mut worst_d: f64 = 0.0;
    let mut worst_g: f64 = 0.0;
    let mut seed = 0;
    for _ in 0..100 {
        let (used, inst) = common::random_instance_with_margin(seed, 10.0 * h);
        seed = used + 1;
        let dims = inst.dims();
        let d = jacobian(&inst.net, &inst.z, &inst.data).unwrap();
        let fd = common::fd_jacobian_oracle(&dims, inst.eps(), inst.z.as_slice(), &inst.data, h);
        worst_d = worst_d.max(common::normwise_error(d.matrix().as_slice(), fd.as_slice()));
        let g = cost_and_gradient(&inst.net, &inst.z, &inst.data).unwrap().grad_z;
        let fd_g = common::fd_grad_oracle(&dims, inst.eps(), inst.z.as_slice(), &inst.data, h);
        worst_g = worst_g.max(common::normwise_error(&g, &fd_g));
    }
    outcome(
        worst_d <= 1e-6 && worst_g <= 1e-6,
        format!("100 instances, max relative error D {worst_d:.2e}, grad {worst_g:.2e}"),
    )
}

fn monotone_cost() -> Outcome {
    let mut violations = 0;
    let mut smooth = 0;
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for seed in 0..10u64 {
        for (regime, q, n) in [(Regime::Underparam, 2, 5), (Regime::Overparam, 2, 2)] {
            let spec = make_scenario(regime, q, n, seed).unwrap();
            let z0 = init(seed, &spec.network);
            let cfg = IntegratorConfig {
                s_max: 100.0,
                ..Default::default()
            };
            let traj = flow::integrate(&spec.network, &z0, &spec.data, &cfg).unwrap();
            runs += 1;
            violations += monotonicity_violations(&traj).len();
            for p in energy_identity(&traj).iter().filter(|p| p.smooth) {
                smooth += 1;
                worst = worst.max(p.relative);
            }
        }
    }
    outcome(
        violations == 0 && smooth > 0 && worst <= 0.01,
        format!(
            "{runs} runs, {violations} cost increases beyond tolerance, energy identity max relative error {worst:.2e} over {smooth} smooth points"
        ),
    )
}

fn projector_algebra() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut worst_pyth: f64 = 0.0;
    let mut deficient = 0;
    for seed in 0..100u64 {
        let mut inst = common::random_instance(1000 + seed);
        match seed % 3 {
            1 => {
                // Repeated input rows make D row-rank deficient.
                let mut inputs = inst.data.inputs().to_vec();
                let mut labels = inst.data.labels().to_vec();
                inputs.push(inputs[0].clone());
                labels.push(labels[0]);
                inst.data = Dataset::new(inputs, inst.data.outputs().to_vec(), labels).unwrap();
            }
            2 => {
                // Dead first layer: only deeper parameters contribute.
                let cols = inst.net.shape.input_dim;
                let rows = inst.net.shape.layout(0).rows;
                let z = inst.z.as_mut_slice();
                for v in &mut z[..rows * cols + rows] {
                    *v = 0.0;
                }
                for v in &mut z[rows * cols..rows * cols + rows] {
                    *v = -1.0;
                }
            }
            _ => {}
        }
        let d = jacobian(&inst.net, &inst.z, &inst.data).unwrap();
        let a = analyze(&d, DEFAULT_RANK_TOL).unwrap();
        if a.rank < a.dim() {
            deficient += 1;
        }
        worst = worst.max(projector_residuals(&a, &d).max() / a.scale());
        let ux = inst.net.forward_all(&inst.z, &inst.data).unwrap();
        let total = gradflow::calculus::cost(&ux, &inst.data).unwrap();
        let gx = gradflow::calculus::grad_x_cost(&ux, &inst.data).unwrap();
        worst_pyth = worst_pyth.max(CostSplit::from_analysis(&a, &gx, inst.data.n(), total).pythagoras_residual());
    }
    outcome(
        worst <= 1e-9 && worst_pyth <= 1e-10 && deficient > 0,
        format!(
            "100 analyses ({deficient} rank-deficient), max residual/scale {worst:.2e}, split residual {worst_pyth:.2e}"
        ),
    )
}

fn stationary_decomposition() -> Outcome {
    let mut checked = 0;
    let mut runs = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..16u64 {
        let spec = make_scenario(Regime::Underparam, 2, 5, seed).unwrap();
        let z0 = init(seed, &spec.network);
        let traj = flow::integrate(&spec.network, &z0, &spec.data, &IntegratorConfig::default()).unwrap();
        runs += 1;
        if traj.terminal_reason != TerminalReason::GradTol {
            continue;
        }
        checked += 1;
        let z = ParamVector::from_vec(&spec.network.shape, traj.last().state.clone()).unwrap();
        let split = spectral::cost_split(&spec.network, &z, &spec.data, DEFAULT_RANK_TOL).unwrap();
        let ratio = if split.total > 0.0 { split.range_part / split.total } else { 0.0 };
        worst = worst.max(ratio);
    }
    outcome(
        checked > 0 && worst <= 1e-6,
        format!("{checked} of {runs} runs stopped at grad_tol, max range_part/total {worst:.2e}"),
    )
}

fn overparam_decay() -> Outcome {
    let spec = make_scenario(Regime::Overparam, 2, 3, 0).unwrap();
    let z0 = init(0, &spec.network);
    let traj = flow::integrate(&spec.network, &z0, &spec.data, &IntegratorConfig::default()).unwrap();
    let cert = spectral::decay_certificate(&spec.network, &traj, &spec.data, 10.0, DEFAULT_RANK_TOL, 1e-6).unwrap();
    let terminal = traj.last().cost;
    outcome(
        cert.lambda > 0.0 && cert.envelope_violations == 0 && terminal < 1e-10,
        format!(
            "K={} QN={}, lambda={:.3e} over {} samples from s0={}, {} envelope violations, terminal cost {terminal:.2e}",
            spec.param_count(),
            spec.stacked_len(),
            cert.lambda,
            cert.samples_checked,
            cert.s0,
            cert.envelope_violations
        ),
    )
}

fn rank_necessity() -> Outcome {
    let mut points = 0;
    let mut bad = 0;
    for (q, n) in [(1usize, 5usize), (2, 5), (2, 8), (3, 6)] {
        for seed in 0..3u64 {
            let spec = make_scenario(Regime::Underparam, q, n, seed).unwrap();
            let z0 = init(seed, &spec.network);
            let cfg = IntegratorConfig {
                s_max: 200.0,
                record_every: 10,
                ..Default::default()
            };
            let traj = flow::integrate(&spec.network, &z0, &spec.data, &cfg).unwrap();
            let mut states: Vec<Vec<f64>> = traj.samples.iter().map(|s| s.state.clone()).collect();
            states.push(spec.teacher.as_slice().to_vec());
            for state in states {
                let z = ParamVector::from_vec(&spec.network.shape, state).unwrap();
                let cert = spectral::rank_certificate(&spec.network, &z, &spec.data, DEFAULT_RANK_TOL).unwrap();
                points += 1;
                if cert.possible_global_min || cert.rank > cert.k || cert.k >= cert.qn {
                    bad += 1;
                }
            }
        }
    }
    outcome(bad == 0, format!("{points} sampled points over 12 underparametrized runs, {bad} violations"))
}

fn probe() -> Outcome {
    let spec = make_scenario(Regime::Underparam, 2, 5, 11).unwrap();
    let cfg = IntegratorConfig::default();
    let opts = ProbeOptions::default();
    let a = basin_probe(&spec, &spec.teacher, 50, &cfg, &opts).unwrap();
    let b = basin_probe(&spec, &spec.teacher, 50, &cfg, &opts).unwrap();
    let deterministic = serde_json::to_string(&a).unwrap() == serde_json::to_string(&b).unwrap();
    let missing: Vec<_> = a
        .per_trial
        .iter()
        .filter(|t| t.final_cost > a.target_cost + opts.cost_tol && t.corange_part <= 0.0)
        .collect();
    outcome(
        deterministic && missing.is_empty() && a.trials >= 50,
        format!(
            "{} trials, cost_match_fraction {:.2}, param_match_fraction {:.2}, deterministic={deterministic}, {} non-reaching trials without co-range cost",
            a.trials,
            a.cost_match_fraction,
            a.param_match_fraction,
            missing.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("toy convergence dichotomy", toy_dichotomy),
        ("toy asymptotic exponent", toy_exponent),
        ("comparison model", comparison_model),
        ("gradient and Jacobian vs finite differences", gradient_correctness),
        ("monotone cost and energy identity", monotone_cost),
        ("projector algebra", projector_algebra),
        ("stationary decomposition", stationary_decomposition),
        ("overparametrized decay", overparam_decay),
        ("rank necessity", rank_necessity),
        ("non-approximability probe", probe),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let tag = if result.pass { "PASS" } else { "FAIL" };
        if !result.pass {
            failed += 1;
        }
        println!("{tag} {:>2} {name}: {} [{:.2?}]", i + 1, result.detail, start.elapsed());
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
