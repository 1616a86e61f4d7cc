use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gradflow::flow::{self, comparison_analytic, integrate_comparison, IntegratorConfig, TerminalReason};
use gradflow::io::{self, DatasetFile, NetworkFile};
use gradflow::scenarios::{
    self, basin_probe, make_scenario, toy1d_config, toy1d_exponent_fit, toy1d_integrate_with, ProbeOptions,
    ProbeReport, Regime, ScenarioSpec, Toy1dVerdict,
};
use gradflow::spectral::{self, CostSplit, ProjectorResiduals, RankCertificate, DEFAULT_RANK_TOL};
use gradflow::{Dataset, Network, ParamVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{read_keyed, require, Resolved, RunConfig};
use crate::CliError;

fn run_err(e: gradflow::Error) -> CliError {
    CliError::Run(e.to_string())
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("out: cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let fail = |e: std::io::Error| CliError::Usage(format!("out: cannot write {}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(fail)?);
    body(&mut w).and_then(|_| w.flush()).map_err(fail)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)
    })
}

fn load_network(path: &Path) -> Result<(Network, Option<ParamVector>), CliError> {
    let file: NetworkFile = read_keyed(path, "network")?;
    file.resolve()
        .map_err(|e| CliError::Usage(format!("network {}: {e}", path.display())))
}

fn load_dataset(path: &Path, net: &Network) -> Result<Dataset, CliError> {
    let file: DatasetFile = read_keyed(path, "dataset")?;
    let data = file
        .resolve()
        .map_err(|e| CliError::Usage(format!("dataset {}: {e}", path.display())))?;
    data.check_compatible(&net.shape)
        .map_err(|e| CliError::Usage(format!("dataset {}: {e}", path.display())))?;
    Ok(data)
}

#[derive(Deserialize)]
struct TargetFile {
    z: Vec<f64>,
}

fn load_target(path: &Path, net: &Network) -> Result<ParamVector, CliError> {
    let file: TargetFile = read_keyed(path, "target")?;
    ParamVector::from_vec(&net.shape, file.z)
        .map_err(|e| CliError::Usage(format!("target {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
struct SimulateSettings {
    network: PathBuf,
    dataset: PathBuf,
    out: PathBuf,
    /// `network_file` or `gaussian`.
    initial: &'static str,
    seed: u64,
    rank_tol: f64,
    integrator: IntegratorConfig,
}

#[derive(Serialize)]
struct SimulateSummary<'a> {
    config: &'a Resolved<SimulateSettings>,
    terminal_reason: TerminalReason,
    final_s: f64,
    final_cost: f64,
    final_grad_norm: f64,
    accepted_steps: usize,
    rejected_steps: usize,
    samples: usize,
    /// `[s, previous rank, new rank]`.
    rank_transitions: Vec<(f64, usize, usize)>,
}

pub fn simulate(cfg: RunConfig) -> Result<(), CliError> {
    let network = require(&cfg.network, "network")?;
    let dataset = require(&cfg.dataset, "dataset")?;
    let (net, z_file) = load_network(&network)?;
    let data = load_dataset(&dataset, &net)?;
    let settings = SimulateSettings {
        network,
        dataset,
        out: cfg.out_dir(),
        initial: if z_file.is_some() { "network_file" } else { "gaussian" },
        seed: cfg.seed(),
        rank_tol: cfg.rank_tol.unwrap_or(DEFAULT_RANK_TOL),
        integrator: cfg.integrator(IntegratorConfig::default())?,
    };
    let resolved = Resolved {
        command: "simulate",
        settings,
    };
    let s = &resolved.settings;
    let z0 = match z_file {
        Some(z) => z,
        None => ParamVector::sample_gaussian(&net.shape, &mut ChaCha8Rng::seed_from_u64(s.seed)),
    };
    create_out(&s.out)?;

    let traj = flow::integrate(&net, &z0, &data, &s.integrator).map_err(run_err)?;
    let rows = spectral::trajectory_diagnostics(&net, &traj, &data, s.rank_tol).map_err(run_err)?;
    let comment = format!("config: {}", resolved.to_json_line());
    write_file(&s.out.join("trajectory.csv"), |w| io::write_trajectory_csv(w, &traj, Some(&comment)))?;
    write_file(&s.out.join("trajectory_z.csv"), |w| io::write_states_csv(w, &traj, Some(&comment)))?;
    write_file(&s.out.join("diagnostics.csv"), |w| io::write_diagnostics_csv(w, &rows, Some(&comment)))?;
    let last = traj.last();
    let summary = SimulateSummary {
        config: &resolved,
        terminal_reason: traj.terminal_reason,
        final_s: last.s,
        final_cost: last.cost,
        final_grad_norm: last.grad_norm,
        accepted_steps: traj.accepted_steps,
        rejected_steps: traj.rejected_steps,
        samples: traj.samples.len(),
        rank_transitions: spectral::rank_transitions(&rows),
    };
    write_json(&s.out.join("summary.json"), &summary)?;
    println!(
        "terminal_reason={} s={} cost={} grad_norm={} samples={}",
        traj.terminal_reason,
        last.s,
        last.cost,
        last.grad_norm,
        traj.samples.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
struct CompareSettings {
    n: usize,
    x0: f64,
    y: f64,
    s: Vec<f64>,
    out: PathBuf,
    integrator: IntegratorConfig,
}

pub fn compare(cfg: RunConfig) -> Result<(), CliError> {
    let defaults = IntegratorConfig {
        abs_tol: 1e-12,
        rel_tol: 1e-12,
        stop_grad_norm: 0.0,
        ..Default::default()
    };
    let times = cfg.s.clone().unwrap_or_else(|| vec![1.0, 5.0, 10.0]);
    if times.is_empty() || times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(CliError::Usage("s: comparison times must be positive".into()));
    }
    let settings = CompareSettings {
        n: cfg.n.unwrap_or(1),
        x0: require(&cfg.x0, "x0")?,
        y: cfg.y.unwrap_or(0.0),
        s: times,
        out: cfg.out_dir(),
        integrator: cfg.integrator(defaults)?,
    };
    if settings.n == 0 {
        return Err(CliError::Usage("n: must be at least 1".into()));
    }
    let resolved = Resolved {
        command: "compare",
        settings,
    };
    let s = &resolved.settings;
    let data = Dataset::new(vec![vec![0.0]; s.n], vec![vec![s.y]], vec![0; s.n]).map_err(run_err)?;
    let ux0 = vec![s.x0; s.n];

    let mut rows = Vec::with_capacity(s.s.len());
    for &t in &s.s {
        let icfg = IntegratorConfig {
            s_max: t,
            ..s.integrator.clone()
        };
        let traj = integrate_comparison(&ux0, &data, &icfg).map_err(run_err)?;
        let numerical = traj.last().state[0];
        let analytic = comparison_analytic(&ux0, &data, t).map_err(run_err)?[0];
        let err = if analytic == 0.0 {
            (numerical - analytic).abs()
        } else {
            ((numerical - analytic) / analytic).abs()
        };
        rows.push((t, numerical, analytic, err));
    }
    create_out(&s.out)?;
    let comment = format!("config: {}", resolved.to_json_line());
    write_file(&s.out.join("compare.csv"), |w| {
        io::write_comment(w, Some(&comment))?;
        writeln!(w, "s,numerical,analytic,relative_error")?;
        for (t, a, b, e) in &rows {
            writeln!(w, "{t},{a},{b},{e}")?;
        }
        Ok(())
    })?;
    println!("{:>12} {:>22} {:>22} {:>12}", "s", "numerical", "analytic", "rel_error");
    for (t, a, b, e) in &rows {
        println!("{t:>12} {a:>22.15e} {b:>22.15e} {e:>12.3e}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
struct ToySettings {
    z0: f64,
    fit_window: (f64, f64),
    out: PathBuf,
    integrator: IntegratorConfig,
}

#[derive(Serialize)]
struct ToyReport<'a> {
    config: &'a Resolved<ToySettings>,
    verdict: Toy1dVerdict,
    terminal_reason: TerminalReason,
    final_s: f64,
    final_z: f64,
    final_cost: f64,
    accepted_steps: usize,
    /// Least-squares slope of `log|Z|` against `log s`; only for divergent orbits.
    exponent_fit: Option<f64>,
    fit_note: Option<String>,
}

pub fn toy1d(cfg: RunConfig) -> Result<(), CliError> {
    let z0 = require(&cfg.z0, "z0")?;
    let s_max = cfg.s_max.unwrap_or(1e6);
    let settings = ToySettings {
        z0,
        fit_window: (cfg.fit_lo.unwrap_or(1e3), cfg.fit_hi.unwrap_or(1e6)),
        out: cfg.out_dir(),
        integrator: cfg.integrator(toy1d_config(s_max))?,
    };
    if !z0.is_finite() {
        return Err(CliError::Usage(format!("z0: must be finite, got {z0}")));
    }
    let resolved = Resolved {
        command: "toy1d",
        settings,
    };
    let s = &resolved.settings;
    let run = toy1d_integrate_with(s.z0, &s.integrator).map_err(run_err)?;
    let (exponent_fit, fit_note) = if run.verdict == Toy1dVerdict::Diverged {
        match toy1d_exponent_fit(&run.trajectory, s.fit_window) {
            Ok(slope) => (Some(slope), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (None, Some("orbit did not diverge; no exponent fitted".to_string()))
    };

    create_out(&s.out)?;
    let comment = format!("config: {}", resolved.to_json_line());
    write_file(&s.out.join("toy1d.csv"), |w| {
        io::write_comment(w, Some(&comment))?;
        writeln!(w, "s,z,x,cost")?;
        for p in &run.trajectory.samples {
            let z = p.state[0];
            writeln!(w, "{},{z},{},{}", p.s, scenarios::toy1d_x(z), p.cost)?;
        }
        Ok(())
    })?;
    let last = run.trajectory.last();
    let report = ToyReport {
        config: &resolved,
        verdict: run.verdict,
        terminal_reason: run.trajectory.terminal_reason,
        final_s: last.s,
        final_z: last.state[0],
        final_cost: last.cost,
        accepted_steps: run.trajectory.accepted_steps,
        exponent_fit,
        fit_note,
    };
    write_json(&s.out.join("toy1d.json"), &report)?;
    match exponent_fit {
        Some(slope) => println!("verdict={:?} exponent_fit={slope}", run.verdict),
        None => println!("verdict={:?}", run.verdict),
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
struct DiagnoseSettings {
    network: PathBuf,
    dataset: PathBuf,
    out: PathBuf,
    rank_tol: f64,
}

#[derive(Serialize)]
struct DiagnoseReport<'a> {
    config: &'a Resolved<DiagnoseSettings>,
    k: usize,
    qn: usize,
    rank: usize,
    lambda_max: f64,
    lambda_min_pos: f64,
    eigenvalues: &'a [f64],
    cost_split: CostSplit,
    rank_certificate: RankCertificate,
    projector_residuals: ProjectorResiduals,
}

pub fn diagnose(cfg: RunConfig) -> Result<(), CliError> {
    let network = require(&cfg.network, "network")?;
    let dataset = require(&cfg.dataset, "dataset")?;
    let (net, z) = load_network(&network)?;
    let z = z.ok_or_else(|| {
        CliError::Usage(format!("network {}: missing required key `z`", network.display()))
    })?;
    let data = load_dataset(&dataset, &net)?;
    let resolved = Resolved {
        command: "diagnose",
        settings: DiagnoseSettings {
            network,
            dataset,
            out: cfg.out_dir(),
            rank_tol: cfg.rank_tol.unwrap_or(DEFAULT_RANK_TOL),
        },
    };
    let s = &resolved.settings;
    let diag = spectral::diagnose_point(&net, &z, &data, s.rank_tol).map_err(run_err)?;
    let a = &diag.analysis;
    let report = DiagnoseReport {
        config: &resolved,
        k: net.param_count(),
        qn: data.stacked_len(),
        rank: a.rank,
        lambda_max: a.lambda_max(),
        lambda_min_pos: a.lambda_min_pos,
        eigenvalues: &a.eigenvalues,
        cost_split: diag.split,
        rank_certificate: RankCertificate::from_analysis(a),
        projector_residuals: spectral::projector_residuals(a, &diag.jacobian),
    };
    create_out(&s.out)?;
    write_json(&s.out.join("diagnose.json"), &report)?;
    println!(
        "rank={} of {} cost={} range_part={} corange_part={}",
        a.rank,
        a.dim(),
        diag.split.total,
        diag.split.range_part,
        diag.split.corange_part
    );
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
enum ProbeSource {
    Files {
        network: PathBuf,
        dataset: PathBuf,
        target: PathBuf,
    },
    Synthetic {
        regime: Regime,
        q: usize,
        n_per_class: usize,
    },
}

#[derive(Debug, Clone, Serialize)]
struct ProbeSettings {
    #[serde(flatten)]
    source: ProbeSource,
    seed: u64,
    trials: usize,
    delta: f64,
    rank_tol: f64,
    out: PathBuf,
    integrator: IntegratorConfig,
}

#[derive(Serialize)]
struct ProbeOutput<'a> {
    config: &'a Resolved<ProbeSettings>,
    #[serde(flatten)]
    report: &'a ProbeReport,
}

pub fn probe(cfg: RunConfig) -> Result<(), CliError> {
    let seed = cfg.seed();
    let (source, spec, target) = match &cfg.target {
        Some(target) => {
            let network = require(&cfg.network, "network")?;
            let dataset = require(&cfg.dataset, "dataset")?;
            let (net, _) = load_network(&network)?;
            let data = load_dataset(&dataset, &net)?;
            let z = load_target(target, &net)?;
            let regime = if net.param_count() < data.stacked_len() {
                Regime::Underparam
            } else {
                Regime::Overparam
            };
            let spec = ScenarioSpec {
                network: net,
                data,
                seed,
                regime,
                teacher: z.clone(),
            };
            let source = ProbeSource::Files {
                network,
                dataset,
                target: target.clone(),
            };
            (source, spec, z)
        }
        None => {
            let regime = cfg.regime.unwrap_or(Regime::Underparam);
            let q = cfg.q.unwrap_or(2);
            let n_per_class = cfg.n_per_class.unwrap_or(5);
            let spec = make_scenario(regime, q, n_per_class, seed).map_err(|e| CliError::Usage(e.to_string()))?;
            let z = spec.teacher.clone();
            (ProbeSource::Synthetic { regime, q, n_per_class }, spec, z)
        }
    };
    let settings = ProbeSettings {
        source,
        seed,
        trials: cfg.trials.unwrap_or(50),
        delta: cfg.delta.unwrap_or(ProbeOptions::default().delta),
        rank_tol: cfg.rank_tol.unwrap_or(DEFAULT_RANK_TOL),
        out: cfg.out_dir(),
        integrator: cfg.integrator(IntegratorConfig::default())?,
    };
    if settings.trials == 0 {
        return Err(CliError::Usage("trials: must be at least 1".into()));
    }
    if !(settings.delta.is_finite() && settings.delta >= 0.0) {
        return Err(CliError::Usage(format!("delta: must be nonnegative, got {}", settings.delta)));
    }
    let resolved = Resolved {
        command: "probe",
        settings,
    };
    let s = &resolved.settings;
    let opts = ProbeOptions {
        delta: s.delta,
        rank_tol: s.rank_tol,
        ..Default::default()
    };
    let report = basin_probe(&spec, &target, s.trials, &s.integrator, &opts).map_err(run_err)?;
    create_out(&s.out)?;
    write_json(
        &s.out.join("probe.json"),
        &ProbeOutput {
            config: &resolved,
            report: &report,
        },
    )?;
    println!(
        "trials={} cost_match_fraction={} param_match_fraction={} K={} QN={}",
        report.trials, report.cost_match_fraction, report.param_match_fraction, report.k, report.qn
    );
    Ok(())
}
