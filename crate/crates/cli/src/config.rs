//! Run configuration: command-line flags merged with an optional JSON config
//! file. Keys present in the file take precedence over flags.

use std::path::{Path, PathBuf};

use clap::Args;
use gradflow::flow::{IntegratorConfig, Method};
use gradflow::scenarios::Regime;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// JSON config file; its keys override the corresponding flags.
    #[arg(long, value_name = "PATH")]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Optional in a config file; must match the subcommand when present.
    #[arg(skip)]
    pub command: Option<String>,

    /// Network JSON: input_dim, hidden_dims, output_dim, epsilon and optionally z.
    #[arg(long, value_name = "PATH")]
    pub network: Option<PathBuf>,
    /// Dataset JSON: inputs, outputs and 1-based labels.
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
    /// Parameter vector JSON (`{"z": [..]}` or a network file with z) used as the probe target.
    #[arg(long, value_name = "PATH")]
    pub target: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// rk4 (fixed step) or rkf45 (adaptive).
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub abs_tol: Option<f64>,
    #[arg(long)]
    pub rel_tol: Option<f64>,
    #[arg(long)]
    pub s_max: Option<f64>,
    #[arg(long)]
    pub stop_grad_norm: Option<f64>,
    #[arg(long)]
    pub record_every: Option<usize>,
    #[arg(long)]
    pub divergence_bound: Option<f64>,

    #[arg(long)]
    pub rank_tol: Option<f64>,
    #[arg(long, env = "GRADFLOW_SEED")]
    pub seed: Option<u64>,

    /// Initial value of the scalar toy model.
    #[arg(long, allow_hyphen_values = true)]
    pub z0: Option<f64>,
    /// Exponent fit window, lower end.
    #[arg(long)]
    pub fit_lo: Option<f64>,
    /// Exponent fit window, upper end.
    #[arg(long)]
    pub fit_hi: Option<f64>,

    /// Number of data points of the scalar comparison problem.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    pub x0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub y: Option<f64>,
    /// Comparison times, comma separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(default, deserialize_with = "one_or_many")]
    pub s: Option<Vec<f64>>,

    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub n_per_class: Option<usize>,
    /// overparam or underparam.
    #[arg(long)]
    pub regime: Option<Regime>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Distance to the target below which a trial counts as reaching it.
    #[arg(long)]
    pub delta: Option<f64>,
}

fn one_or_many<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(Some(match OneOrMany::deserialize(d)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    }))
}

macro_rules! overlay {
    ($base:ident, $file:ident; $($field:ident),* $(,)?) => {
        $( if $file.$field.is_some() { $base.$field = $file.$field; } )*
    };
}

impl RunConfig {
    /// Applies the config file named by `--config`, if any.
    pub fn merged(mut self, command: &str) -> Result<Self, CliError> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Usage(format!("config: cannot read {}: {e}", path.display())))?;
        let file: RunConfig = serde_json::from_str(&text).map_err(|e| {
            CliError::Usage(format!(
                "config {}: line {}, column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })?;
        if let Some(c) = &file.command {
            if c != command {
                return Err(CliError::Usage(format!(
                    "config {}: key `command` is `{c}` but the subcommand is `{command}`",
                    path.display()
                )));
            }
        }
        overlay!(self, file;
            network, dataset, target, out, method, step, abs_tol, rel_tol, s_max, stop_grad_norm,
            record_every, divergence_bound, rank_tol, seed, z0, fit_lo, fit_hi, n, x0, y, s, q,
            n_per_class, regime, trials, delta,
        );
        Ok(self)
    }

    pub fn integrator(&self, defaults: IntegratorConfig) -> Result<IntegratorConfig, CliError> {
        let cfg = IntegratorConfig {
            method: self.method.unwrap_or(defaults.method),
            step: self.step.unwrap_or(defaults.step),
            abs_tol: self.abs_tol.unwrap_or(defaults.abs_tol),
            rel_tol: self.rel_tol.unwrap_or(defaults.rel_tol),
            s_max: self.s_max.unwrap_or(defaults.s_max),
            stop_grad_norm: self.stop_grad_norm.unwrap_or(defaults.stop_grad_norm),
            record_every: self.record_every.unwrap_or(defaults.record_every),
            divergence_bound: self.divergence_bound.unwrap_or(defaults.divergence_bound),
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("gradflow-out"))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

/// Names the key whose value is missing.
pub fn require<T: Clone>(value: &Option<T>, key: &str) -> Result<T, CliError> {
    value.clone().ok_or_else(|| {
        CliError::Usage(format!(
            "missing required key `{key}` (pass --{} or set \"{key}\" in the config file)",
            key.replace('_', "-")
        ))
    })
}

/// Reads and parses the JSON file given for `key`.
pub fn read_keyed<T: for<'de> Deserialize<'de>>(path: &Path, key: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{key}: cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Usage(format!(
            "{key} {}: line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}

/// The resolved configuration embedded in every output file.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved<T: Serialize> {
    pub command: &'static str,
    #[serde(flatten)]
    pub settings: T,
}

impl<T: Serialize> Resolved<T> {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn require_names_flag_and_key() {
        let e = require::<u64>(&None, "n_per_class").unwrap_err().to_string();
        assert!(e.contains("--n-per-class") && e.contains("\"n_per_class\""), "{e}");
        assert_eq!(require(&Some(3u64), "seed").unwrap(), 3);
    }

    #[test]
    fn comparison_times_accept_scalar_or_list() {
        let one: RunConfig = serde_json::from_str(r#"{"s": 2.5}"#).unwrap();
        assert_eq!(one.s, Some(vec![2.5]));
        let many: RunConfig = serde_json::from_str(r#"{"s": [1, 5]}"#).unwrap();
        assert_eq!(many.s, Some(vec![1.0, 5.0]));
    }

    #[test]
    fn integrator_rejects_invalid_tolerances() {
        let cfg = RunConfig {
            abs_tol: Some(-1.0),
            ..Default::default()
        };
        assert!(matches!(cfg.integrator(IntegratorConfig::default()), Err(CliError::Usage(_))));
    }
}
