//! File formats: network and dataset JSON documents, trajectory and
//! diagnostic CSV exports.
//!
//! CSV files may start with `# `-prefixed comment lines (used to embed the
//! resolved run configuration) before the header row.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::flow::Trajectory;
use crate::model::{Activation, Network, NetworkShape, ParamVector, DEFAULT_EPSILON};
use crate::spectral::DiagnosticRow;
use crate::{Dataset, Error, Result};

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

/// `{"input_dim", "hidden_dims", "output_dim", "epsilon", "z"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<Vec<f64>>,
}

impl NetworkFile {
    pub fn new(net: &Network, z: Option<&ParamVector>) -> Self {
        Self {
            input_dim: net.shape.input_dim,
            hidden_dims: net.shape.hidden_dims.clone(),
            output_dim: net.shape.output_dim,
            epsilon: net.activation.epsilon(),
            z: z.map(|p| p.as_slice().to_vec()),
        }
    }

    /// The network and, when present, its parameter vector.
    pub fn resolve(&self) -> Result<(Network, Option<ParamVector>)> {
        let shape = NetworkShape::new(self.input_dim, self.hidden_dims.clone(), self.output_dim)?;
        let net = Network::new(shape, Activation::new(self.epsilon)?)?;
        let z = match &self.z {
            Some(z) => {
                if z.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("parameter vector"));
                }
                Some(ParamVector::from_vec(&net.shape, z.clone())?)
            }
            None => None,
        };
        Ok((net, z))
    }
}

/// `{"inputs": [[..]], "outputs": [[..]], "labels": [..]}` with 1-based labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl DatasetFile {
    pub fn new(data: &Dataset) -> Self {
        Self {
            inputs: data.inputs().to_vec(),
            outputs: data.outputs().to_vec(),
            labels: data.labels().iter().map(|l| l + 1).collect(),
        }
    }

    pub fn resolve(&self) -> Result<Dataset> {
        let labels = self
            .labels
            .iter()
            .enumerate()
            .map(|(j, &l)| {
                l.checked_sub(1).ok_or_else(|| {
                    Error::InvalidDataset(format!("label of input {} is 0; labels are 1-based", j + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.inputs.clone(), self.outputs.clone(), labels)
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_comment<W: Write>(w: &mut W, comment: Option<&str>) -> std::io::Result<()> {
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(w, "# {line}")?;
        }
    }
    Ok(())
}

/// `s,cost,grad_norm,z_norm`.
pub fn write_trajectory_csv<W: Write>(mut w: W, traj: &Trajectory, comment: Option<&str>) -> std::io::Result<()> {
    write_comment(&mut w, comment)?;
    writeln!(w, "s,cost,grad_norm,z_norm")?;
    for s in &traj.samples {
        writeln!(w, "{},{},{},{}", s.s, s.cost, s.grad_norm, s.state_norm())?;
    }
    Ok(())
}

/// Full state per sample: `s,z0,z1,..`.
pub fn write_states_csv<W: Write>(mut w: W, traj: &Trajectory, comment: Option<&str>) -> std::io::Result<()> {
    write_comment(&mut w, comment)?;
    let dim = traj.samples.first().map_or(0, |s| s.state.len());
    let header: Vec<String> = std::iter::once("s".to_string())
        .chain((0..dim).map(|i| format!("z{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for s in &traj.samples {
        write!(w, "{}", s.s)?;
        for v in &s.state {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// `s,rank,lambda_min_pos,range_part,corange_part,total_cost`.
pub fn write_diagnostics_csv<W: Write>(mut w: W, rows: &[DiagnosticRow], comment: Option<&str>) -> std::io::Result<()> {
    write_comment(&mut w, comment)?;
    writeln!(w, "s,rank,lambda_min_pos,range_part,corange_part,total_cost")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.s, r.rank, r.lambda_min_pos, r.range_part, r.corange_part, r.total_cost
        )?;
    }
    Ok(())
}
