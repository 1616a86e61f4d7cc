//! L2 cost, its gradients, and the Jacobian `D[Z]` of the stacked outputs.
//!
//! `D` is assembled row by row with one reverse sweep per output coordinate;
//! the parameter gradient uses the same sweep seeded with the output-space
//! gradient, so `grad_Z C = D^T grad_x C` by construction.

use std::io::Write;

use nalgebra::DMatrix;

use crate::model::{ForwardPass, LayerLayout, Network, ParamVector};
use crate::{Dataset, Error, Result};

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

fn check_stacked(ux: &[f64], data: &Dataset) -> Result<()> {
    if ux.len() != data.stacked_len() {
        return Err(Error::DimensionMismatch {
            what: "stacked outputs",
            expected: data.stacked_len(),
            found: ux.len(),
        });
    }
    Ok(())
}

/// `C = 1/(2N) sum_j |x_j - y_{omega(j)}|^2`.
pub fn cost(ux: &[f64], data: &Dataset) -> Result<f64> {
    check_stacked(ux, data)?;
    let q = data.q();
    let sum: f64 = ux
        .chunks_exact(q)
        .enumerate()
        .flat_map(|(j, x)| x.iter().zip(data.target(j)).map(|(a, b)| (a - b) * (a - b)))
        .sum();
    Ok(sum / (2.0 * data.n() as f64))
}

/// Block `j` is `(x_j - y_{omega(j)}) / N`.
pub fn grad_x_cost(ux: &[f64], data: &Dataset) -> Result<Vec<f64>> {
    check_stacked(ux, data)?;
    let q = data.q();
    let inv_n = 1.0 / data.n() as f64;
    Ok(ux
        .chunks_exact(q)
        .enumerate()
        .flat_map(|(j, x)| {
            x.iter()
                .zip(data.target(j))
                .map(move |(a, b)| (a - b) * inv_n)
        })
        .collect())
}

/// Accumulates `J_j^T seed` into `out`, where `J_j` is the Jacobian of the
/// output of one sample with respect to `Z`.
fn backward_accumulate(
    net: &Network,
    layouts: &[LayerLayout],
    z: &ParamVector,
    pass: &ForwardPass,
    seed: &[f64],
    out: &mut [f64],
) {
    let mut delta = seed.to_vec();
    for l in (0..layouts.len()).rev() {
        let layout = layouts[l];
        let input = &pass.act[l];
        for (r, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = layout.weight_index(r, 0);
            for (c, &x) in input.iter().enumerate() {
                out[row + c] += d * x;
            }
            out[layout.bias_index(r)] += d;
        }
        if l > 0 {
            let weights = &z.as_slice()[layout.offset..layout.offset + layout.rows * layout.cols];
            let pre = &pass.pre[l - 1];
            let mut prev = vec![0.0; layout.cols];
            for (r, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let w_row = &weights[r * layout.cols..(r + 1) * layout.cols];
                for (p, &w) in prev.iter_mut().zip(w_row) {
                    *p += w * d;
                }
            }
            for (p, &v) in prev.iter_mut().zip(pre) {
                *p *= net.activation.derivative(v);
            }
            delta = prev;
        }
    }
}

/// The `QN x K` matrix of partial derivatives of the stacked outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    d: DMatrix<f64>,
}

impl Jacobian {
    pub fn from_matrix(d: DMatrix<f64>) -> Self {
        Self { d }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.d
    }

    /// `QN`.
    pub fn rows(&self) -> usize {
        self.d.nrows()
    }

    /// `K`.
    pub fn cols(&self) -> usize {
        self.d.ncols()
    }

    /// `D^T v`.
    pub fn transpose_mul(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows());
        (0..self.cols())
            .map(|c| self.d.column(c).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Writes `row,col,value` triples, 0-based.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "row,col,value")?;
        for r in 0..self.rows() {
            for c in 0..self.cols() {
                writeln!(w, "{r},{c},{}", self.d[(r, c)])?;
            }
        }
        Ok(())
    }
}

pub fn jacobian(net: &Network, z: &ParamVector, data: &Dataset) -> Result<Jacobian> {
    net.check_params(z)?;
    net.check_data(data)?;
    let q = data.q();
    let k = z.len();
    let layouts = net.shape.layouts();
    let mut d = DMatrix::zeros(data.stacked_len(), k);
    let mut row = vec![0.0; k];
    let mut seed = vec![0.0; q];
    for (j, x0) in data.inputs().iter().enumerate() {
        let pass = net.forward_unchecked(z, x0);
        for r in 0..q {
            seed.fill(0.0);
            seed[r] = 1.0;
            row.fill(0.0);
            backward_accumulate(net, &layouts, z, &pass, &seed, &mut row);
            for (c, &v) in row.iter().enumerate() {
                d[(j * q + r, c)] = v;
            }
        }
    }
    Ok(Jacobian { d })
}

/// Cost, output-space gradient and parameter gradient from a single pass over the data.
#[derive(Debug, Clone)]
pub struct CostGradient {
    pub cost: f64,
    pub ux: Vec<f64>,
    pub grad_x: Vec<f64>,
    pub grad_z: Vec<f64>,
}

pub fn cost_and_gradient(net: &Network, z: &ParamVector, data: &Dataset) -> Result<CostGradient> {
    net.check_params(z)?;
    net.check_data(data)?;
    let passes: Vec<ForwardPass> = data
        .inputs()
        .iter()
        .map(|x0| net.forward_unchecked(z, x0))
        .collect();
    let ux: Vec<f64> = passes.iter().flat_map(|p| p.output().iter().copied()).collect();
    let cost = cost(&ux, data)?;
    let grad_x = grad_x_cost(&ux, data)?;
    let layouts = net.shape.layouts();
    let mut grad_z = vec![0.0; z.len()];
    for (pass, seed) in passes.iter().zip(grad_x.chunks_exact(data.q())) {
        backward_accumulate(net, &layouts, z, pass, seed, &mut grad_z);
    }
    Ok(CostGradient {
        cost,
        ux,
        grad_x,
        grad_z,
    })
}

/// `grad_Z C = D^T[Z] grad_x C(x[Z])`.
pub fn grad_z_cost(net: &Network, z: &ParamVector, data: &Dataset) -> Result<Vec<f64>> {
    Ok(cost_and_gradient(net, z, data)?.grad_z)
}

fn check_step(h: f64) -> Result<()> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    Ok(())
}

/// Central differences of the stacked outputs, column by column.
pub fn fd_jacobian(net: &Network, z: &ParamVector, data: &Dataset, h: f64) -> Result<DMatrix<f64>> {
    check_step(h)?;
    let base = net.forward_all(z, data)?;
    let mut d = DMatrix::zeros(base.len(), z.len());
    let mut probe = z.clone();
    for c in 0..z.len() {
        let orig = probe.as_slice()[c];
        probe.as_mut_slice()[c] = orig + h;
        let plus = net.forward_all(&probe, data)?;
        probe.as_mut_slice()[c] = orig - h;
        let minus = net.forward_all(&probe, data)?;
        probe.as_mut_slice()[c] = orig;
        for r in 0..base.len() {
            d[(r, c)] = (plus[r] - minus[r]) / (2.0 * h);
        }
    }
    Ok(d)
}

/// Central differences of `C(x[Z])`.
pub fn fd_grad(net: &Network, z: &ParamVector, data: &Dataset, h: f64) -> Result<Vec<f64>> {
    check_step(h)?;
    let mut probe = z.clone();
    let mut g = Vec::with_capacity(z.len());
    for c in 0..z.len() {
        let orig = probe.as_slice()[c];
        probe.as_mut_slice()[c] = orig + h;
        let plus = cost(&net.forward_all(&probe, data)?, data)?;
        probe.as_mut_slice()[c] = orig - h;
        let minus = cost(&net.forward_all(&probe, data)?, data)?;
        probe.as_mut_slice()[c] = orig;
        g.push((plus - minus) / (2.0 * h));
    }
    Ok(g)
}

/// `max_i |a_i - b_i| / max_i |b_i|`, the norm-wise relative error of `a`
/// against the reference `b`. Zero when both are identically zero.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        diff / scale
    }
}
