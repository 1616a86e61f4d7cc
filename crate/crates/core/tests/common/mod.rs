//! Reference implementations used as test oracles. Deliberately naive: plain
//! loops over nested vectors, no shared code with the library beyond the data
//! containers.

#![allow(dead_code)]

use gradflow::{Activation, Dataset, Network, NetworkShape, ParamVector};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn ramp(eps: f64, xi: f64) -> f64 {
    if xi < -eps {
        0.0
    } else if xi < eps {
        (xi + eps) * (xi + eps) / (4.0 * eps)
    } else {
        xi
    }
}

/// Weights as `w[l][row][col]` and biases as `b[l][row]`, read from the flat
/// layer-major, row-major vector.
pub fn split_params(dims: &[usize], z: &[f64]) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
    let mut w = Vec::new();
    let mut b = Vec::new();
    let mut at = 0;
    for l in 1..dims.len() {
        let mut wl = vec![vec![0.0; dims[l - 1]]; dims[l]];
        for row in wl.iter_mut() {
            for v in row.iter_mut() {
                *v = z[at];
                at += 1;
            }
        }
        let mut bl = vec![0.0; dims[l]];
        for v in bl.iter_mut() {
            *v = z[at];
            at += 1;
        }
        w.push(wl);
        b.push(bl);
    }
    assert_eq!(at, z.len());
    (w, b)
}

pub fn dims_of(shape: &NetworkShape) -> Vec<usize> {
    let mut d = vec![shape.input_dim];
    d.extend(&shape.hidden_dims);
    d.push(shape.output_dim);
    d
}

/// Returns the output and every pre-activation vector of the hidden layers.
pub fn forward_oracle(dims: &[usize], eps: f64, z: &[f64], x0: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (w, b) = split_params(dims, z);
    let layers = dims.len() - 1;
    let mut x = x0.to_vec();
    let mut pres = Vec::new();
    for l in 0..layers {
        let mut next = vec![0.0; dims[l + 1]];
        for i in 0..dims[l + 1] {
            let mut acc = b[l][i];
            for j in 0..dims[l] {
                acc += w[l][i][j] * x[j];
            }
            next[i] = acc;
        }
        if l + 1 < layers {
            pres.push(next.clone());
            for v in next.iter_mut() {
                *v = ramp(eps, *v);
            }
        }
        x = next;
    }
    (x, pres)
}

pub fn stacked_oracle(dims: &[usize], eps: f64, z: &[f64], data: &Dataset) -> Vec<f64> {
    data.inputs()
        .iter()
        .flat_map(|x0| forward_oracle(dims, eps, z, x0).0)
        .collect()
}

pub fn cost_oracle(ux: &[f64], data: &Dataset) -> f64 {
    let q = data.q();
    let n = data.n();
    let mut total = 0.0;
    for j in 0..n {
        let y = &data.outputs()[data.labels()[j]];
        for i in 0..q {
            let r = ux[j * q + i] - y[i];
            total += r * r;
        }
    }
    total / (2.0 * n as f64)
}

/// Central-difference Jacobian of the stacked outputs, `QN x K`.
pub fn fd_jacobian_oracle(dims: &[usize], eps: f64, z: &[f64], data: &Dataset, h: f64) -> DMatrix<f64> {
    let rows = data.n() * data.q();
    let mut d = DMatrix::zeros(rows, z.len());
    let mut zp = z.to_vec();
    for k in 0..z.len() {
        zp[k] = z[k] + h;
        let up = stacked_oracle(dims, eps, &zp, data);
        zp[k] = z[k] - h;
        let down = stacked_oracle(dims, eps, &zp, data);
        zp[k] = z[k];
        for r in 0..rows {
            d[(r, k)] = (up[r] - down[r]) / (2.0 * h);
        }
    }
    d
}

pub fn fd_grad_oracle(dims: &[usize], eps: f64, z: &[f64], data: &Dataset, h: f64) -> Vec<f64> {
    let mut zp = z.to_vec();
    (0..z.len())
        .map(|k| {
            zp[k] = z[k] + h;
            let up = cost_oracle(&stacked_oracle(dims, eps, &zp, data), data);
            zp[k] = z[k] - h;
            let down = cost_oracle(&stacked_oracle(dims, eps, &zp, data), data);
            zp[k] = z[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Smallest distance of any hidden pre-activation to the break points `+-eps`.
pub fn breakpoint_margin(dims: &[usize], eps: f64, z: &[f64], data: &Dataset) -> f64 {
    let mut margin = f64::INFINITY;
    for x0 in data.inputs() {
        for pre in forward_oracle(dims, eps, z, x0).1 {
            for v in pre {
                margin = margin.min((v - eps).abs()).min((v + eps).abs());
            }
        }
    }
    margin
}

/// `max |a - b| / max |b|`.
pub fn normwise_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// `x(s) = y + exp(-s/N) (x0 - y)` blockwise.
pub fn comparison_oracle(ux0: &[f64], data: &Dataset, s: f64) -> Vec<f64> {
    let q = data.q();
    let decay = (-s / data.n() as f64).exp();
    ux0.iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = data.outputs()[data.labels()[i / q]][i % q];
            y + decay * (x - y)
        })
        .collect()
}

/// Numerical rank of `d` from a column-pivoted QR factorisation.
pub fn qr_rank(d: &DMatrix<f64>, rel_tol: f64) -> usize {
    let qr = d.clone().col_piv_qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|i| r[(i, i)].abs()).collect();
    let top = diag.first().copied().unwrap_or(0.0);
    diag.iter().filter(|&&v| v > rel_tol * top.max(1.0)).count()
}

pub struct Instance {
    pub net: Network,
    pub z: ParamVector,
    pub data: Dataset,
}

impl Instance {
    pub fn dims(&self) -> Vec<usize> {
        dims_of(&self.net.shape)
    }

    pub fn eps(&self) -> f64 {
        self.net.activation.epsilon()
    }
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Random network, parameters and dataset. Layer widths in `1..=4`, up to two
/// hidden layers, `Q <= M`, epsilon in `[0.01, 0.5]`.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(1..=4usize);
    let q = rng.random_range(1..=m);
    let hidden: Vec<usize> = (0..rng.random_range(0..=2usize))
        .map(|_| rng.random_range(1..=4usize))
        .collect();
    let eps = 10f64.powf(rng.random_range(-2.0..-0.3));
    let shape = NetworkShape::new(m, hidden, q).unwrap();
    let net = Network::new(shape, Activation::new(eps).unwrap()).unwrap();
    let z = ParamVector::sample_gaussian(&net.shape, &mut rng);
    let n = rng.random_range(1..=5usize);
    let inputs: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| gauss(&mut rng)).collect()).collect();
    let outputs: Vec<Vec<f64>> = (0..q).map(|_| (0..q).map(|_| gauss(&mut rng)).collect()).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..q)).collect();
    let data = Dataset::new(inputs, outputs, labels).unwrap();
    Instance { net, z, data }
}

/// The first instance at or after `seed` whose pre-activations keep at least
/// `margin` from the break points.
pub fn random_instance_with_margin(seed: u64, margin: f64) -> (u64, Instance) {
    (seed..)
        .map(|s| (s, random_instance(s)))
        .find(|(_, inst)| breakpoint_margin(&inst.dims(), inst.eps(), inst.z.as_slice(), &inst.data) >= margin)
        .expect("some seed satisfies the margin")
}
