//! Gradient descent flow laboratory for small feedforward networks.
//!
//! The crate integrates the continuous-time flow `dZ/ds = -grad_Z C` on the
//! flattened weights and biases of a smoothed-ReLU network, and checks the
//! geometry of the induced output dynamics:
//!
//! - [`model`]: network shape, smoothed ramp activation, parameter vector, forward pass.
//! - [`calculus`]: L2 cost, output/parameter gradients, the Jacobian `D[Z]`, finite differences.
//! - [`flow`]: RK4 / RKF45 integration of parameter and comparison flows, trajectory diagnostics.
//! - [`spectral`]: eigenstructure of `D D^T`, projectors, cost split and certificates.
//! - [`scenarios`]: the 1-D divergent-orbit toy, over/underparametrized scenarios, basin probe.
//! - [`io`]: JSON and CSV formats shared with the command-line front end.

pub mod calculus;
pub mod error;
pub mod flow;
pub mod io;
pub mod model;
pub mod ode;
pub mod scenarios;
pub mod spectral;

pub use error::{Error, Result};
pub use model::{Activation, Dataset, Network, NetworkShape, ParamVector};
