//! Numerical kernel: quadrature, dense factorizations, fixed-step ODE
//! integration. Everything here is a pure function of its inputs.

pub mod linalg;
pub mod ode;
pub mod quadrature;

pub use linalg::{logdet_general, logdet_posdef, solve_spd, Cholesky, Lu, SymmetricMatrix};
pub use ode::{integrate_ode, rk4_step};
pub use quadrature::{gauss_legendre, QuadratureRule};
