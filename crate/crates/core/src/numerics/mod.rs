//! Random streams, dense matrices and Gaussian pair expectations.

pub mod gaussian;
pub mod matrix;
pub mod rng;

pub use gaussian::{
    dphi_pair_mean, gauss_hermite_pair, hermite_rule, phi_pair_mean, polar_pair_quadrature,
    Activation, PairCovariance,
};
pub use matrix::{
    axpy, dot, fill_gaussian_row, gaussian_matrix, gaussian_matrix_keyed, gemm, Matrix, Trans,
};
pub use rng::RngStream;
