//! Dense real-matrix kernels: products, orthonormalization, symmetric
//! eigendecomposition (cyclic Jacobi) and thin SVD (one-sided Jacobi).

mod eigen;
mod matrix;
mod qr;
mod svd;

pub use eigen::{default_psd_tol, sym_eig, symmetric_eigen, EigenPair};
pub use matrix::{dot, norm, Matrix};
pub use qr::{orthonormal_columns, orthonormality_defect, orthonormalize_columns};
pub(crate) use qr::{orthonormal_columns_from, orthonormal_columns_with};
pub use svd::{thin_svd, SvdResult, ZERO_SIGMA_RATIO};
