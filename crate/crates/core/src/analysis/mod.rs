//! Singular values, effective rank and rank-growth test matrices.

mod rank;
mod svd;
mod testcase;

pub use rank::{effective_rank, effective_rank_of, expanded_targets, rank_report, spectrum, SpectrumReport};
pub use svd::{svd_small, JACOBI_MAX_SWEEPS, JACOBI_TOL};
pub use testcase::{construct_rank_testcase, orthonormal_columns, RankTestCase};

/// Default relative threshold for the effective rank.
pub const DEFAULT_EPS_REL: f64 = 0.01;
