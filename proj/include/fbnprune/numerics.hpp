// SPDX-License-Identifier: Apache-2.0
//
// Dense double-precision primitives used by the decomposition pipeline:
// column standardization, PCA whitening and symmetric FastICA.
//
// Conventions: a data matrix is (variables x observations) for pca_whiten and
// fast_ica, i.e. every column is one observation. For spatial ICA over neurons
// the observations are neurons and the variables are (reduced) time points.

#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fbnprune/random.hpp"

namespace fbnprune::numerics {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

inline constexpr double kZScoreEpsilon = 1e-8;

bool all_finite(const Matrix & m) noexcept;
/// Throws ErrorKind::Numeric naming `what` when any entry is NaN/Inf.
void require_finite(const Matrix & m, const char * what);

/// Standardizes every column to mean 0 and population std 1. Columns whose
/// std is below `epsilon` (dead or constant signals) become all-zero.
Matrix z_score_columns(const Matrix & x, double epsilon = kZScoreEpsilon);

struct WhiteningResult {
    Matrix components;          // k x rows; applied to row-centered data
    Vector explained_variance;  // k, descending (population covariance eigenvalues)
    Vector mean;                // rows; per-row mean across observations
    Index k_requested = 0;
    Index k_effective = 0;
    std::vector<std::string> warnings;
};

struct Whitened {
    WhiteningResult projection;
    Matrix data;  // k_effective x cols, (1/cols) * data * data^T == I
};

/// PCA whitening through a thin SVD of the row-centered data.
/// k > min(rows, cols) is an argument error; k above the numerical rank is
/// reduced to the rank and reported in `warnings`.
Whitened pca_whiten(const Matrix & x, Index k);

struct FastIcaOptions {
    double tol = 1e-4;
    int max_iter = 200;
    int restarts = 3;
};

struct FastIcaResult {
    Matrix unmixing;         // k x k, orthogonal
    bool converged = false;
    int iterations = 0;      // of the selected restart
    double contrast = 0.0;   // mean log-cosh negentropy proxy of the selected restart
    int restart = 0;
};

/// Symmetric FastICA with the log-cosh contrast (g = tanh) on whitened data y
/// (k x n). Each restart starts from a seeded Gaussian matrix; the restart with
/// the largest mean contrast is returned.
FastIcaResult fast_ica(const Matrix & y, RngSeed seed, const FastIcaOptions & options = {});

/// (W W^T)^{-1/2} W
Matrix symmetric_orthogonalize(const Matrix & w);

/// Mean over rows of (E[log cosh(s)] - E[log cosh(nu)])^2, nu ~ N(0,1).
double logcosh_contrast(const Matrix & sources);

}  // namespace fbnprune::numerics
