// SPDX-License-Identifier: Apache-2.0

#include "fbnprune/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>

#include <fmt/format.h>

#include "fbnprune/error.hpp"

namespace fbnprune::numerics {

namespace {

// E[log cosh(nu)] for nu ~ N(0, 1)
constexpr double kGaussLogCosh = 0.374567207491438;

// Singular values below this fraction of the largest are treated as zero.
constexpr double kRankTolerance = 1e-10;

// Thin SVD with the singular vectors of one side materialized only on demand:
// for tall inputs a Householder QR shrinks the problem to the square R factor
// and applying Q to more columns than needed dominates the cost.
class ThinSvd {
public:
    explicit ThinSvd(const Matrix & a) : transposed_(a.rows() < a.cols()) {
        const Matrix t = transposed_ ? Matrix(a.transpose()) : Matrix();
        const Matrix & tall = transposed_ ? t : a;
        const Index m = tall.rows();
        const Index n = tall.cols();
        if (m >= 2 * n && n > 0) {
            qr_.emplace(tall);
            const Matrix r = qr_->matrixQR().topRows(n).triangularView<Eigen::Upper>();
            Eigen::BDCSVD<Matrix> svd(r, Eigen::ComputeThinU | Eigen::ComputeThinV);
            small_u_ = svd.matrixU();
            v_ = svd.matrixV();
            s_ = svd.singularValues();
        } else {
            Eigen::BDCSVD<Matrix> svd(tall, Eigen::ComputeThinU | Eigen::ComputeThinV);
            small_u_ = svd.matrixU();
            v_ = svd.matrixV();
            s_ = svd.singularValues();
        }
    }

    const Vector & singular_values() const { return s_; }

    /// First k left singular vectors of the original matrix.
    Matrix left(Index k) const { return transposed_ ? Matrix(v_.leftCols(k)) : tall_left(k); }
    /// First k right singular vectors of the original matrix.
    Matrix right(Index k) const { return transposed_ ? tall_left(k) : Matrix(v_.leftCols(k)); }

private:
    Matrix tall_left(Index k) const {
        if (!qr_) return small_u_.leftCols(k);
        Matrix padded = Matrix::Zero(qr_->rows(), k);
        padded.topRows(small_u_.rows()) = small_u_.leftCols(k);
        return qr_->householderQ() * padded;
    }

    bool transposed_;
    std::optional<Eigen::HouseholderQR<Matrix>> qr_;
    Matrix small_u_;
    Matrix v_;
    Vector s_;
};

// tanh through the vectorized exponential; saturates cleanly to +-1.
Matrix fast_tanh(const Matrix & x) {
    return (1.0 - 2.0 / ((2.0 * x.array()).exp() + 1.0)).matrix();
}

double logcosh(double u) {
    const double a = std::abs(u);
    return a + std::log1p(std::exp(-2.0 * a)) - std::log(2.0);
}

}  // namespace

bool all_finite(const Matrix & m) noexcept {
    return m.allFinite();
}

void require_finite(const Matrix & m, const char * what) {
    if (!m.allFinite()) {
        fail(ErrorKind::Numeric, fmt::format("{}: non-finite entry", what));
    }
}

Matrix z_score_columns(const Matrix & x, double epsilon) {
    if (x.size() == 0) {
        fail(ErrorKind::Dimension, "z_score_columns: empty matrix");
    }
    if (!(epsilon > 0.0)) {
        fail(ErrorKind::Argument, "z_score_columns: epsilon must be positive");
    }
    require_finite(x, "z_score_columns");
    const double n = static_cast<double>(x.rows());
    Matrix out(x.rows(), x.cols());
    for (Index j = 0; j < x.cols(); ++j) {
        const double mean = x.col(j).sum() / n;
        const double var = (x.col(j).array() - mean).square().sum() / n;
        const double sd = std::sqrt(var);
        if (sd < epsilon) {
            out.col(j).setZero();
        } else {
            out.col(j) = (x.col(j).array() - mean) / sd;
        }
    }
    return out;
}

Whitened pca_whiten(const Matrix & x, Index k) {
    const Index rows = x.rows();
    const Index cols = x.cols();
    if (rows == 0 || cols == 0) {
        fail(ErrorKind::Dimension, "pca_whiten: empty matrix");
    }
    if (k <= 0 || k > std::min(rows, cols)) {
        fail(ErrorKind::Argument,
             fmt::format("pca_whiten: k={} outside [1, min({}, {})]", k, rows, cols));
    }
    require_finite(x, "pca_whiten");

    Whitened out;
    WhiteningResult & res = out.projection;
    res.k_requested = k;
    res.mean = x.rowwise().mean();
    const Matrix centered = x.colwise() - res.mean;

    const ThinSvd svd(centered);
    const Vector & sv = svd.singular_values();
    const double s0 = sv.size() > 0 ? sv(0) : 0.0;
    if (!(s0 > 0.0)) {
        fail(ErrorKind::Numeric, "pca_whiten: data has zero variance after centering");
    }
    Index rank = 0;
    while (rank < sv.size() && sv(rank) > kRankTolerance * s0) {
        ++rank;
    }
    const Index k_eff = std::min(k, rank);
    if (k_eff < k) {
        res.warnings.push_back(fmt::format("k_effective={} (requested {}, numerical rank {})", k_eff, k, rank));
    }
    res.k_effective = k_eff;

    const double sqrt_n = std::sqrt(static_cast<double>(cols));
    const Vector s = sv.head(k_eff);
    res.explained_variance = s.array().square() / static_cast<double>(cols);
    res.components = sqrt_n * s.cwiseInverse().asDiagonal() * svd.left(k_eff).transpose();
    out.data = sqrt_n * svd.right(k_eff).transpose();
    return out;
}

Matrix symmetric_orthogonalize(const Matrix & w) {
    const Matrix gram = w * w.transpose();
    Eigen::SelfAdjointEigenSolver<Matrix> eig(gram);
    if (eig.info() != Eigen::Success) {
        fail(ErrorKind::Numeric, "symmetric_orthogonalize: eigensolver failed");
    }
    const Vector & d = eig.eigenvalues();
    if (!(d.minCoeff() > 0.0) || !d.allFinite()) {
        fail(ErrorKind::Numeric, "symmetric_orthogonalize: singular update matrix");
    }
    const Matrix & e = eig.eigenvectors();
    return e * d.cwiseSqrt().cwiseInverse().asDiagonal() * e.transpose() * w;
}

double logcosh_contrast(const Matrix & sources) {
    if (sources.rows() == 0 || sources.cols() == 0) {
        return 0.0;
    }
    double total = 0.0;
    for (Index i = 0; i < sources.rows(); ++i) {
        double m = 0.0;
        for (Index j = 0; j < sources.cols(); ++j) {
            m += logcosh(sources(i, j));
        }
        m /= static_cast<double>(sources.cols());
        total += (m - kGaussLogCosh) * (m - kGaussLogCosh);
    }
    return total / static_cast<double>(sources.rows());
}

FastIcaResult fast_ica(const Matrix & y, RngSeed seed, const FastIcaOptions & options) {
    const Index k = y.rows();
    const Index n = y.cols();
    if (k == 0) {
        fail(ErrorKind::Argument, "fast_ica: zero components");
    }
    if (n == 0) {
        fail(ErrorKind::Dimension, "fast_ica: no observations");
    }
    if (options.max_iter < 1 || options.restarts < 1 || !(options.tol > 0.0)) {
        fail(ErrorKind::Argument, "fast_ica: max_iter, restarts and tol must be positive");
    }
    require_finite(y, "fast_ica input");

    if (k == 1) {
        FastIcaResult r;
        r.unmixing = Matrix::Ones(1, 1);
        r.converged = true;
        r.contrast = logcosh_contrast(y);
        return r;
    }

    const double inv_n = 1.0 / static_cast<double>(n);
    FastIcaResult best;
    best.contrast = -std::numeric_limits<double>::infinity();

    for (int restart = 0; restart < options.restarts; ++restart) {
        Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(restart)}));
        Matrix w(k, k);
        for (Index i = 0; i < k; ++i) {
            for (Index j = 0; j < k; ++j) {
                w(i, j) = rng.normal();
            }
        }
        w = symmetric_orthogonalize(w);

        Matrix w_best = w;
        double best_lim = std::numeric_limits<double>::infinity();
        bool converged = false;
        int iterations = 0;
        for (int it = 1; it <= options.max_iter; ++it) {
            iterations = it;
            const Matrix s = w * y;
            const Matrix g = fast_tanh(s);
            const Vector gp_mean = (1.0 - g.array().square()).matrix().rowwise().sum() * inv_n;
            Matrix w_new = (g * y.transpose()) * inv_n - gp_mean.asDiagonal() * w;
            if (!w_new.allFinite()) {
                fail(ErrorKind::Numeric, fmt::format("fast_ica: non-finite update at iteration {}", it));
            }
            w_new = symmetric_orthogonalize(w_new);
            const double lim = ((w_new.cwiseProduct(w)).rowwise().sum().cwiseAbs().array() - 1.0).abs().maxCoeff();
            w = std::move(w_new);
            if (lim < best_lim) {
                best_lim = lim;
                w_best = w;
            }
            if (lim < options.tol) {
                converged = true;
                break;
            }
        }
        const Matrix & chosen = converged ? w : w_best;
        const double contrast = logcosh_contrast(chosen * y);
        if (contrast > best.contrast) {
            best.unmixing = chosen;
            best.converged = converged;
            best.iterations = iterations;
            best.contrast = contrast;
            best.restart = restart;
        }
    }
    return best;
}

}  // namespace fbnprune::numerics
