// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"

#include <cmath>

#include "fbnprune/error.hpp"
#include "fbnprune/numerics.hpp"
#include "support/reference.hpp"

using namespace fbnprune;
using namespace fbnprune::numerics;

namespace {

Matrix random_matrix(Index r, Index c, std::uint64_t seed) {
    Rng rng(RngSeed{seed});
    Matrix m(r, c);
    for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < c; ++j) m(i, j) = rng.normal() * (1.0 + static_cast<double>(j % 5)) + 0.3 * j;
    return m;
}

double max_abs_offdiag_identity(const Matrix & m) {
    return (m - Matrix::Identity(m.rows(), m.cols())).cwiseAbs().maxCoeff();
}

// Uniform and Laplace sources, unit variance.
Matrix non_gaussian_sources(Index k, Index n, Rng & rng) {
    Matrix s(k, n);
    for (Index i = 0; i < k; ++i) {
        for (Index j = 0; j < n; ++j) {
            const double u = rng.uniform();
            if (i % 2 == 0) {
                s(i, j) = (u - 0.5) * std::sqrt(12.0);
            } else {
                const double v = u - 0.5;
                s(i, j) = -std::copysign(1.0, v) * std::log(1.0 - 2.0 * std::abs(v)) / std::sqrt(2.0);
            }
        }
    }
    return s;
}

}  // namespace

TEST_CASE("z_score_columns: constant column maps to zeros") {
    Matrix x(3, 1);
    x << 5, 5, 5;
    const Matrix z = z_score_columns(x);
    CHECK(z.isZero(0.0));
}

TEST_CASE("z_score_columns: closed form with population std") {
    Matrix x(3, 1);
    x << 1, 2, 3;
    const Matrix z = z_score_columns(x);
    const double s = 1.0 / std::sqrt(2.0 / 3.0);
    CHECK(z(0, 0) == doctest::Approx(-s).epsilon(1e-12));
    CHECK(z(1, 0) == doctest::Approx(0.0));
    CHECK(z(2, 0) == doctest::Approx(s).epsilon(1e-12));
    CHECK(z(2, 0) == doctest::Approx(1.2247).epsilon(1e-4));
}

TEST_CASE("z_score_columns: idempotent and standardized for random inputs") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const Matrix x = random_matrix(40, 12, seed);
        const Matrix z = z_score_columns(x);
        CHECK((z_score_columns(z) - z).cwiseAbs().maxCoeff() < 1e-10);
        for (Index j = 0; j < z.cols(); ++j) {
            const double mean = z.col(j).mean();
            const double sd = std::sqrt((z.col(j).array() - mean).square().mean());
            CHECK(std::abs(mean) < 1e-10);
            CHECK(std::abs(sd - 1.0) < 1e-8);
        }
    }
}

TEST_CASE("z_score_columns: empty and non-finite inputs are rejected") {
    CHECK_THROWS_AS(z_score_columns(Matrix(0, 3)), Error);
    Matrix x = Matrix::Ones(2, 2);
    x(0, 0) = std::nan("");
    try {
        z_score_columns(x);
        FAIL("expected numeric error");
    } catch (const Error & e) {
        CHECK(e.kind() == ErrorKind::Numeric);
    }
}

TEST_CASE("pca_whiten: white input stays white with k = dims") {
    // three orthogonal zero-mean rows with (1/n) ||row||^2 = 1
    const Index n = 8;
    Matrix x(3, n);
    x << 1, -1, 1, -1, 1, -1, 1, -1,
         1, 1, -1, -1, 1, 1, -1, -1,
         1, 1, 1, 1, -1, -1, -1, -1;
    const Whitened w = pca_whiten(x, 3);
    CHECK(w.projection.k_effective == 3);
    const Matrix cov = w.data * w.data.transpose() / static_cast<double>(n);
    CHECK(max_abs_offdiag_identity(cov) < 1e-6);
    CHECK(w.projection.explained_variance.isApprox(Vector::Ones(3), 1e-12));
}

TEST_CASE("pca_whiten: rank-1 input reduces k with a warning") {
    Matrix x(3, 50);
    for (Index j = 0; j < 50; ++j) {
        const double t = std::sin(0.37 * static_cast<double>(j)) + 0.01 * j;
        x.col(j) << t, 2.0 * t, -0.5 * t;
    }
    const Whitened w = pca_whiten(x, 2);
    CHECK(w.projection.k_requested == 2);
    CHECK(w.projection.k_effective == 1);
    REQUIRE(w.projection.warnings.size() == 1);
    CHECK(w.projection.warnings[0].find("k_effective=1") != std::string::npos);
    CHECK(w.data.rows() == 1);
}

TEST_CASE("pca_whiten: top-k variances match a direct covariance eigensolve") {
    const Matrix x = random_matrix(200, 50, 77);
    const Whitened w = pca_whiten(x, 10);

    // oracle: eigendecomposition of the (rows x rows) population covariance
    const Matrix centered = x.colwise() - x.rowwise().mean();
    const Matrix cov = centered * centered.transpose() / 50.0;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
    const Vector evals = eig.eigenvalues().reverse();
    const Matrix evecs = eig.eigenvectors().rowwise().reverse();

    REQUIRE(w.projection.explained_variance.size() == 10);
    for (Index i = 0; i < 10; ++i) {
        CHECK(std::abs(w.projection.explained_variance(i) - evals(i)) < 1e-8);
        // projection direction is the i-th eigenvector up to sign
        const Vector dir = w.projection.components.row(i).transpose().normalized();
        CHECK(std::abs(std::abs(dir.dot(evecs.col(i))) - 1.0) < 1e-8);
    }
    for (Index i = 1; i < 10; ++i) {
        CHECK(w.projection.explained_variance(i - 1) >= w.projection.explained_variance(i));
    }
    const Matrix wcov = w.data * w.data.transpose() / 50.0;
    CHECK(max_abs_offdiag_identity(wcov) < 1e-6);
    // the projector reproduces the whitened data from centered input
    CHECK((w.projection.components * centered - w.data).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("pca_whiten: tall and wide inputs both whiten") {
    for (auto [r, c] : {std::pair<Index, Index>{300, 40}, {40, 300}, {60, 60}}) {
        const Matrix x = random_matrix(r, c, static_cast<std::uint64_t>(r * 1000 + c));
        const Index k = std::min(r, c) / 2;
        const Whitened w = pca_whiten(x, k);
        const Matrix cov = w.data * w.data.transpose() / static_cast<double>(c);
        CHECK(max_abs_offdiag_identity(cov) < 1e-6);
    }
}

TEST_CASE("pca_whiten: argument errors") {
    const Matrix x = random_matrix(5, 4, 3);
    CHECK_THROWS_AS(pca_whiten(x, 5), Error);
    CHECK_THROWS_AS(pca_whiten(x, 0), Error);
    try {
        pca_whiten(x, 6);
    } catch (const Error & e) {
        CHECK(e.kind() == ErrorKind::Argument);
    }
}

TEST_CASE("fast_ica: single component is the identity") {
    Matrix y(1, 100);
    Rng rng(RngSeed{5});
    for (Index j = 0; j < 100; ++j) y(0, j) = rng.normal();
    const FastIcaResult r = fast_ica(y, RngSeed{1});
    REQUIRE(r.unmixing.rows() == 1);
    CHECK(std::abs(r.unmixing(0, 0)) == 1.0);
    CHECK(r.converged);
}

TEST_CASE("fast_ica: recovers uniform and Laplace sources") {
    Rng rng(RngSeed{2024});
    const Index n = 10000;
    const Matrix s = non_gaussian_sources(2, n, rng);
    Matrix a(2, 2);
    a << rng.normal(), rng.normal(), rng.normal(), rng.normal();
    const Matrix x = a * s;
    const Whitened w = pca_whiten(x, 2);
    const FastIcaResult r = fast_ica(w.data, RngSeed{7});
    CHECK(r.converged);
    CHECK(max_abs_offdiag_identity(r.unmixing * r.unmixing.transpose()) < 1e-6);
    const Matrix recovered = r.unmixing * w.data;
    for (double c : fbnprune::testing::matched_abs_correlations(s, recovered)) {
        CHECK(c >= 0.95);
    }
}

TEST_CASE("fast_ica: Gaussian sources are unidentifiable but handled") {
    Rng rng(RngSeed{11});
    Matrix s(2, 4000);
    for (Index i = 0; i < s.rows(); ++i)
        for (Index j = 0; j < s.cols(); ++j) s(i, j) = rng.normal();
    const Whitened w = pca_whiten(s, 2);
    const FastIcaResult r = fast_ica(w.data, RngSeed{3}, FastIcaOptions{1e-4, 50, 1});
    // no recovery guarantee; the result must still be a valid rotation
    CHECK(r.unmixing.allFinite());
    CHECK(max_abs_offdiag_identity(r.unmixing * r.unmixing.transpose()) < 1e-6);
}

TEST_CASE("fast_ica: deterministic and orthogonal for larger k") {
    Rng rng(RngSeed{99});
    const Matrix s = non_gaussian_sources(6, 3000, rng);
    Matrix a(6, 6);
    for (Index i = 0; i < 6; ++i)
        for (Index j = 0; j < 6; ++j) a(i, j) = rng.normal();
    const Whitened w = pca_whiten(a * s, 6);
    const FastIcaResult r1 = fast_ica(w.data, RngSeed{5});
    const FastIcaResult r2 = fast_ica(w.data, RngSeed{5});
    CHECK(r1.unmixing == r2.unmixing);
    CHECK(r1.converged == r2.converged);
    CHECK(max_abs_offdiag_identity(r1.unmixing * r1.unmixing.transpose()) < 1e-6);
}

TEST_CASE("fast_ica: argument and numeric errors") {
    CHECK_THROWS_AS(fast_ica(Matrix(0, 10), RngSeed{1}), Error);
    Matrix y = Matrix::Ones(2, 10);
    y(1, 3) = INFINITY;
    try {
        fast_ica(y, RngSeed{1});
        FAIL("expected numeric error");
    } catch (const Error & e) {
        CHECK(e.kind() == ErrorKind::Numeric);
    }
}

TEST_CASE("symmetric_orthogonalize yields an orthogonal matrix") {
    const Matrix w = random_matrix(7, 7, 1234);
    const Matrix q = symmetric_orthogonalize(w);
    CHECK(max_abs_offdiag_identity(q * q.transpose()) < 1e-10);
}
