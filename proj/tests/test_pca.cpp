#include <Eigen/Eigenvalues>
#include <cmath>

#include "doctest.h"
#include "support/tmpdir.hpp"
#include "voxrep/pca.hpp"

using namespace voxrep;
using namespace voxrep::pca;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd random_lowrank_data(int64_t n, int64_t v, int64_t structure_rank, Rng& rng) {
    // Decaying spectrum so the top-k subspace is well separated.
    MatrixXd basis(structure_rank, v);
    for (int64_t r = 0; r < structure_rank; ++r)
        for (int64_t c = 0; c < v; ++c) basis(r, c) = rng.normal();
    for (int64_t r = 0; r < structure_rank; ++r) basis.row(r).normalize();
    MatrixXd data(n, v);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t c = 0; c < v; ++c) data(i, c) = 0.01 * rng.normal();
        for (int64_t r = 0; r < structure_rank; ++r) {
            const double scale = std::pow(0.7, r) * 3.0;
            data.row(i) += scale * rng.normal() * basis.row(r);
        }
        data.row(i).array() += 0.5;  // nonzero mean
    }
    return data;
}

// Top-k eigenvectors of the sample covariance, the full-batch oracle.
MatrixXd covariance_eig_oracle(const MatrixXd& data, int64_t k) {
    const VectorXd mu = data.colwise().mean();
    MatrixXd centered = data.rowwise() - mu.transpose();
    MatrixXd cov = centered.transpose() * centered / double(data.rows() - 1);
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(cov);
    MatrixXd top(k, data.cols());
    for (int64_t i = 0; i < k; ++i)
        top.row(i) = eig.eigenvectors().col(data.cols() - 1 - i).transpose();
    return top;
}

double max_principal_angle(const MatrixXd& a, const MatrixXd& b) {
    Eigen::BDCSVD<MatrixXd> svd(a * b.transpose());
    double worst = 0;
    for (int64_t i = 0; i < svd.singularValues().size(); ++i) {
        const double c = std::min(1.0, svd.singularValues()[i]);
        worst = std::max(worst, std::acos(c));
    }
    return worst;
}

}  // namespace

TEST_CASE("single-batch fit matches the covariance eigendecomposition oracle") {
    Rng rng(101);
    const int64_t k = 8;
    MatrixXd data = random_lowrank_data(200, 100, 12, rng);

    IncrementalPca model(k);
    model.partial_fit(data);
    MatrixXd oracle = covariance_eig_oracle(data, k);
    CHECK(max_principal_angle(model.components(), oracle) < 1e-4);
}

TEST_CASE("rank-1 data recovers the generating direction") {
    Rng rng(103);
    VectorXd dir(40);
    for (int64_t i = 0; i < 40; ++i) dir[i] = rng.normal();
    dir.normalize();
    MatrixXd data(30, 40);
    for (int64_t i = 0; i < 30; ++i) data.row(i) = (rng.normal() * 2.0) * dir.transpose();

    IncrementalPca model(1);
    model.partial_fit(data);
    const double cosine = std::abs(model.components().row(0).dot(dir.transpose()));
    CHECK(cosine > 0.9999);
}

TEST_CASE("two-batch fit tracks the one-batch fit") {
    Rng rng(107);
    MatrixXd data = random_lowrank_data(160, 60, 10, rng);
    const int64_t k = 6;

    IncrementalPca one(k);
    one.partial_fit(data);
    IncrementalPca two(k);
    two.partial_fit(data.topRows(80));
    two.partial_fit(data.bottomRows(80));

    const VectorXd ev1 = one.explained_variance();
    const VectorXd ev2 = two.explained_variance();
    for (int64_t i = 0; i < k; ++i)
        CHECK(std::abs(ev2[i] - ev1[i]) / ev1[i] < 0.05);
}

TEST_CASE("components stay row-orthonormal after every partial_fit") {
    Rng rng(109);
    MatrixXd data = random_lowrank_data(120, 50, 8, rng);
    IncrementalPca model(5);
    for (int64_t start = 0; start < 120; start += 30) {
        model.partial_fit(data.middleRows(start, 30));
        MatrixXd gram = model.components() * model.components().transpose();
        for (int64_t i = 0; i < 5; ++i)
            for (int64_t j = 0; j < 5; ++j)
                CHECK(gram(i, j) == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-5));
    }
}

TEST_CASE("whitened transform: centering, unit variance, orthogonality, linearity") {
    Rng rng(113);
    MatrixXd data = random_lowrank_data(150, 40, 8, rng);
    const int64_t k = 5;
    IncrementalPca model(k);
    model.partial_fit(data);

    // x = mean -> zero vector
    VectorXd at_mean = model.transform_whitened(VectorXd(model.mean()));
    CHECK(at_mean.norm() < 1e-9);

    // training projections have unit sample variance per coordinate
    MatrixXd codes = model.transform_whitened(data);
    for (int64_t c = 0; c < k; ++c) {
        const double mu = codes.col(c).mean();
        const double var =
            (codes.col(c).array() - mu).square().sum() / double(codes.rows() - 1);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }

    // mean + first component direction maps to a multiple of e1
    VectorXd probe = model.mean() + model.components().row(0).transpose();
    VectorXd y = model.transform_whitened(probe);
    CHECK(std::abs(y[0]) > 1e-3);
    for (int64_t c = 1; c < k; ++c) CHECK(std::abs(y[c]) < 1e-5);

    // linearity through the affine map: T(a x1 + b x2 + (1-a-b) mean)
    const double a = 0.6, b = -0.3;
    VectorXd x1 = data.row(3), x2 = data.row(11);
    VectorXd combo = a * x1 + b * x2 + (1 - a - b) * model.mean();
    VectorXd lhs = model.transform_whitened(combo);
    VectorXd rhs = a * model.transform_whitened(x1) + b * model.transform_whitened(x2);
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("reconstruction error is non-increasing in k") {
    Rng rng(127);
    MatrixXd data = random_lowrank_data(120, 64, 20, rng);
    IncrementalPca model(16);
    model.partial_fit(data);

    double prev = -1;
    for (int64_t k : {1, 2, 4, 8, 16}) {
        double err = 0;
        for (int64_t i = 0; i < data.rows(); ++i) {
            VectorXd x = data.row(i);
            err += (x - model.reconstruct(x, k)).norm();
        }
        if (prev >= 0) CHECK(err <= prev + 1e-9);
        prev = err;
    }
}

TEST_CASE("encode_subject averages whitened codes over time") {
    Rng rng(131);
    MatrixXd data = random_lowrank_data(80, 24, 6, rng);
    IncrementalPca model(4);
    model.partial_fit(data);

    ingest::VolumeSeries v;
    v.subject_id = "s";
    v.data = TensorF({2, 2, 3, 4});
    for (int64_t i = 0; i < 24; ++i) {
        v.data.v[i] = static_cast<float>(data(0, i));
        v.data.v[24 + i] = static_cast<float>(data(1, i));
    }

    VectorXd y1 = model.transform_whitened(VectorXd(as_sample_rows(v).row(0)));
    VectorXd y2 = model.transform_whitened(VectorXd(as_sample_rows(v).row(1)));
    VectorXd got = encode_subject(model, v);
    CHECK((got - (y1 + y2) / 2.0).cwiseAbs().maxCoeff() < 1e-12);

    // T identical timepoints: same as transforming one
    ingest::VolumeSeries same;
    same.subject_id = "t";
    same.data = TensorF({3, 2, 3, 4});
    for (int64_t t = 0; t < 3; ++t)
        for (int64_t i = 0; i < 24; ++i) same.data.v[t * 24 + i] = v.data.v[i];
    VectorXd rep = encode_subject(model, same);
    CHECK((rep - y1).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("error paths and persistence") {
    Rng rng(137);
    MatrixXd data = random_lowrank_data(50, 30, 5, rng);
    IncrementalPca model(4);

    CHECK_THROWS_AS(model.transform_whitened(VectorXd(VectorXd::Zero(30))), StateError);
    CHECK_THROWS_AS(model.partial_fit(data.topRows(2)), ArgumentError);  // first batch < k
    model.partial_fit(data);
    CHECK_THROWS_AS(model.partial_fit(MatrixXd::Zero(5, 29)), ShapeError);

    testsupport::TmpDir tmp("pca");
    const std::string path = tmp.file("model.pca");
    model.save(path);
    auto loaded = IncrementalPca::load(path);
    CHECK(loaded.n_components() == 4);
    CHECK(loaded.n_samples_seen() == 50);
    VectorXd x = data.row(7);
    VectorXd a = model.transform_whitened(x);
    VectorXd b = loaded.transform_whitened(x);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-4);  // float32 storage
}
