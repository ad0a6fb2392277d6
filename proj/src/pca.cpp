#include "voxrep/pca.hpp"
#include <cstring>

#include <Eigen/SVD>
#include <fstream>

#include "json.hpp"
#include "voxrep/tensor.hpp"

namespace voxrep::pca {

using Eigen::MatrixXd;
using Eigen::VectorXd;

IncrementalPca::IncrementalPca(int64_t n_components) : k_(n_components) {
    if (n_components < 1) throw ArgumentError("IncrementalPca: n_components must be >= 1");
}

void IncrementalPca::check_fitted() const {
    if (!fitted()) throw StateError("IncrementalPca: model not fitted yet");
}

void IncrementalPca::fix_signs() {
    // Deterministic orientation: largest-magnitude entry of each component
    // positive; first such index wins ties.
    for (int64_t c = 0; c < components_.rows(); ++c) {
        int64_t arg = 0;
        double best = -1;
        for (int64_t j = 0; j < components_.cols(); ++j) {
            const double a = std::abs(components_(c, j));
            if (a > best) {
                best = a;
                arg = j;
            }
        }
        if (components_(c, arg) < 0) components_.row(c) = -components_.row(c);
    }
}

void IncrementalPca::partial_fit(const MatrixXd& batch) {
    const int64_t b = batch.rows(), v = batch.cols();
    if (b < 1) throw ArgumentError("partial_fit: empty batch");
    if (fitted() && v != mean_.size())
        throw ShapeError("partial_fit: feature count changed from " +
                         std::to_string(mean_.size()) + " to " + std::to_string(v));
    if (!fitted() && b < k_)
        throw ArgumentError("partial_fit: first batch needs at least n_components = " +
                            std::to_string(k_) + " rows, got " + std::to_string(b));
    if (v < k_)
        throw ArgumentError("partial_fit: n_components exceeds feature count");

    const VectorXd batch_mean = batch.colwise().mean();
    MatrixXd centered = batch.rowwise() - batch_mean.transpose();

    MatrixXd stack;
    if (!fitted()) {
        stack = std::move(centered);
    } else {
        // Merge previous top-k subspace, the new residuals, and the mean
        // correction row.
        const double n_old = static_cast<double>(n_seen_);
        const double n_new = static_cast<double>(b);
        const double corr = std::sqrt(n_old * n_new / (n_old + n_new));
        stack.resize(k_ + b + 1, v);
        stack.topRows(k_) = singular_values_.asDiagonal() * components_;
        stack.middleRows(k_, b) = centered;
        stack.bottomRows(1) = corr * (mean_ - batch_mean).transpose();
    }

    Eigen::BDCSVD<MatrixXd> svd(stack, Eigen::ComputeThinV);
    components_ = svd.matrixV().leftCols(k_).transpose();
    singular_values_ = svd.singularValues().head(k_);

    if (!fitted()) {
        mean_ = batch_mean;
        n_seen_ = b;
    } else {
        const double n_old = static_cast<double>(n_seen_);
        mean_ = (n_old * mean_ + static_cast<double>(b) * batch_mean) / (n_old + b);
        n_seen_ += b;
    }
    fix_signs();
}

Eigen::VectorXd IncrementalPca::explained_variance() const {
    check_fitted();
    return singular_values_.array().square() / static_cast<double>(n_seen_ - 1);
}

VectorXd IncrementalPca::transform_whitened(const VectorXd& x) const {
    check_fitted();
    if (x.size() != mean_.size())
        throw ShapeError("transform_whitened: expected " + std::to_string(mean_.size()) +
                         " features, got " + std::to_string(x.size()));
    VectorXd proj = components_ * (x - mean_);
    const double scale = std::sqrt(static_cast<double>(n_seen_ - 1));
    for (int64_t i = 0; i < k_; ++i) {
        if (singular_values_[i] <= 0)
            throw NumericError("transform_whitened: zero singular value for component " +
                               std::to_string(i));
        proj[i] *= scale / singular_values_[i];
    }
    return proj;
}

MatrixXd IncrementalPca::transform_whitened(const MatrixXd& rows) const {
    MatrixXd out(rows.rows(), k_);
    for (int64_t r = 0; r < rows.rows(); ++r)
        out.row(r) = transform_whitened(VectorXd(rows.row(r))).transpose();
    return out;
}

VectorXd IncrementalPca::reconstruct(const VectorXd& x, int64_t k_use) const {
    check_fitted();
    if (k_use < 1 || k_use > k_) throw ArgumentError("reconstruct: k out of range");
    const auto comps = components_.topRows(k_use);
    return mean_ + comps.transpose() * (comps * (x - mean_));
}

void IncrementalPca::save(const std::string& path) const {
    check_fitted();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("IncrementalPca::save: cannot open " + path);
    nlohmann::json meta{{"kind", "pca"},
                        {"n_components", k_},
                        {"n_features", mean_.size()},
                        {"n_samples_seen", n_seen_}};
    const std::string text = meta.dump();
    os.write("PCA1", 4);
    const uint64_t len = text.size();
    os.write(reinterpret_cast<const char*>(&len), 8);
    os.write(text.data(), static_cast<std::streamsize>(text.size()));

    auto dump_tensor = [&](const double* p, Shape shape) {
        TensorF t(shape);
        for (int64_t i = 0; i < t.numel(); ++i) t.v[i] = static_cast<float>(p[i]);
        write_vxt(os, t);
    };
    dump_tensor(mean_.data(), {mean_.size()});
    // row-major copy of components
    {
        TensorF t({components_.rows(), components_.cols()});
        for (int64_t r = 0; r < components_.rows(); ++r)
            for (int64_t c = 0; c < components_.cols(); ++c)
                t.v[r * components_.cols() + c] = static_cast<float>(components_(r, c));
        write_vxt(os, t);
    }
    dump_tensor(singular_values_.data(), {singular_values_.size()});
    if (!os) throw IoError("IncrementalPca::save: write failed");
}

IncrementalPca IncrementalPca::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("IncrementalPca::load: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "PCA1", 4) != 0)
        throw FormatError("IncrementalPca::load: bad magic (expected PCA1)");
    uint64_t len = 0;
    is.read(reinterpret_cast<char*>(&len), 8);
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    auto meta = nlohmann::json::parse(text);

    IncrementalPca m(meta.at("n_components").get<int64_t>());
    m.n_seen_ = meta.at("n_samples_seen").get<int64_t>();

    TensorF mean_t = read_vxt(is);
    TensorF comp_t = read_vxt(is);
    TensorF sv_t = read_vxt(is);
    m.mean_ = Eigen::Map<const Eigen::VectorXf>(mean_t.data(), mean_t.numel()).cast<double>();
    m.components_.resize(comp_t.shape[0], comp_t.shape[1]);
    for (int64_t r = 0; r < comp_t.shape[0]; ++r)
        for (int64_t c = 0; c < comp_t.shape[1]; ++c)
            m.components_(r, c) = comp_t.v[r * comp_t.shape[1] + c];
    m.singular_values_ =
        Eigen::Map<const Eigen::VectorXf>(sv_t.data(), sv_t.numel()).cast<double>();
    return m;
}

MatrixXd as_sample_rows(const ingest::VolumeSeries& v) {
    const int64_t t_n = v.timepoints(), vox = v.voxels();
    MatrixXd rows(t_n, vox);
    for (int64_t t = 0; t < t_n; ++t)
        for (int64_t j = 0; j < vox; ++j) rows(t, j) = v.data.v[t * vox + j];
    return rows;
}

VectorXd encode_subject(const IncrementalPca& model, const ingest::VolumeSeries& v) {
    const int64_t t_n = v.timepoints(), vox = v.voxels();
    VectorXd acc = VectorXd::Zero(model.n_components());
    VectorXd x(vox);
    for (int64_t t = 0; t < t_n; ++t) {
        for (int64_t j = 0; j < vox; ++j) x[j] = v.data.v[t * vox + j];
        acc += model.transform_whitened(x);
    }
    return acc / static_cast<double>(t_n);
}

}  // namespace voxrep::pca
