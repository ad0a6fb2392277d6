#include "voxrep/heads.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace voxrep::heads {

using Eigen::MatrixXd;
using Eigen::VectorXd;

std::string feature_mode_name(FeatureMode m) {
    return m == FeatureMode::kConcat ? "concat" : "mean";
}

FeatureMatrix build_features(const std::vector<TensorF>& latents, FeatureMode mode) {
    if (latents.empty()) throw ArgumentError("build_features: no subjects");
    const Shape& s0 = latents.front().shape;
    if (s0.size() != 2) throw ShapeError("build_features: latents must be [T, L]");
    const int64_t t_n = s0[0], l = s0[1];
    for (const auto& lat : latents)
        if (lat.shape != s0)
            throw ShapeError("build_features: ragged latent shapes (" + shape_str(lat.shape) +
                             " vs " + shape_str(s0) + ")");

    FeatureMatrix f;
    f.mode = mode;
    const int64_t cols = mode == FeatureMode::kConcat ? t_n * l : l;
    f.x.resize(static_cast<int64_t>(latents.size()), cols);
    for (size_t i = 0; i < latents.size(); ++i) {
        const auto& lat = latents[i];
        if (mode == FeatureMode::kConcat) {
            for (int64_t j = 0; j < t_n * l; ++j) f.x(static_cast<int64_t>(i), j) = lat.v[j];
        } else {
            for (int64_t j = 0; j < l; ++j) {
                double acc = 0;
                for (int64_t t = 0; t < t_n; ++t) acc += lat.v[t * l + j];
                f.x(static_cast<int64_t>(i), j) = acc / static_cast<double>(t_n);
            }
        }
    }
    return f;
}

void standardize(FeatureMatrix& f, const std::vector<int64_t>& train_rows,
                 std::vector<std::string>* warnings) {
    if (train_rows.size() < 2) throw ArgumentError("standardize: need >= 2 training rows");
    const int64_t cols = f.x.cols();
    f.col_mean.resize(cols);
    f.col_std.resize(cols);
    for (int64_t c = 0; c < cols; ++c) {
        double mu = 0;
        for (int64_t r : train_rows) mu += f.x(r, c);
        mu /= static_cast<double>(train_rows.size());
        double ss = 0;
        for (int64_t r : train_rows) ss += (f.x(r, c) - mu) * (f.x(r, c) - mu);
        const double sd = std::sqrt(ss / static_cast<double>(train_rows.size() - 1));
        f.col_mean[c] = mu;
        f.col_std[c] = sd;
        if (sd == 0.0 && warnings)
            warnings->push_back("standardize: constant training column " + std::to_string(c) +
                                "; emitted zeros");
    }
    for (int64_t r = 0; r < f.x.rows(); ++r)
        for (int64_t c = 0; c < cols; ++c)
            f.x(r, c) = f.col_std[c] == 0.0 ? 0.0 : (f.x(r, c) - f.col_mean[c]) / f.col_std[c];
    f.standardized = true;
}

double LinearModel::decision(const VectorXd& x) const {
    if (x.size() + 1 != w.size())
        throw ShapeError("LinearModel: expected " + std::to_string(w.size() - 1) + " features");
    return w.head(w.size() - 1).dot(x) + w[w.size() - 1];
}

std::vector<double> LinearModel::decision_rows(const MatrixXd& rows) const {
    std::vector<double> out(rows.rows());
    for (int64_t r = 0; r < rows.rows(); ++r) out[r] = decision(VectorXd(rows.row(r)));
    return out;
}

namespace {

MatrixXd augment(const MatrixXd& x) {
    MatrixXd a(x.rows(), x.cols() + 1);
    a.leftCols(x.cols()) = x;
    a.col(x.cols()).setOnes();
    return a;
}

}  // namespace

LinearModel train_linear_svm(const MatrixXd& x, const std::vector<int>& y, double c,
                             int64_t max_sweeps, double tol) {
    const int64_t n = x.rows();
    if (static_cast<int64_t>(y.size()) != n) throw ShapeError("train_linear_svm: label count");
    bool pos = false, neg = false;
    for (int v : y) {
        if (v == 1) pos = true;
        else if (v == 0) neg = true;
        else throw ArgumentError("train_linear_svm: labels must be 0 or 1");
    }
    if (!pos || !neg) throw ArgumentError("train_linear_svm: both classes must be present");
    if (c <= 0) throw ArgumentError("train_linear_svm: C must be positive");

    const MatrixXd a = augment(x);
    VectorXd sign(n), qdiag(n);
    for (int64_t i = 0; i < n; ++i) {
        sign[i] = y[i] == 1 ? 1.0 : -1.0;
        qdiag[i] = a.row(i).squaredNorm();
    }
    VectorXd alpha = VectorXd::Zero(n);
    VectorXd w = VectorXd::Zero(a.cols());
    for (int64_t sweep = 0; sweep < max_sweeps; ++sweep) {
        double max_delta = 0;
        for (int64_t i = 0; i < n; ++i) {
            if (qdiag[i] == 0.0) continue;
            const double grad = sign[i] * a.row(i).dot(w) - 1.0;
            const double next = std::clamp(alpha[i] - grad / qdiag[i], 0.0, c);
            const double delta = next - alpha[i];
            if (delta != 0.0) {
                alpha[i] = next;
                w += delta * sign[i] * a.row(i).transpose();
                max_delta = std::max(max_delta, std::abs(delta));
            }
        }
        if (max_delta < tol) break;
    }
    LinearModel m;
    m.w = w;
    return m;
}

double svm_objective(const MatrixXd& x, const std::vector<int>& y, double c,
                     const LinearModel& m) {
    double hinge = 0;
    for (int64_t i = 0; i < x.rows(); ++i) {
        const double sign = y[i] == 1 ? 1.0 : -1.0;
        hinge += std::max(0.0, 1.0 - sign * m.decision(VectorXd(x.row(i))));
    }
    return 0.5 * m.w.squaredNorm() + c * hinge;
}

LinearModel train_linear_svr(const MatrixXd& x, const std::vector<double>& y, double c,
                             double epsilon, int64_t max_sweeps, double tol) {
    const int64_t n = x.rows();
    if (static_cast<int64_t>(y.size()) != n) throw ShapeError("train_linear_svr: target count");
    if (n < 2) throw ArgumentError("train_linear_svr: need at least 2 samples");
    if (c <= 0 || epsilon < 0) throw ArgumentError("train_linear_svr: bad C or epsilon");

    const MatrixXd a = augment(x);
    VectorXd qdiag(n);
    for (int64_t i = 0; i < n; ++i) qdiag[i] = a.row(i).squaredNorm();
    VectorXd beta = VectorXd::Zero(n);
    VectorXd w = VectorXd::Zero(a.cols());
    for (int64_t sweep = 0; sweep < max_sweeps; ++sweep) {
        double max_delta = 0;
        for (int64_t i = 0; i < n; ++i) {
            if (qdiag[i] == 0.0) continue;
            const double grad = a.row(i).dot(w) - y[i];
            // piecewise-quadratic coordinate minimum of
            //   0.5 q d^2 + grad d + eps |beta + d|
            double next = 0.0;
            const double up = beta[i] - (grad + epsilon) / qdiag[i];
            const double dn = beta[i] - (grad - epsilon) / qdiag[i];
            if (up > 0) next = up;
            else if (dn < 0) next = dn;
            next = std::clamp(next, -c, c);
            const double delta = next - beta[i];
            if (delta != 0.0) {
                beta[i] = next;
                w += delta * a.row(i).transpose();
                max_delta = std::max(max_delta, std::abs(delta));
            }
        }
        if (max_delta < tol) break;
    }
    LinearModel m;
    m.w = w;
    return m;
}

double svr_objective(const MatrixXd& x, const std::vector<double>& y, double c, double epsilon,
                     const LinearModel& m) {
    double loss = 0;
    for (int64_t i = 0; i < x.rows(); ++i)
        loss += std::max(0.0, std::abs(m.decision(VectorXd(x.row(i))) - y[i]) - epsilon);
    return 0.5 * m.w.squaredNorm() + c * loss;
}

KnnResult knn_predict(const MatrixXd& train_x, const std::vector<double>& train_y,
                      const VectorXd& query, int64_t k, KnnTask task) {
    const int64_t n = train_x.rows();
    if (static_cast<int64_t>(train_y.size()) != n) throw ShapeError("knn_predict: label count");
    if (k < 1 || k > n)
        throw ArgumentError("knn_predict: k = " + std::to_string(k) + " outside [1, " +
                            std::to_string(n) + "]");
    if (train_x.cols() != query.size()) throw ShapeError("knn_predict: feature count mismatch");

    std::vector<std::pair<double, int64_t>> dist(n);
    for (int64_t i = 0; i < n; ++i)
        dist[i] = {(train_x.row(i).transpose() - query).squaredNorm(), i};
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());

    KnnResult res;
    if (task == KnnTask::kRegress) {
        double acc = 0;
        for (int64_t j = 0; j < k; ++j) acc += train_y[dist[j].second];
        res.prediction = acc / static_cast<double>(k);
        return res;
    }
    int64_t votes_pos = 0;
    for (int64_t j = 0; j < k; ++j)
        if (train_y[dist[j].second] == 1.0) ++votes_pos;
    res.positive_fraction = static_cast<double>(votes_pos) / static_cast<double>(k);
    if (2 * votes_pos == k) {
        res.prediction = train_y[dist[0].second];  // even vote: nearest neighbor decides
    } else {
        res.prediction = votes_pos * 2 > k ? 1.0 : 0.0;
    }
    return res;
}

}  // namespace voxrep::heads
