#include "voxrep/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace voxrep::metrics {

namespace {

void check_lengths(size_t a, size_t b, const char* op) {
    if (a == 0) throw ShapeError(std::string(op) + ": empty input");
    if (a != b)
        throw ShapeError(std::string(op) + ": length mismatch " + std::to_string(a) + " vs " +
                         std::to_string(b));
}

double mean_of(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

double mae(const std::vector<double>& pred, const std::vector<double>& truth) {
    check_lengths(pred.size(), truth.size(), "mae");
    double acc = 0;
    for (size_t i = 0; i < pred.size(); ++i) acc += std::abs(pred[i] - truth[i]);
    return acc / static_cast<double>(pred.size());
}

double r2(const std::vector<double>& pred, const std::vector<double>& truth) {
    check_lengths(pred.size(), truth.size(), "r2");
    const double mu = mean_of(truth);
    double ss_res = 0, ss_tot = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        ss_res += (truth[i] - pred[i]) * (truth[i] - pred[i]);
        ss_tot += (truth[i] - mu) * (truth[i] - mu);
    }
    if (ss_tot == 0) throw MetricError("r2: truth has zero variance");
    return 1.0 - ss_res / ss_tot;
}

double pearson(const std::vector<double>& pred, const std::vector<double>& truth) {
    check_lengths(pred.size(), truth.size(), "pearson");
    const double mp = mean_of(pred), mt = mean_of(truth);
    double cov = 0, vp = 0, vt = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        const double dp = pred[i] - mp, dt = truth[i] - mt;
        cov += dp * dt;
        vp += dp * dp;
        vt += dt * dt;
    }
    if (vp == 0 || vt == 0) throw MetricError("pearson: zero variance input");
    return cov / std::sqrt(vp * vt);
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_lengths(scores.size(), labels.size(), "roc_auc");
    int64_t n_pos = 0, n_neg = 0;
    for (int y : labels) {
        if (y == 1) ++n_pos;
        else if (y == 0) ++n_neg;
        else throw ArgumentError("roc_auc: labels must be 0 or 1");
    }
    if (n_pos == 0 || n_neg == 0)
        throw MetricError("roc_auc: needs both classes present");

    // Midranks over ascending scores; AUC = (R_pos - npos(npos+1)/2) / (npos*nneg).
    const size_t n = scores.size();
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::sort(idx.begin(), idx.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    std::vector<double> rank(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
        const double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) rank[idx[k]] = mid;
        i = j + 1;
    }
    double rank_sum_pos = 0;
    for (size_t k = 0; k < n; ++k)
        if (labels[k] == 1) rank_sum_pos += rank[k];
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (rank_sum_pos - np * (np + 1) / 2.0) / (np * nn);
}

}  // namespace voxrep::metrics
