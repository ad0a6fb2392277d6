#pragma once

#include <optional>
#include <string>
#include <vector>

#include "voxrep/common.hpp"

namespace voxrep::metrics {

// Undefined metrics throw MetricError instead of returning NaN.

double mae(const std::vector<double>& pred, const std::vector<double>& truth);

// 1 - SS_res / SS_tot. Requires truth variance > 0.
double r2(const std::vector<double>& pred, const std::vector<double>& truth);

// Product-moment correlation. Requires both variances > 0.
double pearson(const std::vector<double>& pred, const std::vector<double>& truth);

// Rank-statistic ROC-AUC with midrank tie handling:
//   P(score_pos > score_neg) + 0.5 * P(tie).
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct MetricReport {
    std::string task;
    std::optional<double> mae, r2, pearson, roc_auc;
    int64_t n = 0;
};

}  // namespace voxrep::metrics
