#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "voxrep/tensor.hpp"

namespace voxrep::heads {

enum class FeatureMode { kConcat, kMean };

std::string feature_mode_name(FeatureMode m);

// Subject-by-feature design matrix. Concat mode lays codes out time-major
// (t0's L dims first); mean mode averages over time.
struct FeatureMatrix {
    Eigen::MatrixXd x;
    FeatureMode mode = FeatureMode::kMean;
    bool standardized = false;
    Eigen::VectorXd col_mean, col_std;  // fitted on training rows only
};

// latents: one [T, L] matrix per subject, shared T and L.
FeatureMatrix build_features(const std::vector<TensorF>& latents, FeatureMode mode);

// Fits per-column stats on train_rows and standardizes every row in place.
// Zero-variance columns map to all-zero with a warning.
void standardize(FeatureMatrix& f, const std::vector<int64_t>& train_rows,
                 std::vector<std::string>* warnings = nullptr);

// Linear decision/regression function on augmented inputs [x; 1]; the bias is
// the trailing weight (regularized, liblinear-style).
struct LinearModel {
    Eigen::VectorXd w;
    double decision(const Eigen::VectorXd& x) const;
    std::vector<double> decision_rows(const Eigen::MatrixXd& rows) const;
};

// L2-regularized hinge-loss SVM (dual coordinate descent, deterministic
// cyclic sweeps). y in {0, 1}; both classes required.
LinearModel train_linear_svm(const Eigen::MatrixXd& x, const std::vector<int>& y, double c = 1.0,
                             int64_t max_sweeps = 4000, double tol = 1e-10);
double svm_objective(const Eigen::MatrixXd& x, const std::vector<int>& y, double c,
                     const LinearModel& m);

// L2-regularized epsilon-insensitive SVR (dual coordinate descent).
LinearModel train_linear_svr(const Eigen::MatrixXd& x, const std::vector<double>& y,
                             double c = 1.0, double epsilon = 0.1, int64_t max_sweeps = 4000,
                             double tol = 1e-10);
double svr_objective(const Eigen::MatrixXd& x, const std::vector<double>& y, double c,
                     double epsilon, const LinearModel& m);

enum class KnnTask { kClassify, kRegress };

struct KnnResult {
    double prediction = 0;         // majority label or neighbor mean
    double positive_fraction = 0;  // classification score for ROC-AUC
};

// Euclidean metric; even votes fall back to the single nearest neighbor.
KnnResult knn_predict(const Eigen::MatrixXd& train_x, const std::vector<double>& train_y,
                      const Eigen::VectorXd& query, int64_t k, KnnTask task);

}  // namespace voxrep::heads
