#pragma once

#include <Eigen/Core>
#include <string>

#include "voxrep/ingest.hpp"

namespace voxrep::pca {

// Streaming PCA via the mean-corrected incremental SVD merge, with whitened
// projection. Memory stays O((k + B) * V) regardless of how many samples
// stream through.
class IncrementalPca {
public:
    explicit IncrementalPca(int64_t n_components);

    // batch is [B, V], one flattened volume per row. The first batch must
    // contain at least n_components rows; later batches may be any size >= 1.
    void partial_fit(const Eigen::MatrixXd& batch);

    bool fitted() const { return n_seen_ > 0; }
    int64_t n_components() const { return k_; }
    int64_t n_features() const { return fitted() ? mean_.size() : 0; }
    int64_t n_samples_seen() const { return n_seen_; }
    const Eigen::VectorXd& mean() const { return mean_; }
    const Eigen::MatrixXd& components() const { return components_; }  // k x V
    const Eigen::VectorXd& singular_values() const { return singular_values_; }
    Eigen::VectorXd explained_variance() const;

    // y_i = c_i . (x - mean), scaled so each coordinate has unit sample
    // variance over the data seen so far.
    Eigen::VectorXd transform_whitened(const Eigen::VectorXd& x) const;
    Eigen::MatrixXd transform_whitened(const Eigen::MatrixXd& rows) const;

    // Projection back to input space from unwhitened coordinates against the
    // top k' components; used for reconstruction-error checks.
    Eigen::VectorXd reconstruct(const Eigen::VectorXd& x, int64_t k_use) const;

    void save(const std::string& path) const;
    static IncrementalPca load(const std::string& path);

private:
    int64_t k_;
    int64_t n_seen_ = 0;
    Eigen::VectorXd mean_;
    Eigen::MatrixXd components_;
    Eigen::VectorXd singular_values_;

    void check_fitted() const;
    void fix_signs();
};

// Whitened code per timepoint, averaged over time.
Eigen::VectorXd encode_subject(const IncrementalPca& model, const ingest::VolumeSeries& v);

// Flattens the series into [T, V] rows for fitting.
Eigen::MatrixXd as_sample_rows(const ingest::VolumeSeries& v);

}  // namespace voxrep::pca
