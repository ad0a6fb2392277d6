#pragma once

#include <array>
#include <string>
#include <vector>

#include "voxrep/ingest.hpp"

namespace voxrep::synth {

// Cohort generator with known factors:
//   - an "age" blob whose amplitude is affine in the age covariate,
//   - two disjoint blobs gated by the binary "sex" covariate,
//   - a "diagnosis" blob driven by a slow vs fast sinusoid: identical voxel
//     means and variances per group, only the temporal autocorrelation
//     differs, so only temporally-aware heads can read it.
// A bright anchor at the mask center pins the per-timepoint maximum so the
// min-max rescale stays a fixed linear map at zero noise; factor maps are
// zeroed inside the anchor core.
struct SynthConfig {
    std::array<int64_t, 3> grid = {16, 16, 16};
    int64_t timepoints = 30;
    int64_t n_subjects = 60;
    double noise_sigma = 0.01;
    double age_amp_base = 0.10;
    double age_amp_gain = 0.15;
    double age_flutter = 0.2;  // relative temporal oscillation of the age blob
    double sex_amp = 0.16;
    double dx_amp = 0.10;
    int64_t dx_freq_slow = 1;  // cycles per series for dx = 1
    int64_t dx_freq_fast = 0;  // 0 = auto (timepoints / 3) for dx = 0
    uint64_t seed = 0;

    int64_t dx_fast() const { return dx_freq_fast > 0 ? dx_freq_fast : timepoints / 3; }
    void validate() const;
};

struct Covariates {
    double age_like = 60.0;  // years, [45, 80]
    int sex_like = 0;
    int dx_like = 0;
};

struct SubjectTruth {
    std::string subject_id;
    Covariates cov;
    double age_phase = 0, dx_phase = 0;
    std::vector<double> dx_course;
    double dx_lag1_autocorr = 0;
};

struct FactorMaps {
    TensorF baseline;   // includes mask floor and anchor
    TensorF map_age, map_sex_a, map_sex_b, map_dx;
    TensorF sex_expected_diff;  // expected sex=1 minus sex=0 mean volume
};

FactorMaps make_maps(const SynthConfig& cfg);

// Deterministic under (cfg.seed, subject_index). The returned series has been
// rescaled and thresholded.
std::pair<ingest::VolumeSeries, SubjectTruth> generate_subject(const Covariates& cov,
                                                               const SynthConfig& cfg,
                                                               const FactorMaps& maps,
                                                               int64_t subject_index);

// Writes <out_dir>/sub-NNNN.nii volumes, manifest.csv, ground_truth.json and
// the factor maps as VXT1 tensors. Balanced sex/dx within one subject; ages
// uniform over [45, 80].
ingest::DatasetManifest generate_cohort(const std::string& out_dir, const SynthConfig& cfg);

constexpr double kAgeMin = 45.0;
constexpr double kAgeMax = 80.0;

}  // namespace voxrep::synth
