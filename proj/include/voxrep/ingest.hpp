#pragma once

#include <optional>
#include <string>
#include <vector>

#include "voxrep/tensor.hpp"

namespace voxrep::ingest {

// One subject's 4-d scan, [T, X, Y, Z] float32.
struct VolumeSeries {
    std::string subject_id;
    TensorF data;
    float tr_seconds = 1.0f;
    bool normalized = false;

    int64_t timepoints() const { return data.shape.at(0); }
    int64_t voxels() const { return data.numel() / timepoints(); }
};

enum class Split { kTrain, kVal, kTest };

std::string split_name(Split s);
Split split_from_name(const std::string& name);

struct SubjectRecord {
    std::string subject_id;
    std::string path;
    std::optional<float> age;
    std::optional<int> sex;        // {0, 1}
    std::optional<int> diagnosis;  // {0, 1}
    std::optional<int> fold;       // 0..4
    std::optional<Split> split;
};

// CSV-backed manifest with header `subject_id,path,age,sex,diagnosis,fold`.
// The fold column carries either a fold index or a split name; empty cells
// are missing labels. Relative paths resolve against the manifest directory.
struct DatasetManifest {
    std::vector<SubjectRecord> records;
    std::string base_dir;

    static DatasetManifest load(const std::string& csv_path);
    void save(const std::string& csv_path) const;
    // Rewrites record paths so they keep resolving when the manifest is saved
    // into new_dir.
    void rebase_paths(const std::string& new_dir);
    std::string resolve_path(const SubjectRecord& r) const;
    const SubjectRecord& find(const std::string& subject_id) const;
    void validate() const;
};

// NIfTI-backed volume io.
VolumeSeries load_nifti(const std::string& path, const std::string& subject_id = "");
void save_nifti(const std::string& path, const VolumeSeries& v);

// Piecewise aggregate approximation over time. Output T' = ceil(T / window);
// a trailing partial window averages its remaining points. tr scales by the
// window.
VolumeSeries paa(const VolumeSeries& v, int64_t window);

// Per-timepoint min-max rescale to [0,1], then values below 0.05 become 0.
// Constant timepoints collapse to all-zero with a warning.
VolumeSeries rescale_and_threshold(const VolumeSeries& v,
                                   std::vector<std::string>* warnings = nullptr);

constexpr float kIntensityThreshold = 0.05f;

}  // namespace voxrep::ingest
