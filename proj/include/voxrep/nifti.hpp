#pragma once

#include <string>

#include "voxrep/tensor.hpp"

namespace voxrep {

// A decoded single-file NIfTI-1 volume. Data is reordered to [T, X, Y, Z]
// row-major (time slowest); 3-d files come back with T = 1.
struct NiftiVolume {
    TensorF data;        // [T, X, Y, Z]
    float tr_seconds = 1.0f;
};

// Reads .nii or .nii.gz (little- or big-endian per header). Integer data is
// cast to float32; scl_slope/scl_inter applied when set. Throws FormatError
// on bad magic or unsupported layouts, DataError on NaN/Inf voxels.
NiftiVolume read_nifti(const std::string& path);

// Writes float32 single-file NIfTI-1 ("n+1"), gzipped when the path ends in
// .gz. Round-trips float32 data bit-exactly.
void write_nifti(const std::string& path, const TensorF& data, float tr_seconds);

}  // namespace voxrep
