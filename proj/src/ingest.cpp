#include "voxrep/ingest.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "voxrep/nifti.hpp"

namespace voxrep::ingest {

namespace fs = std::filesystem;

std::string split_name(Split s) {
    switch (s) {
        case Split::kTrain: return "train";
        case Split::kVal: return "val";
        case Split::kTest: return "test";
    }
    throw InternalError("split_name: bad enum");
}

Split split_from_name(const std::string& name) {
    if (name == "train") return Split::kTrain;
    if (name == "val") return Split::kVal;
    if (name == "test") return Split::kTest;
    throw FormatError("manifest: unknown split name '" + name + "'");
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    return cells;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

int parse_binary(const std::string& cell, const char* col, const std::string& id) {
    if (cell == "0") return 0;
    if (cell == "1") return 1;
    throw FormatError("manifest: " + std::string(col) + " for subject " + id +
                      " must be 0 or 1, got '" + cell + "'");
}

}  // namespace

DatasetManifest DatasetManifest::load(const std::string& csv_path) {
    std::ifstream is(csv_path);
    if (!is) throw IoError("manifest: cannot open " + csv_path);
    DatasetManifest m;
    m.base_dir = fs::path(csv_path).parent_path().string();

    std::string line;
    if (!std::getline(is, line)) throw FormatError("manifest: empty file " + csv_path);
    if (trim(line) != "subject_id,path,age,sex,diagnosis,fold")
        throw FormatError("manifest: bad header row in " + csv_path +
                          " (expected subject_id,path,age,sex,diagnosis,fold)");

    while (std::getline(is, line)) {
        if (trim(line).empty()) continue;
        auto cells = split_csv_line(line);
        if (cells.size() != 6)
            throw FormatError("manifest: expected 6 cells, got " +
                              std::to_string(cells.size()) + " in line: " + line);
        SubjectRecord r;
        r.subject_id = trim(cells[0]);
        r.path = trim(cells[1]);
        if (r.subject_id.empty()) throw FormatError("manifest: empty subject_id in " + csv_path);
        const std::string age = trim(cells[2]), sex = trim(cells[3]), dx = trim(cells[4]),
                          fold = trim(cells[5]);
        if (!age.empty()) r.age = std::stof(age);
        if (!sex.empty()) r.sex = parse_binary(sex, "sex", r.subject_id);
        if (!dx.empty()) r.diagnosis = parse_binary(dx, "diagnosis", r.subject_id);
        if (!fold.empty()) {
            if (fold == "train" || fold == "val" || fold == "test") {
                r.split = split_from_name(fold);
            } else {
                const int f = std::stoi(fold);
                if (f < 0 || f > 4)
                    throw FormatError("manifest: fold index " + fold + " for subject " +
                                      r.subject_id + " outside [0,4]");
                r.fold = f;
            }
        }
        m.records.push_back(std::move(r));
    }
    m.validate();
    return m;
}

void DatasetManifest::validate() const {
    std::unordered_set<std::string> seen;
    for (const auto& r : records)
        if (!seen.insert(r.subject_id).second)
            throw FormatError("manifest: duplicate subject_id " + r.subject_id);
}

void DatasetManifest::save(const std::string& csv_path) const {
    std::ofstream os(csv_path);
    if (!os) throw IoError("manifest: cannot write " + csv_path);
    os << "subject_id,path,age,sex,diagnosis,fold\n";
    for (const auto& r : records) {
        os << r.subject_id << ',' << r.path << ',';
        if (r.age) os << *r.age;
        os << ',';
        if (r.sex) os << *r.sex;
        os << ',';
        if (r.diagnosis) os << *r.diagnosis;
        os << ',';
        if (r.fold) os << *r.fold;
        else if (r.split) os << split_name(*r.split);
        os << '\n';
    }
    if (!os) throw IoError("manifest: write failed for " + csv_path);
}

void DatasetManifest::rebase_paths(const std::string& new_dir) {
    for (auto& r : records) {
        const fs::path abs = fs::absolute(resolve_path(r)).lexically_normal();
        const fs::path rel = abs.lexically_proximate(fs::absolute(new_dir).lexically_normal());
        r.path = rel.string();
    }
    base_dir = new_dir;
}

std::string DatasetManifest::resolve_path(const SubjectRecord& r) const {
    fs::path p(r.path);
    if (p.is_absolute() || base_dir.empty()) return p.string();
    return (fs::path(base_dir) / p).string();
}

const SubjectRecord& DatasetManifest::find(const std::string& subject_id) const {
    for (const auto& r : records)
        if (r.subject_id == subject_id) return r;
    throw ArgumentError("manifest: no subject " + subject_id);
}

VolumeSeries load_nifti(const std::string& path, const std::string& subject_id) {
    NiftiVolume nv = read_nifti(path);
    VolumeSeries v;
    v.subject_id = subject_id.empty() ? fs::path(path).stem().string() : subject_id;
    v.data = std::move(nv.data);
    v.tr_seconds = nv.tr_seconds;
    v.normalized = false;
    return v;
}

void save_nifti(const std::string& path, const VolumeSeries& v) {
    write_nifti(path, v.data, v.tr_seconds);
}

VolumeSeries paa(const VolumeSeries& v, int64_t window) {
    const int64_t t_in = v.timepoints();
    if (window < 1) throw ArgumentError("paa: window must be >= 1");
    if (window > t_in)
        throw ArgumentError("paa: window " + std::to_string(window) + " exceeds T = " +
                            std::to_string(t_in));
    const int64_t t_out = (t_in + window - 1) / window;
    const int64_t voxels = v.voxels();

    VolumeSeries out;
    out.subject_id = v.subject_id;
    out.tr_seconds = v.tr_seconds * static_cast<float>(window);
    out.normalized = v.normalized;
    Shape shape = v.data.shape;
    shape[0] = t_out;
    out.data = TensorF(shape);

    // Mean in double, ascending time order; the test oracle mirrors this.
    for (int64_t k = 0; k < t_out; ++k) {
        const int64_t t0 = k * window;
        const int64_t t1 = std::min(t_in, t0 + window);
        for (int64_t j = 0; j < voxels; ++j) {
            double acc = 0.0;
            for (int64_t t = t0; t < t1; ++t) acc += v.data.v[t * voxels + j];
            out.data.v[k * voxels + j] = static_cast<float>(acc / static_cast<double>(t1 - t0));
        }
    }
    return out;
}

VolumeSeries rescale_and_threshold(const VolumeSeries& v, std::vector<std::string>* warnings) {
    const int64_t t_n = v.timepoints();
    const int64_t voxels = v.voxels();
    VolumeSeries out = v;
    for (int64_t t = 0; t < t_n; ++t) {
        float* p = out.data.v.data() + t * voxels;
        float lo = p[0], hi = p[0];
        for (int64_t j = 1; j < voxels; ++j) {
            lo = std::min(lo, p[j]);
            hi = std::max(hi, p[j]);
        }
        if (hi == lo) {
            std::fill(p, p + voxels, 0.0f);
            if (warnings)
                warnings->push_back("rescale_and_threshold: constant volume at timepoint " +
                                    std::to_string(t) + " of subject " + v.subject_id +
                                    "; emitted zeros");
            continue;
        }
        const float inv = 1.0f / (hi - lo);
        for (int64_t j = 0; j < voxels; ++j) {
            float x = (p[j] - lo) * inv;
            p[j] = x < kIntensityThreshold ? 0.0f : x;
        }
    }
    out.normalized = true;
    return out;
}

}  // namespace voxrep::ingest
