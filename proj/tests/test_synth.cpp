#include <set>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "support/tmpdir.hpp"
#include "voxrep/metrics.hpp"
#include "voxrep/pca.hpp"
#include "voxrep/synth.hpp"

using namespace voxrep;
using namespace voxrep::synth;

namespace {

std::string slurp_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("single active factor at zero noise is rank one after centering") {
    SynthConfig cfg;
    cfg.grid = {12, 12, 12};
    cfg.timepoints = 12;
    cfg.noise_sigma = 0.0;
    cfg.sex_amp = 0.0;
    cfg.dx_amp = 0.0;
    cfg.seed = 5;
    auto maps = make_maps(cfg);
    auto [series, truth] = generate_subject({62.0, 0, 0}, cfg, maps, 0);

    const int64_t vox = series.voxels();
    // center rows; every centered row must be proportional to every other
    std::vector<double> mean(vox, 0.0);
    for (int64_t t = 0; t < 12; ++t)
        for (int64_t j = 0; j < vox; ++j) mean[j] += series.data.v[t * vox + j] / 12.0;
    std::vector<std::vector<double>> rows(12, std::vector<double>(vox));
    for (int64_t t = 0; t < 12; ++t)
        for (int64_t j = 0; j < vox; ++j) rows[t][j] = series.data.v[t * vox + j] - mean[j];

    auto dot = [&](const std::vector<double>& a, const std::vector<double>& b) {
        double acc = 0;
        for (int64_t j = 0; j < vox; ++j) acc += a[j] * b[j];
        return acc;
    };
    const double n0 = std::sqrt(dot(rows[0], rows[0]));
    REQUIRE(n0 > 0);
    for (int64_t t = 1; t < 12; ++t) {
        const double nt = std::sqrt(dot(rows[t], rows[t]));
        if (nt < 1e-12) continue;  // a row can sit at the temporal mean
        CHECK(std::abs(dot(rows[0], rows[t])) / (n0 * nt) ==
              doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("generation is deterministic and respects volume invariants") {
    SynthConfig cfg;
    cfg.grid = {10, 10, 10};
    cfg.timepoints = 9;
    cfg.noise_sigma = 0.02;
    cfg.seed = 11;
    auto maps = make_maps(cfg);
    auto [a, ta] = generate_subject({55.0, 1, 0}, cfg, maps, 3);
    auto [b, tb] = generate_subject({55.0, 1, 0}, cfg, maps, 3);
    CHECK(a.data.v == b.data.v);  // bitwise
    CHECK(ta.dx_phase == tb.dx_phase);

    CHECK(a.normalized);
    for (float v : a.data.v) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
        if (v != 0.0f) CHECK(v >= 0.05f);
    }
}

TEST_CASE("dx flips temporal autocorrelation but not voxel means") {
    SynthConfig cfg;
    cfg.grid = {12, 12, 12};
    cfg.timepoints = 30;
    cfg.noise_sigma = 0.0;
    cfg.seed = 13;
    auto maps = make_maps(cfg);
    auto [slow, truth_slow] = generate_subject({60.0, 0, 1}, cfg, maps, 4);
    auto [fast, truth_fast] = generate_subject({60.0, 0, 0}, cfg, maps, 4);

    const int64_t vox = slow.voxels();
    for (int64_t j = 0; j < vox; ++j) {
        double ms = 0, mf = 0;
        for (int64_t t = 0; t < 30; ++t) {
            ms += slow.data.v[t * vox + j];
            mf += fast.data.v[t * vox + j];
        }
        CHECK(std::abs(ms - mf) / 30.0 < 1e-6);
    }

    CHECK(truth_slow.dx_lag1_autocorr > 0.9);
    CHECK(truth_fast.dx_lag1_autocorr < -0.3);
    CHECK(truth_slow.dx_lag1_autocorr - truth_fast.dx_lag1_autocorr > 1.0);
}

TEST_CASE("cohort generation: balance, uniqueness, byte-for-byte reproducibility") {
    testsupport::TmpDir tmp("synth");
    SynthConfig cfg;
    cfg.grid = {10, 10, 10};
    cfg.timepoints = 8;
    cfg.n_subjects = 20;
    cfg.seed = 17;

    auto manifest = generate_cohort(tmp.file("a"), cfg);
    REQUIRE(manifest.records.size() == 20);
    std::set<std::string> ids;
    int sex1 = 0, dx1 = 0;
    for (const auto& r : manifest.records) {
        ids.insert(r.subject_id);
        REQUIRE(r.age.has_value());
        CHECK(*r.age >= 45.0f);
        CHECK(*r.age <= 80.0f);
        sex1 += *r.sex;
        dx1 += *r.diagnosis;
    }
    CHECK(ids.size() == 20);
    CHECK(sex1 == 10);
    CHECK(dx1 == 10);

    generate_cohort(tmp.file("b"), cfg);
    for (const char* name :
         {"sub-0000.nii", "sub-0007.nii", "manifest.csv", "ground_truth.json",
          "map_sex_expected_diff.vxt"}) {
        const auto pa = tmp.file("a") + "/" + name;
        const auto pb = tmp.file("b") + "/" + name;
        CHECK(slurp_file(pa) == slurp_file(pb));
    }
}

TEST_CASE("zero-noise cohort: first PCA component matches the dominant map") {
    testsupport::TmpDir tmp("synth_pca");
    SynthConfig cfg;
    cfg.grid = {10, 10, 10};
    cfg.timepoints = 10;
    cfg.n_subjects = 6;
    cfg.noise_sigma = 0.0;
    cfg.sex_amp = 0.0;  // single active factor
    cfg.dx_amp = 0.0;
    cfg.seed = 19;
    auto manifest = generate_cohort(tmp.file("c"), cfg);

    Eigen::MatrixXd rows(6 * 10, 1000);
    int64_t r = 0;
    for (const auto& rec : manifest.records) {
        auto v = ingest::load_nifti(manifest.resolve_path(rec), rec.subject_id);
        auto samples = pca::as_sample_rows(v);
        rows.middleRows(r, 10) = samples;
        r += 10;
    }
    pca::IncrementalPca model(1);
    model.partial_fit(rows);

    auto map_age = read_vxt(tmp.file("c") + "/map_age.vxt");
    std::vector<double> comp(1000), map_flat(1000);
    for (int64_t i = 0; i < 1000; ++i) {
        comp[i] = model.components()(0, i);
        map_flat[i] = map_age.v[i];
    }
    CHECK(std::abs(metrics::pearson(comp, map_flat)) >= 0.99);
}
