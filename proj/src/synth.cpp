#include "voxrep/synth.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace voxrep::synth {

namespace fs = std::filesystem;

void SynthConfig::validate() const {
    for (int64_t d : grid)
        if (d < 8) throw ArgumentError("SynthConfig: grid dims must be >= 8 so blobs fit");
    if (timepoints < 4) throw ArgumentError("SynthConfig: need at least 4 timepoints");
    if (n_subjects < 4) throw ArgumentError("SynthConfig: need at least 4 subjects");
    if (noise_sigma < 0) throw ArgumentError("SynthConfig: noise_sigma must be >= 0");
    if (dx_fast() <= dx_freq_slow)
        throw ArgumentError("SynthConfig: fast dx frequency must exceed the slow one");
}

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr float kBaselineLevel = 0.35f;
constexpr float kAnchorAmp = 0.65f;

void add_blob(TensorF& vol, std::array<double, 3> center_frac, double sigma_frac,
              double amplitude) {
    const int64_t nx = vol.shape[0], ny = vol.shape[1], nz = vol.shape[2];
    const double cx = center_frac[0] * nx, cy = center_frac[1] * ny, cz = center_frac[2] * nz;
    const double sigma = sigma_frac * std::min({nx, ny, nz});
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for (int64_t x = 0; x < nx; ++x)
        for (int64_t y = 0; y < ny; ++y)
            for (int64_t z = 0; z < nz; ++z) {
                const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy) + (z - cz) * (z - cz);
                vol.v[(x * ny + y) * nz + z] += static_cast<float>(amplitude * std::exp(-d2 * inv2s2));
            }
}

TensorF sphere_mask(std::array<int64_t, 3> grid) {
    TensorF m({grid[0], grid[1], grid[2]});
    const double cx = grid[0] / 2.0 - 0.5, cy = grid[1] / 2.0 - 0.5, cz = grid[2] / 2.0 - 0.5;
    const double r = 0.45 * std::min({grid[0], grid[1], grid[2]});
    for (int64_t x = 0; x < grid[0]; ++x)
        for (int64_t y = 0; y < grid[1]; ++y)
            for (int64_t z = 0; z < grid[2]; ++z) {
                const double d2 =
                    (x - cx) * (x - cx) + (y - cy) * (y - cy) + (z - cz) * (z - cz);
                m.v[(x * grid[1] + y) * grid[2] + z] = d2 <= r * r ? 1.0f : 0.0f;
            }
    return m;
}

}  // namespace

FactorMaps make_maps(const SynthConfig& cfg) {
    cfg.validate();
    FactorMaps maps;
    const auto g = cfg.grid;
    TensorF mask = sphere_mask(g);

    maps.baseline = TensorF({g[0], g[1], g[2]});
    for (int64_t i = 0; i < mask.numel(); ++i) maps.baseline.v[i] = kBaselineLevel * mask.v[i];
    TensorF anchor({g[0], g[1], g[2]});
    add_blob(anchor, {0.5, 0.5, 0.5}, 0.075, kAnchorAmp);
    for (int64_t i = 0; i < anchor.numel(); ++i) maps.baseline.v[i] += anchor.v[i] * mask.v[i];

    maps.map_age = TensorF({g[0], g[1], g[2]});
    add_blob(maps.map_age, {0.5, 0.78, 0.5}, 0.14, 1.0);
    maps.map_sex_a = TensorF({g[0], g[1], g[2]});
    add_blob(maps.map_sex_a, {0.28, 0.30, 0.35}, 0.14, 1.0);
    maps.map_sex_b = TensorF({g[0], g[1], g[2]});
    add_blob(maps.map_sex_b, {0.72, 0.30, 0.65}, 0.14, 1.0);
    maps.map_dx = TensorF({g[0], g[1], g[2]});
    add_blob(maps.map_dx, {0.30, 0.65, 0.70}, 0.14, 1.0);

    // Confine factors to the mask and keep the anchor core exclusive so the
    // per-timepoint maximum never moves.
    for (int64_t i = 0; i < mask.numel(); ++i) {
        const float keep = mask.v[i] * (anchor.v[i] > 0.01f * kAnchorAmp ? 0.0f : 1.0f);
        maps.map_age.v[i] *= keep;
        maps.map_sex_a.v[i] *= keep;
        maps.map_sex_b.v[i] *= keep;
        maps.map_dx.v[i] *= keep;
    }

    maps.sex_expected_diff = TensorF({g[0], g[1], g[2]});
    for (int64_t i = 0; i < mask.numel(); ++i)
        maps.sex_expected_diff.v[i] =
            static_cast<float>(cfg.sex_amp) * (maps.map_sex_a.v[i] - maps.map_sex_b.v[i]);
    return maps;
}

std::pair<ingest::VolumeSeries, SubjectTruth> generate_subject(const Covariates& cov,
                                                               const SynthConfig& cfg,
                                                               const FactorMaps& maps,
                                                               int64_t subject_index) {
    if (cov.age_like < kAgeMin || cov.age_like > kAgeMax)
        throw ArgumentError("generate_subject: age outside [45, 80]");
    if ((cov.sex_like != 0 && cov.sex_like != 1) || (cov.dx_like != 0 && cov.dx_like != 1))
        throw ArgumentError("generate_subject: binary covariates must be 0/1");

    Rng rng(Rng::mix(cfg.seed, 0x5EED0000 + static_cast<uint64_t>(subject_index)));
    const auto g = cfg.grid;
    const int64_t vox = g[0] * g[1] * g[2];
    const int64_t t_n = cfg.timepoints;

    SubjectTruth truth;
    truth.cov = cov;
    truth.age_phase = rng.uniform(0.0, kTwoPi);
    truth.dx_phase = rng.uniform(0.0, kTwoPi);

    const double age_norm = (cov.age_like - kAgeMin) / (kAgeMax - kAgeMin);
    const double age_amp = cfg.age_amp_base + cfg.age_amp_gain * age_norm;
    const TensorF& sex_map = cov.sex_like == 1 ? maps.map_sex_a : maps.map_sex_b;
    const int64_t dx_freq = cov.dx_like == 1 ? cfg.dx_freq_slow : cfg.dx_fast();

    ingest::VolumeSeries series;
    series.subject_id = "sub-" + std::to_string(subject_index);
    series.tr_seconds = 2.0f;
    series.data = TensorF({t_n, g[0], g[1], g[2]});

    truth.dx_course.resize(t_n);
    for (int64_t t = 0; t < t_n; ++t) {
        // integer frequencies: temporal means are exactly zero over the series
        const double u_age =
            1.0 + cfg.age_flutter * std::sin(kTwoPi * 2.0 * t / t_n + truth.age_phase);
        const double s_dx = std::sin(kTwoPi * dx_freq * t / t_n + truth.dx_phase);
        truth.dx_course[t] = s_dx;
        float* dst = series.data.v.data() + t * vox;
        for (int64_t i = 0; i < vox; ++i) {
            double v = maps.baseline.v[i];
            v += age_amp * u_age * maps.map_age.v[i];
            v += cfg.sex_amp * sex_map.v[i];
            v += cfg.dx_amp * s_dx * maps.map_dx.v[i];
            if (cfg.noise_sigma > 0) v += cfg.noise_sigma * rng.normal();
            dst[i] = static_cast<float>(v);
        }
    }

    double num = 0, den = 0, mean = 0;
    for (double s : truth.dx_course) mean += s;
    mean /= t_n;
    for (int64_t t = 0; t + 1 < t_n; ++t)
        num += (truth.dx_course[t] - mean) * (truth.dx_course[t + 1] - mean);
    for (int64_t t = 0; t < t_n; ++t)
        den += (truth.dx_course[t] - mean) * (truth.dx_course[t] - mean);
    truth.dx_lag1_autocorr = den > 0 ? num * t_n / (den * (t_n - 1)) : 0.0;

    auto normalized = ingest::rescale_and_threshold(series);
    return {std::move(normalized), std::move(truth)};
}

ingest::DatasetManifest generate_cohort(const std::string& out_dir, const SynthConfig& cfg) {
    cfg.validate();
    fs::create_directories(out_dir);
    const FactorMaps maps = make_maps(cfg);
    const int64_t n = cfg.n_subjects;

    // Balanced binary covariates (within one subject), shuffled independently.
    Rng assign_rng(Rng::mix(cfg.seed, 0xA551));
    std::vector<int> sex(n), dx(n);
    for (int64_t i = 0; i < n; ++i) {
        sex[i] = i % 2;
        dx[i] = static_cast<int>((i / 2) % 2);
    }
    assign_rng.shuffle(sex);
    assign_rng.shuffle(dx);

    ingest::DatasetManifest manifest;
    manifest.base_dir = out_dir;
    nlohmann::json truth_json;
    truth_json["config"] = {{"grid", cfg.grid},
                            {"timepoints", cfg.timepoints},
                            {"n_subjects", cfg.n_subjects},
                            {"noise_sigma", cfg.noise_sigma},
                            {"age_amp_base", cfg.age_amp_base},
                            {"age_amp_gain", cfg.age_amp_gain},
                            {"age_flutter", cfg.age_flutter},
                            {"sex_amp", cfg.sex_amp},
                            {"dx_amp", cfg.dx_amp},
                            {"dx_freq_slow", cfg.dx_freq_slow},
                            {"dx_freq_fast", cfg.dx_fast()},
                            {"seed", cfg.seed}};
    truth_json["maps"] = {{"baseline", "map_baseline.vxt"},
                          {"age", "map_age.vxt"},
                          {"sex_a", "map_sex_a.vxt"},
                          {"sex_b", "map_sex_b.vxt"},
                          {"dx", "map_dx.vxt"},
                          {"sex_expected_diff", "map_sex_expected_diff.vxt"}};
    nlohmann::json subjects = nlohmann::json::array();

    for (int64_t i = 0; i < n; ++i) {
        Rng cov_rng(Rng::mix(cfg.seed, 0xA6E0000 + static_cast<uint64_t>(i)));
        Covariates cov;
        cov.age_like = cov_rng.uniform(kAgeMin, kAgeMax);
        cov.sex_like = sex[i];
        cov.dx_like = dx[i];

        auto [series, truth] = generate_subject(cov, cfg, maps, i);
        char name[32];
        std::snprintf(name, sizeof(name), "sub-%04d.nii", static_cast<int>(i));
        ingest::save_nifti((fs::path(out_dir) / name).string(), series);

        ingest::SubjectRecord rec;
        rec.subject_id = series.subject_id;
        rec.path = name;
        rec.age = static_cast<float>(cov.age_like);
        rec.sex = cov.sex_like;
        rec.diagnosis = cov.dx_like;
        manifest.records.push_back(rec);

        subjects.push_back({{"subject_id", series.subject_id},
                            {"file", name},
                            {"age_like", cov.age_like},
                            {"sex_like", cov.sex_like},
                            {"dx_like", cov.dx_like},
                            {"age_phase", truth.age_phase},
                            {"dx_phase", truth.dx_phase},
                            {"dx_lag1_autocorr", truth.dx_lag1_autocorr}});
    }
    truth_json["subjects"] = subjects;

    write_vxt((fs::path(out_dir) / "map_baseline.vxt").string(), maps.baseline);
    write_vxt((fs::path(out_dir) / "map_age.vxt").string(), maps.map_age);
    write_vxt((fs::path(out_dir) / "map_sex_a.vxt").string(), maps.map_sex_a);
    write_vxt((fs::path(out_dir) / "map_sex_b.vxt").string(), maps.map_sex_b);
    write_vxt((fs::path(out_dir) / "map_dx.vxt").string(), maps.map_dx);
    write_vxt((fs::path(out_dir) / "map_sex_expected_diff.vxt").string(),
              maps.sex_expected_diff);
    {
        std::ofstream os(fs::path(out_dir) / "ground_truth.json");
        if (!os) throw IoError("generate_cohort: cannot write ground_truth.json");
        os << truth_json.dump(2) << '\n';
    }
    manifest.save((fs::path(out_dir) / "manifest.csv").string());
    manifest.validate();
    return manifest;
}

}  // namespace voxrep::synth
