#include "voxrep/workflows.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "voxrep/heads.hpp"
#include "voxrep/lstm.hpp"
#include "voxrep/nifti.hpp"
#include "voxrep/pca.hpp"
#include "voxrep/synth.hpp"
#include "voxrep/vae.hpp"

namespace voxrep::flow {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string strip_quotes(const std::string& s) {
    if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') ||
                          (s.front() == '\'' && s.back() == '\'')))
        return s.substr(1, s.size() - 2);
    return s;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

Config Config::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("config: cannot open " + path);
    Config cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string text = trim(line);
        if (text.empty() || text[0] == '#') continue;
        const size_t eq = text.find('=');
        if (eq == std::string::npos)
            throw FormatError("config: line " + std::to_string(lineno) +
                              " is not `key = value`: " + text);
        const std::string key = trim(text.substr(0, eq));
        const std::string value = strip_quotes(trim(text.substr(eq + 1)));
        if (key.empty())
            throw FormatError("config: empty key on line " + std::to_string(lineno));
        cfg.kv_[key] = value;
    }
    return cfg;
}

std::string Config::get_str(const std::string& key, const std::string& fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
}

int64_t Config::get_i64(const std::string& key, int64_t fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : std::stoll(it->second);
}

uint64_t Config::get_u64(const std::string& key, uint64_t fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : std::stoull(it->second);
}

double Config::get_f64(const std::string& key, double fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : std::stod(it->second);
}

bool Config::get_bool(const std::string& key, bool fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw FormatError("config: boolean key " + key + " has value " + it->second);
}

std::vector<int64_t> Config::get_i64_list(const std::string& key,
                                          std::vector<int64_t> fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    std::vector<int64_t> out;
    for (const auto& s : split_list(it->second)) out.push_back(std::stoll(s));
    return out;
}

std::vector<double> Config::get_f64_list(const std::string& key,
                                         std::vector<double> fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    std::vector<double> out;
    for (const auto& s : split_list(it->second)) out.push_back(std::stod(s));
    return out;
}

std::vector<std::string> Config::get_str_list(const std::string& key,
                                              std::vector<std::string> fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    return split_list(it->second);
}

std::string Config::canonical() const {
    std::string out;
    for (const auto& [k, v] : kv_) out += k + " = " + v + "\n";
    return out;
}

uint64_t fnv1a64(const void* data, size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = 14695981039346656037ULL;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

std::string Config::hash_hex() const {
    const std::string text = canonical();
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(text.data(), text.size())));
    return buf;
}

std::string file_hash_hex(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("file_hash_hex: cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(bytes.data(), bytes.size())));
    return buf;
}

// ---------------------------------------------------------------------------
// RunReport
// ---------------------------------------------------------------------------

namespace {

json cell_to_json(const Cell& c) {
    json j{{"representation", c.representation}, {"latent_dim", c.latent_dim},
           {"head", c.head},                     {"mode", c.mode},
           {"fold", c.fold},                     {"task", c.task},
           {"status", c.status},                 {"n", c.n_test}};
    if (!c.reason.empty()) j["reason"] = c.reason;
    json m;
    if (c.report.mae) m["mae"] = *c.report.mae;
    if (c.report.r2) m["r2"] = *c.report.r2;
    if (c.report.pearson) m["pearson"] = *c.report.pearson;
    if (c.report.roc_auc) m["roc_auc"] = *c.report.roc_auc;
    j["metrics"] = m;
    return j;
}

Cell cell_from_json(const json& j) {
    Cell c;
    c.representation = j.at("representation").get<std::string>();
    c.latent_dim = j.at("latent_dim").get<int64_t>();
    c.head = j.at("head").get<std::string>();
    c.mode = j.at("mode").get<std::string>();
    c.fold = j.at("fold").get<int64_t>();
    c.task = j.at("task").get<std::string>();
    c.status = j.at("status").get<std::string>();
    c.n_test = j.at("n").get<int64_t>();
    if (j.count("reason")) c.reason = j.at("reason").get<std::string>();
    const auto& m = j.at("metrics");
    if (m.count("mae")) c.report.mae = m.at("mae").get<double>();
    if (m.count("r2")) c.report.r2 = m.at("r2").get<double>();
    if (m.count("pearson")) c.report.pearson = m.at("pearson").get<double>();
    if (m.count("roc_auc")) c.report.roc_auc = m.at("roc_auc").get<double>();
    c.report.task = c.task;
    c.report.n = c.n_test;
    return c;
}

}  // namespace

void RunReport::save_json(const std::string& path) const {
    json j;
    j["provenance"] = {{"config_hash", config_hash}, {"seed", seed}, {"model_ids", model_ids}};
    json cells_json = json::array();
    for (const auto& c : cells) cells_json.push_back(cell_to_json(c));
    j["cells"] = cells_json;
    std::ofstream os(path);
    if (!os) throw IoError("RunReport: cannot write " + path);
    os << j.dump(2) << '\n';
}

void RunReport::save_csv(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("RunReport: cannot write " + path);
    os << "representation,latent_dim,head,mode,fold,task,status,reason,n,mae,r2,pearson,roc_auc\n";
    for (const auto& c : cells) {
        os << c.representation << ',' << c.latent_dim << ',' << c.head << ',' << c.mode << ','
           << c.fold << ',' << c.task << ',' << c.status << ',' << c.reason << ',' << c.n_test
           << ',';
        os << (c.report.mae ? fmt_double(*c.report.mae) : "") << ',';
        os << (c.report.r2 ? fmt_double(*c.report.r2) : "") << ',';
        os << (c.report.pearson ? fmt_double(*c.report.pearson) : "") << ',';
        os << (c.report.roc_auc ? fmt_double(*c.report.roc_auc) : "") << '\n';
    }
}

RunReport RunReport::load_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("RunReport: cannot open " + path);
    json j = json::parse(is);
    RunReport r;
    r.config_hash = j.at("provenance").at("config_hash").get<std::string>();
    r.seed = j.at("provenance").at("seed").get<uint64_t>();
    r.model_ids = j.at("provenance").at("model_ids").get<std::vector<std::string>>();
    for (const auto& cj : j.at("cells")) r.cells.push_back(cell_from_json(cj));
    return r;
}

// ---------------------------------------------------------------------------
// Ingestion pipeline
// ---------------------------------------------------------------------------

ingest::VolumeSeries load_prepared(const ingest::DatasetManifest& manifest,
                                   const ingest::SubjectRecord& record, int64_t paa_window) {
    auto v = ingest::load_nifti(manifest.resolve_path(record), record.subject_id);
    if (paa_window > 1) v = ingest::paa(v, paa_window);
    std::vector<std::string> warnings;
    auto out = ingest::rescale_and_threshold(v, &warnings);
    for (const auto& w : warnings) std::cerr << "[warn] " << w << '\n';
    return out;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

std::string cmd_synth(const Config& cfg, const std::string& out_dir) {
    synth::SynthConfig sc;
    auto grid = cfg.get_i64_list("grid", {16, 16, 16});
    if (grid.size() != 3) throw ArgumentError("synth: grid needs exactly three dims");
    sc.grid = {grid[0], grid[1], grid[2]};
    sc.timepoints = cfg.get_i64("timepoints", 30);
    sc.n_subjects = cfg.get_i64("subjects", 60);
    sc.noise_sigma = cfg.get_f64("noise_sigma", 0.01);
    sc.age_amp_base = cfg.get_f64("age_amp_base", sc.age_amp_base);
    sc.age_amp_gain = cfg.get_f64("age_amp_gain", sc.age_amp_gain);
    sc.sex_amp = cfg.get_f64("sex_amp", sc.sex_amp);
    sc.dx_amp = cfg.get_f64("dx_amp", sc.dx_amp);
    sc.seed = cfg.get_u64("seed", 0);
    synth::generate_cohort(out_dir, sc);
    return (fs::path(out_dir) / "manifest.csv").string();
}

// ---------------------------------------------------------------------------
// split
// ---------------------------------------------------------------------------

namespace {

// Stratum key for a record given the configured stratification column.
std::string stratum_of(const ingest::SubjectRecord& r, const std::string& column) {
    if (column == "none") return "";
    if (column == "sex") return r.sex ? std::to_string(*r.sex) : "";
    if (column == "diagnosis") return r.diagnosis ? std::to_string(*r.diagnosis) : "";
    if (column == "auto") {
        if (r.diagnosis) return std::to_string(*r.diagnosis);
        if (r.sex) return std::to_string(*r.sex);
        return "";
    }
    throw ArgumentError("split: unknown stratify column " + column);
}

std::map<std::string, std::vector<size_t>> strata_indices(
    const ingest::DatasetManifest& manifest, const std::string& column) {
    std::map<std::string, std::vector<size_t>> strata;
    for (size_t i = 0; i < manifest.records.size(); ++i)
        strata[stratum_of(manifest.records[i], column)].push_back(i);
    return strata;
}

}  // namespace

void cmd_split(const Config& cfg, const std::string& manifest_path,
               const std::string& out_path) {
    auto manifest = ingest::DatasetManifest::load(manifest_path);
    manifest.rebase_paths(fs::path(out_path).parent_path().string());
    const std::string stratify = cfg.get_str("stratify", "auto");
    const uint64_t seed = cfg.get_u64("seed", 0);
    auto strata = strata_indices(manifest, stratify);

    if (cfg.has("fractions")) {
        auto fractions = cfg.get_f64_list("fractions", {0.8, 0.1, 0.1});
        if (fractions.size() != 2 && fractions.size() != 3)
            throw ArgumentError("split: fractions must have 2 or 3 entries");
        double total = 0;
        for (double f : fractions) total += f;
        if (std::abs(total - 1.0) > 1e-6)
            throw ArgumentError("split: fractions must sum to 1");
        const std::vector<ingest::Split> kinds = {ingest::Split::kTrain, ingest::Split::kVal,
                                                  ingest::Split::kTest};
        for (auto& [key, idx] : strata) {
            Rng rng(Rng::mix(seed, fnv1a64(key.data(), key.size())));
            rng.shuffle(idx);
            const int64_t n = static_cast<int64_t>(idx.size());
            // largest-remainder allocation
            std::vector<int64_t> counts(fractions.size(), 0);
            std::vector<std::pair<double, size_t>> rema;
            int64_t assigned = 0;
            for (size_t s = 0; s < fractions.size(); ++s) {
                const double exact = fractions[s] * n;
                counts[s] = static_cast<int64_t>(exact);
                assigned += counts[s];
                rema.push_back({-(exact - counts[s]), s});
            }
            std::sort(rema.begin(), rema.end());
            for (int64_t r = 0; r < n - assigned; ++r) counts[rema[r % rema.size()].second] += 1;
            size_t pos = 0;
            for (size_t s = 0; s < fractions.size(); ++s)
                for (int64_t c = 0; c < counts[s]; ++c) {
                    manifest.records[idx[pos]].split = kinds[s];
                    manifest.records[idx[pos]].fold.reset();
                    ++pos;
                }
        }
    } else {
        const int64_t folds = cfg.get_i64("folds", 5);
        if (folds < 2 || folds > 5)
            throw ArgumentError("split: folds must be in [2, 5] (manifest folds span 0..4)");
        for (auto& [key, idx] : strata) {
            if (static_cast<int64_t>(idx.size()) < folds)
                throw StratificationError("split: stratum '" + key + "' has " +
                                          std::to_string(idx.size()) + " members for " +
                                          std::to_string(folds) + " folds");
            Rng rng(Rng::mix(seed, fnv1a64(key.data(), key.size())));
            rng.shuffle(idx);
            for (size_t j = 0; j < idx.size(); ++j) {
                manifest.records[idx[j]].fold = static_cast<int>(j % folds);
                manifest.records[idx[j]].split.reset();
            }
        }
    }
    manifest.save(out_path);
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

namespace {

struct SubjectData {
    std::string subject_id;
    ingest::VolumeSeries series;  // normalized
};

std::vector<SubjectData> load_cohort(const ingest::DatasetManifest& manifest,
                                     int64_t paa_window) {
    std::vector<SubjectData> out;
    for (const auto& rec : manifest.records)
        out.push_back({rec.subject_id, load_prepared(manifest, rec, paa_window)});
    return out;
}

// Subject-level train/val assignment for representation training. Explicit
// split names win; otherwise a seeded stratified split on pretrain_fractions
// (default 0.9/0.1).
void assign_train_val(const ingest::DatasetManifest& manifest, const Config& cfg,
                      std::vector<size_t>& train_idx, std::vector<size_t>& val_idx) {
    bool any_named = false;
    for (const auto& r : manifest.records)
        if (r.split) any_named = true;
    if (any_named) {
        for (size_t i = 0; i < manifest.records.size(); ++i) {
            const auto& r = manifest.records[i];
            if (!r.split) continue;
            if (*r.split == ingest::Split::kTrain) train_idx.push_back(i);
            if (*r.split == ingest::Split::kVal) val_idx.push_back(i);
        }
        if (train_idx.empty() || val_idx.empty())
            throw ArgumentError("pretrain: manifest split column lacks train or val rows");
        return;
    }
    auto fractions = cfg.get_f64_list("pretrain_fractions", {0.9, 0.1});
    if (fractions.size() != 2) throw ArgumentError("pretrain_fractions needs 2 entries");
    const uint64_t seed = cfg.get_u64("seed", 0);
    auto strata = strata_indices(manifest, cfg.get_str("stratify", "auto"));
    for (auto& [key, idx] : strata) {
        Rng rng(Rng::mix(Rng::mix(seed, 0x774A11), fnv1a64(key.data(), key.size())));
        rng.shuffle(idx);
        const size_t n_val = std::max<size_t>(1, static_cast<size_t>(fractions[1] * idx.size()));
        for (size_t j = 0; j < idx.size(); ++j)
            (j < n_val ? val_idx : train_idx).push_back(idx[j]);
    }
    if (train_idx.empty()) throw ArgumentError("pretrain: no training subjects after split");
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(val_idx.begin(), val_idx.end());
}

std::vector<TensorF> timepoint_samples(const std::vector<SubjectData>& cohort,
                                       const std::vector<size_t>& subject_idx) {
    std::vector<TensorF> samples;
    for (size_t i : subject_idx) {
        const auto& v = cohort[i].series;
        const int64_t vox = v.voxels();
        Shape vol_shape(v.data.shape.begin() + 1, v.data.shape.end());
        for (int64_t t = 0; t < v.timepoints(); ++t) {
            TensorF s(vol_shape);
            std::copy_n(v.data.v.data() + t * vox, vox, s.v.data());
            samples.push_back(std::move(s));
        }
    }
    return samples;
}

vae::TrainConfig train_config_from(const Config& cfg) {
    vae::TrainConfig tc;
    tc.epochs = cfg.get_i64("epochs", 100);
    tc.lr = cfg.get_f64("lr", 5e-4);
    tc.batch_size = cfg.get_i64("batch_size", 16);
    tc.patience = cfg.get_i64("patience", 20);
    tc.kl_weight = cfg.get_f64("kl_weight", 1.0);
    tc.seed = cfg.get_u64("seed", 0);
    if (tc.patience > tc.epochs) tc.patience = tc.epochs;
    return tc;
}

void write_history_csv(const std::string& path, const std::vector<vae::EpochStats>& history) {
    std::ofstream os(path);
    if (!os) throw IoError("history: cannot write " + path);
    os << "epoch,train_total,train_recon,train_kl,val_total,val_recon,val_kl\n";
    for (const auto& h : history)
        os << h.epoch << ',' << fmt_double(h.train_total) << ',' << fmt_double(h.train_recon)
           << ',' << fmt_double(h.train_kl) << ',' << fmt_double(h.val_total) << ','
           << fmt_double(h.val_recon) << ',' << fmt_double(h.val_kl) << '\n';
}

vae::VaeSpec spec_from(const Config& cfg, const ingest::VolumeSeries& probe) {
    vae::VaeSpec spec;
    spec.latent_dim = cfg.get_i64("latent_dim", 256);
    spec.input_spatial = {probe.data.shape[1], probe.data.shape[2], probe.data.shape[3]};
    return spec;
}

}  // namespace

std::string cmd_pretrain(const Config& cfg, const std::string& manifest_path,
                         const std::string& out_dir) {
    fs::create_directories(out_dir);
    auto manifest = ingest::DatasetManifest::load(manifest_path);
    if (manifest.records.empty()) throw ArgumentError("pretrain: empty manifest");
    const int64_t paa_window = cfg.get_i64("paa_window", 1);
    auto cohort = load_cohort(manifest, paa_window);

    std::vector<size_t> train_idx, val_idx;
    assign_train_val(manifest, cfg, train_idx, val_idx);

    const std::string model = cfg.get_str("model", "vae");
    if (model == "vae") {
        vae::TrainData data;
        data.train = timepoint_samples(cohort, train_idx);
        data.val = timepoint_samples(cohort, val_idx);
        auto spec = spec_from(cfg, cohort.front().series);
        auto ckpt = vae::train(spec, data, train_config_from(cfg));
        const std::string path = (fs::path(out_dir) / "checkpoint.vae").string();
        ckpt.save(path);
        write_history_csv((fs::path(out_dir) / "history.csv").string(), ckpt.history);
        if (ckpt.stop_reason.rfind("diverged", 0) == 0)
            throw NumericError("pretrain: training diverged (" + ckpt.stop_reason +
                               "); best checkpoint written to " + path);
        return path;
    }
    if (model == "pca") {
        const int64_t k = cfg.get_i64("latent_dim", 256);
        pca::IncrementalPca model_pca(k);
        const int64_t batch_rows = cfg.get_i64("pca_batch", std::max<int64_t>(2 * k, 64));
        std::vector<Eigen::RowVectorXd> pending;
        auto flush = [&](bool final_flush) {
            if (pending.empty()) return;
            if (!model_pca.fitted() && static_cast<int64_t>(pending.size()) < k && !final_flush)
                return;
            Eigen::MatrixXd batch(pending.size(), pending.front().size());
            for (size_t r = 0; r < pending.size(); ++r) batch.row(r) = pending[r];
            model_pca.partial_fit(batch);
            pending.clear();
        };
        for (size_t i : train_idx) {
            auto rows = pca::as_sample_rows(cohort[i].series);
            for (int64_t r = 0; r < rows.rows(); ++r) {
                pending.push_back(rows.row(r));
                if (static_cast<int64_t>(pending.size()) >= batch_rows) flush(false);
            }
        }
        flush(true);
        const std::string path = (fs::path(out_dir) / "model.pca").string();
        model_pca.save(path);
        return path;
    }
    throw ArgumentError("pretrain: model must be vae or pca, got " + model);
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

std::vector<std::string> cmd_finetune(const Config& cfg, const std::string& checkpoint_path,
                                      const std::string& manifest_path,
                                      const std::string& out_dir) {
    fs::create_directories(out_dir);
    auto base = vae::VaeCheckpoint::load(checkpoint_path);
    auto manifest = ingest::DatasetManifest::load(manifest_path);
    auto cohort = load_cohort(manifest, cfg.get_i64("paa_window", 1));
    std::vector<size_t> train_idx, val_idx;
    assign_train_val(manifest, cfg, train_idx, val_idx);
    vae::TrainData data;
    data.train = timepoint_samples(cohort, train_idx);
    data.val = timepoint_samples(cohort, val_idx);

    auto schedule = cfg.get_i64_list("finetune_epochs", {0, 1, 2, 5, 10, 50, 100});
    if (schedule.empty()) throw ArgumentError("finetune: empty schedule");
    auto tc = train_config_from(cfg);

    std::vector<std::string> written;
    int64_t max_epochs = 0;
    for (int64_t e : schedule) {
        if (e < 0) throw ArgumentError("finetune: negative epoch count");
        max_epochs = std::max(max_epochs, e);
        auto tuned = vae::fine_tune(base, data, e, tc);
        const std::string path =
            (fs::path(out_dir) / ("finetune_e" + std::to_string(e) + ".vae")).string();
        tuned.save(path);
        write_history_csv(
            (fs::path(out_dir) / ("finetune_e" + std::to_string(e) + "_history.csv")).string(),
            tuned.history);
        written.push_back(path);
    }

    // From-scratch control for the maximum epoch count: fine-tune a freshly
    // initialized model of the same architecture.
    vae::Vae fresh(base.spec, Rng::mix(tc.seed, 0xC0117701));
    auto fresh_ckpt = fresh.snapshot(0, "initialized", {}, nullptr);
    auto control = vae::fine_tune(fresh_ckpt, data, max_epochs, tc);
    const std::string control_path =
        (fs::path(out_dir) / ("control_e" + std::to_string(max_epochs) + ".vae")).string();
    control.save(control_path);
    write_history_csv((fs::path(out_dir) / "control_history.csv").string(), control.history);
    written.push_back(control_path);
    return written;
}

// ---------------------------------------------------------------------------
// encode
// ---------------------------------------------------------------------------

namespace {

bool file_has_magic(const std::string& path, const char* magic) {
    std::ifstream is(path, std::ios::binary);
    char buf[4];
    is.read(buf, 4);
    return is && std::memcmp(buf, magic, 4) == 0;
}

}  // namespace

void cmd_encode(const Config& cfg, const std::string& model_path,
                const std::string& manifest_path, const std::string& latent_dir) {
    fs::create_directories(latent_dir);
    auto manifest = ingest::DatasetManifest::load(manifest_path);
    const int64_t paa_window = cfg.get_i64("paa_window", 1);
    const int64_t batch_size = cfg.get_i64("batch_size", 16);

    std::string representation;
    std::unique_ptr<vae::Vae> vmodel;
    std::unique_ptr<pca::IncrementalPca> pmodel;
    int64_t latent_dim = 0;
    if (file_has_magic(model_path, "VAE1")) {
        representation = "vae";
        vmodel = std::make_unique<vae::Vae>(vae::VaeCheckpoint::load(model_path));
        latent_dim = vmodel->spec().latent_dim;
    } else if (file_has_magic(model_path, "PCA1")) {
        representation = "pca";
        pmodel = std::make_unique<pca::IncrementalPca>(pca::IncrementalPca::load(model_path));
        latent_dim = pmodel->n_components();
    } else {
        throw FormatError("encode: " + model_path + " is neither a VAE1 nor a PCA1 file");
    }

    json index;
    index["representation"] = representation;
    index["latent_dim"] = latent_dim;
    index["model_file"] = model_path;
    index["model_id"] = file_hash_hex(model_path);
    int64_t timepoints = -1;
    json entries = json::array();
    for (const auto& rec : manifest.records) {
        json entry{{"subject_id", rec.subject_id}};
        try {
            auto series = load_prepared(manifest, rec, paa_window);
            TensorF latents;
            if (vmodel) {
                latents = vmodel->infer_latents(series, batch_size);
            } else {
                auto code = pca::encode_subject(*pmodel, series);
                latents = TensorF({1, latent_dim});
                for (int64_t j = 0; j < latent_dim; ++j)
                    latents.v[j] = static_cast<float>(code[j]);
            }
            if (timepoints < 0) timepoints = latents.shape[0];
            const std::string file = rec.subject_id + ".vxt";
            write_vxt((fs::path(latent_dir) / file).string(), latents);
            entry["file"] = file;
            entry["status"] = "ok";
        } catch (const Error& e) {
            // per-subject failure: record and continue
            entry["status"] = "failed";
            entry["reason"] = e.what();
        }
        entries.push_back(entry);
    }
    index["timepoints"] = timepoints;
    index["entries"] = entries;
    std::ofstream os(fs::path(latent_dir) / "index.json");
    if (!os) throw IoError("encode: cannot write index.json");
    os << index.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

namespace {

struct LatentStore {
    std::string representation;
    int64_t latent_dim = 0;
    int64_t timepoints = 0;
    std::string model_id;
    std::vector<std::string> subject_ids;        // ok entries, manifest order
    std::vector<TensorF> latents;                // aligned with subject_ids
};

LatentStore load_latent_store(const std::string& latent_dir) {
    std::ifstream is(fs::path(latent_dir) / "index.json");
    if (!is) throw IoError("eval: cannot open " + latent_dir + "/index.json");
    json index = json::parse(is);
    LatentStore store;
    store.representation = index.at("representation").get<std::string>();
    store.latent_dim = index.at("latent_dim").get<int64_t>();
    store.timepoints = index.at("timepoints").get<int64_t>();
    store.model_id = index.at("model_id").get<std::string>();
    for (const auto& e : index.at("entries")) {
        if (e.at("status").get<std::string>() != "ok") continue;
        store.subject_ids.push_back(e.at("subject_id").get<std::string>());
        store.latents.push_back(
            read_vxt((fs::path(latent_dir) / e.at("file").get<std::string>()).string()));
    }
    return store;
}

struct TaskSpec {
    std::string name;            // age | sex | diagnosis
    bool classification = false;
};

struct EvalSubject {
    size_t latent_idx = 0;
    int fold = 0;
    double label = 0;
};

struct CellJob {
    Cell cell;  // pre-filled key
    TaskSpec task;
    size_t task_index = 0;
};

double standardized_target(double y, double mu, double sd) { return sd > 0 ? (y - mu) / sd : 0; }

// assemble [N, T, L] tensor for the lstm head
TensorData<float> lstm_tensor(const LatentStore& store, const std::vector<EvalSubject>& subj,
                              const std::vector<size_t>& rows) {
    const int64_t t_n = store.timepoints, l = store.latent_dim;
    TensorData<float> x({static_cast<int64_t>(rows.size()), t_n, l});
    for (size_t r = 0; r < rows.size(); ++r)
        std::copy_n(store.latents[subj[rows[r]].latent_idx].v.data(), t_n * l,
                    x.v.data() + static_cast<int64_t>(r) * t_n * l);
    return x;
}

}  // namespace

RunReport cmd_eval(const Config& cfg, const std::string& latent_dir,
                   const std::string& manifest_path, const std::string& out_dir) {
    fs::create_directories(out_dir);
    auto manifest = ingest::DatasetManifest::load(manifest_path);
    auto store = load_latent_store(latent_dir);
    const uint64_t seed = cfg.get_u64("seed", 0);
    const int64_t knn_k = cfg.get_i64("knn_k", 5);

    // tasks present in the manifest unless explicitly requested
    std::vector<std::string> task_names = cfg.get_str_list("tasks", [&] {
        std::vector<std::string> names;
        bool age = false, sex = false, dx = false;
        for (const auto& r : manifest.records) {
            age |= r.age.has_value();
            sex |= r.sex.has_value();
            dx |= r.diagnosis.has_value();
        }
        if (age) names.push_back("age");
        if (sex) names.push_back("sex");
        if (dx) names.push_back("diagnosis");
        return names;
    }());

    std::map<std::string, size_t> latent_of;
    for (size_t i = 0; i < store.subject_ids.size(); ++i) latent_of[store.subject_ids[i]] = i;

    RunReport report;
    report.config_hash = cfg.hash_hex();
    report.seed = seed;
    report.model_ids = {store.model_id};

    std::vector<CellJob> jobs;
    std::vector<std::vector<EvalSubject>> task_subjects;
    std::vector<std::vector<int>> task_folds;

    for (const auto& name : task_names) {
        TaskSpec task;
        task.name = name;
        task.classification = name != "age";

        std::vector<EvalSubject> subjects;
        for (const auto& rec : manifest.records) {
            auto it = latent_of.find(rec.subject_id);
            if (it == latent_of.end()) continue;
            if (!rec.fold)
                throw ArgumentError("eval: manifest has no fold assignment for subject " +
                                    rec.subject_id + "; run split first");
            std::optional<double> label;
            if (name == "age" && rec.age) label = *rec.age;
            if (name == "sex" && rec.sex) label = *rec.sex;
            if (name == "diagnosis" && rec.diagnosis) label = *rec.diagnosis;
            if (!label) continue;
            subjects.push_back({it->second, *rec.fold, *label});
        }
        if (subjects.empty()) continue;
        std::vector<int> folds;
        for (const auto& s : subjects) folds.push_back(s.fold);
        std::sort(folds.begin(), folds.end());
        folds.erase(std::unique(folds.begin(), folds.end()), folds.end());

        std::vector<std::string> default_heads;
        if (store.representation == "pca")
            default_heads = task.classification ? std::vector<std::string>{"msvm", "mknn"}
                                                : std::vector<std::string>{"msvr", "mknr"};
        else
            default_heads = task.classification
                                ? std::vector<std::string>{"svm", "msvm", "knn", "mknn", "lstm"}
                                : std::vector<std::string>{"svr", "msvr", "knr", "mknr", "lstm"};
        auto heads_req = cfg.get_str_list("heads", default_heads);

        task_subjects.push_back(subjects);
        task_folds.push_back(folds);
        const size_t task_idx = task_subjects.size() - 1;

        for (const auto& head : heads_req) {
            const bool is_classify_head = head == "svm" || head == "msvm" || head == "knn" ||
                                          head == "mknn";
            const bool is_regress_head = head == "svr" || head == "msvr" || head == "knr" ||
                                         head == "mknr";
            if (!is_classify_head && !is_regress_head && head != "lstm")
                throw ArgumentError("eval: unknown head " + head);
            if (is_classify_head && !task.classification) continue;
            if (is_regress_head && task.classification) continue;
            for (int fold : folds) {
                CellJob job;
                job.task = task;
                job.cell.representation = store.representation;
                job.cell.latent_dim = store.latent_dim;
                job.cell.head = head;
                job.cell.mode = head == "lstm" ? "series"
                                : head[0] == 'm' ? "mean"
                                                 : "concat";
                job.cell.fold = fold;
                job.cell.task = name;
                job.task_index = task_idx;
                jobs.push_back(job);
            }
        }
    }

    // Pre-build unstandardized feature matrices per (task, mode).
    std::vector<std::map<std::string, heads::FeatureMatrix>> base_features(task_subjects.size());
    for (size_t ti = 0; ti < task_subjects.size(); ++ti) {
        std::vector<TensorF> lat;
        for (const auto& s : task_subjects[ti]) lat.push_back(store.latents[s.latent_idx]);
        base_features[ti]["mean"] = heads::build_features(lat, heads::FeatureMode::kMean);
        base_features[ti]["concat"] = heads::build_features(lat, heads::FeatureMode::kConcat);
    }

    auto run_job = [&](CellJob& job) {
        const size_t ti = job.task_index;
        const auto& subjects = task_subjects[ti];
        const auto& folds = task_folds[ti];
        const int fold = static_cast<int>(job.cell.fold);
        std::vector<size_t> test_rows, trainval_rows;
        for (size_t i = 0; i < subjects.size(); ++i)
            (subjects[i].fold == fold ? test_rows : trainval_rows).push_back(i);
        job.cell.n_test = static_cast<int64_t>(test_rows.size());
        job.cell.report.task = job.cell.task;
        job.cell.report.n = job.cell.n_test;

        try {
            if (test_rows.empty()) throw MetricError("empty test fold");
            if (trainval_rows.size() < 2) throw MetricError("too few training subjects");
            const uint64_t cell_seed = Rng::mix(
                seed, fnv1a64((job.cell.task + "|" + job.cell.head).data(),
                              job.cell.task.size() + job.cell.head.size() + 1) +
                          static_cast<uint64_t>(fold));

            std::vector<double> y_all(subjects.size());
            for (size_t i = 0; i < subjects.size(); ++i) y_all[i] = subjects[i].label;

            if (job.cell.head == "lstm") {
                if (store.representation == "pca")
                    throw MetricError("pca features are temporally averaged; lstm not applicable");
                // validation fold for early stopping: first other fold
                int val_fold = -1;
                for (int f : folds)
                    if (f != fold) {
                        val_fold = f;
                        break;
                    }
                std::vector<size_t> train_rows, val_rows;
                for (size_t i : trainval_rows)
                    (subjects[i].fold == val_fold ? val_rows : train_rows).push_back(i);
                if (train_rows.empty()) throw MetricError("no lstm training rows");

                double mu = 0, sd = 1;
                if (!job.task.classification) {
                    double acc = 0;
                    for (size_t i : trainval_rows) acc += y_all[i];
                    mu = acc / trainval_rows.size();
                    double ss = 0;
                    for (size_t i : trainval_rows) ss += (y_all[i] - mu) * (y_all[i] - mu);
                    sd = std::sqrt(ss / std::max<size_t>(1, trainval_rows.size() - 1));
                    if (sd == 0) throw MetricError("constant regression target");
                }
                auto targets = [&](const std::vector<size_t>& rows) {
                    std::vector<float> t;
                    for (size_t i : rows)
                        t.push_back(static_cast<float>(
                            job.task.classification ? y_all[i]
                                                    : standardized_target(y_all[i], mu, sd)));
                    return t;
                };
                heads::LstmHead<float> head(store.latent_dim, store.timepoints,
                                            job.task.classification, cell_seed);
                heads::LstmTrainConfig lc;
                lc.epochs = cfg.get_i64("lstm_epochs", 150);
                lc.lr = cfg.get_f64("lstm_lr", 1e-3);
                lc.patience = cfg.get_i64("lstm_patience", 20);
                lc.dropout = cfg.get_f64("lstm_dropout", 0.5);
                lc.seed = cell_seed;
                auto x_train = lstm_tensor(store, subjects, train_rows);
                auto x_val = val_rows.empty() ? TensorData<float>() :
                                                lstm_tensor(store, subjects, val_rows);
                head.fit(x_train, targets(train_rows), x_val, targets(val_rows), lc);
                auto out = head.predict(lstm_tensor(store, subjects, test_rows));

                if (job.task.classification) {
                    std::vector<double> scores(out.begin(), out.end());
                    std::vector<int> labels;
                    for (size_t i : test_rows) labels.push_back(static_cast<int>(y_all[i]));
                    job.cell.report.roc_auc = metrics::roc_auc(scores, labels);
                } else {
                    std::vector<double> pred, truth;
                    for (size_t r = 0; r < test_rows.size(); ++r) {
                        pred.push_back(double(out[r]) * sd + mu);
                        truth.push_back(y_all[test_rows[r]]);
                    }
                    job.cell.report.mae = metrics::mae(pred, truth);
                    job.cell.report.r2 = metrics::r2(pred, truth);
                    job.cell.report.pearson = metrics::pearson(pred, truth);
                }
                return;
            }

            if (store.representation == "pca" && job.cell.mode == "concat")
                throw MetricError(
                    "pca features are temporally averaged; concat heads not applicable");

            heads::FeatureMatrix feats = base_features[ti].at(job.cell.mode);
            std::vector<int64_t> train_rows64(trainval_rows.begin(), trainval_rows.end());
            heads::standardize(feats, train_rows64);

            Eigen::MatrixXd x_train(trainval_rows.size(), feats.x.cols());
            std::vector<double> y_train;
            for (size_t r = 0; r < trainval_rows.size(); ++r) {
                x_train.row(r) = feats.x.row(trainval_rows[r]);
                y_train.push_back(y_all[trainval_rows[r]]);
            }

            if (job.cell.head == "svm" || job.cell.head == "msvm") {
                std::vector<int> y_bin;
                for (double v : y_train) y_bin.push_back(static_cast<int>(v));
                auto model = heads::train_linear_svm(x_train, y_bin, cfg.get_f64("svm_c", 1.0));
                std::vector<double> scores;
                std::vector<int> labels;
                for (size_t i : test_rows) {
                    scores.push_back(model.decision(Eigen::VectorXd(feats.x.row(i))));
                    labels.push_back(static_cast<int>(y_all[i]));
                }
                job.cell.report.roc_auc = metrics::roc_auc(scores, labels);
            } else if (job.cell.head == "knn" || job.cell.head == "mknn") {
                std::vector<double> scores;
                std::vector<int> labels;
                for (size_t i : test_rows) {
                    auto res = heads::knn_predict(x_train, y_train,
                                                  Eigen::VectorXd(feats.x.row(i)), knn_k,
                                                  heads::KnnTask::kClassify);
                    scores.push_back(res.positive_fraction);
                    labels.push_back(static_cast<int>(y_all[i]));
                }
                job.cell.report.roc_auc = metrics::roc_auc(scores, labels);
            } else if (job.cell.head == "svr" || job.cell.head == "msvr") {
                double mu = 0, sd = 0;
                for (double v : y_train) mu += v;
                mu /= y_train.size();
                for (double v : y_train) sd += (v - mu) * (v - mu);
                sd = std::sqrt(sd / std::max<size_t>(1, y_train.size() - 1));
                if (sd == 0) throw MetricError("constant regression target");
                std::vector<double> y_std;
                for (double v : y_train) y_std.push_back((v - mu) / sd);
                auto model = heads::train_linear_svr(x_train, y_std, cfg.get_f64("svr_c", 1.0),
                                                     cfg.get_f64("svr_epsilon", 0.1));
                std::vector<double> pred, truth;
                for (size_t i : test_rows) {
                    pred.push_back(model.decision(Eigen::VectorXd(feats.x.row(i))) * sd + mu);
                    truth.push_back(y_all[i]);
                }
                job.cell.report.mae = metrics::mae(pred, truth);
                job.cell.report.r2 = metrics::r2(pred, truth);
                job.cell.report.pearson = metrics::pearson(pred, truth);
            } else {  // knr / mknr
                std::vector<double> pred, truth;
                for (size_t i : test_rows) {
                    auto res = heads::knn_predict(x_train, y_train,
                                                  Eigen::VectorXd(feats.x.row(i)), knn_k,
                                                  heads::KnnTask::kRegress);
                    pred.push_back(res.prediction);
                    truth.push_back(y_all[i]);
                }
                job.cell.report.mae = metrics::mae(pred, truth);
                job.cell.report.r2 = metrics::r2(pred, truth);
                job.cell.report.pearson = metrics::pearson(pred, truth);
            }
        } catch (const Error& e) {
            job.cell.status = "failed";
            job.cell.reason = e.what();
        }
    };

    parallel_for(static_cast<int64_t>(jobs.size()), [&](int64_t i) { run_job(jobs[i]); });

    for (auto& job : jobs) report.cells.push_back(job.cell);
    report.save_json((fs::path(out_dir) / "run_report.json").string());
    report.save_csv((fs::path(out_dir) / "run_report.csv").string());
    return report;
}

// ---------------------------------------------------------------------------
// groupdiff
// ---------------------------------------------------------------------------

std::string cmd_groupdiff(const Config& cfg, const std::string& checkpoint_path,
                          const std::string& latent_dir, const std::string& manifest_path,
                          const std::string& group_column, const std::string& out_dir) {
    fs::create_directories(out_dir);
    if (group_column != "sex" && group_column != "diagnosis")
        throw ArgumentError("groupdiff: group column must be sex or diagnosis");
    auto manifest = ingest::DatasetManifest::load(manifest_path);
    auto store = load_latent_store(latent_dir);
    if (store.representation != "vae")
        throw ArgumentError("groupdiff: needs a VAE latent store (decoding required)");
    vae::Vae model(vae::VaeCheckpoint::load(checkpoint_path));

    std::map<std::string, size_t> latent_of;
    for (size_t i = 0; i < store.subject_ids.size(); ++i) latent_of[store.subject_ids[i]] = i;

    std::vector<TensorF> group1, group0;
    for (const auto& rec : manifest.records) {
        auto it = latent_of.find(rec.subject_id);
        if (it == latent_of.end()) continue;
        std::optional<int> label = group_column == "sex" ? rec.sex : rec.diagnosis;
        if (!label) continue;
        (*label == 1 ? group1 : group0).push_back(store.latents[it->second]);
    }
    const double quantile = cfg.get_f64("quantile", 0.8);
    TensorF diff = vae::group_difference(model, group1, group0, quantile);

    const std::string nii_path =
        (fs::path(out_dir) / ("groupdiff_" + group_column + ".nii")).string();
    TensorF vol4({1, diff.shape[0], diff.shape[1], diff.shape[2]}, diff.v);
    write_nifti(nii_path, vol4, 1.0f);

    std::ofstream os(fs::path(out_dir) / ("groupdiff_" + group_column + ".csv"));
    if (!os) throw IoError("groupdiff: cannot write csv");
    os << "x,y,z,value\n";
    for (int64_t x = 0; x < diff.shape[0]; ++x)
        for (int64_t y = 0; y < diff.shape[1]; ++y)
            for (int64_t z = 0; z < diff.shape[2]; ++z) {
                const float v = diff.v[(x * diff.shape[1] + y) * diff.shape[2] + z];
                if (v != 0.0f) os << x << ',' << y << ',' << z << ',' << fmt_double(v) << '\n';
            }
    return nii_path;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

void cmd_report(const std::string& report_json, const std::string& out_csv, bool quiet) {
    auto report = RunReport::load_json(report_json);
    report.save_csv(out_csv);
    if (quiet) return;

    // mean of the primary metric over folds per (task, head)
    std::map<std::string, std::pair<double, int64_t>> agg;
    for (const auto& c : report.cells) {
        if (c.status != "ok") continue;
        const double primary = c.report.roc_auc ? *c.report.roc_auc
                               : c.report.mae   ? *c.report.mae
                                                : 0.0;
        auto& slot = agg[c.task + " | " + c.representation + "-" + c.head];
        slot.first += primary;
        slot.second += 1;
    }
    std::cout << "task | model-head : mean primary metric over folds (auc for classification, "
                 "mae for regression)\n";
    for (const auto& [key, slot] : agg)
        std::cout << "  " << key << " : " << slot.first / slot.second << " (" << slot.second
                  << " folds)\n";
}

}  // namespace voxrep::flow
