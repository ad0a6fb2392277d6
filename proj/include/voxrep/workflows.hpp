#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "voxrep/ingest.hpp"
#include "voxrep/metrics.hpp"

namespace voxrep::flow {

// Flat key = value configuration (TOML-style scalars only). CLI flags land
// here as overrides; the canonical text of the map is what gets hashed into
// report provenance.
class Config {
public:
    static Config load(const std::string& path);

    void set(const std::string& key, const std::string& value) { kv_[key] = value; }
    bool has(const std::string& key) const { return kv_.count(key) > 0; }

    std::string get_str(const std::string& key, const std::string& fallback) const;
    int64_t get_i64(const std::string& key, int64_t fallback) const;
    uint64_t get_u64(const std::string& key, uint64_t fallback) const;
    double get_f64(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<int64_t> get_i64_list(const std::string& key,
                                      std::vector<int64_t> fallback) const;
    std::vector<double> get_f64_list(const std::string& key, std::vector<double> fallback) const;
    std::vector<std::string> get_str_list(const std::string& key,
                                          std::vector<std::string> fallback) const;

    std::string canonical() const;   // sorted "key = value" lines
    std::string hash_hex() const;    // FNV-1a 64 of the canonical text

private:
    std::map<std::string, std::string> kv_;
};

uint64_t fnv1a64(const void* data, size_t len);
std::string file_hash_hex(const std::string& path);

// ---------------------------------------------------------------------------
// Run report
// ---------------------------------------------------------------------------

struct Cell {
    std::string representation;  // "vae" | "pca"
    int64_t latent_dim = 0;
    std::string head;  // svm, msvm, knn, mknn, svr, msvr, knr, mknr, lstm
    std::string mode;  // concat | mean | series
    int64_t fold = 0;
    std::string task;  // age | sex | diagnosis
    std::string status = "ok";  // ok | failed
    std::string reason;
    int64_t n_test = 0;
    metrics::MetricReport report;
};

struct RunReport {
    std::string config_hash;
    uint64_t seed = 0;
    std::vector<std::string> model_ids;
    std::vector<Cell> cells;

    void save_json(const std::string& path) const;
    void save_csv(const std::string& path) const;
    static RunReport load_json(const std::string& path);
};

// ---------------------------------------------------------------------------
// Commands (the CLI verbs call straight into these)
// ---------------------------------------------------------------------------

// Writes the cohort into out_dir; returns the manifest path.
std::string cmd_synth(const Config& cfg, const std::string& out_dir);

// Stratified k-fold or fractions split; writes the manifest copy with the
// fold column filled to out_path.
void cmd_split(const Config& cfg, const std::string& manifest_path,
               const std::string& out_path);

// Trains the representation model (cfg "model": vae | pca) on the manifest
// and writes checkpoint (+ history.csv for the VAE). Returns the model path.
std::string cmd_pretrain(const Config& cfg, const std::string& manifest_path,
                         const std::string& out_dir);

// Fine-tunes a checkpoint for every entry of the schedule and trains a
// from-scratch control for the maximum entry. Returns all checkpoint paths
// (schedule order, control last).
std::vector<std::string> cmd_finetune(const Config& cfg, const std::string& checkpoint_path,
                                      const std::string& manifest_path,
                                      const std::string& out_dir);

// Writes one VXT latent file per subject plus index.json into latent_dir.
void cmd_encode(const Config& cfg, const std::string& model_path,
                const std::string& manifest_path, const std::string& latent_dir);

// Trains/evaluates the head grid over the manifest's folds and writes
// run_report.json + run_report.csv into out_dir.
RunReport cmd_eval(const Config& cfg, const std::string& latent_dir,
                   const std::string& manifest_path, const std::string& out_dir);

// Decodes group-mean latents, thresholds the difference, writes a NIfTI
// volume and a CSV of surviving voxels. Returns the volume path.
std::string cmd_groupdiff(const Config& cfg, const std::string& checkpoint_path,
                          const std::string& latent_dir, const std::string& manifest_path,
                          const std::string& group_column, const std::string& out_dir);

// Renders an existing report JSON to CSV (and a stdout table).
void cmd_report(const std::string& report_json, const std::string& out_csv, bool quiet = false);

// Shared ingestion pipeline: NIfTI load -> PAA -> rescale/threshold.
ingest::VolumeSeries load_prepared(const ingest::DatasetManifest& manifest,
                                   const ingest::SubjectRecord& record, int64_t paa_window);

}  // namespace voxrep::flow
