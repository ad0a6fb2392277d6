#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "support/tmpdir.hpp"
#include "voxrep/ingest.hpp"
#include "voxrep/nifti.hpp"
#include "voxrep/pca.hpp"
#include "voxrep/vae.hpp"
#include "voxrep/workflows.hpp"

using namespace voxrep;
using namespace voxrep::flow;
using testsupport::TmpDir;

namespace {

std::string slurp_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

Config tiny_cohort_cfg(uint64_t seed, int64_t n = 10) {
    Config cfg;
    cfg.set("grid", "10,10,10");
    cfg.set("timepoints", "6");
    cfg.set("subjects", std::to_string(n));
    cfg.set("noise_sigma", "0.01");
    cfg.set("seed", std::to_string(seed));
    return cfg;
}

Config tiny_train_cfg(uint64_t seed) {
    Config cfg;
    cfg.set("model", "vae");
    cfg.set("latent_dim", "4");
    cfg.set("epochs", "2");
    cfg.set("patience", "2");
    cfg.set("batch_size", "8");
    cfg.set("lr", "1e-3");
    cfg.set("seed", std::to_string(seed));
    return cfg;
}

}  // namespace

TEST_CASE("config: parsing, overrides, canonical hash") {
    TmpDir tmp("config");
    {
        std::ofstream os(tmp.file("run.toml"));
        os << "# comment\n";
        os << "latent_dim = 64\n";
        os << "lr = 5e-4\n";
        os << "heads = \"svm, msvm\"\n";
        os << "grid = 16,16,16\n";
    }
    auto cfg = Config::load(tmp.file("run.toml"));
    CHECK(cfg.get_i64("latent_dim", 0) == 64);
    CHECK(cfg.get_f64("lr", 0) == doctest::Approx(5e-4));
    CHECK(cfg.get_str_list("heads", {}) == std::vector<std::string>{"svm", "msvm"});
    CHECK(cfg.get_i64_list("grid", {}) == std::vector<int64_t>{16, 16, 16});
    CHECK(cfg.get_i64("missing", 7) == 7);

    const std::string h1 = cfg.hash_hex();
    CHECK(h1 == Config::load(tmp.file("run.toml")).hash_hex());  // stable
    cfg.set("latent_dim", "128");
    CHECK(cfg.hash_hex() != h1);  // any field change moves the hash
}

TEST_CASE("split: k-fold balance, determinism, stratification guard") {
    TmpDir tmp("split");
    // synthetic manifest: 100 subjects, 50/50 sex
    {
        std::ofstream os(tmp.file("manifest.csv"));
        os << "subject_id,path,age,sex,diagnosis,fold\n";
        for (int i = 0; i < 100; ++i)
            os << "sub-" << i << ",v" << i << ".nii,50," << i % 2 << ",,\n";
    }
    Config cfg;
    cfg.set("folds", "5");
    cfg.set("stratify", "sex");
    cfg.set("seed", "3");
    cmd_split(cfg, tmp.file("manifest.csv"), tmp.file("folded.csv"));
    auto folded = ingest::DatasetManifest::load(tmp.file("folded.csv"));
    std::map<int, int> fold_counts;
    std::map<int, int> fold_pos;
    for (const auto& r : folded.records) {
        REQUIRE(r.fold.has_value());
        fold_counts[*r.fold] += 1;
        fold_pos[*r.fold] += *r.sex;
    }
    REQUIRE(fold_counts.size() == 5);
    for (auto& [fold, count] : fold_counts) {
        CHECK(count == 20);
        CHECK(std::abs(fold_pos[fold] - 10) <= 1);  // stratified balance
    }

    cmd_split(cfg, tmp.file("manifest.csv"), tmp.file("folded2.csv"));
    CHECK(slurp_file(tmp.file("folded.csv")) == slurp_file(tmp.file("folded2.csv")));

    // a 3-member class cannot fill 5 folds
    {
        std::ofstream os(tmp.file("small.csv"));
        os << "subject_id,path,age,sex,diagnosis,fold\n";
        for (int i = 0; i < 8; ++i)
            os << "sub-" << i << ",v.nii,,," << (i < 3 ? 1 : 0) << ",\n";
    }
    Config dx_cfg;
    dx_cfg.set("folds", "5");
    dx_cfg.set("stratify", "diagnosis");
    CHECK_THROWS_AS(cmd_split(dx_cfg, tmp.file("small.csv"), tmp.file("bad.csv")),
                    StratificationError);

    // fractions mode
    Config frac;
    frac.set("fractions", "0.8,0.1,0.1");
    frac.set("stratify", "sex");
    frac.set("seed", "4");
    cmd_split(frac, tmp.file("manifest.csv"), tmp.file("frac.csv"));
    auto split_manifest = ingest::DatasetManifest::load(tmp.file("frac.csv"));
    int train = 0, val = 0, test = 0;
    for (const auto& r : split_manifest.records) {
        REQUIRE(r.split.has_value());
        if (*r.split == ingest::Split::kTrain) ++train;
        if (*r.split == ingest::Split::kVal) ++val;
        if (*r.split == ingest::Split::kTest) ++test;
    }
    CHECK(train == 80);
    CHECK(val == 10);
    CHECK(test == 10);
}

TEST_CASE("pipeline: synth -> pretrain -> encode -> eval -> groupdiff -> report") {
    TmpDir tmp("pipeline");
    const std::string cohort = tmp.file("cohort");
    auto manifest_path = cmd_synth(tiny_cohort_cfg(11, 10), cohort);
    CHECK(std::filesystem::exists(manifest_path));

    Config split_cfg;
    split_cfg.set("folds", "2");
    split_cfg.set("seed", "5");
    const std::string folded = tmp.file("folded.csv");
    cmd_split(split_cfg, manifest_path, folded);

    // --- vae pretrain ---
    auto train_cfg = tiny_train_cfg(13);
    const std::string ckpt = cmd_pretrain(train_cfg, folded, tmp.file("run"));
    CHECK(std::filesystem::exists(ckpt));
    CHECK(std::filesystem::exists(tmp.file("run") + "/history.csv"));
    auto loaded = vae::VaeCheckpoint::load(ckpt);
    CHECK(loaded.history.size() == 2);
    CHECK(loaded.spec.latent_dim == 4);

    // rerun is byte-identical (same config + seed)
    cmd_pretrain(train_cfg, folded, tmp.file("run_b"));
    CHECK(slurp_file(ckpt) == slurp_file(tmp.file("run_b") + "/checkpoint.vae"));
    CHECK(slurp_file(tmp.file("run") + "/history.csv") ==
          slurp_file(tmp.file("run_b") + "/history.csv"));

    // --- pca pretrain ---
    Config pca_cfg = train_cfg;
    pca_cfg.set("model", "pca");
    pca_cfg.set("latent_dim", "3");
    const std::string pca_path = cmd_pretrain(pca_cfg, folded, tmp.file("run_pca"));
    auto pca_model = pca::IncrementalPca::load(pca_path);
    CHECK(pca_model.n_components() == 3);

    // --- encode (vae) ---
    Config enc_cfg;
    const std::string lat_dir = tmp.file("latents");
    cmd_encode(enc_cfg, ckpt, folded, lat_dir);
    auto idx_text = slurp_file(lat_dir + "/index.json");
    CHECK(idx_text.find("\"representation\": \"vae\"") != std::string::npos);
    for (int i = 0; i < 10; ++i) {
        auto lat = read_vxt(lat_dir + "/sub-" + std::to_string(i) + ".vxt");
        CHECK(lat.shape == Shape{6, 4});
    }
    cmd_encode(enc_cfg, ckpt, folded, tmp.file("latents_b"));
    CHECK(slurp_file(lat_dir + "/sub-3.vxt") == slurp_file(tmp.file("latents_b") + "/sub-3.vxt"));

    // --- encode (pca) ---
    const std::string pca_lat = tmp.file("latents_pca");
    cmd_encode(enc_cfg, pca_path, folded, pca_lat);
    auto pca_code = read_vxt(pca_lat + "/sub-0.vxt");
    CHECK(pca_code.shape == Shape{1, 3});

    // --- eval (vae latents) ---
    Config eval_cfg;
    eval_cfg.set("seed", "7");
    eval_cfg.set("lstm_epochs", "6");
    eval_cfg.set("knn_k", "3");
    auto report = cmd_eval(eval_cfg, lat_dir, folded, tmp.file("eval"));
    CHECK(std::filesystem::exists(tmp.file("eval") + "/run_report.json"));
    CHECK(std::filesystem::exists(tmp.file("eval") + "/run_report.csv"));
    // grid completeness: per task, |heads| x |folds| cells
    int age_cells = 0, sex_cells = 0, dx_cells = 0;
    for (const auto& c : report.cells) {
        CHECK((c.status == "ok" || c.status == "failed"));
        if (c.task == "age") ++age_cells;
        if (c.task == "sex") ++sex_cells;
        if (c.task == "diagnosis") ++dx_cells;
        if (c.status == "ok" && c.report.roc_auc) {
            CHECK(*c.report.roc_auc >= 0.0);
            CHECK(*c.report.roc_auc <= 1.0);
        }
    }
    CHECK(age_cells == 5 * 2);  // svr, msvr, knr, mknr, lstm x 2 folds
    CHECK(sex_cells == 5 * 2);
    CHECK(dx_cells == 5 * 2);
    CHECK(report.config_hash == eval_cfg.hash_hex());

    // eval on pca latents restricts to temporally-averaged heads by default
    auto pca_report = cmd_eval(eval_cfg, pca_lat, folded, tmp.file("eval_pca"));
    for (const auto& c : pca_report.cells) {
        CHECK(c.representation == "pca");
        CHECK((c.head[0] == 'm'));
    }

    // explicitly requesting a concat head on pca latents fails the cell with a reason
    Config eval_pca_concat = eval_cfg;
    eval_pca_concat.set("heads", "svm,msvm");
    eval_pca_concat.set("tasks", "sex");
    auto forced = cmd_eval(eval_pca_concat, pca_lat, folded, tmp.file("eval_pca2"));
    bool saw_failed_concat = false;
    for (const auto& c : forced.cells)
        if (c.head == "svm") {
            CHECK(c.status == "failed");
            CHECK(c.reason.find("temporally averaged") != std::string::npos);
            saw_failed_concat = true;
        }
    CHECK(saw_failed_concat);

    // --- groupdiff ---
    Config gd_cfg;
    gd_cfg.set("quantile", "0.8");
    const std::string nii = cmd_groupdiff(gd_cfg, ckpt, lat_dir, folded, "sex", tmp.file("gd"));
    auto vol = read_nifti(nii);
    CHECK(vol.data.shape == Shape{1, 10, 10, 10});
    int64_t survivors = 0;
    for (float v : vol.data.v)
        if (v != 0.0f) ++survivors;
    // nearest-rank 0.8 quantile on 1000 voxels keeps 201 when magnitudes are distinct
    CHECK(survivors == 201);
    CHECK(std::filesystem::exists(tmp.file("gd") + "/groupdiff_sex.csv"));
    auto csv = slurp_file(tmp.file("gd") + "/groupdiff_sex.csv");
    CHECK(static_cast<int64_t>(std::count(csv.begin(), csv.end(), '\n')) == survivors + 1);

    // --- report ---
    cmd_report(tmp.file("eval") + "/run_report.json", tmp.file("eval") + "/flat.csv", true);
    auto flat = slurp_file(tmp.file("eval") + "/flat.csv");
    CHECK(flat == slurp_file(tmp.file("eval") + "/run_report.csv"));
    auto roundtrip = RunReport::load_json(tmp.file("eval") + "/run_report.json");
    CHECK(roundtrip.cells.size() == report.cells.size());
    CHECK(roundtrip.config_hash == report.config_hash);
}

TEST_CASE("encode records per-subject failures and continues") {
    TmpDir tmp("encode_fail");
    auto manifest_path = cmd_synth(tiny_cohort_cfg(21, 6), tmp.file("cohort"));
    auto manifest = ingest::DatasetManifest::load(manifest_path);
    manifest.records[2].path = "missing_file.nii";
    manifest.save(tmp.file("cohort") + "/broken.csv");

    auto ckpt = cmd_pretrain(tiny_train_cfg(23), manifest_path, tmp.file("run"));
    cmd_encode(Config{}, ckpt, tmp.file("cohort") + "/broken.csv", tmp.file("latents"));
    auto idx = slurp_file(tmp.file("latents") + "/index.json");
    CHECK(idx.find("\"failed\"") != std::string::npos);
    // the other five subjects still encoded
    CHECK(std::filesystem::exists(tmp.file("latents") + "/sub-0.vxt"));
    CHECK(std::filesystem::exists(tmp.file("latents") + "/sub-5.vxt"));
    CHECK_FALSE(std::filesystem::exists(tmp.file("latents") + "/sub-2.vxt"));
}

TEST_CASE("finetune: schedule outputs plus control, zero-epoch identity") {
    TmpDir tmp("finetune");
    auto manifest_a = cmd_synth(tiny_cohort_cfg(31, 6), tmp.file("a"));
    auto manifest_b = cmd_synth(tiny_cohort_cfg(33, 6), tmp.file("b"));
    auto ckpt = cmd_pretrain(tiny_train_cfg(35), manifest_a, tmp.file("run"));

    Config ft_cfg = tiny_train_cfg(37);
    ft_cfg.set("finetune_epochs", "0,1,2");
    auto paths = cmd_finetune(ft_cfg, ckpt, manifest_b, tmp.file("ft"));
    REQUIRE(paths.size() == 4);  // three schedule entries + control
    CHECK(paths[3].find("control_e2") != std::string::npos);

    auto base = vae::VaeCheckpoint::load(ckpt);
    auto e0 = vae::VaeCheckpoint::load(paths[0]);
    REQUIRE(e0.param_values.size() == base.param_values.size());
    for (size_t i = 0; i < base.param_values.size(); ++i)
        CHECK(e0.param_values[i].v == base.param_values[i].v);

    auto e1 = vae::VaeCheckpoint::load(paths[1]);
    CHECK(e1.history.size() == base.history.size() + 1);
    auto e2 = vae::VaeCheckpoint::load(paths[2]);
    CHECK(e2.history.size() == base.history.size() + 2);
}
