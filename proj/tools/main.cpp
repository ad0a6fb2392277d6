#include <iostream>

#include "CLI11.hpp"
#include "voxrep/common.hpp"
#include "voxrep/workflows.hpp"

// CLI verbs mirror the workflow commands; every flag overrides its config
// file key.

namespace {

using voxrep::flow::Config;

struct CommonOpts {
    std::string config_path;
    std::string out_dir = ".";
    std::string seed;
    std::string jobs;
    bool deterministic = true;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "key = value config file");
    cmd->add_option("--out-dir", opts.out_dir, "output directory");
    cmd->add_option("--seed", opts.seed, "rng seed (overrides config)");
    cmd->add_option("--jobs", opts.jobs, "worker thread cap");
    cmd->add_flag("--deterministic,!--no-deterministic", opts.deterministic,
                  "fixed work partitioning (always on; flag kept for interface stability)");
}

Config make_config(const CommonOpts& opts,
                   const std::vector<std::pair<std::string, std::string>>& overrides) {
    Config cfg;
    if (!opts.config_path.empty()) cfg = Config::load(opts.config_path);
    if (!opts.seed.empty()) cfg.set("seed", opts.seed);
    if (!opts.jobs.empty()) cfg.set("jobs", opts.jobs);
    for (const auto& [k, v] : overrides)
        if (!v.empty()) cfg.set(k, v);
    voxrep::set_max_jobs(static_cast<int>(cfg.get_i64("jobs", 1)));
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"voxrep: volumetric representation learning workflows"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic cohort");
    CommonOpts synth_opts;
    add_common(synth, synth_opts);
    std::string synth_subjects, synth_grid, synth_timepoints, synth_noise;
    synth->add_option("--subjects", synth_subjects, "cohort size");
    synth->add_option("--grid", synth_grid, "grid dims, e.g. 16,16,16");
    synth->add_option("--timepoints", synth_timepoints, "series length");
    synth->add_option("--noise", synth_noise, "noise sigma");

    // split
    auto* split = app.add_subcommand("split", "assign folds or train/val/test splits");
    CommonOpts split_opts;
    add_common(split, split_opts);
    std::string split_manifest, split_out, split_folds, split_fractions, split_stratify;
    split->add_option("--manifest", split_manifest, "input manifest csv")->required();
    split->add_option("--out", split_out, "output manifest csv")->required();
    split->add_option("--folds", split_folds, "fold count (k-fold mode)");
    split->add_option("--fractions", split_fractions, "e.g. 0.8,0.1,0.1 (fractions mode)");
    split->add_option("--stratify", split_stratify, "sex | diagnosis | auto | none");

    // pretrain
    auto* pretrain = app.add_subcommand("pretrain", "train the representation model");
    CommonOpts pre_opts;
    add_common(pretrain, pre_opts);
    std::string pre_manifest, pre_model, pre_latent, pre_epochs, pre_batch, pre_lr, pre_patience,
        pre_klw, pre_paa;
    pretrain->add_option("--manifest", pre_manifest, "manifest csv")->required();
    pretrain->add_option("--model", pre_model, "vae | pca");
    pretrain->add_option("--latent-dim", pre_latent, "latent width / component count");
    pretrain->add_option("--epochs", pre_epochs, "training epochs");
    pretrain->add_option("--batch-size", pre_batch, "minibatch size");
    pretrain->add_option("--lr", pre_lr, "learning rate");
    pretrain->add_option("--patience", pre_patience, "early-stopping patience");
    pretrain->add_option("--kl-weight", pre_klw, "beta on the KL term");
    pretrain->add_option("--paa-window", pre_paa, "PAA window (1 = off)");

    // finetune
    auto* finetune = app.add_subcommand("finetune", "fine-tune a checkpoint on new data");
    CommonOpts ft_opts;
    add_common(finetune, ft_opts);
    std::string ft_ckpt, ft_manifest, ft_schedule, ft_lr, ft_batch, ft_paa;
    finetune->add_option("--checkpoint", ft_ckpt, "pretrained checkpoint")->required();
    finetune->add_option("--manifest", ft_manifest, "target manifest csv")->required();
    finetune->add_option("--schedule", ft_schedule, "epoch counts, e.g. 0,1,2,5,10,50,100");
    finetune->add_option("--lr", ft_lr, "learning rate");
    finetune->add_option("--batch-size", ft_batch, "minibatch size");
    finetune->add_option("--paa-window", ft_paa, "PAA window (1 = off)");

    // encode
    auto* encode = app.add_subcommand("encode", "write per-subject latents");
    CommonOpts enc_opts;
    add_common(encode, enc_opts);
    std::string enc_model, enc_manifest, enc_paa, enc_batch;
    encode->add_option("--model", enc_model, "checkpoint.vae or model.pca")->required();
    encode->add_option("--manifest", enc_manifest, "manifest csv")->required();
    encode->add_option("--paa-window", enc_paa, "PAA window (1 = off)");
    encode->add_option("--batch-size", enc_batch, "inference batch size");

    // eval
    auto* eval = app.add_subcommand("eval", "train/evaluate the downstream head grid");
    CommonOpts eval_opts;
    add_common(eval, eval_opts);
    std::string eval_latents, eval_manifest, eval_tasks, eval_heads, eval_knn, eval_lstm_epochs;
    eval->add_option("--latents", eval_latents, "latent store directory")->required();
    eval->add_option("--manifest", eval_manifest, "manifest csv with folds")->required();
    eval->add_option("--tasks", eval_tasks, "subset of age,sex,diagnosis");
    eval->add_option("--heads", eval_heads, "subset of svm,msvm,knn,mknn,svr,msvr,knr,mknr,lstm");
    eval->add_option("--knn-k", eval_knn, "neighbor count");
    eval->add_option("--lstm-epochs", eval_lstm_epochs, "lstm training epochs");

    // groupdiff
    auto* groupdiff = app.add_subcommand("groupdiff", "decode and threshold group differences");
    CommonOpts gd_opts;
    add_common(groupdiff, gd_opts);
    std::string gd_ckpt, gd_latents, gd_manifest, gd_group = "sex", gd_quantile;
    groupdiff->add_option("--checkpoint", gd_ckpt, "VAE checkpoint")->required();
    groupdiff->add_option("--latents", gd_latents, "latent store directory")->required();
    groupdiff->add_option("--manifest", gd_manifest, "manifest csv")->required();
    groupdiff->add_option("--group", gd_group, "sex | diagnosis");
    groupdiff->add_option("--quantile", gd_quantile, "abs-value threshold quantile");

    // report
    auto* report = app.add_subcommand("report", "flatten a run report to csv");
    std::string rep_json, rep_csv;
    report->add_option("--report", rep_json, "run_report.json")->required();
    report->add_option("--out", rep_csv, "output csv path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) {
            auto cfg = make_config(synth_opts, {{"subjects", synth_subjects},
                                                {"grid", synth_grid},
                                                {"timepoints", synth_timepoints},
                                                {"noise_sigma", synth_noise}});
            std::cout << voxrep::flow::cmd_synth(cfg, synth_opts.out_dir) << '\n';
        } else if (split->parsed()) {
            auto cfg = make_config(split_opts, {{"folds", split_folds},
                                                {"fractions", split_fractions},
                                                {"stratify", split_stratify}});
            voxrep::flow::cmd_split(cfg, split_manifest, split_out);
            std::cout << split_out << '\n';
        } else if (pretrain->parsed()) {
            auto cfg = make_config(pre_opts, {{"model", pre_model},
                                              {"latent_dim", pre_latent},
                                              {"epochs", pre_epochs},
                                              {"batch_size", pre_batch},
                                              {"lr", pre_lr},
                                              {"patience", pre_patience},
                                              {"kl_weight", pre_klw},
                                              {"paa_window", pre_paa}});
            std::cout << voxrep::flow::cmd_pretrain(cfg, pre_manifest, pre_opts.out_dir) << '\n';
        } else if (finetune->parsed()) {
            auto cfg = make_config(ft_opts, {{"finetune_epochs", ft_schedule},
                                             {"lr", ft_lr},
                                             {"batch_size", ft_batch},
                                             {"paa_window", ft_paa}});
            for (const auto& path :
                 voxrep::flow::cmd_finetune(cfg, ft_ckpt, ft_manifest, ft_opts.out_dir))
                std::cout << path << '\n';
        } else if (encode->parsed()) {
            auto cfg = make_config(enc_opts,
                                   {{"paa_window", enc_paa}, {"batch_size", enc_batch}});
            voxrep::flow::cmd_encode(cfg, enc_model, enc_manifest, enc_opts.out_dir);
            std::cout << enc_opts.out_dir << '\n';
        } else if (eval->parsed()) {
            auto cfg = make_config(eval_opts, {{"tasks", eval_tasks},
                                               {"heads", eval_heads},
                                               {"knn_k", eval_knn},
                                               {"lstm_epochs", eval_lstm_epochs}});
            voxrep::flow::cmd_eval(cfg, eval_latents, eval_manifest, eval_opts.out_dir);
            std::cout << eval_opts.out_dir << "/run_report.json" << '\n';
        } else if (groupdiff->parsed()) {
            auto cfg = make_config(gd_opts, {{"quantile", gd_quantile}});
            std::cout << voxrep::flow::cmd_groupdiff(cfg, gd_ckpt, gd_latents, gd_manifest,
                                                     gd_group, gd_opts.out_dir)
                      << '\n';
        } else if (report->parsed()) {
            if (rep_csv.empty()) rep_csv = rep_json + ".csv";
            voxrep::flow::cmd_report(rep_json, rep_csv);
        }
    } catch (const voxrep::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
