#pragma once

#include <array>
#include <memory>
#include <string>

#include "voxrep/ingest.hpp"
#include "voxrep/kernels.hpp"
#include "voxrep/nn.hpp"

namespace voxrep::vae {

using VarF = tc::Var<float>;

// Architecture description. Channel ladder and block count are fixed; the
// spatial ladder is derived from the input grid by the ceil(d/2) rule of the
// stride-2 3x3x3 convolutions.
struct VaeSpec {
    int64_t latent_dim = 256;
    std::array<int64_t, 3> input_spatial = {53, 63, 52};
    std::vector<int64_t> encoder_channels = {16, 32, 64, 128, 256};

    // Spatial dims after each encoder block.
    std::vector<std::array<int64_t, 3>> stage_spatial() const;
    int64_t bottleneck_features() const;
    void validate() const;
};

struct TrainConfig {
    int64_t epochs = 100;
    double lr = 5e-4;
    int64_t batch_size = 16;
    int64_t patience = 20;
    double kl_weight = 1.0;  // beta
    uint64_t seed = 0;

    void validate() const;
};

// Per-batch posterior parameters, [N, L] each.
struct LatentDistribution {
    VarF mu;
    VarF log_var;
};

struct ElboTerms {
    VarF total, recon, kl;
};

struct EpochStats {
    int64_t epoch = 0;
    double train_total = 0, train_recon = 0, train_kl = 0;
    double val_total = 0, val_recon = 0, val_kl = 0;
};

// Value snapshot of everything needed to resume or rerun inference.
// File layout ("VAE1"): magic, u64 metadata length, metadata JSON (spec,
// seed, epoch, stop reason, history, parameter names/shapes, optimizer
// scalars), then one VXT1 tensor per parameter in registration order,
// followed by the ADAM first and second moments in the same order when
// present.
struct VaeCheckpoint {
    VaeSpec spec;
    uint64_t rng_seed = 0;
    int64_t epoch = 0;
    std::string stop_reason = "initialized";
    std::vector<EpochStats> history;
    std::vector<std::string> param_names;
    std::vector<TensorF> param_values;
    bool has_optimizer = false;
    tc::AdamState<float> opt_state;

    void save(const std::string& path) const;
    static VaeCheckpoint load(const std::string& path);
};

class Vae {
public:
    Vae(VaeSpec spec, uint64_t init_seed);
    explicit Vae(const VaeCheckpoint& ckpt);

    const VaeSpec& spec() const { return spec_; }
    tc::ParamStore<float>& params() { return params_; }

    // x: [N, 1, X, Y, Z], normalized intensities.
    LatentDistribution encode(const VarF& x);
    // z: [N, L] -> [N, 1, X, Y, Z].
    VarF decode(const VarF& z);

    // z = mu + exp(log_var / 2) * eps.
    static VarF reparameterize(const LatentDistribution& d, Rng& rng);
    // Closed-form KL to N(0, I), averaged over the batch.
    static VarF kl_divergence_batch_mean(const LatentDistribution& d);
    // recon: per-sample sum of squared errors, averaged over the batch;
    // total = recon + beta * kl.
    static ElboTerms elbo_loss(const VarF& x, const VarF& x_hat, const LatentDistribution& d,
                               double beta);

    // Posterior means for a stack of volumes [N, X, Y, Z] -> [N, L]; no
    // sampling, no tape.
    TensorF infer_mu(const TensorF& volumes, int64_t batch_size = 16);
    // Rows are encode(x^(t)).mu for a normalized series.
    TensorF infer_latents(const ingest::VolumeSeries& v, int64_t batch_size = 16);
    // Single latent vector -> [X, Y, Z] volume, no tape.
    TensorF decode_volume(const std::vector<float>& z);

    VaeCheckpoint snapshot(int64_t epoch, const std::string& reason,
                           const std::vector<EpochStats>& history,
                           const tc::AdamState<float>* opt) const;
    void restore_values(const VaeCheckpoint& ckpt);

private:
    struct WnConv {
        VarF v, g, b;
        int64_t stride = 1, pad = 1;
    };
    struct Block {
        WnConv conv1, conv2, skip;
        bool has_skip = false;
    };
    struct WnLinear {
        VarF v, g, b;
    };

    VaeSpec spec_;
    uint64_t init_seed_;
    tc::ParamStore<float> params_;
    std::vector<Block> enc_blocks_, dec_blocks_;
    WnLinear mu_head_, logvar_head_, dec_fc_;
    VarF out_v_, out_g_, out_b_;  // final 1x1x1 transpose conv

    WnConv make_conv(const std::string& name, int64_t cin, int64_t cout, int64_t k,
                     int64_t stride, int64_t pad, Rng& rng);
    WnLinear make_linear(const std::string& name, int64_t in, int64_t out, Rng& rng);
    Block make_block(const std::string& name, int64_t cin, int64_t cout, int64_t stride,
                     Rng& rng);
    VarF run_block(Block& blk, const VarF& x);
    void build(Rng& rng);
};

// Closed-form KL of a single diagonal-normal posterior against N(0, I).
double kl_divergence(const std::vector<double>& mu, const std::vector<double>& log_var);

struct TrainData {
    // Normalized per-sample volumes, each [X, Y, Z].
    std::vector<TensorF> train, val;
};

// Shuffled i.i.d. timepoint minibatches, ADAM on the ELBO, patience-based
// early stopping on validation total loss (posterior-mean validation pass).
// Returns the checkpoint at the best validation epoch; on divergence returns
// the last good snapshot with stop_reason "diverged".
VaeCheckpoint train(const VaeSpec& spec, const TrainData& data, const TrainConfig& cfg);

// epochs = 0 returns ckpt unchanged; otherwise continues training with a
// fresh optimizer for exactly `epochs` epochs (no early stopping).
VaeCheckpoint fine_tune(const VaeCheckpoint& ckpt, const TrainData& data, int64_t epochs,
                        const TrainConfig& cfg);

// abs-value quantile threshold used by group_difference: values whose
// magnitude falls below the q-quantile (nearest-rank, ascending) are zeroed.
float abs_quantile(const float* values, int64_t count, double q);
template <class Vec>
float abs_quantile(const Vec& values, double q) {
    return abs_quantile(values.data(), static_cast<int64_t>(values.size()), q);
}

// Decode each group's mean latent, subtract (a - b), zero voxels below the
// quantile of |diff|.
TensorF group_difference(Vae& model, const std::vector<TensorF>& latents_a,
                         const std::vector<TensorF>& latents_b, double quantile = 0.8);

}  // namespace voxrep::vae
