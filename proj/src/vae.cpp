#include "voxrep/vae.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace voxrep::vae {

using tc::conv3d;
using tc::conv_transpose3d_1x1;
using tc::trilinear_resize;
using tc::weight_norm;

// ---------------------------------------------------------------------------
// Spec
// ---------------------------------------------------------------------------

std::vector<std::array<int64_t, 3>> VaeSpec::stage_spatial() const {
    std::vector<std::array<int64_t, 3>> stages;
    std::array<int64_t, 3> d = input_spatial;
    for (size_t i = 0; i < encoder_channels.size(); ++i) {
        for (auto& x : d) x = (x + 1) / 2;  // stride-2 3x3x3 pad-1
        stages.push_back(d);
    }
    return stages;
}

int64_t VaeSpec::bottleneck_features() const {
    const auto last = stage_spatial().back();
    return encoder_channels.back() * last[0] * last[1] * last[2];
}

void VaeSpec::validate() const {
    if (latent_dim < 1) throw ArgumentError("VaeSpec: latent_dim must be positive");
    if (encoder_channels.size() != 5)
        throw ArgumentError("VaeSpec: exactly five encoder blocks expected");
    for (int64_t c : encoder_channels)
        if (c < 1) throw ArgumentError("VaeSpec: channel counts must be positive");
    for (int64_t d : input_spatial)
        if (d < 2) throw ArgumentError("VaeSpec: spatial dims must be >= 2");
}

void TrainConfig::validate() const {
    if (epochs < 1) throw ArgumentError("TrainConfig: epochs must be positive");
    if (lr < 0) throw ArgumentError("TrainConfig: lr must be >= 0");  // 0 = frozen run
    if (batch_size < 1) throw ArgumentError("TrainConfig: batch_size must be positive");
    if (patience < 1) throw ArgumentError("TrainConfig: patience must be positive");
    if (patience > epochs) throw ArgumentError("TrainConfig: patience must be <= epochs");
    if (kl_weight < 0) throw ArgumentError("TrainConfig: kl_weight must be >= 0");
}

// ---------------------------------------------------------------------------
// Model assembly
// ---------------------------------------------------------------------------

Vae::Vae(VaeSpec spec, uint64_t init_seed) : spec_(std::move(spec)), init_seed_(init_seed) {
    spec_.validate();
    Rng rng(Rng::mix(init_seed_, 0x7a3f));
    build(rng);
}

Vae::Vae(const VaeCheckpoint& ckpt) : Vae(ckpt.spec, ckpt.rng_seed) { restore_values(ckpt); }

Vae::WnConv Vae::make_conv(const std::string& name, int64_t cin, int64_t cout, int64_t k,
                           int64_t stride, int64_t pad, Rng& rng) {
    WnConv c;
    c.stride = stride;
    c.pad = pad;
    auto v0 = tc::he_init<float>({cout, cin, k, k, k}, cin * k * k * k, rng);
    auto g0 = tc::row_norms(v0);
    c.v = params_.add(name + ".v", std::move(v0));
    c.g = params_.add(name + ".g", std::move(g0));
    c.b = params_.add(name + ".b", TensorF({cout}));
    return c;
}

Vae::WnLinear Vae::make_linear(const std::string& name, int64_t in, int64_t out, Rng& rng) {
    WnLinear l;
    auto v0 = tc::he_init<float>({out, in}, in, rng);
    auto g0 = tc::row_norms(v0);
    l.v = params_.add(name + ".v", std::move(v0));
    l.g = params_.add(name + ".g", std::move(g0));
    l.b = params_.add(name + ".b", TensorF({out}));
    return l;
}

Vae::Block Vae::make_block(const std::string& name, int64_t cin, int64_t cout, int64_t stride,
                           Rng& rng) {
    Block blk;
    blk.conv1 = make_conv(name + ".conv1", cin, cout, 3, stride, 1, rng);
    blk.conv2 = make_conv(name + ".conv2", cout, cout, 3, 1, 1, rng);
    blk.has_skip = stride != 1 || cin != cout;
    if (blk.has_skip) blk.skip = make_conv(name + ".skip", cin, cout, 1, stride, 0, rng);
    return blk;
}

void Vae::build(Rng& rng) {
    const auto& ch = spec_.encoder_channels;
    int64_t cin = 1;
    for (size_t i = 0; i < ch.size(); ++i) {
        enc_blocks_.push_back(make_block("enc.block" + std::to_string(i + 1), cin, ch[i], 2, rng));
        cin = ch[i];
    }
    const int64_t bottleneck = spec_.bottleneck_features();
    mu_head_ = make_linear("enc.mu", bottleneck, spec_.latent_dim, rng);
    logvar_head_ = make_linear("enc.logvar", bottleneck, spec_.latent_dim, rng);
    dec_fc_ = make_linear("dec.fc", spec_.latent_dim, bottleneck, rng);

    // Mirrored channel ladder; the last block keeps the first encoder width.
    std::vector<int64_t> dch(ch.rbegin(), ch.rend());
    dch.push_back(ch.front());
    for (size_t i = 0; i + 1 < dch.size(); ++i)
        dec_blocks_.push_back(
            make_block("dec.block" + std::to_string(i + 1), dch[i], dch[i + 1], 1, rng));

    auto v0 = tc::he_init<float>({1, ch.front()}, ch.front(), rng);
    auto g0 = tc::row_norms(v0);
    out_v_ = params_.add("dec.out.v", std::move(v0));
    out_g_ = params_.add("dec.out.g", std::move(g0));
    out_b_ = params_.add("dec.out.b", TensorF({1}));
}

VarF Vae::run_block(Block& blk, const VarF& x) {
    VarF h = conv3d(x, weight_norm(blk.conv1.v, blk.conv1.g), blk.conv1.b, blk.conv1.stride,
                    blk.conv1.pad);
    h = tc::elu(h);
    h = conv3d(h, weight_norm(blk.conv2.v, blk.conv2.g), blk.conv2.b, 1, 1);
    VarF s = blk.has_skip ? conv3d(x, weight_norm(blk.skip.v, blk.skip.g), blk.skip.b,
                                   blk.skip.stride, 0)
                          : x;
    return tc::elu(tc::add(h, s));
}

LatentDistribution Vae::encode(const VarF& x) {
    const auto& s = x.shape();
    if (s.size() != 5 || s[1] != 1 || s[2] != spec_.input_spatial[0] ||
        s[3] != spec_.input_spatial[1] || s[4] != spec_.input_spatial[2])
        throw ShapeError("Vae::encode: expected [N,1," + std::to_string(spec_.input_spatial[0]) +
                         "," + std::to_string(spec_.input_spatial[1]) + "," +
                         std::to_string(spec_.input_spatial[2]) + "], got " + shape_str(s));
    VarF h = x;
    for (auto& blk : enc_blocks_) h = run_block(blk, h);
    h = tc::reshape(h, {s[0], spec_.bottleneck_features()});
    LatentDistribution d;
    d.mu = tc::linear(h, weight_norm(mu_head_.v, mu_head_.g), mu_head_.b);
    d.log_var = tc::linear(h, weight_norm(logvar_head_.v, logvar_head_.g), logvar_head_.b);
    return d;
}

VarF Vae::decode(const VarF& z) {
    if (z.shape().size() != 2 || z.shape()[1] != spec_.latent_dim)
        throw ShapeError("Vae::decode: expected [N," + std::to_string(spec_.latent_dim) +
                         "], got " + shape_str(z.shape()));
    const int64_t n = z.shape()[0];
    const auto stages = spec_.stage_spatial();
    VarF h = tc::linear(z, weight_norm(dec_fc_.v, dec_fc_.g), dec_fc_.b);
    const auto& last = stages.back();
    h = tc::reshape(h, {n, spec_.encoder_channels.back(), last[0], last[1], last[2]});
    for (size_t i = 0; i < dec_blocks_.size(); ++i) {
        const auto target = i + 1 < stages.size() ? stages[stages.size() - 2 - i]
                                                  : spec_.input_spatial;
        h = trilinear_resize(h, target[0], target[1], target[2]);
        h = run_block(dec_blocks_[i], h);
    }
    return conv_transpose3d_1x1(h, weight_norm(out_v_, out_g_), out_b_);
}

VarF Vae::reparameterize(const LatentDistribution& d, Rng& rng) {
    TensorF eps(d.mu.tensor().shape);
    for (auto& e : eps.v) e = static_cast<float>(rng.normal());
    VarF sigma = tc::vexp(tc::mul_scalar(d.log_var, 0.5f));
    return tc::add(d.mu, tc::mul(sigma, VarF::constant(std::move(eps))));
}

VarF Vae::kl_divergence_batch_mean(const LatentDistribution& d) {
    check_same_shape(d.mu.shape(), d.log_var.shape(), "kl_divergence");
    const int64_t n = d.mu.shape().at(0);
    VarF term = tc::add_scalar(tc::sub(tc::add(tc::mul(d.mu, d.mu), tc::vexp(d.log_var)),
                                       d.log_var),
                               -1.0f);
    return tc::mul_scalar(tc::sum(term), 0.5f / static_cast<float>(n));
}

ElboTerms Vae::elbo_loss(const VarF& x, const VarF& x_hat, const LatentDistribution& d,
                         double beta) {
    check_same_shape(x.shape(), x_hat.shape(), "elbo_loss");
    const int64_t n = x.shape().at(0);
    VarF diff = tc::sub(x_hat, x);
    ElboTerms t;
    t.recon = tc::mul_scalar(tc::sum(tc::mul(diff, diff)), 1.0f / static_cast<float>(n));
    t.kl = kl_divergence_batch_mean(d);
    t.total = tc::add(t.recon, tc::mul_scalar(t.kl, static_cast<float>(beta)));
    return t;
}

double kl_divergence(const std::vector<double>& mu, const std::vector<double>& log_var) {
    if (mu.size() != log_var.size()) throw ShapeError("kl_divergence: length mismatch");
    double acc = 0;
    for (size_t i = 0; i < mu.size(); ++i)
        acc += mu[i] * mu[i] + std::exp(log_var[i]) - 1.0 - log_var[i];
    return 0.5 * acc;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

TensorF Vae::infer_mu(const TensorF& volumes, int64_t batch_size) {
    if (volumes.rank() != 4)
        throw ShapeError("infer_mu: expected [N,X,Y,Z], got " + shape_str(volumes.shape));
    const int64_t n = volumes.shape[0];
    const int64_t vox = volumes.numel() / std::max<int64_t>(n, 1);
    TensorF out({n, spec_.latent_dim});
    tc::NoGradGuard eval;
    for (int64_t start = 0; start < n; start += batch_size) {
        const int64_t b = std::min(batch_size, n - start);
        TensorF batch({b, 1, spec_.input_spatial[0], spec_.input_spatial[1],
                       spec_.input_spatial[2]});
        if (batch.numel() != b * vox)
            throw ShapeError("infer_mu: volume grid does not match model spec");
        std::copy_n(volumes.v.data() + start * vox, b * vox, batch.v.data());
        auto d = encode(VarF::constant(std::move(batch)));
        std::copy_n(d.mu.value().data(), b * spec_.latent_dim,
                    out.v.data() + start * spec_.latent_dim);
    }
    return out;
}

TensorF Vae::infer_latents(const ingest::VolumeSeries& v, int64_t batch_size) {
    if (!v.normalized)
        throw ArgumentError("infer_latents: series must be normalized first");
    return infer_mu(v.data, batch_size);
}

TensorF Vae::decode_volume(const std::vector<float>& z) {
    if (static_cast<int64_t>(z.size()) != spec_.latent_dim)
        throw ShapeError("decode_volume: expected latent of length " +
                         std::to_string(spec_.latent_dim));
    tc::NoGradGuard eval;
    auto out = decode(VarF::constant(TensorF({1, spec_.latent_dim}, std::vector<float>(z))));
    return TensorF({spec_.input_spatial[0], spec_.input_spatial[1], spec_.input_spatial[2]},
                   out.value());
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

VaeCheckpoint Vae::snapshot(int64_t epoch, const std::string& reason,
                            const std::vector<EpochStats>& history,
                            const tc::AdamState<float>* opt) const {
    VaeCheckpoint c;
    c.spec = spec_;
    c.rng_seed = init_seed_;
    c.epoch = epoch;
    c.stop_reason = reason;
    c.history = history;
    for (const auto& e : params_.entries()) {
        c.param_names.push_back(e.name);
        c.param_values.push_back(e.var.tensor());
    }
    if (opt) {
        c.has_optimizer = true;
        c.opt_state = *opt;
    }
    return c;
}

void Vae::restore_values(const VaeCheckpoint& ckpt) {
    if (ckpt.param_values.size() != params_.size())
        throw FormatError("checkpoint: parameter count mismatch");
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& e = params_.entries()[i];
        if (ckpt.param_names[i] != e.name)
            throw FormatError("checkpoint: parameter order mismatch at " + e.name);
        if (ckpt.param_values[i].shape != e.var.shape())
            throw FormatError("checkpoint: shape mismatch for " + e.name);
        e.var.value_mut() = ckpt.param_values[i].v;
    }
}

void VaeCheckpoint::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("VaeCheckpoint::save: cannot open " + path);

    nlohmann::json meta;
    meta["format"] = 1;
    meta["spec"] = {{"latent_dim", spec.latent_dim},
                    {"input_spatial", spec.input_spatial},
                    {"encoder_channels", spec.encoder_channels}};
    meta["rng_seed"] = rng_seed;
    meta["epoch"] = epoch;
    meta["stop_reason"] = stop_reason;
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& h : history)
        hist.push_back({h.epoch, h.train_total, h.train_recon, h.train_kl, h.val_total,
                        h.val_recon, h.val_kl});
    meta["history"] = hist;
    nlohmann::json params = nlohmann::json::array();
    for (size_t i = 0; i < param_names.size(); ++i)
        params.push_back({{"name", param_names[i]}, {"shape", param_values[i].shape}});
    meta["params"] = params;
    meta["optimizer"] = {{"present", has_optimizer},
                         {"lr", opt_state.lr},
                         {"beta1", opt_state.beta1},
                         {"beta2", opt_state.beta2},
                         {"eps", opt_state.eps},
                         {"step_count", opt_state.step_count}};

    const std::string text = meta.dump();
    os.write("VAE1", 4);
    const uint64_t len = text.size();
    os.write(reinterpret_cast<const char*>(&len), 8);
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : param_values) write_vxt(os, t);
    if (has_optimizer) {
        for (size_t i = 0; i < param_values.size(); ++i)
            write_vxt(os, TensorF(param_values[i].shape,
                                  AlignedVec<float>(opt_state.m[i].begin(),
                                                    opt_state.m[i].end())));
        for (size_t i = 0; i < param_values.size(); ++i)
            write_vxt(os, TensorF(param_values[i].shape,
                                  AlignedVec<float>(opt_state.v[i].begin(),
                                                    opt_state.v[i].end())));
    }
    if (!os) throw IoError("VaeCheckpoint::save: write failed for " + path);
}

VaeCheckpoint VaeCheckpoint::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("VaeCheckpoint::load: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "VAE1", 4) != 0)
        throw FormatError("VaeCheckpoint::load: bad magic (expected VAE1)");
    uint64_t len = 0;
    is.read(reinterpret_cast<char*>(&len), 8);
    std::string text(len, '\0');
    is.read(text.data(), static_cast<std::streamsize>(len));
    if (!is) throw FormatError("VaeCheckpoint::load: truncated metadata");
    auto meta = nlohmann::json::parse(text);

    VaeCheckpoint c;
    c.spec.latent_dim = meta.at("spec").at("latent_dim").get<int64_t>();
    auto sp = meta.at("spec").at("input_spatial").get<std::vector<int64_t>>();
    if (sp.size() != 3) throw FormatError("VaeCheckpoint::load: bad input_spatial");
    c.spec.input_spatial = {sp[0], sp[1], sp[2]};
    c.spec.encoder_channels = meta.at("spec").at("encoder_channels").get<std::vector<int64_t>>();
    c.rng_seed = meta.at("rng_seed").get<uint64_t>();
    c.epoch = meta.at("epoch").get<int64_t>();
    c.stop_reason = meta.at("stop_reason").get<std::string>();
    for (const auto& h : meta.at("history")) {
        EpochStats e;
        e.epoch = h.at(0).get<int64_t>();
        e.train_total = h.at(1).get<double>();
        e.train_recon = h.at(2).get<double>();
        e.train_kl = h.at(3).get<double>();
        e.val_total = h.at(4).get<double>();
        e.val_recon = h.at(5).get<double>();
        e.val_kl = h.at(6).get<double>();
        c.history.push_back(e);
    }
    for (const auto& p : meta.at("params")) {
        c.param_names.push_back(p.at("name").get<std::string>());
        c.param_values.push_back(read_vxt(is));
        const auto want = p.at("shape").get<std::vector<int64_t>>();
        if (c.param_values.back().shape != Shape(want.begin(), want.end()))
            throw FormatError("VaeCheckpoint::load: tensor shape mismatch for " +
                              c.param_names.back());
    }
    const auto& opt = meta.at("optimizer");
    c.has_optimizer = opt.at("present").get<bool>();
    c.opt_state.lr = opt.at("lr").get<float>();
    c.opt_state.beta1 = opt.at("beta1").get<float>();
    c.opt_state.beta2 = opt.at("beta2").get<float>();
    c.opt_state.eps = opt.at("eps").get<float>();
    c.opt_state.step_count = opt.at("step_count").get<int64_t>();
    if (c.has_optimizer) {
        for (size_t i = 0; i < c.param_values.size(); ++i) {
            TensorF t = read_vxt(is);
            c.opt_state.m.emplace_back(t.v.begin(), t.v.end());
        }
        for (size_t i = 0; i < c.param_values.size(); ++i) {
            TensorF t = read_vxt(is);
            c.opt_state.v.emplace_back(t.v.begin(), t.v.end());
        }
    }
    return c;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

TensorF make_batch(const std::vector<TensorF>& samples, const std::vector<int64_t>& order,
                   int64_t start, int64_t count, const VaeSpec& spec) {
    TensorF batch({count, 1, spec.input_spatial[0], spec.input_spatial[1],
                   spec.input_spatial[2]});
    const int64_t vox = batch.numel() / count;
    for (int64_t i = 0; i < count; ++i) {
        const TensorF& s = samples[order[start + i]];
        if (s.numel() != vox)
            throw ShapeError("train: sample volume does not match spec spatial dims");
        std::copy_n(s.v.data(), vox, batch.v.data() + i * vox);
    }
    return batch;
}

struct PassStats {
    double total = 0, recon = 0, kl = 0;
};

// Posterior-mean evaluation pass (deterministic, no sampling).
PassStats eval_pass(Vae& model, const std::vector<TensorF>& samples, const TrainConfig& cfg) {
    tc::NoGradGuard eval;
    PassStats acc;
    std::vector<int64_t> order(samples.size());
    std::iota(order.begin(), order.end(), int64_t{0});
    const int64_t n = static_cast<int64_t>(samples.size());
    for (int64_t start = 0; start < n; start += cfg.batch_size) {
        const int64_t b = std::min<int64_t>(cfg.batch_size, n - start);
        auto x = VarF::constant(make_batch(samples, order, start, b, model.spec()));
        auto d = model.encode(x);
        auto x_hat = model.decode(d.mu);
        auto terms = Vae::elbo_loss(x, x_hat, d, cfg.kl_weight);
        acc.total += terms.total.item() * b;
        acc.recon += terms.recon.item() * b;
        acc.kl += terms.kl.item() * b;
    }
    acc.total /= n;
    acc.recon /= n;
    acc.kl /= n;
    return acc;
}

struct EpochOutcome {
    PassStats stats;
    bool diverged = false;
    std::string note;
};

EpochOutcome train_epoch(Vae& model, tc::AdamState<float>& opt,
                         const std::vector<TensorF>& samples, const TrainConfig& cfg,
                         Rng& shuffle_rng, Rng& eps_rng) {
    EpochOutcome out;
    std::vector<int64_t> order(samples.size());
    std::iota(order.begin(), order.end(), int64_t{0});
    shuffle_rng.shuffle(order);
    const int64_t n = static_cast<int64_t>(samples.size());
    for (int64_t start = 0; start < n; start += cfg.batch_size) {
        const int64_t b = std::min<int64_t>(cfg.batch_size, n - start);
        auto x = VarF::constant(make_batch(samples, order, start, b, model.spec()));
        auto d = model.encode(x);
        auto z = Vae::reparameterize(d, eps_rng);
        auto x_hat = model.decode(z);
        auto terms = Vae::elbo_loss(x, x_hat, d, cfg.kl_weight);
        const double total = terms.total.item();
        if (!std::isfinite(total)) {
            out.diverged = true;
            out.note = "non-finite training loss at sample offset " + std::to_string(start);
            return out;
        }
        model.params().zero_grad();
        terms.total.backward();
        try {
            tc::adam_step(model.params(), opt);
        } catch (const NumericError& e) {
            out.diverged = true;
            out.note = e.what();
            return out;
        }
        out.stats.total += total * b;
        out.stats.recon += terms.recon.item() * b;
        out.stats.kl += terms.kl.item() * b;
    }
    out.stats.total /= n;
    out.stats.recon /= n;
    out.stats.kl /= n;
    return out;
}

}  // namespace

VaeCheckpoint train(const VaeSpec& spec, const TrainData& data, const TrainConfig& cfg) {
    spec.validate();
    cfg.validate();
    if (data.train.empty() || data.val.empty())
        throw ArgumentError("train: train and validation sets must be nonempty");

    Vae model(spec, Rng::mix(cfg.seed, 0x01));
    tc::AdamState<float> opt;
    opt.lr = static_cast<float>(cfg.lr);
    opt.init_like(model.params());
    Rng shuffle_rng(Rng::mix(cfg.seed, 0x02));
    Rng eps_rng(Rng::mix(cfg.seed, 0x03));

    std::vector<EpochStats> history;
    double best_val = std::numeric_limits<double>::infinity();
    int64_t stall = 0;
    VaeCheckpoint best = model.snapshot(0, "initialized", history, &opt);
    std::string reason = "completed";

    for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        auto outcome = train_epoch(model, opt, data.train, cfg, shuffle_rng, eps_rng);
        if (outcome.diverged) {
            reason = "diverged: " + outcome.note;
            break;
        }
        auto val = eval_pass(model, data.val, cfg);
        EpochStats e;
        e.epoch = epoch;
        e.train_total = outcome.stats.total;
        e.train_recon = outcome.stats.recon;
        e.train_kl = outcome.stats.kl;
        e.val_total = val.total;
        e.val_recon = val.recon;
        e.val_kl = val.kl;
        history.push_back(e);
        if (!std::isfinite(val.total)) {
            reason = "diverged: non-finite validation loss";
            break;
        }
        if (val.total < best_val) {
            best_val = val.total;
            stall = 0;
            best = model.snapshot(epoch, "best", history, &opt);
        } else {
            ++stall;
            if (stall >= cfg.patience) {
                reason = "early_stop";
                break;
            }
        }
    }

    best.history = history;
    best.stop_reason = reason;
    return best;
}

VaeCheckpoint fine_tune(const VaeCheckpoint& ckpt, const TrainData& data, int64_t epochs,
                        const TrainConfig& cfg) {
    if (epochs < 0) throw ArgumentError("fine_tune: epochs must be >= 0");
    if (epochs == 0) return ckpt;
    if (data.train.empty()) throw ArgumentError("fine_tune: training set must be nonempty");
    const int64_t vox = ckpt.spec.input_spatial[0] * ckpt.spec.input_spatial[1] *
                        ckpt.spec.input_spatial[2];
    if (data.train.front().numel() != vox)
        throw ShapeError("fine_tune: data spatial dims do not match checkpoint spec");

    Vae model(ckpt);
    tc::AdamState<float> opt;  // fresh optimizer state
    opt.lr = static_cast<float>(cfg.lr);
    opt.init_like(model.params());
    Rng shuffle_rng(Rng::mix(cfg.seed, 0x12));
    Rng eps_rng(Rng::mix(cfg.seed, 0x13));

    std::vector<EpochStats> history = ckpt.history;
    int64_t epoch0 = history.empty() ? 0 : history.back().epoch;
    std::string reason = "fine_tuned";
    for (int64_t i = 1; i <= epochs; ++i) {
        auto outcome = train_epoch(model, opt, data.train, cfg, shuffle_rng, eps_rng);
        if (outcome.diverged) {
            reason = "diverged: " + outcome.note;
            break;
        }
        auto val = data.val.empty() ? outcome.stats : eval_pass(model, data.val, cfg);
        EpochStats e;
        e.epoch = epoch0 + i;
        e.train_total = outcome.stats.total;
        e.train_recon = outcome.stats.recon;
        e.train_kl = outcome.stats.kl;
        e.val_total = val.total;
        e.val_recon = val.recon;
        e.val_kl = val.kl;
        history.push_back(e);
    }
    auto out = model.snapshot(epoch0 + epochs, reason, history, &opt);
    return out;
}

// ---------------------------------------------------------------------------
// Group difference
// ---------------------------------------------------------------------------

float abs_quantile(const float* values, int64_t count, double q) {
    if (count <= 0) throw ArgumentError("abs_quantile: empty input");
    if (q < 0.0 || q > 1.0) throw ArgumentError("abs_quantile: quantile must be in [0,1]");
    std::vector<float> mags(count);
    for (int64_t i = 0; i < count; ++i) mags[i] = std::abs(values[i]);
    std::sort(mags.begin(), mags.end());
    // nearest-rank (ascending); q = 0 keeps everything
    int64_t idx = static_cast<int64_t>(std::ceil(q * static_cast<double>(count))) - 1;
    idx = std::clamp<int64_t>(idx, 0, count - 1);
    return mags[idx];
}

TensorF group_difference(Vae& model, const std::vector<TensorF>& latents_a,
                         const std::vector<TensorF>& latents_b, double quantile) {
    if (latents_a.empty() || latents_b.empty())
        throw ArgumentError("group_difference: both groups must be nonempty");
    const int64_t L = model.spec().latent_dim;

    auto group_mean = [&](const std::vector<TensorF>& group) {
        std::vector<double> acc(L, 0.0);
        int64_t rows = 0;
        for (const auto& subj : group) {
            if (subj.rank() != 2 || subj.shape[1] != L)
                throw ShapeError("group_difference: latent series must be [T, " +
                                 std::to_string(L) + "]");
            for (int64_t t = 0; t < subj.shape[0]; ++t, ++rows)
                for (int64_t j = 0; j < L; ++j) acc[j] += subj.v[t * L + j];
        }
        std::vector<float> mean(L);
        for (int64_t j = 0; j < L; ++j) mean[j] = static_cast<float>(acc[j] / rows);
        return mean;
    };

    TensorF vol_a = model.decode_volume(group_mean(latents_a));
    TensorF vol_b = model.decode_volume(group_mean(latents_b));
    TensorF diff = vol_a;
    for (int64_t i = 0; i < diff.numel(); ++i) diff.v[i] -= vol_b.v[i];

    if (quantile > 0.0) {
        const float thr = abs_quantile(diff.v, quantile);
        for (auto& v : diff.v)
            if (std::abs(v) < thr) v = 0.0f;
    }
    return diff;
}

}  // namespace voxrep::vae
