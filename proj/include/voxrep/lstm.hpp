#pragma once

#include <string>

#include "voxrep/autograd.hpp"
#include "voxrep/nn.hpp"

namespace voxrep::heads {

struct LstmTrainConfig {
    int64_t epochs = 200;
    double lr = 1e-3;
    int64_t patience = 20;
    double dropout = 0.5;
    uint64_t seed = 0;
};

// LSTM over a latent time series. Hidden width is twice the input width; all
// T hidden states are concatenated, passed through dropout, and mapped to one
// scalar by a linear layer. Classification heads emit logits under BCE,
// regression heads raw values under MSE.
template <class S>
class LstmHead {
public:
    LstmHead(int64_t input_dim, int64_t timesteps, bool classification, uint64_t seed)
        : input_dim_(input_dim),
          hidden_dim_(2 * input_dim),
          timesteps_(timesteps),
          classification_(classification),
          seed_(seed) {
        if (input_dim < 1 || timesteps < 1)
            throw ArgumentError("LstmHead: input_dim and timesteps must be positive");
        Rng rng(Rng::mix(seed, 0x15f3));
        const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_dim_));
        auto uni = [&](Shape shape) {
            return tc::uniform_init<S>(std::move(shape), -bound, bound, rng);
        };
        w_ih_ = params_.add("lstm.w_ih", uni({4 * hidden_dim_, input_dim_}));
        w_hh_ = params_.add("lstm.w_hh", uni({4 * hidden_dim_, hidden_dim_}));
        b_ih_ = params_.add("lstm.b_ih", uni({4 * hidden_dim_}));
        b_hh_ = params_.add("lstm.b_hh", uni({4 * hidden_dim_}));
        w_out_ = params_.add("out.w", uni({1, timesteps_ * hidden_dim_}));
        b_out_ = params_.add("out.b", TensorData<S>({1}));
    }

    int64_t input_dim() const { return input_dim_; }
    int64_t hidden_dim() const { return hidden_dim_; }
    int64_t timesteps() const { return timesteps_; }
    int64_t feature_width() const { return timesteps_ * hidden_dim_; }
    bool classification() const { return classification_; }
    tc::ParamStore<S>& params() { return params_; }

    // x: [N, T, L]. Returns [N, 1] predictions (logits for classification).
    tc::Var<S> forward(const TensorData<S>& x, bool train, Rng* dropout_rng,
                       double dropout_rate) {
        check_input(x);
        const int64_t n = x.shape[0];
        std::vector<tc::Var<S>> steps = slice_steps(x);
        tc::Var<S> h = tc::Var<S>::constant(TensorData<S>({n, hidden_dim_}));
        tc::Var<S> c = tc::Var<S>::constant(TensorData<S>({n, hidden_dim_}));
        std::vector<tc::Var<S>> hidden;
        hidden.reserve(timesteps_);
        for (int64_t t = 0; t < timesteps_; ++t) {
            auto gates = tc::add(tc::linear(steps[t], w_ih_, b_ih_),
                                 tc::linear(h, w_hh_, b_hh_));
            auto i = tc::sigmoid(tc::slice_cols(gates, 0, hidden_dim_));
            auto f = tc::sigmoid(tc::slice_cols(gates, hidden_dim_, 2 * hidden_dim_));
            auto g = tc::vtanh(tc::slice_cols(gates, 2 * hidden_dim_, 3 * hidden_dim_));
            auto o = tc::sigmoid(tc::slice_cols(gates, 3 * hidden_dim_, 4 * hidden_dim_));
            c = tc::add(tc::mul(f, c), tc::mul(i, g));
            h = tc::mul(o, tc::vtanh(c));
            hidden.push_back(h);
        }
        auto feats = tc::concat_cols(hidden);
        if (train && dropout_rate > 0) {
            if (!dropout_rng) throw ArgumentError("LstmHead: dropout needs an rng in train mode");
            feats = tc::dropout(feats, dropout_rate, *dropout_rng, true);
        }
        return tc::linear(feats, w_out_, b_out_);
    }

    tc::Var<S> loss(const TensorData<S>& x, const std::vector<S>& y, bool train,
                    Rng* dropout_rng, double dropout_rate) {
        auto pred = forward(x, train, dropout_rng, dropout_rate);
        return classification_ ? tc::bce_with_logits_mean(pred, y) : tc::mse_mean(pred, y);
    }

    // Full-batch ADAM with patience-based early stopping on validation loss.
    // Returns per-epoch (train, val) losses. Dropout is active only here.
    std::vector<std::pair<double, double>> fit(const TensorData<S>& x_train,
                                               const std::vector<S>& y_train,
                                               const TensorData<S>& x_val,
                                               const std::vector<S>& y_val,
                                               const LstmTrainConfig& cfg) {
        check_input(x_train);
        const bool have_val = x_val.numel() > 0;
        tc::AdamState<S> opt;
        opt.lr = static_cast<S>(cfg.lr);
        opt.init_like(params_);
        Rng dropout_rng(Rng::mix(cfg.seed, 0x61));

        std::vector<std::pair<double, double>> history;
        double best_val = std::numeric_limits<double>::infinity();
        std::vector<AlignedVec<S>> best_values = param_values();
        int64_t stall = 0;
        for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
            params_.zero_grad();
            auto l = loss(x_train, y_train, true, &dropout_rng, cfg.dropout);
            const double train_loss = l.item();
            if (!std::isfinite(train_loss))
                throw NumericError("LstmHead::fit: non-finite training loss at epoch " +
                                   std::to_string(epoch));
            l.backward();
            tc::adam_step(params_, opt);

            double val_loss = train_loss;
            if (have_val) {
                tc::NoGradGuard eval;
                val_loss = loss(x_val, y_val, false, nullptr, 0.0).item();
            }
            history.push_back({train_loss, val_loss});
            if (val_loss < best_val) {
                best_val = val_loss;
                best_values = param_values();
                stall = 0;
            } else if (++stall >= cfg.patience) {
                break;
            }
        }
        set_param_values(best_values);
        return history;
    }

    // Deterministic evaluation (dropout off), one scalar per row.
    std::vector<S> predict(const TensorData<S>& x) {
        tc::NoGradGuard eval;
        auto out = forward(x, false, nullptr, 0.0);
        return std::vector<S>(out.value().begin(), out.value().end());
    }

private:
    int64_t input_dim_, hidden_dim_, timesteps_;
    bool classification_;
    uint64_t seed_;
    tc::ParamStore<S> params_;
    tc::Var<S> w_ih_, w_hh_, b_ih_, b_hh_, w_out_, b_out_;

    void check_input(const TensorData<S>& x) const {
        if (x.shape.size() != 3 || x.shape[1] != timesteps_ || x.shape[2] != input_dim_)
            throw ShapeError("LstmHead: expected [N," + std::to_string(timesteps_) + "," +
                             std::to_string(input_dim_) + "], got " + shape_str(x.shape));
    }

    std::vector<tc::Var<S>> slice_steps(const TensorData<S>& x) const {
        const int64_t n = x.shape[0];
        std::vector<tc::Var<S>> steps;
        steps.reserve(timesteps_);
        for (int64_t t = 0; t < timesteps_; ++t) {
            TensorData<S> step({n, input_dim_});
            for (int64_t r = 0; r < n; ++r)
                std::copy_n(x.v.data() + (r * timesteps_ + t) * input_dim_, input_dim_,
                            step.v.data() + r * input_dim_);
            steps.push_back(tc::Var<S>::constant(std::move(step)));
        }
        return steps;
    }

    std::vector<AlignedVec<S>> param_values() const {
        std::vector<AlignedVec<S>> vals;
        for (const auto& e : params_.entries()) vals.push_back(e.var.value());
        return vals;
    }
    void set_param_values(const std::vector<AlignedVec<S>>& vals) {
        for (size_t i = 0; i < params_.size(); ++i)
            params_.entries()[i].var.value_mut() = vals[i];
    }
};

}  // namespace voxrep::heads
