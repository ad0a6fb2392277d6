#pragma once

#include <string>

#include "voxrep/autograd.hpp"

namespace voxrep::tc {

// Named trainable leaves in registration order. The order is the contract for
// checkpoint serialization.
template <class S>
class ParamStore {
public:
    struct Entry {
        std::string name;
        Var<S> var;
    };

    Var<S>& add(const std::string& name, TensorData<S> init) {
        for (auto& e : entries_)
            if (e.name == name) throw ArgumentError("ParamStore: duplicate parameter " + name);
        entries_.push_back({name, Var<S>::leaf(std::move(init), true)});
        return entries_.back().var;
    }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }
    size_t size() const { return entries_.size(); }

    Var<S>& at(const std::string& name) {
        for (auto& e : entries_)
            if (e.name == name) return e.var;
        throw ArgumentError("ParamStore: unknown parameter " + name);
    }

    void zero_grad() {
        for (auto& e : entries_) e.var.zero_grad();
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (auto& e : entries_) n += e.var.numel();
        return n;
    }

private:
    std::vector<Entry> entries_;
};

template <class S>
struct AdamState {
    S lr = S(5e-4);
    S beta1 = S(0.9);
    S beta2 = S(0.999);
    S eps = S(1e-8);
    int64_t step_count = 0;
    std::vector<AlignedVec<S>> m, v;

    void init_like(const ParamStore<S>& params) {
        step_count = 0;
        m.clear();
        v.clear();
        for (auto& e : params.entries()) {
            m.emplace_back(e.var.numel(), S(0));
            v.emplace_back(e.var.numel(), S(0));
        }
    }
};

// Standard bias-corrected ADAM update over all parameters in store order.
template <class S>
void adam_step(ParamStore<S>& params, AdamState<S>& state) {
    if (state.m.size() != params.size()) state.init_like(params);
    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(double(state.beta1), double(state.step_count));
    const double bc2 = 1.0 - std::pow(double(state.beta2), double(state.step_count));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& entry = params.entries()[pi];
        const auto& g = entry.var.grad();
        auto& val = entry.var.value_mut();
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        for (size_t i = 0; i < val.size(); ++i) {
            const S gi = g[i];
            if (!std::isfinite(gi))
                throw NumericError("adam_step: non-finite gradient in parameter " + entry.name +
                                   " at index " + std::to_string(i));
            m[i] = state.beta1 * m[i] + (S(1) - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (S(1) - state.beta2) * gi * gi;
            const double mhat = double(m[i]) / bc1;
            const double vhat = double(v[i]) / bc2;
            val[i] -= static_cast<S>(double(state.lr) * mhat / (std::sqrt(vhat) + double(state.eps)));
        }
    }
}

// He (fan-in) normal initialization.
template <class S>
TensorData<S> he_init(Shape shape, int64_t fan_in, Rng& rng) {
    TensorData<S> t(std::move(shape));
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& x : t.v) x = static_cast<S>(rng.normal() * sd);
    return t;
}

template <class S>
TensorData<S> uniform_init(Shape shape, double lo, double hi, Rng& rng) {
    TensorData<S> t(std::move(shape));
    for (auto& x : t.v) x = static_cast<S>(rng.uniform(lo, hi));
    return t;
}

// Per-output-channel norms of a direction tensor; the weight-norm gain is
// initialized to these so the initial effective weight equals v.
template <class S>
TensorData<S> row_norms(const TensorData<S>& v) {
    const int64_t co = v.shape.at(0);
    const int64_t rest = v.numel() / co;
    TensorData<S> g({co});
    for (int64_t c = 0; c < co; ++c) {
        double nsq = 0;
        for (int64_t i = 0; i < rest; ++i) {
            const double x = v.v[c * rest + i];
            nsq += x * x;
        }
        g.v[c] = static_cast<S>(std::sqrt(nsq));
    }
    return g;
}

}  // namespace voxrep::tc
