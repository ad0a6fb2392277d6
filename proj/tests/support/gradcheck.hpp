#pragma once

#include <functional>
#include <vector>

#include "voxrep/autograd.hpp"

// Central finite-difference oracle for reverse-mode gradients. Rebuilds the
// loss from scratch per perturbation, so it stays independent of the tape.

namespace gradcheck {

using voxrep::tc::Var;

struct Report {
    double max_rel_error = 0.0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::string worst_param;
};

inline double rel_error(double a, double b) {
    const double denom = std::max({1e-3, std::abs(a), std::abs(b)});
    return std::abs(a - b) / denom;
}

// params: leaves the loss depends on; loss_fn rebuilds the scalar loss from
// their current values.
inline Report check(std::vector<std::pair<std::string, Var<double>>> params,
                    const std::function<Var<double>()>& loss_fn, double h = 1e-5) {
    Report rep;
    for (auto& [name, p] : params) p.zero_grad();
    Var<double> loss = loss_fn();
    loss.backward();

    std::vector<voxrep::AlignedVec<double>> analytic;
    analytic.reserve(params.size());
    for (auto& [name, p] : params) analytic.push_back(p.grad());

    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi].second;
        for (int64_t i = 0; i < p.numel(); ++i) {
            const double orig = p.value()[i];
            p.value_mut()[i] = orig + h;
            const double fp = loss_fn().item();
            p.value_mut()[i] = orig - h;
            const double fm = loss_fn().item();
            p.value_mut()[i] = orig;
            const double numeric = (fp - fm) / (2 * h);
            const double err = rel_error(analytic[pi][i], numeric);
            if (err > rep.max_rel_error) {
                rep.max_rel_error = err;
                rep.worst_analytic = analytic[pi][i];
                rep.worst_numeric = numeric;
                rep.worst_param = params[pi].first + "[" + std::to_string(i) + "]";
            }
        }
    }
    return rep;
}

inline voxrep::TensorData<double> random_tensor(voxrep::Shape shape, voxrep::Rng& rng,
                                                double scale = 1.0) {
    voxrep::TensorData<double> t(std::move(shape));
    for (auto& x : t.v) x = rng.normal() * scale;
    return t;
}

}  // namespace gradcheck
