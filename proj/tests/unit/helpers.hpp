#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "docmoe/model.hpp"

namespace testutil {

using docmoe::Shape;
using docmoe::Tensor;
using docmoe::ag::Var;

template <typename T = double>
Tensor<T> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor<T> t(std::move(s));
    for (auto& v : t.vec()) v = static_cast<T>(d(rng));
    return t;
}

template <typename T = double>
Var<T> random_var(Shape s, std::mt19937_64& rng, bool grad = true, double lo = -1.0, double hi = 1.0) {
    return Var<T>(random_tensor<T>(std::move(s), rng, lo, hi), grad);
}

/// Adds uniform noise to every parameter so biases leave the ReLU kinks and
/// signals do not vanish through the small default initialisation.
template <typename T>
void jitter(docmoe::ModelBundle<T>& b, std::mt19937_64& rng, double amount = 0.3) {
    std::uniform_real_distribution<double> d(-amount, amount);
    for (auto& [net, params] : b.networks())
        for (auto& [name, v] : params)
            for (auto& x : v.mutable_value().vec()) x += static_cast<T>(d(rng));
}

inline double rel_err(double a, double b, double floor = 1e-8) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

struct GradCheck {
    double max_rel = 0;
    int checked = 0;
};

/// Central differences of `loss` with respect to `coords` random entries of
/// each input, against the tape's gradient.
inline GradCheck grad_check(const std::vector<Var<double>>& inputs, const std::function<Var<double>()>& loss,
                            std::mt19937_64& rng, int coords = 8, double h = 1e-6, double floor = 1e-7) {
    for (auto v : inputs) v.zero_grad();
    loss().backward();
    GradCheck out;
    for (auto v : inputs) {
        const Tensor<double> analytic = v.has_grad() ? v.grad() : Tensor<double>(v.shape());
        std::uniform_int_distribution<std::size_t> pick(0, v.value().size() - 1);
        for (int k = 0; k < coords; ++k) {
            const std::size_t i = pick(rng);
            double& w = v.mutable_value()[i];
            const double orig = w;
            w = orig + h;
            const double up = loss().value()[0];
            w = orig - h;
            const double down = loss().value()[0];
            w = orig;
            const double numeric = (up - down) / (2 * h);
            out.max_rel = std::max(out.max_rel, rel_err(analytic[i], numeric, floor));
            ++out.checked;
        }
    }
    return out;
}

inline double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

}  // namespace testutil
