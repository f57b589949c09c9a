#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "docmoe/ops.hpp"

namespace docmoe::nn {

using ag::Var;

/// Named trainable parameters. Var handles share storage with the owner.
template <typename T>
using ParamList = std::vector<std::pair<std::string, Var<T>>>;

/// Named non-trainable state (batch-norm running statistics).
template <typename T>
using BufferList = std::vector<std::pair<std::string, Tensor<T>*>>;

template <typename T>
Var<T> normal_param(Shape shape, double mean, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(mean, stddev);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
    return Var<T>(std::move(t), true);
}

template <typename T>
Var<T> uniform_param(Shape shape, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
    return Var<T>(std::move(t), true);
}

template <typename T>
Var<T> constant_param(Shape shape, double value) {
    return Var<T>(Tensor<T>(std::move(shape), static_cast<T>(value)), true);
}

template <typename T>
struct Conv2d {
    Var<T> weight, bias;
    int stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(std::size_t in, std::size_t out, int k, int stride_, int pad_, std::mt19937_64& rng)
        : weight(normal_param<T>({out, in, std::size_t(k), std::size_t(k)}, 0.0, 0.02, rng)),
          bias(constant_param<T>({out}, 0.0)),
          stride(stride_),
          pad(pad_) {}

    Var<T> operator()(const Var<T>& x) const { return ops::conv2d(x, weight, bias, stride, pad); }
    std::size_t out_channels() const { return weight.dim(0); }
    std::size_t in_channels() const { return weight.dim(1); }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.emplace_back(prefix + ".weight", weight);
        out.emplace_back(prefix + ".bias", bias);
    }
};

template <typename T>
struct ConvTranspose2d {
    Var<T> weight, bias;
    int stride = 2, pad = 1, output_pad = 1;

    ConvTranspose2d() = default;
    ConvTranspose2d(std::size_t in, std::size_t out, int k, int stride_, int pad_, int output_pad_, std::mt19937_64& rng)
        : weight(normal_param<T>({in, out, std::size_t(k), std::size_t(k)}, 0.0, 0.02, rng)),
          bias(constant_param<T>({out}, 0.0)),
          stride(stride_),
          pad(pad_),
          output_pad(output_pad_) {}

    Var<T> operator()(const Var<T>& x) const {
        return ops::conv_transpose2d(x, weight, bias, stride, pad, output_pad);
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.emplace_back(prefix + ".weight", weight);
        out.emplace_back(prefix + ".bias", bias);
    }
};

/// Fully connected layer with the usual fan-in uniform initialisation.
template <typename T>
struct Linear {
    Var<T> weight, bias;

    Linear() = default;
    Linear(std::size_t in, std::size_t out, std::mt19937_64& rng)
        : weight(uniform_param<T>({out, in}, 1.0 / std::sqrt(double(in)), rng)),
          bias(uniform_param<T>({out}, 1.0 / std::sqrt(double(in)), rng)) {}

    Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight, bias); }
    std::size_t out_features() const { return weight.dim(0); }
    std::size_t in_features() const { return weight.dim(1); }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.emplace_back(prefix + ".weight", weight);
        out.emplace_back(prefix + ".bias", bias);
    }
};

template <typename T>
struct BatchNorm2d {
    Var<T> gamma, beta;
    Tensor<T> running_mean, running_var;

    BatchNorm2d() = default;
    BatchNorm2d(std::size_t channels, std::mt19937_64& rng)
        : gamma(normal_param<T>({channels}, 1.0, 0.02, rng)),
          beta(constant_param<T>({channels}, 0.0)),
          running_mean({channels}, T(0)),
          running_var({channels}, T(1)) {}

    // Running statistics are only written in training mode.
    Var<T> operator()(const Var<T>& x, bool training) {
        return ops::batch_norm(x, gamma, beta, running_mean, running_var, training);
    }
    // Inference path; batch_norm leaves the statistics untouched when not training.
    Var<T> eval(const Var<T>& x) const {
        return ops::batch_norm(x, gamma, beta, const_cast<Tensor<T>&>(running_mean),
                               const_cast<Tensor<T>&>(running_var), false);
    }

    void collect(const std::string& prefix, ParamList<T>& out) const {
        out.emplace_back(prefix + ".gamma", gamma);
        out.emplace_back(prefix + ".beta", beta);
    }
    void collect_buffers(const std::string& prefix, BufferList<T>& out) {
        out.emplace_back(prefix + ".running_mean", &running_mean);
        out.emplace_back(prefix + ".running_var", &running_var);
    }
};

}  // namespace docmoe::nn
