#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "docmoe/objectives.hpp"
#include "docmoe/synth.hpp"

namespace docmoe {

enum class OptimizerKind { Adam, Sgd };

struct TrainConfig {
    LossWeights weights;
    AdversarialMode adversarial_mode = AdversarialMode::LeastSquares;
    OptimizerKind optimizer = OptimizerKind::Adam;
    double learning_rate = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t batch_size = 32;
    long steps = 1000;
    std::uint64_t seed = 0;
    int history_capacity = 50;
    long checkpoint_interval = 0;  // 0: only the final checkpoint
    GateMode gating = GateMode::Learned;
    ArchConfig arch;

    void validate() const;
};

std::string to_string(GateMode m);
GateMode gate_mode_from_string(const std::string& s);
std::string to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& s);

nlohmann::json to_json(const ArchConfig& a);
ArchConfig arch_from_json(const nlohmann::json& j);
nlohmann::json to_json(const LossWeights& w);
LossWeights weights_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

std::string rng_to_string(const std::mt19937_64& rng);
std::mt19937_64 rng_from_string(const std::string& s);

// ---- history buffer ---------------------------------------------------------------

/// Pool of previously generated images fed to a discriminator.
template <typename T>
class HistoryBuffer {
public:
    explicit HistoryBuffer(int capacity = 50, std::uint64_t seed = 0);

    /// Until full: stores the image and returns it. Afterwards: with
    /// probability 1/2 returns the image, otherwise swaps it for a uniformly
    /// chosen stored one and returns that.
    Tensor<T> push_and_sample(const Tensor<T>& img);

    int capacity() const { return capacity_; }
    std::size_t size() const { return storage_.size(); }
    const std::vector<Tensor<T>>& storage() const { return storage_; }
    std::mt19937_64& rng() { return rng_; }
    const std::mt19937_64& rng() const { return rng_; }

    void restore(std::vector<Tensor<T>> storage, std::mt19937_64 rng);

private:
    int capacity_;
    std::vector<Tensor<T>> storage_;
    std::mt19937_64 rng_;
};

// ---- optimisers ---------------------------------------------------------------------

template <typename T>
struct OptimizerState {
    long t = 0;
    std::vector<Tensor<T>> m, v;  // empty for SGD
};

/// Adam (or plain gradient descent) over a fixed parameter list. Parameters
/// without a gradient are left untouched.
template <typename T>
class Optimizer {
public:
    Optimizer() = default;
    Optimizer(nn::ParamList<T> params, const TrainConfig& cfg);

    void zero_grad();
    void step();
    bool grads_finite() const;

    const nn::ParamList<T>& params() const { return params_; }
    const OptimizerState<T>& state() const { return state_; }
    void set_state(OptimizerState<T> s);

private:
    nn::ParamList<T> params_;
    OptimizerKind kind_ = OptimizerKind::Adam;
    double lr_ = 2e-4, b1_ = 0.5, b2_ = 0.999, eps_ = 1e-8;
    OptimizerState<T> state_;
};

// ---- trainer ---------------------------------------------------------------------------

template <typename T>
struct TrainerSnapshot {
    long step = 0;
    OptimizerState<T> generator_opt, discriminator_opt;
    std::vector<Tensor<T>> history_X, history_Y;
    std::string history_X_rng, history_Y_rng;
};

/// Alternating cycle-GAN + MoE updates on a bundle it holds exclusively.
template <typename T>
class Trainer {
public:
    Trainer(ModelBundle<T>& bundle, const TrainConfig& cfg);

    /// One full step: generator-side gradients with the discriminators frozen,
    /// then discriminator gradients against history-buffer fakes, then both
    /// updates. A non-finite loss or gradient throws DivergenceError and leaves
    /// parameters, optimiser state, buffers and batch-norm statistics as they were.
    LossBreakdown step(const Tensor<T>& x, const std::vector<int>& labels, const Tensor<T>& y);
    LossBreakdown step(const Batch& batch);

    /// The two halves of step() applied separately.
    LossBreakdown generator_update(const Tensor<T>& x, const std::vector<int>& labels, const Tensor<T>& y);
    /// Uses the fakes of the last generator pass.
    LossBreakdown discriminator_update(const Tensor<T>& x, const Tensor<T>& y);

    /// Generator-side objective without touching any state; gradients of the
    /// generator-side parameters are left in place.
    LossBreakdown generator_objective(const Tensor<T>& x, const std::vector<int>& labels, const Tensor<T>& y);

    long steps_done() const { return step_; }
    const TrainConfig& config() const { return cfg_; }
    ModelBundle<T>& bundle() { return bundle_; }
    HistoryBuffer<T>& history(Domain d) { return d == Domain::X ? hist_X_ : hist_Y_; }

    /// Raw fakes of the last generator pass and the batch the discriminators saw.
    const Tensor<T>& last_fake_x() const { return fake_x_; }
    const Tensor<T>& last_fake_y() const { return fake_y_; }
    const Tensor<T>& last_disc_fake_x() const { return disc_fake_x_; }
    const Tensor<T>& last_disc_fake_y() const { return disc_fake_y_; }

    TrainerSnapshot<T> snapshot() const;
    void restore(const TrainerSnapshot<T>& s);

private:
    LossBreakdown generator_pass(const Tensor<T>& x, const std::vector<int>& labels, const Tensor<T>& y);
    void discriminator_pass(const Tensor<T>& x, const Tensor<T>& y, LossBreakdown& out);

    ModelBundle<T>& bundle_;
    TrainConfig cfg_;
    Optimizer<T> gen_opt_, disc_opt_;
    HistoryBuffer<T> hist_X_, hist_Y_;
    long step_ = 0;
    Tensor<T> fake_x_, fake_y_, disc_fake_x_, disc_fake_y_;
};

template <typename T>
Tensor<T> to_precision(const Tensor<float>& t) {
    return t.template cast<T>();
}

// ---- orchestration -------------------------------------------------------------------------

struct RunOptions {
    std::filesystem::path out_dir;
    /// Checkpoint directory to continue from.
    std::optional<std::filesystem::path> resume_from;
    /// Called after every step with the step index (1-based) and its losses.
    std::function<void(long, const LossBreakdown&)> on_step;
};

struct TrainResult {
    long steps_done = 0;
    std::filesystem::path final_checkpoint;
    std::vector<LossBreakdown> losses;  // steps run by this call
};

/// NDJSON line with the documented metric keys.
std::string metrics_line(long step, const LossBreakdown& l);

/// Runs cfg.steps steps in total (counting any resumed ones) on the training
/// split, writing `metrics.ndjson`, `train_config.json` and checkpoints under
/// out_dir/checkpoints/step_<n>.
TrainResult run_training(const TrainConfig& cfg, const Corpus& corpus, const RunOptions& opts);

std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, long step);

}  // namespace docmoe
