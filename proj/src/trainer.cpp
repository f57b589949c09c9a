#include "docmoe/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "docmoe/checkpoint.hpp"

namespace docmoe {

using nlohmann::json;

void TrainConfig::validate() const {
    weights.validate();
    arch.validate();
    require(learning_rate > 0 && std::isfinite(learning_rate), "learning_rate must be > 0");
    require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "adam betas must be in [0, 1)");
    require(adam_eps > 0, "adam_eps must be > 0");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(steps >= 0, "steps must be >= 0");
    require(history_capacity >= 0, "history_capacity must be >= 0");
    require(checkpoint_interval >= 0, "checkpoint_interval must be >= 0");
}

std::string to_string(GateMode m) {
    switch (m) {
        case GateMode::Learned: return "learned";
        case GateMode::Ones: return "ones";
        case GateMode::Off: return "off";
    }
    return "learned";
}

GateMode gate_mode_from_string(const std::string& s) {
    if (s == "learned") return GateMode::Learned;
    if (s == "ones") return GateMode::Ones;
    if (s == "off") return GateMode::Off;
    throw ContractViolation("unknown gating mode '" + s + "' (learned, ones, off)");
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd"; }

OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "adam") return OptimizerKind::Adam;
    if (s == "sgd") return OptimizerKind::Sgd;
    throw ContractViolation("unknown optimizer '" + s + "' (adam, sgd)");
}

json to_json(const ArchConfig& a) {
    return {{"channels", a.channels},           {"patch_size", a.patch_size},
            {"base_channels", a.base_channels}, {"n_blocks", a.n_blocks},
            {"embed_dim", a.embed_dim},         {"embedder_channels", a.embedder_channels},
            {"disc_channels", a.disc_channels}, {"disc_layers", a.disc_layers}};
}

ArchConfig arch_from_json(const json& j) {
    ArchConfig a;
    a.channels = j.value("channels", a.channels);
    a.patch_size = j.value("patch_size", a.patch_size);
    a.base_channels = j.value("base_channels", a.base_channels);
    a.n_blocks = j.value("n_blocks", a.n_blocks);
    a.embed_dim = j.value("embed_dim", a.embed_dim);
    a.embedder_channels = j.value("embedder_channels", a.embedder_channels);
    a.disc_channels = j.value("disc_channels", a.disc_channels);
    a.disc_layers = j.value("disc_layers", a.disc_layers);
    return a;
}

json to_json(const LossWeights& w) {
    return {{"lambda_cyc", w.lambda_cyc}, {"lambda_moe", w.lambda_moe}, {"lambda_gH", w.lambda_gH}, {"lambda_gF", w.lambda_gF}};
}

LossWeights weights_from_json(const json& j) {
    LossWeights w;
    w.lambda_cyc = j.value("lambda_cyc", w.lambda_cyc);
    w.lambda_moe = j.value("lambda_moe", w.lambda_moe);
    w.lambda_gH = j.value("lambda_gH", w.lambda_gH);
    w.lambda_gF = j.value("lambda_gF", w.lambda_gF);
    return w;
}

json to_json(const TrainConfig& c) {
    return {{"weights", to_json(c.weights)},
            {"adversarial_mode", to_string(c.adversarial_mode)},
            {"optimizer", to_string(c.optimizer)},
            {"learning_rate", c.learning_rate},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"adam_eps", c.adam_eps},
            {"batch_size", c.batch_size},
            {"steps", c.steps},
            {"seed", c.seed},
            {"history_capacity", c.history_capacity},
            {"checkpoint_interval", c.checkpoint_interval},
            {"gating", to_string(c.gating)},
            {"arch", to_json(c.arch)}};
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    if (j.contains("weights")) c.weights = weights_from_json(j.at("weights"));
    if (j.contains("adversarial_mode")) c.adversarial_mode = adversarial_mode_from_string(j.at("adversarial_mode"));
    if (j.contains("optimizer")) c.optimizer = optimizer_from_string(j.at("optimizer"));
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    c.seed = j.value("seed", c.seed);
    c.history_capacity = j.value("history_capacity", c.history_capacity);
    c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    if (j.contains("gating")) c.gating = gate_mode_from_string(j.at("gating"));
    if (j.contains("arch")) c.arch = arch_from_json(j.at("arch"));
    return c;
}

std::string rng_to_string(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

std::mt19937_64 rng_from_string(const std::string& s) {
    std::mt19937_64 rng;
    std::istringstream is(s);
    is >> rng;
    if (is.fail()) throw ContractViolation("malformed rng state");
    return rng;
}

// ---- history buffer -------------------------------------------------------------------

template <typename T>
HistoryBuffer<T>::HistoryBuffer(int capacity, std::uint64_t seed) : capacity_(capacity), rng_(seed) {
    require(capacity >= 0, "history capacity must be >= 0");
}

template <typename T>
Tensor<T> HistoryBuffer<T>::push_and_sample(const Tensor<T>& img) {
    if (capacity_ == 0) return img;
    if (storage_.size() < static_cast<std::size_t>(capacity_)) {
        storage_.push_back(img);
        return img;
    }
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    if (coin(rng_) < 0.5) return img;
    std::uniform_int_distribution<std::size_t> pick(0, storage_.size() - 1);
    const std::size_t i = pick(rng_);
    Tensor<T> out = std::move(storage_[i]);
    storage_[i] = img;
    return out;
}

template <typename T>
void HistoryBuffer<T>::restore(std::vector<Tensor<T>> storage, std::mt19937_64 rng) {
    require(storage.size() <= static_cast<std::size_t>(capacity_), "history snapshot exceeds capacity");
    storage_ = std::move(storage);
    rng_ = rng;
}

// ---- optimiser --------------------------------------------------------------------------

template <typename T>
Optimizer<T>::Optimizer(nn::ParamList<T> params, const TrainConfig& cfg)
    : params_(std::move(params)),
      kind_(cfg.optimizer),
      lr_(cfg.learning_rate),
      b1_(cfg.beta1),
      b2_(cfg.beta2),
      eps_(cfg.adam_eps) {
    if (kind_ == OptimizerKind::Adam)
        for (const auto& [name, p] : params_) {
            state_.m.emplace_back(p.shape(), T(0));
            state_.v.emplace_back(p.shape(), T(0));
        }
}

template <typename T>
void Optimizer<T>::zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
}

template <typename T>
bool Optimizer<T>::grads_finite() const {
    for (const auto& [name, p] : params_) {
        if (!p.has_grad()) continue;
        for (T g : p.grad().vec())
            if (!std::isfinite(static_cast<double>(g))) return false;
    }
    return true;
}

template <typename T>
void Optimizer<T>::step() {
    ++state_.t;
    if (kind_ == OptimizerKind::Sgd) {
        for (auto& [name, p] : params_) {
            if (!p.has_grad()) continue;
            auto& w = p.mutable_value().vec();
            const auto& g = p.grad().vec();
            for (std::size_t k = 0; k < w.size(); ++k) w[k] = static_cast<T>(w[k] - lr_ * g[k]);
        }
        return;
    }
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(state_.t));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(state_.t));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i].second;
        if (!p.has_grad()) continue;
        auto& w = p.mutable_value().vec();
        const auto& g = p.grad().vec();
        auto& m = state_.m[i].vec();
        auto& v = state_.v[i].vec();
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double gk = g[k];
            m[k] = static_cast<T>(b1_ * m[k] + (1.0 - b1_) * gk);
            v[k] = static_cast<T>(b2_ * v[k] + (1.0 - b2_) * gk * gk);
            const double mh = m[k] / c1, vh = v[k] / c2;
            w[k] = static_cast<T>(w[k] - lr_ * mh / (std::sqrt(vh) + eps_));
        }
    }
}

template <typename T>
void Optimizer<T>::set_state(OptimizerState<T> s) {
    if (kind_ == OptimizerKind::Adam) {
        require(s.m.size() == params_.size() && s.v.size() == params_.size(), "optimizer state does not match parameters");
        for (std::size_t i = 0; i < params_.size(); ++i)
            require(s.m[i].shape() == params_[i].second.shape() && s.v[i].shape() == params_[i].second.shape(),
                    "optimizer moment shape mismatch for " + params_[i].first);
    }
    state_ = std::move(s);
}

// ---- trainer ------------------------------------------------------------------------------

namespace {

template <typename T>
std::vector<Tensor<T>> copy_buffers(ModelBundle<T>& b) {
    std::vector<Tensor<T>> out;
    for (auto& [net, list] : b.buffers())
        for (auto& [name, t] : list) out.push_back(*t);
    return out;
}

template <typename T>
void restore_buffers(ModelBundle<T>& b, const std::vector<Tensor<T>>& saved) {
    std::size_t i = 0;
    for (auto& [net, list] : b.buffers())
        for (auto& [name, t] : list) *t = saved[i++];
}

bool finite(double v) { return std::isfinite(v); }

}  // namespace

template <typename T>
Trainer<T>::Trainer(ModelBundle<T>& bundle, const TrainConfig& cfg)
    : bundle_(bundle),
      cfg_(cfg),
      gen_opt_(bundle.generator_side_params(), cfg),
      disc_opt_(bundle.discriminator_params(), cfg),
      hist_X_(cfg.history_capacity, derive_seed(cfg.seed, 102, 0)),
      hist_Y_(cfg.history_capacity, derive_seed(cfg.seed, 103, 0)) {
    cfg_.validate();
    require(cfg_.arch == bundle.config(), "trainer architecture does not match the bundle");
}

template <typename T>
LossBreakdown Trainer<T>::generator_pass(const Tensor<T>& x, const std::vector<int>& labels, const Tensor<T>& y) {
    const auto& a = bundle_.config();
    require(x.rank() == 4 && x.shape() == y.shape(), "x and y must be [N, C, P, P] batches of equal shape");
    require(x.dim(1) == static_cast<std::size_t>(a.channels) && x.dim(2) == static_cast<std::size_t>(a.patch_size) &&
                x.dim(3) == static_cast<std::size_t>(a.patch_size),
            "batch does not match the architecture");
    const std::size_t N = x.dim(0);
    require(labels.size() == N, "one label per noisy sample");

    gen_opt_.zero_grad();
    auto disc = bundle_.discriminator_params();
    for (auto& [name, p] : disc) p.set_requires_grad(false);
    struct Unfreeze {
        nn::ParamList<T>& d;
        ~Unfreeze() {
            for (auto& [name, p] : d) p.set_requires_grad(true);
        }
    } unfreeze{disc};

    const AdversarialMode mode = cfg_.adversarial_mode;
    auto score = [mode](const PatchDiscriminator<T>& d, const ag::Var<T>& img) {
        auto s = d.forward(img);
        return mode == AdversarialMode::Log ? ops::sigmoid(s) : s;
    };

    ag::Var<T> xv(x), yv(y);
    auto e = bundle_.embed(xv, true);
    auto logits = bundle_.classify(e);
    auto gH = bundle_.gates_for(e, GeneratorId::H, cfg_.gating, N);
    auto gF = bundle_.gates_for(e, GeneratorId::F, cfg_.gating, N);
    const GateVars<T>* pH = gH ? &*gH : nullptr;
    const GateVars<T>* pF = gF ? &*gF : nullptr;

    auto fake_y = bundle_.generator_H.forward(xv, pH);
    auto rec_x = bundle_.generator_F.forward(fake_y, pF);
    auto fake_x = bundle_.generator_F.forward(yv, pF);
    auto rec_y = bundle_.generator_H.forward(fake_x, pH);

    auto gan_f = adversarial_loss(ag::Var<T>(), score(bundle_.disc_Y, fake_y), mode, AdversarialRole::Generator);
    auto gan_b = adversarial_loss(ag::Var<T>(), score(bundle_.disc_X, fake_x), mode, AdversarialRole::Generator);
    auto cyc = cycle_consistency_loss(xv, rec_x, yv, rec_y);
    auto moe = moe_loss(logits, labels, pH ? *pH : GateVars<T>{}, pF ? *pF : GateVars<T>{}, cfg_.weights);
    auto total = total_objective(gan_f, gan_b, cyc, moe, cfg_.weights);

    LossBreakdown lb;
    lb.gan_forward = gan_f.value()[0];
    lb.gan_backward = gan_b.value()[0];
    lb.cycle = cyc.value()[0];
    lb.moe_ce = moe.cross_entropy.value()[0];
    lb.moe_gate_l1 = moe.gate_l1.value()[0];
    lb.total = total.value()[0];
    for (double v : {lb.gan_forward, lb.gan_backward, lb.cycle, lb.moe_ce, lb.moe_gate_l1, lb.total})
        if (!finite(v)) throw DivergenceError("non-finite generator-side loss", step_ + 1);

    total.backward();
    fake_x_ = fake_x.value();
    fake_y_ = fake_y.value();
    return lb;
}

template <typename T>
void Trainer<T>::discriminator_pass(const Tensor<T>& x, const Tensor<T>& y, LossBreakdown& out) {
    require(!fake_x_.empty() && fake_x_.shape() == x.shape() && fake_y_.shape() == y.shape(),
            "discriminator update needs the fakes of a generator pass on the same batch shape");
    disc_opt_.zero_grad();
    std::vector<Tensor<T>> fx, fy;
    for (std::size_t i = 0; i < x.dim(0); ++i) {
        fx.push_back(hist_X_.push_and_sample(slice_batch(fake_x_, i)));
        fy.push_back(hist_Y_.push_and_sample(slice_batch(fake_y_, i)));
    }
    disc_fake_x_ = stack_batch(fx);
    disc_fake_y_ = stack_batch(fy);

    const AdversarialMode mode = cfg_.adversarial_mode;
    auto score = [mode](const PatchDiscriminator<T>& d, const Tensor<T>& img) {
        auto s = d.forward(ag::Var<T>(img));
        return mode == AdversarialMode::Log ? ops::sigmoid(s) : s;
    };
    auto loss_X = adversarial_loss(score(bundle_.disc_X, x), score(bundle_.disc_X, disc_fake_x_), mode,
                                   AdversarialRole::Discriminator);
    auto loss_Y = adversarial_loss(score(bundle_.disc_Y, y), score(bundle_.disc_Y, disc_fake_y_), mode,
                                   AdversarialRole::Discriminator);
    out.disc_X = loss_X.value()[0];
    out.disc_Y = loss_Y.value()[0];
    if (!finite(out.disc_X) || !finite(out.disc_Y)) throw DivergenceError("non-finite discriminator loss", step_ + 1);
    ops::add(loss_X, loss_Y).backward();
}

template <typename T>
LossBreakdown Trainer<T>::step(const Tensor<T>& x, const std::vector<int>& labels, const Tensor<T>& y) {
    const auto bn = copy_buffers(bundle_);
    const HistoryBuffer<T> hx = hist_X_, hy = hist_Y_;
    LossBreakdown lb;
    try {
        lb = generator_pass(x, labels, y);
        if (!gen_opt_.grads_finite()) throw DivergenceError("non-finite generator-side gradient", step_ + 1);
        discriminator_pass(x, y, lb);
        if (!disc_opt_.grads_finite()) throw DivergenceError("non-finite discriminator gradient", step_ + 1);
    } catch (...) {
        restore_buffers(bundle_, bn);
        hist_X_ = hx;
        hist_Y_ = hy;
        gen_opt_.zero_grad();
        disc_opt_.zero_grad();
        throw;
    }
    gen_opt_.step();
    disc_opt_.step();
    ++step_;
    return lb;
}

template <typename T>
LossBreakdown Trainer<T>::step(const Batch& batch) {
    return step(to_precision<T>(batch.x), batch.labels, to_precision<T>(batch.y));
}

template <typename T>
LossBreakdown Trainer<T>::generator_update(const Tensor<T>& x, const std::vector<int>& labels, const Tensor<T>& y) {
    const auto bn = copy_buffers(bundle_);
    LossBreakdown lb;
    try {
        lb = generator_pass(x, labels, y);
        if (!gen_opt_.grads_finite()) throw DivergenceError("non-finite generator-side gradient", step_ + 1);
    } catch (...) {
        restore_buffers(bundle_, bn);
        gen_opt_.zero_grad();
        throw;
    }
    gen_opt_.step();
    return lb;
}

template <typename T>
LossBreakdown Trainer<T>::discriminator_update(const Tensor<T>& x, const Tensor<T>& y) {
    const HistoryBuffer<T> hx = hist_X_, hy = hist_Y_;
    LossBreakdown lb;
    try {
        discriminator_pass(x, y, lb);
        if (!disc_opt_.grads_finite()) throw DivergenceError("non-finite discriminator gradient", step_ + 1);
    } catch (...) {
        hist_X_ = hx;
        hist_Y_ = hy;
        disc_opt_.zero_grad();
        throw;
    }
    disc_opt_.step();
    return lb;
}

template <typename T>
LossBreakdown Trainer<T>::generator_objective(const Tensor<T>& x, const std::vector<int>& labels, const Tensor<T>& y) {
    const auto bn = copy_buffers(bundle_);
    const Tensor<T> fx = fake_x_, fy = fake_y_;
    LossBreakdown lb;
    try {
        lb = generator_pass(x, labels, y);
    } catch (...) {
        restore_buffers(bundle_, bn);
        throw;
    }
    restore_buffers(bundle_, bn);
    fake_x_ = fx;
    fake_y_ = fy;
    return lb;
}

template <typename T>
TrainerSnapshot<T> Trainer<T>::snapshot() const {
    TrainerSnapshot<T> s;
    s.step = step_;
    s.generator_opt = gen_opt_.state();
    s.discriminator_opt = disc_opt_.state();
    s.history_X = hist_X_.storage();
    s.history_Y = hist_Y_.storage();
    s.history_X_rng = rng_to_string(hist_X_.rng());
    s.history_Y_rng = rng_to_string(hist_Y_.rng());
    return s;
}

template <typename T>
void Trainer<T>::restore(const TrainerSnapshot<T>& s) {
    gen_opt_.set_state(s.generator_opt);
    disc_opt_.set_state(s.discriminator_opt);
    hist_X_.restore(s.history_X, rng_from_string(s.history_X_rng));
    hist_Y_.restore(s.history_Y, rng_from_string(s.history_Y_rng));
    step_ = s.step;
}

template class HistoryBuffer<float>;
template class HistoryBuffer<double>;
template class Optimizer<float>;
template class Optimizer<double>;
template class Trainer<float>;
template class Trainer<double>;

// ---- orchestration -------------------------------------------------------------------------

std::string metrics_line(long step, const LossBreakdown& l) {
    json j{{"step", step},   {"gan_f", l.gan_forward},        {"gan_b", l.gan_backward}, {"cycle", l.cycle},
           {"moe_ce", l.moe_ce}, {"moe_gate_l1", l.moe_gate_l1}, {"total", l.total},       {"disc_X", l.disc_X},
           {"disc_Y", l.disc_Y}};
    return j.dump();
}

std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, long step) {
    std::ostringstream os;
    os << "step_" << std::setw(6) << std::setfill('0') << step;
    return out_dir / "checkpoints" / os.str();
}

TrainResult run_training(const TrainConfig& cfg, const Corpus& corpus, const RunOptions& opts) {
    cfg.validate();
    require(corpus.manifest.patch_size == cfg.arch.patch_size, "corpus patch_size differs from the architecture");
    require(corpus.manifest.channels == cfg.arch.channels, "corpus channels differ from the architecture");
    std::filesystem::create_directories(opts.out_dir);
    std::ofstream(opts.out_dir / "train_config.json") << to_json(cfg).dump(2) << '\n';

    const PatchPool pool = PatchPool::from_corpus(corpus, "train");
    ModelBundle<float> bundle(cfg.arch, derive_seed(cfg.seed, 100, 0));
    Trainer<float> trainer(bundle, cfg);
    std::mt19937_64 data_rng(derive_seed(cfg.seed, 101, 0));

    const auto log_path = opts.out_dir / "metrics.ndjson";
    std::vector<std::string> kept;
    long start = 0;
    if (opts.resume_from) {
        LoadedCheckpoint ck = load_checkpoint(*opts.resume_from);
        require(ck.bundle.config() == cfg.arch, "checkpoint architecture differs from the configuration");
        if (!ck.trainer) throw CorruptionError("checkpoint has no trainer state to resume from");
        bundle.copy_from(ck.bundle);
        trainer.restore(*ck.trainer);
        data_rng = rng_from_string(ck.data_rng);
        start = ck.step;
        std::ifstream in(log_path);
        for (std::string line; std::getline(in, line);) {
            if (line.empty()) continue;
            if (json::parse(line).at("step").get<long>() <= start) kept.push_back(line);
        }
    }
    std::ofstream log(log_path, std::ios::trunc);
    for (const auto& l : kept) log << l << '\n';

    const json cfg_json = to_json(cfg);
    auto save = [&](long step) {
        const auto dir = checkpoint_path(opts.out_dir, step);
        const auto snap = trainer.snapshot();
        save_checkpoint(dir, bundle, step, cfg_json, &snap, rng_to_string(data_rng));
        return dir;
    };

    TrainResult result;
    result.steps_done = start;
    for (long s = start + 1; s <= cfg.steps; ++s) {
        const Batch batch = sample_batch(pool, cfg.batch_size, data_rng);
        const LossBreakdown lb = trainer.step(batch);
        log << metrics_line(s, lb) << '\n';
        log.flush();
        result.losses.push_back(lb);
        result.steps_done = s;
        if (opts.on_step) opts.on_step(s, lb);
        if (cfg.checkpoint_interval > 0 && s % cfg.checkpoint_interval == 0 && s != cfg.steps) save(s);
    }
    result.final_checkpoint = save(result.steps_done);
    return result;
}

}  // namespace docmoe
