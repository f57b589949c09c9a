#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "docmoe/checkpoint.hpp"
#include "docmoe/trainer.hpp"
#include "helpers.hpp"

using namespace docmoe;
using namespace testutil;
namespace fs = std::filesystem;

namespace {

template <typename T>
std::uint64_t hash_params(const nn::ParamList<T>& params) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& [name, v] : params) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(v.value().data());
        for (std::size_t i = 0; i < v.value().size() * sizeof(T); ++i) h = (h ^ bytes[i]) * 1099511628211ull;
    }
    return h;
}

template <typename T>
std::uint64_t hash_buffers(ModelBundle<T>& b) {
    std::uint64_t h = 1469598103934665603ull;
    for (auto& [net, bufs] : b.buffers())
        for (auto& [name, t] : bufs)
            for (T v : t->vec()) h = (h ^ std::hash<T>{}(v)) * 1099511628211ull;
    return h;
}

TrainConfig micro_config() {
    TrainConfig c;
    c.arch = ArchConfig::micro();
    c.batch_size = 3;
    c.steps = 4;
    c.seed = 5;
    return c;
}

struct MicroBatch {
    Tensor<double> x, y;
    std::vector<int> labels;
};

MicroBatch micro_batch(std::mt19937_64& rng, std::size_t n = 3) {
    return {random_tensor<double>({n, 1, 8, 8}, rng), random_tensor<double>({n, 1, 8, 8}, rng), {0, 2, 3}};
}

std::vector<std::string> read_lines(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);) out.push_back(line);
    return out;
}

Corpus tiny_corpus() {
    CorpusSpec s;
    s.seed = 2;
    s.page_height = 64;
    s.page_width = 64;
    s.patch_size = 8;
    s.stride = 4;
    s.clean_pages = 2;
    s.noisy_pages = {{NoiseClass::SaltPepper, 1}, {NoiseClass::Blurred, 1}};
    s.test_pages_per_class = 0;
    return build_corpus(s);
}

/// Central difference at two step sizes; empty when they disagree, which
/// happens when an L1 or ReLU kink lies within the window.
template <typename F>
std::optional<double> smooth_derivative(double& w, F&& f) {
    auto central = [&](double h) {
        const double orig = w;
        w = orig + h;
        const double up = f();
        w = orig - h;
        const double down = f();
        w = orig;
        return (up - down) / (2 * h);
    };
    const double coarse = central(1e-5), fine = central(2.5e-6);
    if (rel_err(coarse, fine, 1e-6) > 1e-5) return std::nullopt;
    return coarse;
}

}  // namespace

TEST_CASE("history buffer policy") {
    std::mt19937_64 rng(1);
    HistoryBuffer<float> hb(50, 3);
    auto first = random_tensor<float>({1, 2, 2}, rng);
    CHECK(hb.push_and_sample(first) == first);
    CHECK(hb.size() == 1);
    for (int i = 1; i < 100; ++i) hb.push_and_sample(random_tensor<float>({1, 2, 2}, rng));
    CHECK(hb.size() == 50);

    HistoryBuffer<float> none(0, 3);
    for (int i = 0; i < 100; ++i) {
        auto t = random_tensor<float>({1, 2, 2}, rng);
        CHECK(none.push_and_sample(t) == t);
        CHECK(none.size() == 0);
    }

    HistoryBuffer<float> big(50, 9);
    int returned_incoming = 0, trials = 0;
    for (int i = 0; i < 100000; ++i) {
        Tensor<float> t({1}, static_cast<float>(i));
        const auto out = big.push_and_sample(t);
        REQUIRE(big.size() <= 50);
        if (i >= 50 && trials < 10000) {
            returned_incoming += out[0] == static_cast<float>(i);
            ++trials;
        } else if (i < 50) {
            CHECK(out == t);
        }
    }
    CHECK(trials == 10000);
    CHECK(std::abs(returned_incoming / 10000.0 - 0.5) < 0.05);
}

TEST_CASE("train config validation and serialisation") {
    TrainConfig c = micro_config();
    c.validate();
    auto bad = c;
    bad.learning_rate = 0;
    CHECK_THROWS_AS(bad.validate(), ContractViolation);
    bad = c;
    bad.history_capacity = -1;
    CHECK_THROWS_AS(bad.validate(), ContractViolation);
    bad = c;
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), ContractViolation);

    c.optimizer = OptimizerKind::Sgd;
    c.gating = GateMode::Ones;
    c.adversarial_mode = AdversarialMode::Log;
    c.weights.lambda_gH = 0.25;
    const auto back = train_config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));
    CHECK(back.arch == c.arch);
    std::mt19937_64 r(77);
    r();
    auto copy = rng_from_string(rng_to_string(r));
    CHECK(copy() == r());
}

TEST_CASE("a step on a fresh bundle") {
    ModelBundle<float> b(ArchConfig::micro(), 1);
    Trainer<float> tr(b, micro_config());
    std::mt19937_64 rng(2);
    auto x = random_tensor<float>({3, 1, 8, 8}, rng), y = random_tensor<float>({3, 1, 8, 8}, rng);
    for (int s = 0; s < 3; ++s) {
        const auto l = tr.step(x, {0, 1, 1}, y);
        for (double v : {l.gan_forward, l.gan_backward, l.cycle, l.moe_ce, l.moe_gate_l1, l.total, l.disc_X, l.disc_Y}) {
            CHECK(std::isfinite(v));
            CHECK(v >= 0.0);
        }
    }
    CHECK(tr.steps_done() == 3);
}

TEST_CASE("half-steps touch only their own networks") {
    ModelBundle<float> b(ArchConfig::micro(), 3);
    Trainer<float> tr(b, micro_config());
    std::mt19937_64 rng(4);
    auto x = random_tensor<float>({3, 1, 8, 8}, rng), y = random_tensor<float>({3, 1, 8, 8}, rng);
    for (int round = 0; round < 3; ++round) {
        const auto g0 = hash_params(b.generator_side_params()), d0 = hash_params(b.discriminator_params());
        tr.generator_update(x, {2, 3, 0}, y);
        const auto g1 = hash_params(b.generator_side_params()), d1 = hash_params(b.discriminator_params());
        CHECK(d1 == d0);
        CHECK(g1 != g0);
        tr.discriminator_update(x, y);
        CHECK(hash_params(b.generator_side_params()) == g1);
        CHECK(hash_params(b.discriminator_params()) != d1);
    }
    // the two parameter groups partition the bundle
    std::size_t total = 0;
    for (const auto& [net, params] : b.networks()) total += params.size();
    CHECK(total == b.generator_side_params().size() + b.discriminator_params().size());
}

TEST_CASE("discriminators see history-buffer samples") {
    auto cfg = micro_config();
    cfg.history_capacity = 2;
    ModelBundle<float> b(ArchConfig::micro(), 5);
    Trainer<float> tr(b, cfg);
    std::mt19937_64 rng(6);
    int swapped = 0;
    for (int s = 0; s < 10; ++s) {
        // every discriminator fake is either the raw fake or an image stored before the step
        const auto before = tr.history(Domain::X).storage();
        auto x = random_tensor<float>({3, 1, 8, 8}, rng), y = random_tensor<float>({3, 1, 8, 8}, rng);
        tr.step(x, {0, 1, 2}, y);
        const auto& raw = tr.last_fake_x();
        const auto& used = tr.last_disc_fake_x();
        REQUIRE(used.shape() == raw.shape());
        for (std::size_t n = 0; n < 3; ++n) {
            const auto u = slice_batch(used, n), r = slice_batch(raw, n);
            bool known = u == r;
            for (const auto& st : before) known = known || u.reshaped(st.shape()) == st;
            for (std::size_t m = 0; m < n; ++m) known = known || u == slice_batch(raw, m);
            CHECK(known);
            swapped += !(u == r);
        }
        CHECK(tr.history(Domain::X).size() <= 2);
    }
    CHECK(swapped > 0);

    cfg.history_capacity = 0;
    ModelBundle<float> b0(ArchConfig::micro(), 5);
    Trainer<float> t0(b0, cfg);
    auto x = random_tensor<float>({3, 1, 8, 8}, rng), y = random_tensor<float>({3, 1, 8, 8}, rng);
    t0.step(x, {0, 1, 2}, y);
    CHECK(t0.last_disc_fake_x() == t0.last_fake_x());
    CHECK(t0.last_disc_fake_y() == t0.last_fake_y());
}

TEST_CASE("one plain gradient-descent step follows the negative gradient") {
    auto cfg = micro_config();
    cfg.optimizer = OptimizerKind::Sgd;
    cfg.learning_rate = 1e-3;
    ModelBundle<double> b(ArchConfig::micro(), 7);
    std::mt19937_64 rng(8);
    jitter(b, rng, 0.2);
    ModelBundle<double> before(ArchConfig::micro(), 7);
    before.copy_from(b);
    const auto batch = micro_batch(rng);

    // finite-difference gradient of the generator-side objective at the starting point
    Trainer<double> probe(before, cfg);
    auto objective = [&] { return probe.generator_objective(batch.x, batch.labels, batch.y).total; };
    const auto gparams = before.generator_side_params();
    struct Coord {
        std::size_t param, index;
        double grad;
    };
    std::vector<Coord> coords;
    std::uniform_int_distribution<std::size_t> pick_param(0, gparams.size() - 1);
    while (coords.size() < 30) {
        const std::size_t p = pick_param(rng);
        auto v = gparams[p].second;
        std::uniform_int_distribution<std::size_t> pick(0, v.value().size() - 1);
        const std::size_t i = pick(rng);
        double& w = v.mutable_value()[i];
        const auto fd = smooth_derivative(w, objective);
        if (!fd) continue;
        const double g = *fd;
        if (std::abs(g) > 1e-4) coords.push_back({p, i, g});
    }

    Trainer<double> tr(b, cfg);
    tr.step(batch.x, batch.labels, batch.y);
    const auto after = b.generator_side_params();
    for (const auto& c : coords) {
        const double delta = after[c.param].second.value()[c.index] - gparams[c.param].second.value()[c.index];
        CHECK(rel_err(delta, -cfg.learning_rate * c.grad) < 1e-3);
    }

    // discriminator side: least-squares loss on the fakes the step consumed
    const auto dparams = before.discriminator_params();
    const Tensor<double> fx = tr.last_disc_fake_x(), fy = tr.last_disc_fake_y();
    auto disc_loss = [&] {
        const double lx = adversarial_loss(before.disc_X.forward(ag::Var<double>(batch.x)).value(),
                                           before.disc_X.forward(ag::Var<double>(fx)).value(),
                                           AdversarialMode::LeastSquares, AdversarialRole::Discriminator);
        const double ly = adversarial_loss(before.disc_Y.forward(ag::Var<double>(batch.y)).value(),
                                           before.disc_Y.forward(ag::Var<double>(fy)).value(),
                                           AdversarialMode::LeastSquares, AdversarialRole::Discriminator);
        return lx + ly;
    };
    const auto dafter = b.discriminator_params();
    int checked = 0;
    std::uniform_int_distribution<std::size_t> pick_d(0, dparams.size() - 1);
    while (checked < 20) {
        const std::size_t p = pick_d(rng);
        auto v = dparams[p].second;
        std::uniform_int_distribution<std::size_t> pick(0, v.value().size() - 1);
        const std::size_t i = pick(rng);
        double& w = v.mutable_value()[i];
        const auto fd = smooth_derivative(w, disc_loss);
        if (!fd) continue;
        const double g = *fd;
        if (std::abs(g) <= 1e-4) continue;
        const double delta = dafter[p].second.value()[i] - w;
        CHECK(rel_err(delta, -cfg.learning_rate * g) < 1e-3);
        ++checked;
    }
}

TEST_CASE("without the MoE term and with unit gates the objective is the plain cycle-GAN one") {
    auto cfg = micro_config();
    cfg.weights.lambda_moe = 0;
    ModelBundle<double> b(ArchConfig::micro(), 9);
    std::mt19937_64 rng(10);
    jitter(b, rng, 0.2);
    const auto batch = micro_batch(rng);

    cfg.gating = GateMode::Ones;
    Trainer<double> ones(b, cfg);
    const auto lo = ones.generator_objective(batch.x, batch.labels, batch.y);
    cfg.gating = GateMode::Off;
    Trainer<double> off(b, cfg);
    const auto lf = off.generator_objective(batch.x, batch.labels, batch.y);
    CHECK(std::abs(lo.total - lf.total) < 1e-6);

    // independent composition from ungated forward passes
    using V = ag::Var<double>;
    const auto fake_y = b.generator_H.forward(V(batch.x), nullptr).value();
    const auto fake_x = b.generator_F.forward(V(batch.y), nullptr).value();
    const auto rec_x = b.generator_F.forward(V(fake_y), nullptr).value();
    const auto rec_y = b.generator_H.forward(V(fake_x), nullptr).value();
    const auto sy = b.disc_Y.forward(V(fake_y)).value(), sx = b.disc_X.forward(V(fake_x)).value();
    double gan_f = 0, gan_b = 0, cyc_x = 0, cyc_y = 0;
    for (double s : sy.vec()) gan_f += (s - 1) * (s - 1);
    for (double s : sx.vec()) gan_b += (s - 1) * (s - 1);
    gan_f /= sy.size();
    gan_b /= sx.size();
    for (std::size_t i = 0; i < rec_x.size(); ++i) {
        cyc_x += std::abs(rec_x[i] - batch.x[i]);
        cyc_y += std::abs(rec_y[i] - batch.y[i]);
    }
    const double cyc = (cyc_x + cyc_y) / rec_x.size();
    const double plain = gan_f + gan_b + cfg.weights.lambda_cyc * cyc;
    CHECK(std::abs(lo.total - plain) < 1e-6);
    CHECK(std::abs(lf.total - plain) < 1e-6);
}

TEST_CASE("a non-finite loss aborts the step and preserves state") {
    ModelBundle<float> b(ArchConfig::micro(), 11);
    Trainer<float> tr(b, micro_config());
    std::mt19937_64 rng(12);
    auto x = random_tensor<float>({3, 1, 8, 8}, rng), y = random_tensor<float>({3, 1, 8, 8}, rng);
    tr.step(x, {0, 1, 2}, y);
    const auto gh = hash_params(b.generator_side_params()), dh = hash_params(b.discriminator_params());
    const auto bh = hash_buffers(b);
    const auto snap = tr.snapshot();
    auto bad = x;
    bad[5] = std::nanf("");
    try {
        tr.step(bad, {0, 1, 2}, y);
        FAIL("expected a divergence error");
    } catch (const DivergenceError& e) {
        CHECK(e.step() == 2);
    }
    CHECK(tr.steps_done() == 1);
    CHECK(hash_params(b.generator_side_params()) == gh);
    CHECK(hash_params(b.discriminator_params()) == dh);
    CHECK(hash_buffers(b) == bh);
    const auto now = tr.snapshot();
    CHECK(now.history_X == snap.history_X);
    CHECK(now.history_Y == snap.history_Y);
    CHECK(now.history_X_rng == snap.history_X_rng);
    CHECK(now.generator_opt.m == snap.generator_opt.m);
    CHECK(now.discriminator_opt.t == snap.discriminator_opt.t);
    // training continues normally afterwards
    CHECK(std::isfinite(tr.step(x, {0, 1, 2}, y).total));
}

TEST_CASE("training runs are reproducible and resumable") {
    const Corpus corpus = tiny_corpus();
    auto cfg = micro_config();
    cfg.steps = 6;
    cfg.checkpoint_interval = 3;
    const fs::path root = fs::temp_directory_path() / "docmoe_test_train";
    fs::remove_all(root);
    RunOptions a{root / "a", std::nullopt, {}}, b{root / "b", std::nullopt, {}};
    const auto ra = run_training(cfg, corpus, a);
    run_training(cfg, corpus, b);
    CHECK(ra.steps_done == 6);
    CHECK(ra.losses.size() == 6);
    const auto la = read_lines(root / "a" / "metrics.ndjson");
    CHECK(la.size() == 6);
    CHECK(la == read_lines(root / "b" / "metrics.ndjson"));
    CHECK(fs::exists(checkpoint_path(root / "a", 3) / "manifest.json"));
    CHECK(fs::exists(checkpoint_path(root / "a", 6) / "optim.bin"));
    const auto first = nlohmann::json::parse(la.front());
    for (const char* key : {"step", "gan_f", "gan_b", "cycle", "moe_ce", "moe_gate_l1", "total"}) CHECK(first.contains(key));
    CHECK(first["step"] == 1);

    // resume into a fresh directory from the step-3 checkpoint and into the original one
    RunOptions c{root / "c", checkpoint_path(root / "a", 3), {}};
    const auto rc = run_training(cfg, corpus, c);
    CHECK(rc.losses.size() == 3);
    const auto lc = read_lines(root / "c" / "metrics.ndjson");
    CHECK(std::vector<std::string>(lc.end() - 3, lc.end()) == std::vector<std::string>(la.begin() + 3, la.end()));

    // final parameters agree bitwise
    auto fa = load_checkpoint(checkpoint_path(root / "a", 6)), fc = load_checkpoint(checkpoint_path(root / "c", 6));
    CHECK(hash_params(fa.bundle.generator_side_params()) == hash_params(fc.bundle.generator_side_params()));
    CHECK(hash_params(fa.bundle.discriminator_params()) == hash_params(fc.bundle.discriminator_params()));
    fs::remove_all(root);
}

TEST_CASE("float and double trainers agree on the first losses") {
    ModelBundle<float> bf(ArchConfig::micro(), 13);
    ModelBundle<double> bd(ArchConfig::micro(), 13);
    std::mt19937_64 rng(14);
    auto x = random_tensor<float>({3, 1, 8, 8}, rng), y = random_tensor<float>({3, 1, 8, 8}, rng);
    Trainer<float> tf(bf, micro_config());
    Trainer<double> td(bd, micro_config());
    const auto lf = tf.generator_objective(x, {0, 1, 2}, y);
    const auto ld = td.generator_objective(to_precision<double>(x), {0, 1, 2}, to_precision<double>(y));
    CHECK(lf.total == doctest::Approx(ld.total).epsilon(1e-4));
}
