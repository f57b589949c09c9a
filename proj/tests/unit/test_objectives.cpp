#include <doctest.h>

#include "docmoe/objectives.hpp"
#include "helpers.hpp"

using namespace docmoe;
using namespace testutil;
using ag::Var;

namespace {

constexpr auto LS = AdversarialMode::LeastSquares;
constexpr auto LOG = AdversarialMode::Log;
constexpr auto DISC = AdversarialRole::Discriminator;
constexpr auto GEN = AdversarialRole::Generator;

Tensor<double> filled(Shape s, double v) { return Tensor<double>(std::move(s), v); }

GateSet<double> gate_set(std::size_t blocks, std::size_t channels, double v) {
    GateSet<double> g;
    g.gates.assign(blocks, std::vector<double>(channels, v));
    return g;
}

}  // namespace

TEST_CASE("adversarial loss closed forms") {
    const Shape s{2, 1, 3, 3};
    CHECK(std::abs(adversarial_loss(filled(s, 1.0), filled(s, 0.0), LS, DISC)) < 1e-9);
    CHECK(adversarial_loss(Tensor<double>(), filled(s, 0.5), LS, GEN) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(std::abs(adversarial_loss(filled(s, 1.0), filled(s, 0.0), LOG, DISC)) < 1e-9);
    CHECK(adversarial_loss(filled(s, 0.0), filled(s, 1.0), LS, DISC) == doctest::Approx(2.0));
    // log mode: -(log 0.8 + log(1 - 0.3)) and the saturating generator form log(1 - 0.3)
    CHECK(adversarial_loss(filled(s, 0.8), filled(s, 0.3), LOG, DISC) ==
          doctest::Approx(-(std::log(0.8) + std::log(0.7))).epsilon(1e-12));
    CHECK(adversarial_loss(Tensor<double>(), filled(s, 0.3), LOG, GEN) == doctest::Approx(std::log(0.7)).epsilon(1e-12));
    CHECK_THROWS_AS(adversarial_loss(filled(s, 1.0), Tensor<double>(), LS, DISC), ContractViolation);
    CHECK_THROWS_AS(adversarial_loss(Tensor<double>(), filled(s, 1.0), LS, DISC), ContractViolation);
}

TEST_CASE("least-squares losses against a direct mean") {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 50; ++t) {
        auto real = random_tensor({2, 1, 4, 4}, rng, -2, 2);
        auto fake = random_tensor({2, 1, 4, 4}, rng, -2, 2);
        double d = 0, g = 0;
        for (std::size_t i = 0; i < real.size(); ++i) {
            d += (real[i] - 1) * (real[i] - 1) + fake[i] * fake[i];
            g += (fake[i] - 1) * (fake[i] - 1);
        }
        d /= real.size();
        g /= real.size();
        CHECK(adversarial_loss(real, fake, LS, DISC) == doctest::Approx(d).epsilon(1e-12));
        CHECK(adversarial_loss(real, fake, LS, GEN) == doctest::Approx(g).epsilon(1e-12));
        CHECK(adversarial_loss(real, fake, LS, DISC) >= 0);
    }
}

TEST_CASE("cycle loss examples") {
    std::mt19937_64 rng(2);
    auto x = random_tensor({2, 1, 4, 4}, rng);
    auto y = random_tensor({2, 1, 4, 4}, rng);
    CHECK(cycle_consistency_loss(x, x, y, y) == 0.0);
    auto x1 = x;
    for (auto& v : x1.vec()) v += 0.1;
    CHECK(cycle_consistency_loss(x, x1, y, y) == doctest::Approx(0.1).epsilon(1e-9));
    CHECK_THROWS_AS(cycle_consistency_loss(x, Tensor<double>({1, 1, 4, 4}), y, y), ContractViolation);
}

TEST_CASE("mixture-of-experts loss examples") {
    LossWeights w;
    const std::vector<double> uniform(4, 0.0);
    auto z = gate_set(9, 256, 0.0);
    CHECK(moe_loss(uniform, NoiseClass::Faded, z, z, w) == doctest::Approx(std::log(4.0)).epsilon(1e-6));
    // near-one-hot logits on the true class
    const std::vector<double> sure{0.0, 200.0, 0.0, 0.0};
    CHECK(std::abs(moe_loss(sure, NoiseClass::Blurred, z, z, w)) < 1e-12);
    // all-ones gates: 0.1 * M per generator
    auto ones = gate_set(9, 256, 1.0);
    const double M = 9 * 256;
    CHECK(moe_loss(sure, NoiseClass::Blurred, ones, z, w) == doctest::Approx(0.1 * M).epsilon(1e-9));
    CHECK(moe_loss(sure, NoiseClass::Blurred, ones, ones, w) == doctest::Approx(0.2 * M).epsilon(1e-9));
    CHECK_THROWS_AS(moe_loss(std::vector<double>(3, 0.0), NoiseClass::Faded, z, z, w), ContractViolation);

    // batched graph form: labels outside the class range are rejected
    Var<double> logits(Tensor<double>({2, 4}, 0.0));
    GateVars<double> gv{Var<double>(Tensor<double>({2, 5}, 1.0))};
    auto terms = moe_loss(logits, {0, 3}, gv, gv, w);
    CHECK(terms.cross_entropy.value()[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    // per-sample sum of |g| is 5, averaged over the batch, weighted 0.1 for each generator
    CHECK(terms.gate_l1.value()[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(moe_loss(logits, {0, 4}, gv, gv, w), ContractViolation);
    CHECK_THROWS_AS(moe_loss(logits, {0, -1}, gv, gv, w), ContractViolation);
}

TEST_CASE("total objective arithmetic") {
    LossWeights w;
    CHECK(total_objective(LossParts{}, w).total == 0.0);
    LossParts p{0.25, 0.25, 0.1, 0.2, 0.0};
    CHECK(total_objective(p, w).total == doctest::Approx(1.7).epsilon(1e-12));

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0, 3), lam(0, 20);
    for (int t = 0; t < 200; ++t) {
        LossParts q{u(rng), u(rng), u(rng), u(rng), u(rng)};
        LossWeights lw{lam(rng), lam(rng), 0.1, 0.1};
        const auto lb = total_objective(q, lw);
        const double expect =
            q.gan_forward + q.gan_backward + lw.lambda_cyc * q.cycle + lw.lambda_moe * (q.moe_ce + q.moe_gate_l1);
        CHECK(std::abs(lb.total - expect) < 1e-6);
        // doubling lambda_cyc doubles the cycle contribution exactly
        LossWeights w2 = lw;
        w2.lambda_cyc *= 2;
        const double d1 = lb.total - total_objective(LossParts{q.gan_forward, q.gan_backward, 0, q.moe_ce, q.moe_gate_l1}, lw).total;
        const double d2 =
            total_objective(q, w2).total - total_objective(LossParts{q.gan_forward, q.gan_backward, 0, q.moe_ce, q.moe_gate_l1}, w2).total;
        CHECK(d2 == doctest::Approx(2 * d1).epsilon(1e-12));
    }
    LossParts bad{0, std::nan(""), 0, 0, 0};
    CHECK_THROWS_AS(total_objective(bad, w), DivergenceError);
    LossParts inf{0, 0, INFINITY, 0, 0};
    CHECK_THROWS_AS(total_objective(inf, w), DivergenceError);
    CHECK_THROWS_AS(LossWeights({-1, 1, 0.1, 0.1}).validate(), ContractViolation);
}

TEST_CASE("graph and value forms agree") {
    std::mt19937_64 rng(4);
    auto real = random_tensor({2, 1, 3, 3}, rng, 0.05, 0.95);
    auto fake = random_tensor({2, 1, 3, 3}, rng, 0.05, 0.95);
    for (auto mode : {LS, LOG})
        for (auto role : {DISC, GEN}) {
            auto gv = adversarial_loss(Var<double>(real), Var<double>(fake), mode, role).value()[0];
            CHECK(gv == doctest::Approx(adversarial_loss(real, fake, mode, role)).epsilon(1e-12));
        }
    auto x = random_tensor({2, 1, 3, 3}, rng), xr = random_tensor({2, 1, 3, 3}, rng);
    auto y = random_tensor({2, 1, 3, 3}, rng), yr = random_tensor({2, 1, 3, 3}, rng);
    auto cv = cycle_consistency_loss(Var<double>(x), Var<double>(xr), Var<double>(y), Var<double>(yr)).value()[0];
    CHECK(cv == doctest::Approx(cycle_consistency_loss(x, xr, y, yr)).epsilon(1e-12));

    // single-sample MoE value form equals the batched form on a batch of one
    auto logits = random_tensor({1, 4}, rng, -2, 2);
    auto gh = random_tensor({1, 6}, rng, 0, 1), gf = random_tensor({1, 6}, rng, 0, 1);
    LossWeights w;
    auto terms = moe_loss(Var<double>(logits), {2}, GateVars<double>{Var<double>(gh)}, GateVars<double>{Var<double>(gf)}, w);
    GateSet<double> sh, sf;
    sh.gates = {gh.vec()};
    sf.gates = {gf.vec()};
    CHECK(moe_loss(logits.vec(), NoiseClass::Faded, sh, sf, w) ==
          doctest::Approx(terms.cross_entropy.value()[0] + terms.gate_l1.value()[0]).epsilon(1e-12));
}

TEST_CASE("loss gradients with respect to their inputs") {
    std::mt19937_64 rng(5);
    auto real = random_var({2, 1, 3, 3}, rng, true, 0.05, 0.95);
    auto fake = random_var({2, 1, 3, 3}, rng, true, 0.05, 0.95);
    for (auto mode : {LS, LOG}) {
        CHECK(grad_check({real, fake}, [&] { return adversarial_loss(real, fake, mode, DISC); }, rng).max_rel < 1e-3);
        CHECK(grad_check({fake}, [&] { return adversarial_loss(Var<double>(), fake, mode, GEN); }, rng).max_rel < 1e-3);
    }
    auto x = random_var({2, 1, 3, 3}, rng), xr = random_var({2, 1, 3, 3}, rng);
    auto y = random_var({2, 1, 3, 3}, rng), yr = random_var({2, 1, 3, 3}, rng);
    CHECK(grad_check({x, xr, y, yr}, [&] { return cycle_consistency_loss(x, xr, y, yr); }, rng).max_rel < 1e-3);

    auto logits = random_var({3, 4}, rng, true, -2, 2);
    auto gh = random_var({3, 5}, rng, true, 0.1, 1), gf = random_var({3, 5}, rng, true, 0.1, 1);
    LossWeights w;
    auto total = [&] {
        auto moe = moe_loss(logits, {0, 2, 3}, GateVars<double>{gh}, GateVars<double>{gf}, w);
        return total_objective(ops::mean(fake), ops::mean(real), ops::mean(x), moe, w);
    };
    CHECK(grad_check({logits, gh, gf, fake, real, x}, total, rng).max_rel < 1e-3);
}
