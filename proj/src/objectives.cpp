#include "docmoe/objectives.hpp"

#include <cmath>

namespace docmoe {

void LossWeights::validate() const {
    require(lambda_cyc >= 0 && lambda_moe >= 0 && lambda_gH >= 0 && lambda_gF >= 0, "loss weights must be >= 0");
}

std::string to_string(AdversarialMode m) { return m == AdversarialMode::LeastSquares ? "least_squares" : "log"; }

AdversarialMode adversarial_mode_from_string(const std::string& s) {
    if (s == "least_squares") return AdversarialMode::LeastSquares;
    if (s == "log") return AdversarialMode::Log;
    throw ContractViolation("unknown adversarial mode '" + s + "'");
}

template <typename T>
ag::Var<T> adversarial_loss(const ag::Var<T>& real, const ag::Var<T>& fake, AdversarialMode mode,
                            AdversarialRole role) {
    require(fake.defined() && fake.value().size() > 0, "empty fake score map");
    if (role == AdversarialRole::Generator) {
        return mode == AdversarialMode::LeastSquares ? ops::mse_to_constant(fake, T(1)) : ops::mean_log1m(fake);
    }
    require(real.defined() && real.value().size() > 0, "empty real score map");
    if (mode == AdversarialMode::LeastSquares)
        return ops::add(ops::mse_to_constant(real, T(1)), ops::mse_to_constant(fake, T(0)));
    return ops::weighted_sum<T>({ops::mean_log(real), ops::mean_log1m(fake)}, {T(-1), T(-1)});
}

template <typename T>
ag::Var<T> cycle_consistency_loss(const ag::Var<T>& x, const ag::Var<T>& x_rec, const ag::Var<T>& y,
                                  const ag::Var<T>& y_rec) {
    return ops::add(ops::mean_abs_diff(x_rec, x), ops::mean_abs_diff(y_rec, y));
}

template <typename T>
MoeTerms<T> moe_loss(const ag::Var<T>& class_logits, const std::vector<int>& labels, const GateVars<T>& gates_H,
                     const GateVars<T>& gates_F, const LossWeights& w) {
    MoeTerms<T> out;
    out.cross_entropy = ops::softmax_cross_entropy(class_logits, labels);
    std::vector<ag::Var<T>> terms;
    std::vector<T> weights;
    for (const auto& g : gates_H) {
        terms.push_back(ops::batch_mean_l1(g));
        weights.push_back(static_cast<T>(w.lambda_gH));
    }
    for (const auto& g : gates_F) {
        terms.push_back(ops::batch_mean_l1(g));
        weights.push_back(static_cast<T>(w.lambda_gF));
    }
    out.gate_l1 = ops::weighted_sum(terms, weights);
    return out;
}

template <typename T>
ag::Var<T> total_objective(const ag::Var<T>& gan_forward, const ag::Var<T>& gan_backward, const ag::Var<T>& cycle,
                           const MoeTerms<T>& moe, const LossWeights& w) {
    return ops::weighted_sum<T>({gan_forward, gan_backward, cycle, moe.cross_entropy, moe.gate_l1},
                                {T(1), T(1), static_cast<T>(w.lambda_cyc), static_cast<T>(w.lambda_moe),
                                 static_cast<T>(w.lambda_moe)});
}

template <typename T>
double adversarial_loss(const Tensor<T>& real_scores, const Tensor<T>& fake_scores, AdversarialMode mode,
                        AdversarialRole role) {
    ag::NoGradGuard no_grad;
    ag::Var<T> real = real_scores.empty() ? ag::Var<T>() : ag::Var<T>(real_scores);
    return adversarial_loss(real, ag::Var<T>(fake_scores), mode, role).value()[0];
}

template <typename T>
double cycle_consistency_loss(const Tensor<T>& x, const Tensor<T>& x_rec, const Tensor<T>& y, const Tensor<T>& y_rec) {
    ag::NoGradGuard no_grad;
    return cycle_consistency_loss(ag::Var<T>(x), ag::Var<T>(x_rec), ag::Var<T>(y), ag::Var<T>(y_rec)).value()[0];
}

template <typename T>
double moe_loss(const std::vector<T>& class_logits, NoiseClass label, const GateSet<T>& gates_H,
                const GateSet<T>& gates_F, const LossWeights& w) {
    require(class_logits.size() == static_cast<std::size_t>(kNumNoiseClasses), "expected 4 class logits");
    const int l = static_cast<int>(label);
    require(l >= 0 && l < kNumNoiseClasses, "noise class label out of range");
    ag::NoGradGuard no_grad;
    auto to_vars = [](const GateSet<T>& s) {
        GateVars<T> out;
        for (const auto& g : s.gates) out.emplace_back(Tensor<T>({1, g.size()}, g));
        return out;
    };
    auto terms = moe_loss(ag::Var<T>(Tensor<T>({1, class_logits.size()}, class_logits)), {l}, to_vars(gates_H),
                          to_vars(gates_F), w);
    return static_cast<double>(terms.cross_entropy.value()[0]) + terms.gate_l1.value()[0];
}

LossBreakdown total_objective(const LossParts& p, const LossWeights& w) {
    for (double v : {p.gan_forward, p.gan_backward, p.cycle, p.moe_ce, p.moe_gate_l1})
        if (!std::isfinite(v)) throw DivergenceError("non-finite loss component");
    LossBreakdown b;
    b.gan_forward = p.gan_forward;
    b.gan_backward = p.gan_backward;
    b.cycle = p.cycle;
    b.moe_ce = p.moe_ce;
    b.moe_gate_l1 = p.moe_gate_l1;
    b.total = p.gan_forward + p.gan_backward + w.lambda_cyc * p.cycle + w.lambda_moe * (p.moe_ce + p.moe_gate_l1);
    return b;
}

#define DOCMOE_INSTANTIATE_OBJECTIVES(T)                                                                         \
    template ag::Var<T> adversarial_loss(const ag::Var<T>&, const ag::Var<T>&, AdversarialMode, AdversarialRole); \
    template ag::Var<T> cycle_consistency_loss(const ag::Var<T>&, const ag::Var<T>&, const ag::Var<T>&,           \
                                               const ag::Var<T>&);                                                \
    template MoeTerms<T> moe_loss(const ag::Var<T>&, const std::vector<int>&, const GateVars<T>&,                \
                                  const GateVars<T>&, const LossWeights&);                                        \
    template ag::Var<T> total_objective(const ag::Var<T>&, const ag::Var<T>&, const ag::Var<T>&,                  \
                                        const MoeTerms<T>&, const LossWeights&);                                  \
    template double adversarial_loss(const Tensor<T>&, const Tensor<T>&, AdversarialMode, AdversarialRole);      \
    template double cycle_consistency_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                  \
                                           const Tensor<T>&);                                                     \
    template double moe_loss(const std::vector<T>&, NoiseClass, const GateSet<T>&, const GateSet<T>&,             \
                             const LossWeights&);

DOCMOE_INSTANTIATE_OBJECTIVES(float)
DOCMOE_INSTANTIATE_OBJECTIVES(double)

}  // namespace docmoe
