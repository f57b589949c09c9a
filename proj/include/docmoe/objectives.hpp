#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "docmoe/model.hpp"

namespace docmoe {

struct LossWeights {
    double lambda_cyc = 10.0;
    double lambda_moe = 1.0;
    double lambda_gH = 0.1;
    double lambda_gF = 0.1;

    void validate() const;
};

enum class AdversarialMode { LeastSquares, Log };
enum class AdversarialRole { Discriminator, Generator };

std::string to_string(AdversarialMode m);
AdversarialMode adversarial_mode_from_string(const std::string& s);

/// Per-step loss components. `moe_gate_l1` already carries the lambda_gH /
/// lambda_gF factors; `total` weights the rest:
///   total = gan_forward + gan_backward + lambda_cyc * cycle
///         + lambda_moe * (moe_ce + moe_gate_l1)
struct LossBreakdown {
    double gan_forward = 0, gan_backward = 0, cycle = 0, moe_ce = 0, moe_gate_l1 = 0, total = 0;
    // Discriminator objectives of the same step (not part of `total`).
    double disc_X = 0, disc_Y = 0;
};

/// Raised when a loss turns non-finite. `step` is -1 outside a training loop.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(const std::string& what, long step = -1)
        : std::runtime_error(step >= 0 ? what + " at step " + std::to_string(step) : what), step_(step) {}
    long step() const { return step_; }

private:
    long step_;
};

// ---- differentiable forms (used by the trainer) -------------------------------

/// Least squares: discriminator mean((D_real - 1)^2) + mean(D_fake^2),
/// generator mean((D_fake - 1)^2). Log mode takes probabilities and returns
/// the negated objective: discriminator -(mean log D_real + mean log(1 - D_fake)),
/// generator mean log(1 - D_fake) (the saturating form). `real` is ignored
/// (and may be undefined) for the generator role.
template <typename T>
ag::Var<T> adversarial_loss(const ag::Var<T>& real, const ag::Var<T>& fake, AdversarialMode mode,
                            AdversarialRole role);

/// mean|x_rec - x| + mean|y_rec - y|
template <typename T>
ag::Var<T> cycle_consistency_loss(const ag::Var<T>& x, const ag::Var<T>& x_rec, const ag::Var<T>& y,
                                  const ag::Var<T>& y_rec);

template <typename T>
struct MoeTerms {
    ag::Var<T> cross_entropy;
    ag::Var<T> gate_l1;  // lambda_gH * sum_b ||g_H^b||_1 + lambda_gF * sum_b ||g_F^b||_1, batch-averaged
};

template <typename T>
MoeTerms<T> moe_loss(const ag::Var<T>& class_logits, const std::vector<int>& labels, const GateVars<T>& gates_H,
                     const GateVars<T>& gates_F, const LossWeights& w);

/// Weighted total as a graph node.
template <typename T>
ag::Var<T> total_objective(const ag::Var<T>& gan_forward, const ag::Var<T>& gan_backward, const ag::Var<T>& cycle,
                           const MoeTerms<T>& moe, const LossWeights& w);

// ---- value forms ------------------------------------------------------------------

template <typename T>
double adversarial_loss(const Tensor<T>& real_scores, const Tensor<T>& fake_scores, AdversarialMode mode,
                        AdversarialRole role);

template <typename T>
double cycle_consistency_loss(const Tensor<T>& x, const Tensor<T>& x_rec, const Tensor<T>& y, const Tensor<T>& y_rec);

/// Single-sample MoE loss: CE(softmax(logits), label) plus the weighted gate
/// l1 sums. Returns the unweighted-by-lambda_moe value.
template <typename T>
double moe_loss(const std::vector<T>& class_logits, NoiseClass label, const GateSet<T>& gates_H,
                const GateSet<T>& gates_F, const LossWeights& w);

struct LossParts {
    double gan_forward = 0, gan_backward = 0, cycle = 0, moe_ce = 0, moe_gate_l1 = 0;
};

/// Throws DivergenceError on a non-finite component.
LossBreakdown total_objective(const LossParts& parts, const LossWeights& w);

}  // namespace docmoe
