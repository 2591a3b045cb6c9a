#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "umigrat/attack.hpp"
#include "umigrat/model.hpp"

namespace umigrat {

/// Per-input comparison between the Jacobian-product deviation formula and
/// the empirical end-to-end gradient gap. On linear stacks the two agree to
/// rounding; on nonlinear stacks the residual quantifies the activation
/// mismatch (the surrogate product is evaluated at the victim's activations
/// while a real surrogate attack differentiates along its own trajectory).
struct DeviationReport {
    Tensor deviation;                   // loss_seed . (prod victim J - prod surrogate J), victim activations
    Tensor victim_gradient;             // end-to-end white-box gradient on the victim
    Tensor surrogate_gradient;          // end-to-end gradient on the surrogate
    Tensor surrogate_product_at_victim; // surrogate Jacobian chain at victim activations
    Tensor empirical_gap;               // victim_gradient - surrogate_gradient
    Tensor residual;                    // deviation - empirical_gap
    double cosine_deviation_vs_gap = 0.0;
    double deviation_norm = 0.0;
    double gap_norm = 0.0;
    double residual_norm = 0.0;
};

/// Evaluates the update-deviation decomposition at input x with the given
/// scalar-loss gradient seed (a row vector in embedding space). The victim
/// must be surrogate with delta_weights applied.
DeviationReport deviation(const SequentialModel& surrogate, const SequentialModel& victim,
                          const WeightDelta& delta_weights, const Tensor& x,
                          const Tensor& loss_seed,
                          std::size_t dense_limit = kDefaultJacobianLimit);

/// Gradient of || emb(x) dot'ed with seed || ... the linear functional
/// <seed, f(x)> differentiated end to end; the reference loss used by the
/// deviation analysis.
Tensor seeded_gradient(const SequentialModel& model, const Tensor& x, const Tensor& seed);

struct AugmentedGradientReport {
    Tensor plain;     // chain-rule gradient without augmentation
    Tensor product;   // multiplicative accumulation of the noise factors
    Tensor expansion; // first-order-in-noise form (the gr-loss Jacobian)
    Tensor residual;  // product - expansion; sums the >= second-order noise terms,
                      // exactly zero when at most one noise entry is nonzero
};

/// Evaluates the noise-augmented gradient in both its product form and its
/// first-order expansion, with matched noise, via dense per-module Jacobians
/// along the adversarial trajectory. The expansion equals the gradient of
/// the gradient-robust loss with the same fixed noise.
AugmentedGradientReport augmented_gradient(const SequentialModel& surrogate,
                                           const Tensor& x_clean, const Tensor& x_adv,
                                           std::span<const double> noise, int p,
                                           std::size_t dense_limit = kDefaultJacobianLimit);

/// Same computation over a bare module chain (allows the single-module edge
/// case, where augmentation has no effect).
AugmentedGradientReport augmented_gradient_chain(std::span<const Module> modules,
                                                 const Tensor& x_clean, const Tensor& x_adv,
                                                 std::span<const double> noise, int p,
                                                 std::size_t dense_limit = kDefaultJacobianLimit);

struct CosineResult {
    double value = 0.0;
    bool degenerate = false; // a zero vector was involved; value reported as 0
};

CosineResult perturbation_cosine(const Tensor& a, const Tensor& b);

struct TransferRow {
    std::size_t input_index = 0;
    std::size_t victim_index = 0;
    double surrogate_loss = 0.0;
    double victim_loss = 0.0;
    double drop_ratio = 0.0; // victim / surrogate
    bool ratio_defined = true;
};

struct TransferReport {
    std::vector<TransferRow> rows;
    double median_surrogate_loss = 0.0;
    double median_victim_loss = 0.0;
    double median_drop_ratio = 0.0;
    bool drop_ratio_defined = false;
};

/// Surrogate-side and victim-side feature distances of perturbations that
/// were generated against the surrogate, with per-input drop ratios.
/// Perturbation anchors must match the inputs they are paired with.
TransferReport transfer_gap(std::span<const Perturbation> perturbations,
                            std::span<const Tensor> inputs,
                            const SequentialModel& surrogate,
                            std::span<const SequentialModel* const> victims, int p);

double median_of(std::vector<double> values);

} // namespace umigrat
