#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "umigrat/model.hpp"
#include "umigrat/tensor.hpp"

namespace umigrat {

/// Conversion between the 0-255 convention of the attack literature and the
/// canonical [0,1] pixel domain used internally.
inline double from_255(double v) { return v / 255.0; }

struct AttackBudget {
    double epsilon = 10.0 / 255.0; // l-inf radius, canonical units
    double alpha = 2.0 / 255.0;    // step size, canonical units
    std::size_t iterations = 10;   // T_a
    int loss_norm = 2;             // p in {1, 2}
    double momentum_decay = 1.0;   // mu of momentum attacks

    void validate() const;
    static AttackBudget from_255_units(double eps255, double alpha255,
                                       std::size_t iterations, int loss_norm = 2,
                                       double momentum_decay = 1.0);
};

/// A bounded perturbation anchored at a specific clean input: linf norm at
/// most epsilon and anchor + delta inside [0,1] elementwise.
struct Perturbation {
    Tensor delta;
    std::uint64_t anchor_fingerprint = 0;
    AttackBudget budget;

    static Perturbation zero(const Tensor& anchor, const AttackBudget& budget);
    void check_feasible(const Tensor& anchor) const;
};

struct AttackIteration {
    double surrogate_loss = 0.0; // noise-free feature loss at the iterate
    double objective = 0.0;      // value of the stepped objective
    double step_norm = 0.0;      // linf change of delta this iteration
    double wall_ms = 0.0;
    bool stepped = true;         // false when the raw gradient was zero
    std::vector<double> noise;   // draws consumed (empty for noise-free attacks)
    Tensor step;                 // delta change applied this iteration
};

/// Per-iteration log of one attack run. Replaying an attack with the stored
/// noise reproduces the final perturbation bit-exactly.
struct AttackTrace {
    double initial_loss = 0.0;
    std::vector<AttackIteration> iterations; // length == budget.iterations
    std::size_t best_index = 0;              // 0 = initial iterate, k = after step k
    bool stationary = false;                 // no iteration ever stepped

    double best_loss() const;
    std::size_t sign_flips() const; // direction reversals of the applied steps
};

struct AttackResult {
    Perturbation perturbation;
    AttackTrace trace;
};

/// Projects delta onto the feasible set: clamp to [-eps, +eps], then clamp
/// anchor + delta to [0, 1]. Total, idempotent, non-expansive in l-inf.
Tensor project(const Tensor& delta, const Tensor& anchor, const AttackBudget& budget);

/// Ball-only projection used for universal perturbations, which have no
/// single anchor.
Tensor clip_ball(const Tensor& delta, double epsilon);

/// lp distance between the final embeddings of the clean and adversarial
/// inputs.
double feature_loss(const SequentialModel& model, const Tensor& x_clean,
                    const Tensor& x_adv, int p);
Tensor feature_loss_gradient(const SequentialModel& model, const Tensor& x_clean,
                             const Tensor& x_adv, int p);

/// Gradient-robust loss: the final embedding difference plus noise-weighted
/// per-module intermediate differences (weights noise[i]/(m-1)), reduced to
/// the embedding width by mean pooling (or zero padding) when module widths
/// differ, all under one lp norm. noise must have length m-1.
double gr_loss(const SequentialModel& model, const Tensor& x_clean, const Tensor& x_adv,
               std::span<const double> noise, int p);
Tensor gr_loss_gradient(const SequentialModel& model, const Tensor& x_clean,
                        const Tensor& x_adv, std::span<const double> noise, int p);

/// The linear map that reduces a width-w intermediate difference to the
/// embedding width: adaptive mean pooling when w > target, zero padding when
/// w < target, identity otherwise. Returned as a {target, w} matrix.
Tensor pooling_matrix(std::size_t width, std::size_t target);

/// Iterative fast gradient sign attack on the feature loss. Returns the
/// best iterate by surrogate loss together with its trace. A null init
/// means the zero perturbation; an infeasible init is projected first.
AttackResult ifgsm(const SequentialModel& model, const Tensor& x, const AttackBudget& budget,
                   const Perturbation* init = nullptr);

/// Momentum variant: g_t = mu * g_{t-1} + grad / ||grad||_1, step by
/// alpha * sign(g_t).
AttackResult mifgsm(const SequentialModel& model, const Tensor& x, const AttackBudget& budget,
                    const Perturbation* init = nullptr);

enum class AdaptDirection : std::uint8_t { AlgorithmLiteral, Minimize };

/// Settings of the one-step adaptation applied before the gradient-robust
/// attack: step size, sign direction, and the natural-embedding centroid the
/// adaptation loss is measured against.
struct AdaptSpec {
    bool enabled = true;
    double alpha_adp = 4.0 / 255.0;
    AdaptDirection direction = AdaptDirection::AlgorithmLiteral;
    Tensor y_tilde;
};

/// One sign step of size alpha_adp on the adaptation loss
/// || f(x_tau) - y_tilde ||_p, added to the universal delta and projected.
Perturbation adapt_init(const SequentialModel& model, const Tensor& x_tau,
                        const Tensor& umi_delta, const Tensor& y_tilde, double alpha_adp,
                        AdaptDirection direction, const AttackBudget& budget);

/// The gradient-robust attack: initialize from the adapted universal delta,
/// then T_a sign steps on the gradient-robust loss, drawing one fresh noise
/// vector (one scalar per intermediate module, N(0, sigma^2)) per iteration.
/// Best iterate is selected by the noise-free surrogate loss. Passing
/// replay_noise substitutes the stored draws and reproduces a previous run
/// bit-exactly.
AttackResult gr_attack(const SequentialModel& model, const Tensor& x_tau,
                       const AttackBudget& budget, const Tensor& umi_delta,
                       const AdaptSpec& adapt, double sigma, std::uint64_t seed,
                       const std::vector<std::vector<double>>* replay_noise = nullptr);

/// Internal iteration engine shared by every sign-step attack; exposed for
/// the update-rule unit tests. grad is called with the current delta and the
/// iteration index.
struct SignAscentProblem {
    std::function<double(const Tensor&)> loss;
    std::function<Tensor(const Tensor&, std::size_t)> grad;
    std::function<double(const Tensor&, std::size_t)> objective; // optional
    std::function<Tensor(const Tensor&)> project;
    std::function<std::vector<double>(std::size_t)> noise_draws; // optional, for traces
};

struct SignAscentOptions {
    std::size_t iterations = 1;
    double alpha = 2.0 / 255.0;
    bool use_momentum = false;
    double momentum_decay = 1.0;
    bool return_best = true; // else the final iterate
};

AttackResult run_sign_ascent(const SignAscentProblem& problem, const Tensor& init,
                             const SignAscentOptions& options);

} // namespace umigrat
