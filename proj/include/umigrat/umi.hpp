#pragma once

#include <cstdint>
#include <vector>

#include "umigrat/attack.hpp"
#include "umigrat/model.hpp"
#include "umigrat/synth.hpp"

namespace umigrat {

/// The learned universal meta-initialization plus its training provenance.
struct UmiArtifact {
    Tensor delta;                         // input shape, ||delta||inf <= budget.epsilon
    double eta = 1.0;                     // universal step size
    std::size_t meta_rounds = 7;          // T_m
    std::size_t inner_steps = 5;          // t
    double lambda = 0.0;                  // success threshold
    std::vector<double> epsilon_schedule; // per-inner-step bound of the minimal search
    AttackBudget budget;                  // training budget (ball radius, step size)
    std::uint64_t dataset_fingerprint = 0;
    std::uint64_t model_fingerprint = 0;
    double fooling_rate_at_train = 0.0;
    std::vector<std::size_t> rolled_back_rounds; // divergence-guard hits
};

struct UmiConfig {
    std::size_t meta_rounds = 7;
    double eta = 1.0;
    std::size_t inner_steps = 5;
    AttackBudget budget;             // epsilon/alpha reused for inner updates
    double lambda = -1.0;            // < 0: calibrate from the data
    double lambda_factor = 0.25;     // lambda = factor * median clean-pair distance
    double holdout_fraction = 0.2;   // split for fooling-rate measurement
    double init_noise_scale = 0.1;   // initial delta ~ U(+-scale*epsilon)
    std::uint64_t seed = 0;
};

struct UmiTrainResult {
    UmiArtifact artifact;
    double holdout_fooling_rate = 0.0;
    std::vector<double> round_fooling_rates;
};

/// t sign-gradient ascent steps on the feature loss from the given
/// initialization, ball-projected each step; the universal update of the
/// effectiveness/adaptability objective. Returns the final iterate (with its
/// trace); losses along the way match an equally initialized I-FGSM run.
AttackResult u_mu1(const Tensor& delta, const SequentialModel& model, const Tensor& x,
                   const AttackBudget& budget, std::size_t t);

struct UMu2Result {
    Tensor delta;
    bool threshold_reached = false;
    std::size_t steps_taken = 0;
    double final_loss = 0.0;
};

/// Minimal-update search: sign steps whose cumulative update is clamped per
/// phase by the schedule (and the total stays inside the training ball),
/// stopping at the first iterate whose feature loss exceeds lambda. If the
/// threshold is never reached the final iterate is returned flagged.
UMu2Result u_mu2(const Tensor& delta, const SequentialModel& model, const Tensor& x,
                 double lambda, std::span<const double> schedule,
                 const AttackBudget& budget);

/// Linear ramp from epsilon/4 to epsilon in four phases spread over t steps.
std::vector<double> default_epsilon_schedule(double epsilon, std::size_t t);

/// lambda = factor * median distance between embeddings of random disjoint
/// sample pairs; ties the success threshold to the model's own feature scale.
double calibrate_lambda(const SequentialModel& model, const Dataset& data, double factor,
                        int p, std::uint64_t seed);

/// Fraction of samples whose feature loss under the (per-input projected)
/// perturbation exceeds lambda.
double fooling_rate(const Tensor& delta, const SequentialModel& model,
                    const Dataset& dataset, double lambda, const AttackBudget& budget);

/// Offline universal meta-initialization training: per meta-round the two
/// objective copies sweep the dataset sequentially (order fixed and
/// recorded), then one averaged first-order meta update combines them.
/// Rounds whose holdout fooling rate drops by more than 0.5 are rolled back
/// and flagged.
UmiTrainResult train_umi(const SequentialModel& model, const Dataset& data,
                         const UmiConfig& config);

/// The first-order meta combination delta + eta * mean_i(candidate_i - delta).
Tensor reptile_update(const Tensor& delta, const std::vector<Tensor>& candidates,
                      double eta);

} // namespace umigrat
