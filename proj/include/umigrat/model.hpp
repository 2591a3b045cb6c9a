#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "umigrat/graph.hpp"
#include "umigrat/synth.hpp"
#include "umigrat/tensor.hpp"

namespace umigrat {

enum class Activation : std::uint8_t { None, Tanh, Gelu };

/// One encoder stage: dense affine map, optional whole-vector layer norm,
/// optional pointwise nonlinearity.
struct Module {
    std::size_t in_dim = 0;
    std::size_t out_dim = 0;
    Tensor weight; // {out,in}
    Tensor bias;   // {out}
    bool layer_norm = false;
    Tensor ln_gain; // {out}
    Tensor ln_bias; // {out}
    double ln_eps = 1e-5;
    Activation activation = Activation::None;

    void validate() const;
};

/// Evaluates a single module outside of any larger record.
Tensor module_forward(const Module& m, const Tensor& x);

/// Dense Jacobian of one module at the given input, exact (tangent
/// propagation, not finite differences). Dimensions above the dense limit
/// are rejected.
Tensor module_jacobian(const Module& m, const Tensor& x,
                       std::size_t dense_limit = kDefaultJacobianLimit);

/// An ordered stack of m >= 2 differentiable modules with per-module output
/// access. Immutable after construction; embedding calls are safe to run in
/// parallel.
class SequentialModel {
public:
    SequentialModel(std::vector<Module> modules, std::vector<std::size_t> input_shape);

    const std::vector<Module>& modules() const { return modules_; }
    std::size_t module_count() const { return modules_.size(); }
    const std::vector<std::size_t>& input_shape() const { return input_shape_; }
    std::size_t input_dim() const { return input_dim_; }
    std::size_t embedding_dim() const { return modules_.back().out_dim; }

    /// Set when foundation training stopped before reaching its plateau.
    bool training_converged = true;

    /// Per-module outputs [y1..ym] when collecting intermediates, else [ym].
    std::vector<Tensor> embed(const Tensor& x, bool collect_intermediates) const;
    Tensor final_embedding(const Tensor& x) const;

    /// Record computing the full stack from a single input; module outputs
    /// are exposed through module_output_ids() for intermediate access.
    const ComputationRecord& embedding_record() const { return record_; }
    const std::vector<ValueId>& module_output_ids() const { return module_outputs_; }

    std::uint64_t fingerprint() const;

private:
    std::vector<Module> modules_;
    std::vector<std::size_t> input_shape_;
    std::size_t input_dim_ = 0;
    ComputationRecord record_;
    std::vector<ValueId> module_outputs_;
};

/// A parameter patch with the rounding metadata needed to make apply and
/// remove exact inverses at the bit level. apply(base) and remove(victim)
/// use the recorded compensation terms; entries the compensated path cannot
/// reproduce (which requires pathological cancellation) carry explicit
/// fixups captured at construction.
struct ParamPatch {
    Tensor delta;
    Tensor apply_comp;
    Tensor remove_comp;
    std::vector<std::pair<std::uint32_t, double>> apply_fix;
    std::vector<std::pair<std::uint32_t, double>> remove_fix;

    static ParamPatch from_delta(const Tensor& base, Tensor delta);
    static ParamPatch between(const Tensor& victim, const Tensor& base);
    Tensor apply(const Tensor& base) const;
    Tensor remove(const Tensor& victim) const;
    bool is_zero() const;
};

struct ModuleDelta {
    Tensor lowrank_u; // {out,r}; empty for dense deltas
    Tensor lowrank_v; // {r,in}
    double gain = 1.0;
    ParamPatch weight;
    ParamPatch bias;
};

/// Per-module update of the encoder parameters. Applying a delta and then
/// removing it restores the original weights bit-exactly.
class WeightDelta {
public:
    /// Samples per-module low-rank factors scaled so every parameter's delta
    /// has Frobenius norm strength * ||param||_F (hence the global ratio is
    /// exactly strength).
    static WeightDelta lowrank(const SequentialModel& base, double strength,
                               std::size_t rank, std::uint64_t seed);

    /// Dense delta reproducing victim from base (used after fine-tuning).
    static WeightDelta between(const SequentialModel& victim, const SequentialModel& base);

    static WeightDelta zero(const SequentialModel& base);

    SequentialModel apply(const SequentialModel& base) const;
    SequentialModel remove(const SequentialModel& victim) const;

    /// The hypothetical per-module update: h_i(y) = f_i^{phi+dphi}(y) - f_i^phi(y).
    Tensor module_update(const SequentialModel& base, std::size_t module_index,
                         const Tensor& y) const;

    double magnitude_ratio() const { return magnitude_ratio_; }
    double recompute_magnitude(const SequentialModel& base) const;
    std::size_t rank() const { return rank_; }
    bool is_zero() const;
    const std::vector<ModuleDelta>& entries() const { return entries_; }

private:
    std::vector<ModuleDelta> entries_;
    std::size_t rank_ = 0;
    double magnitude_ratio_ = 0.0;
};

/// Small regression head mapping embeddings to the task output space. Head
/// parameters are never part of encoder Jacobian analyses.
struct TaskHead {
    Tensor weight; // {task_dim, embedding_dim}
    Tensor bias;   // {task_dim}
    bool valid = false;
};

struct ArchitectureSpec {
    std::size_t module_count = 6;
    std::size_t width = 64;
    std::size_t embedding_dim = 64;
    std::size_t input_h = 16;
    std::size_t input_w = 16;
    Activation activation = Activation::Gelu;
    bool layer_norm = true;
};

struct TrainSpec {
    std::size_t sample_count = 384;
    std::size_t probe_count = 32;
    std::size_t batch_size = 16;
    std::size_t max_epochs = 150;
    double learning_rate = 0.05;
    double momentum = 0.9;
    double noise_std = 0.1;
    /// Plateau: training stops once the epoch loss falls below this value.
    double target_loss = 0.9;
    int octaves = 3;
};

struct FoundationSpec {
    ArchitectureSpec arch;
    TrainSpec train;
};

struct FoundationResult {
    SequentialModel model;
    TaskHead head; // the denoising head used by the proxy objective
    bool converged = false;
    double initial_probe_loss = 0.0;
    double final_probe_loss = 0.0;
    std::size_t epochs_run = 0;
};

/// Builds the surrogate foundation encoder: random init, then input-denoising
/// regression (reconstruct the clean synthetic image from a noised input
/// through the encoder plus a linear head) until the loss plateau is reached.
/// Deterministic given the seed. Non-convergence is reported through the
/// result and the model's warning flag, never as an error.
FoundationResult build_foundation(const FoundationSpec& spec, std::uint64_t seed);
FoundationResult build_foundation(const FoundationSpec& spec, std::uint64_t seed,
                                  const Dataset& data);

enum class VictimMode : std::uint8_t { LowRank, FineTune, Both };

struct FineTuneSpec {
    std::size_t head_epochs = 30;
    std::size_t joint_epochs = 30;
    std::size_t batch_size = 16;
    double learning_rate = 0.02; // joint phase lr is learning_rate * strength
    double momentum = 0.9;
    double noise_std = 0.1;
    double holdout_fraction = 0.2;
    std::size_t lowrank_rank = 4;
};

struct VictimResult {
    SequentialModel victim;
    WeightDelta delta; // reconstructs victim from base exactly
    TaskHead head;
    /// Downstream loss on the holdout split with the frozen base encoder vs.
    /// the fine-tuned encoder. Only meaningful in fine-tune modes.
    double base_task_loss = 0.0;
    double victim_task_loss = 0.0;
};

/// Derives a fine-tuned victim encoder from the base. In lowrank mode the
/// delta is sampled at the requested Frobenius ratio; in finetune mode it is
/// the result of short gradient descent on d_tau with a task head; both mode
/// chains them. strength must lie in (0, 1].
VictimResult derive_victim(const SequentialModel& base, VictimMode mode, double strength,
                           std::uint64_t seed, const Dataset* d_tau,
                           const FineTuneSpec& ft = {});

/// Mean of the final feature embeddings over the dataset (the natural-image
/// embedding centroid used by the adaptation loss).
Tensor natural_mean_embedding(const SequentialModel& model, const Dataset& dataset);

} // namespace umigrat
