#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "umigrat/attack.hpp"
#include "umigrat/model.hpp"

namespace umigrat {

enum class AttackMethod : std::uint8_t { IFgsm, MiFgsm, UmiGrat, UmiMiFgsm };

std::string to_string(AttackMethod m);
AttackMethod attack_method_from_string(const std::string& s);

struct VictimSpec {
    VictimMode mode = VictimMode::LowRank;
    double strength = 0.1;
    std::string label() const;
};

/// The full experiment description. Parsed from a flat sections-of-key=value
/// text file with strict validation: unknown sections or keys are rejected
/// before any work happens.
struct ExperimentConfig {
    // [run]
    std::uint64_t seed = 1;
    std::string output_dir = "runs/out";

    // [data]
    std::size_t natural_count = 512;
    std::size_t shifted_count = 384;
    std::size_t image_height = 16;
    std::size_t image_width = 16;
    int octaves = 3;
    ShiftParams shift;

    // [foundation]
    ArchitectureSpec arch;
    TrainSpec train;

    // [victims]
    std::vector<VictimSpec> victims;
    FineTuneSpec finetune;
    std::size_t finetune_samples = 320;

    // [umi]
    bool umi_enabled = true;
    std::size_t umi_rounds = 7;
    double umi_eta = 1.0;
    std::size_t umi_inner_steps = 5;
    std::size_t umi_corpus = 256;
    std::size_t umi_eval_count = 64;
    double umi_holdout_fraction = 0.2;
    double umi_lambda = -1.0; // < 0: calibrate
    double umi_lambda_factor = 0.25;
    double umi_init_noise_scale = 0.1;

    // [attack]
    AttackMethod method = AttackMethod::UmiGrat;
    double eps255 = 10.0;
    double alpha255 = 2.0;
    std::size_t attack_iterations = 10;
    int loss_norm = 2;
    double momentum_decay = 1.0;
    double sigma = 0.5;
    double adapt_step255 = 4.0;
    AdaptDirection adapt_direction = AdaptDirection::AlgorithmLiteral;
    std::size_t eval_inputs = 100;
    bool baseline_random_init = true;
    bool export_traces = false;

    // [analysis]
    std::vector<std::string> reports = {"transfer", "cosine", "deviation", "umi"};
    std::size_t ensemble_seeds = 5;
    std::size_t cosine_inputs = 24;
    std::size_t deviation_inputs = 8;

    AttackBudget budget() const {
        return AttackBudget::from_255_units(eps255, alpha255, attack_iterations, loss_norm,
                                            momentum_decay);
    }
    double adapt_step() const { return from_255(adapt_step255); }

    /// Every field in a fixed order; fingerprints and cache keys hash this.
    std::string canonical_string() const;
    std::uint64_t fingerprint() const;

    /// Propagates cross-section values (the image geometry feeds the
    /// architecture); called after parsing and after flag overrides.
    void finalize();
    void validate() const;
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::filesystem::path& path);

/// Applies a single "section.key=value" override (CLI flags win over the
/// file; the caller logs the override).
void apply_override(ExperimentConfig& cfg, const std::string& section,
                    const std::string& key, const std::string& value);

} // namespace umigrat
