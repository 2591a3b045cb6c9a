#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "umigrat/analysis.hpp"
#include "umigrat/config.hpp"
#include "umigrat/persist.hpp"
#include "umigrat/umi.hpp"

namespace umigrat {

/// A stage failure: carries the stage name for the CLI diagnostic and the
/// distinct exit code.
class StageError : public Error {
public:
    StageError(std::string stage_name, const std::string& msg)
        : Error("stage '" + stage_name + "': " + msg), stage(std::move(stage_name)) {}
    const std::string stage;
};

/// Config-driven experiment orchestration. Stages run in dependency order;
/// a stage whose cache key matches the previous manifest and whose outputs
/// verify is skipped. Every artifact consumed downstream is the reloaded
/// on-disk copy, so cached and fresh runs see bit-identical inputs.
class Pipeline {
public:
    explicit Pipeline(ExperimentConfig cfg);

    void run(); // all stages

    void stage_data();
    void stage_foundation();
    void stage_victims();
    void stage_umi();
    void stage_experiment();
    void write_manifest();

    /// One-off attack on a single evaluation input; writes the perturbation
    /// artifact and (optionally) its trace CSV. Returns the artifact path.
    std::filesystem::path attack_single(std::size_t input_index, AttackMethod method);

    const ExperimentConfig& config() const { return cfg_; }
    std::filesystem::path reports_dir() const { return out_ / "reports"; }
    std::filesystem::path artifacts_dir() const { return out_ / "artifacts"; }

    struct SeedState {
        std::uint64_t seed = 0;
        std::optional<Dataset> natural;
        std::optional<Dataset> shifted;
        std::optional<SequentialModel> foundation;
        std::vector<SequentialModel> victims;
        std::optional<UmiArtifact> umi;
    };

private:
    struct StageLog {
        std::string key_hex;
        std::string status; // computed | cached
        double wall_ms = 0.0;
        std::vector<std::pair<std::string, std::string>> outputs; // path, fingerprint
    };

    std::uint64_t stage_key(const std::string& name) const;
    bool outputs_match_previous(const std::string& name, std::uint64_t key,
                                const std::vector<std::filesystem::path>& files) const;
    void log_stage(const std::string& name, std::uint64_t key, const std::string& status,
                   double wall_ms, const std::vector<std::filesystem::path>& files);
    static std::string file_fingerprint_hex(const std::filesystem::path& file);

    // dataset slices used by the stages
    Dataset natural_slice(const SeedState& st, std::size_t offset, std::size_t count) const;
    Dataset shifted_slice(const SeedState& st, std::size_t offset, std::size_t count) const;

    Perturbation run_attack_method(AttackMethod method, const SequentialModel& surrogate,
                                   const Tensor& x, const SeedState& st,
                                   const Tensor& y_tilde, std::size_t input_index,
                                   AttackTrace* trace_out = nullptr) const;

    ExperimentConfig cfg_;
    std::filesystem::path out_;
    std::vector<SeedState> seeds_;
    std::map<std::string, StageLog> stages_;                  // this run
    std::map<std::string, StageLog> previous_;                // from manifest.json
    std::map<std::string, double> method_attack_ms_total_;    // efficiency table
    std::map<std::string, std::size_t> method_attack_count_;
};

} // namespace umigrat
