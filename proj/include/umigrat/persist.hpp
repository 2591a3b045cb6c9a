#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "umigrat/attack.hpp"
#include "umigrat/model.hpp"
#include "umigrat/synth.hpp"
#include "umigrat/umi.hpp"

namespace umigrat {

/// Single-file binary artifacts, little-endian:
///
///   magic "UMGR" | version u32 | kind u32 | creation seed u64 |
///   payload FNV-1a fingerprint u64 | creator version string | payload size
///   u64 | payload bytes
///
/// Payload tensors are 32-bit floats (the documented lossy boundary of the
/// 64-bit working precision); shapes are unsigned 32-bit extents; scalars
/// are stored at full width. Loads verify magic, version, size and
/// fingerprint and reject the file on any mismatch; writes go through a
/// temporary file and a rename so partial outputs never carry a valid
/// fingerprint.
enum class ArtifactKind : std::uint32_t {
    Model = 1,
    Dataset = 2,
    Perturbation = 3,
    UmiArtifact = 4,
};

inline constexpr std::uint32_t kFormatVersion = 1;

struct ArtifactInfo {
    ArtifactKind kind;
    std::uint32_t version = 0;
    std::uint64_t seed = 0;
    std::uint64_t payload_fingerprint = 0;
    std::string creator;
};

void save_model(const std::filesystem::path& path, const SequentialModel& model,
                std::uint64_t seed);
SequentialModel load_model(const std::filesystem::path& path);

void save_dataset(const std::filesystem::path& path, const Dataset& dataset,
                  std::uint64_t seed);
Dataset load_dataset(const std::filesystem::path& path);

/// Perturbation deltas are stored saturating to the stored budget's ball:
/// entries are nudged to the nearest 32-bit value inside it, so a loaded
/// artifact is feasible as-is and save/load round-trips are stable.
void save_perturbation(const std::filesystem::path& path, const Perturbation& p,
                       std::uint64_t seed);
Perturbation load_perturbation(const std::filesystem::path& path);

void save_umi(const std::filesystem::path& path, const UmiArtifact& umi, std::uint64_t seed);
UmiArtifact load_umi(const std::filesystem::path& path);

/// Reads only the header; rejects bad magic or version.
ArtifactInfo peek_artifact(const std::filesystem::path& path);

/// RFC-4180-style CSV with a mandatory header row, UTF-8, LF line ends.
/// Doubles are rendered with enough digits to round-trip exactly.
class CsvWriter {
public:
    explicit CsvWriter(const std::filesystem::path& path);
    void header(std::span<const std::string> names);
    void row(std::span<const std::string> fields);
    void close(); // atomic rename happens here (also from the destructor)
    ~CsvWriter();

    CsvWriter(const CsvWriter&) = delete;
    CsvWriter& operator=(const CsvWriter&) = delete;

    static std::string field(double v);

private:
    std::filesystem::path final_path_;
    std::filesystem::path tmp_path_;
    std::string buffer_;
    bool header_written_ = false;
    bool closed_ = false;
    std::size_t column_count_ = 0;
};

} // namespace umigrat
