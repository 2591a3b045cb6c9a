#pragma once

#include <cstdint>
#include <vector>

#include "umigrat/tensor.hpp"

namespace umigrat {

enum class DatasetKind : std::uint8_t { Natural, Shifted };

/// Parameters of the domain-shift transform applied to natural samples:
/// scalar channel gain, gamma intensity remap, and a band-pass filter that
/// suppresses flat low-frequency content (a crude modality shift, CT-like
/// contrast). Identity parameters leave samples untouched.
struct ShiftParams {
    double gamma = 2.2;
    double channel_mix = 0.85;
    int band_low = 1;  // blur radius kept by the pass band; 0 disables
    int band_high = 4; // blur radius removed by the pass band; 0 disables

    bool is_identity() const {
        return gamma == 1.0 && channel_mix == 1.0 && band_low == 0 && band_high == 0;
    }
};

struct DatasetSpec {
    DatasetKind kind = DatasetKind::Natural;
    std::size_t count = 0;
    std::size_t height = 16;
    std::size_t width = 16;
    int octaves = 3;
    ShiftParams shift; // only read when kind == Shifted
    std::uint64_t seed = 0;

    std::uint64_t fingerprint() const;
};

/// A generated image set. Regeneration from an identical spec is
/// bit-identical; all pixels lie in [0, 1].
struct Dataset {
    DatasetSpec spec;
    std::vector<Tensor> items;
    bool degenerate_shift = false; // identity shift parameters were used

    std::size_t size() const { return items.size(); }
    /// Content hash over every pixel; changes iff any pixel changes.
    std::uint64_t fingerprint() const;
};

/// Procedural textures: superposed smoothed random fields, min-max
/// normalized into [0, 1]. Items are generated from per-index derived seeds,
/// so output order is fixed and generation parallelizes trivially.
Dataset sample_natural(const DatasetSpec& spec);

/// Natural samples from base_spec's generation parameters (count and seed
/// taken from spec), passed through spec's shift transform and re-normalized
/// to [0, 1] when the filter pushes values outside the canonical range.
Dataset sample_shifted(const DatasetSpec& spec, const DatasetSpec& base_spec);

/// The shift transform as a pure function of (image, parameters).
Tensor apply_shift(const Tensor& image, const ShiftParams& params);

} // namespace umigrat
