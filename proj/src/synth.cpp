#include "umigrat/synth.hpp"

#include <algorithm>
#include <cmath>

#include "umigrat/rng.hpp"

namespace umigrat {

namespace {

/// Separable box blur, applied in place via a scratch buffer. Radius 0 is a
/// no-op. Edges clamp.
void box_blur(std::vector<double>& img, std::size_t h, std::size_t w, int radius) {
    if (radius <= 0) return;
    std::vector<double> tmp(img.size());
    const auto clampi = [](long v, long lo, long hi) {
        return std::max(lo, std::min(hi, v));
    };
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int d = -radius; d <= radius; ++d) {
                const long xx = clampi(static_cast<long>(x) + d, 0, static_cast<long>(w) - 1);
                acc += img[y * w + static_cast<std::size_t>(xx)];
            }
            tmp[y * w + x] = acc / (2.0 * radius + 1.0);
        }
    }
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int d = -radius; d <= radius; ++d) {
                const long yy = clampi(static_cast<long>(y) + d, 0, static_cast<long>(h) - 1);
                acc += tmp[static_cast<std::size_t>(yy) * w + x];
            }
            img[y * w + x] = acc / (2.0 * radius + 1.0);
        }
    }
}

void min_max_normalize(std::vector<double>& img) {
    const auto [lo_it, hi_it] = std::minmax_element(img.begin(), img.end());
    const double lo = *lo_it, hi = *hi_it;
    const double span = hi - lo;
    if (span <= 0.0) {
        std::fill(img.begin(), img.end(), 0.5);
        return;
    }
    for (double& v : img) v = (v - lo) / span;
}

Tensor generate_natural(std::size_t h, std::size_t w, int octaves, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> field(h * w, 0.0);
    double weight = 1.0;
    int radius = 1;
    for (int o = 0; o < std::max(1, octaves); ++o) {
        std::vector<double> noise(h * w);
        for (double& v : noise) v = rng.uniform(-1.0, 1.0);
        box_blur(noise, h, w, radius);
        for (std::size_t i = 0; i < field.size(); ++i) field[i] += weight * noise[i];
        weight *= 0.5;
        radius *= 2;
    }
    min_max_normalize(field);
    return Tensor({h, w}, std::move(field));
}

} // namespace

std::uint64_t DatasetSpec::fingerprint() const {
    std::uint64_t hsh = fnv1a_u64(static_cast<std::uint64_t>(kind));
    hsh = fnv1a_u64(count, hsh);
    hsh = fnv1a_u64(height, hsh);
    hsh = fnv1a_u64(width, hsh);
    hsh = fnv1a_u64(static_cast<std::uint64_t>(octaves), hsh);
    hsh = fnv1a(&shift.gamma, sizeof(double), hsh);
    hsh = fnv1a(&shift.channel_mix, sizeof(double), hsh);
    hsh = fnv1a_u64(static_cast<std::uint64_t>(shift.band_low), hsh);
    hsh = fnv1a_u64(static_cast<std::uint64_t>(shift.band_high), hsh);
    return fnv1a_u64(seed, hsh);
}

std::uint64_t Dataset::fingerprint() const {
    std::uint64_t h = fnv1a_u64(items.size());
    for (const Tensor& t : items) h = umigrat::fingerprint(t, h);
    return h;
}

Dataset sample_natural(const DatasetSpec& spec) {
    require(spec.kind == DatasetKind::Natural, "sample_natural: spec kind must be natural");
    require(spec.count > 0, "sample_natural: zero count rejected");
    Dataset out;
    out.spec = spec;
    out.items.reserve(spec.count);
    for (std::size_t i = 0; i < spec.count; ++i) {
        out.items.push_back(generate_natural(spec.height, spec.width, spec.octaves,
                                             derive_seed(spec.seed, "natural", i)));
    }
    return out;
}

Tensor apply_shift(const Tensor& image, const ShiftParams& params) {
    require(params.channel_mix > 0.0, "apply_shift: channel_mix must be positive");
    require(params.gamma > 0.0, "apply_shift: gamma must be positive");
    require(params.band_low >= 0 && params.band_high >= 0 &&
                (params.band_high == 0 || params.band_high >= params.band_low),
            "apply_shift: invalid band-pass radii");
    if (params.is_identity()) return image;

    const std::size_t h = image.shape()[0], w = image.shape()[1];
    std::vector<double> img(image.values());
    for (double& v : img) v = std::pow(params.channel_mix * v, params.gamma);
    if (params.band_high > 0) {
        std::vector<double> low = img;
        std::vector<double> high = img;
        box_blur(low, h, w, params.band_low);
        box_blur(high, h, w, params.band_high);
        for (std::size_t i = 0; i < img.size(); ++i) img[i] = low[i] - high[i];
    }
    const auto [lo, hi] = std::minmax_element(img.begin(), img.end());
    if (*lo < 0.0 || *hi > 1.0) min_max_normalize(img);
    return Tensor(image.shape(), std::move(img));
}

Dataset sample_shifted(const DatasetSpec& spec, const DatasetSpec& base_spec) {
    require(spec.kind == DatasetKind::Shifted, "sample_shifted: spec kind must be shifted");
    require(spec.count > 0, "sample_shifted: zero count rejected");
    DatasetSpec natural = base_spec;
    natural.kind = DatasetKind::Natural;
    natural.count = spec.count;
    natural.height = spec.height;
    natural.width = spec.width;
    natural.seed = spec.seed;
    Dataset base = sample_natural(natural);

    Dataset out;
    out.spec = spec;
    out.degenerate_shift = spec.shift.is_identity();
    out.items.reserve(spec.count);
    for (const Tensor& img : base.items) out.items.push_back(apply_shift(img, spec.shift));
    return out;
}

} // namespace umigrat
