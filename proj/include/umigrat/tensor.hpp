#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "umigrat/common.hpp"

namespace umigrat {

/// Dense row-major tensor of 64-bit reals. The single numeric carrier of the
/// project: images, perturbations, weights, gradients, embeddings.
///
/// Invariants: data().size() == product of shape extents; every public
/// operation that produces a Tensor leaves all entries finite.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        require(data_.size() == checked_numel(shape_),
                "Tensor: data length does not match shape");
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    /// Same data viewed under a different shape; extent product must match.
    Tensor reshaped(std::vector<std::size_t> shape) const {
        Tensor out(*this);
        require(checked_numel(shape) == numel(), "Tensor::reshaped: extent mismatch");
        out.shape_ = std::move(shape);
        return out;
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void require_finite(const char* what) const {
        if (!all_finite()) fail(std::string("non-finite values in ") + what);
    }

    double linf_norm() const {
        double m = 0.0;
        for (double v : data_) m = std::max(m, std::abs(v));
        return m;
    }

    double l1_norm() const {
        double s = 0.0;
        for (double v : data_) s += std::abs(v);
        return s;
    }

    double l2_norm() const {
        double s = 0.0;
        for (double v : data_) s += v * v;
        return std::sqrt(s);
    }

    double lp_norm(int p) const {
        require(p == 1 || p == 2, "lp_norm: p must be 1 or 2");
        return p == 1 ? l1_norm() : l2_norm();
    }

    double frobenius_norm() const { return l2_norm(); }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + "]";
    }

private:
    static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t e : shape) {
            require(e > 0, "Tensor: zero extent");
            n *= e;
        }
        return shape.empty() ? 0 : n;
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    require(a.same_shape(b), std::string(what) + ": shape mismatch " +
                                 a.shape_str() + " vs " + b.shape_str());
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c;
    return out;
}

inline double dot(const Tensor& a, const Tensor& b) {
    require(a.numel() == b.numel(), "dot: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
    return s;
}

/// sign with sign(0) = 0; the convention used by every sign-gradient update.
inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

inline Tensor sign(const Tensor& a) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = sign(out[i]);
    return out;
}

inline std::uint64_t fingerprint(const Tensor& t, std::uint64_t h = kFnvOffset) {
    h = fnv1a_u64(t.rank(), h);
    for (std::size_t e : t.shape()) h = fnv1a_u64(e, h);
    return fnv1a(t.data(), t.numel() * sizeof(double), h);
}

} // namespace umigrat
