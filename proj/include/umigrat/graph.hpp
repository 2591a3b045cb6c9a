#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "umigrat/tensor.hpp"

namespace umigrat {

using ValueId = std::uint32_t;
inline constexpr ValueId kNoValue = 0xffffffffu;

/// Per-module dense Jacobians are refused above this many entries per
/// dimension; keeps the deviation analysis exact and tractable.
inline constexpr std::size_t kDefaultJacobianLimit = 4096;

/// The fixed primitive set. Dense affine maps plus a handful of pointwise
/// and reduction ops are enough to express every encoder stack and loss in
/// the lab; convolutions stay out so Jacobians remain dense.
enum class OpKind : std::uint8_t {
    Affine,     // y = W x + b          (x: a, W: b_op, b: c_op)
    Tanh,       // pointwise
    Gelu,       // exact erf form, pointwise
    LayerNorm,  // whole-vector norm    (x: a, gain: b_op, bias: c_op)
    Mean,       // scalar mean over all entries
    LpNorm,     // ||x||_p, p in {1,2}
    Add,        // elementwise a + b
    Scale,      // factor * a
};

struct Node {
    OpKind kind;
    ValueId a = kNoValue;   // primary operand
    ValueId b_op = kNoValue; // second operand / weight / gain
    ValueId c_op = kNoValue; // bias
    double factor = 1.0;    // Scale
    double eps = 0.0;       // LayerNorm
    int p = 2;              // LpNorm
};

/// A replayable straight-line program over the primitive ops. Values are
/// declared inputs first, then embedded constants and node outputs in
/// declaration order; every node only references earlier values, so
/// replaying the node list reproduces the forward value bit-exactly.
struct ComputationRecord {
    enum class ValueKind : std::uint8_t { Input, Constant, NodeOut };
    struct ValueRef {
        ValueKind kind;
        std::uint32_t index; // into input_shapes / constants / nodes
    };

    std::vector<std::vector<std::size_t>> input_shapes;
    std::vector<Tensor> constants;
    std::vector<Node> nodes;
    std::vector<ValueId> node_outputs;                  // value id of each node
    std::vector<ValueRef> value_refs;                   // per value id
    std::vector<std::vector<std::size_t>> value_shapes; // shape of every value
    ValueId output = kNoValue;

    std::size_t input_count() const { return input_shapes.size(); }
    std::size_t value_count() const { return value_refs.size(); }
    bool is_input(ValueId v) const {
        return value_refs[v].kind == ValueKind::Input;
    }
    const std::vector<std::size_t>& output_shape() const {
        return value_shapes[output];
    }
};

/// Builds a ComputationRecord with per-node shape validation. Errors carry
/// the index of the offending node.
class RecordBuilder {
public:
    ValueId input(std::vector<std::size_t> shape);
    ValueId constant(Tensor value);

    ValueId affine(ValueId x, ValueId weight, ValueId bias);
    ValueId tanh(ValueId x);
    ValueId gelu(ValueId x);
    ValueId layer_norm(ValueId x, ValueId gain, ValueId bias, double eps = 1e-5);
    ValueId mean(ValueId x);
    ValueId lp_norm(ValueId x, int p);
    ValueId add(ValueId a, ValueId b);
    ValueId scale(ValueId x, double factor);

    /// a - b, composed from the primitive set (add + scale by -1).
    ValueId sub(ValueId a, ValueId b) { return add(a, scale(b, -1.0)); }

    void set_output(ValueId v);
    ComputationRecord build();

private:
    ValueId push_node(Node n, std::vector<std::size_t> out_shape);
    const std::vector<std::size_t>& shape_of(ValueId v) const;
    void check_ref(ValueId v, const char* what) const;

    ComputationRecord rec_;
    bool built_ = false;
};

/// Evaluates the record. Inputs must match the declared shapes; the result
/// is deterministic for fixed inputs and is checked finite.
Tensor forward(const ComputationRecord& rec, std::span<const Tensor> inputs);

/// Evaluates the record and returns every value (inputs, constants, node
/// outputs) so callers can read intermediate module outputs.
std::vector<Tensor> forward_values(const ComputationRecord& rec,
                                   std::span<const Tensor> inputs);

/// Reverse-mode gradient of the (scalar) output with respect to one input.
Tensor gradient(const ComputationRecord& rec, std::span<const Tensor> inputs,
                std::size_t wrt_input);

/// Gradients with respect to every input in a single reverse sweep.
std::vector<Tensor> gradient_all(const ComputationRecord& rec,
                                 std::span<const Tensor> inputs);

/// Dense Jacobian d(output)/d(input[wrt_input]) of shape
/// {output numel, input numel}; column j is the directional derivative along
/// basis vector e_j, propagated exactly (no finite differences).
Tensor jacobian(const ComputationRecord& rec, std::span<const Tensor> inputs,
                std::size_t wrt_input,
                std::size_t dense_limit = kDefaultJacobianLimit);

} // namespace umigrat
