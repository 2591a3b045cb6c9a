#include "umigrat/graph.hpp"

#include <cmath>
#include <string>

namespace umigrat {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

std::string node_msg(std::size_t idx, const char* what) {
    return "node " + std::to_string(idx) + ": " + what;
}

struct LayerNormScratch {
    double mu = 0.0;
    double s = 0.0; // sqrt(var + eps)
};

LayerNormScratch layer_norm_stats(const Tensor& x, double eps) {
    const std::size_t n = x.numel();
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += x[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = x[i] - mu;
        var += d * d;
    }
    var /= static_cast<double>(n);
    return {mu, std::sqrt(var + eps)};
}

} // namespace

// ---------------------------------------------------------------------------
// RecordBuilder

const std::vector<std::size_t>& RecordBuilder::shape_of(ValueId v) const {
    return rec_.value_shapes[v];
}

void RecordBuilder::check_ref(ValueId v, const char* what) const {
    require(v < rec_.value_shapes.size(),
            node_msg(rec_.nodes.size(), what) + ": operand not yet defined");
}

ValueId RecordBuilder::input(std::vector<std::size_t> shape) {
    require(rec_.constants.empty() && rec_.nodes.empty(),
            "RecordBuilder: inputs must be declared first");
    Tensor probe(shape); // validates extents
    rec_.value_refs.push_back({ComputationRecord::ValueKind::Input,
                               static_cast<std::uint32_t>(rec_.input_shapes.size())});
    rec_.input_shapes.push_back(shape);
    rec_.value_shapes.push_back(std::move(shape));
    return static_cast<ValueId>(rec_.value_shapes.size() - 1);
}

ValueId RecordBuilder::constant(Tensor value) {
    value.require_finite("record constant");
    rec_.value_refs.push_back({ComputationRecord::ValueKind::Constant,
                               static_cast<std::uint32_t>(rec_.constants.size())});
    rec_.value_shapes.push_back(value.shape());
    rec_.constants.push_back(std::move(value));
    return static_cast<ValueId>(rec_.value_shapes.size() - 1);
}

ValueId RecordBuilder::push_node(Node n, std::vector<std::size_t> out_shape) {
    rec_.value_refs.push_back({ComputationRecord::ValueKind::NodeOut,
                               static_cast<std::uint32_t>(rec_.nodes.size())});
    rec_.nodes.push_back(n);
    rec_.value_shapes.push_back(std::move(out_shape));
    const ValueId id = static_cast<ValueId>(rec_.value_shapes.size() - 1);
    rec_.node_outputs.push_back(id);
    return id;
}

ValueId RecordBuilder::affine(ValueId x, ValueId weight, ValueId bias) {
    check_ref(x, "affine x");
    check_ref(weight, "affine weight");
    check_ref(bias, "affine bias");
    const auto& xs = shape_of(x);
    const auto& ws = shape_of(weight);
    const auto& bs = shape_of(bias);
    require(ws.size() == 2, node_msg(rec_.nodes.size(), "affine weight must be rank 2"));
    require(xs.size() == 1 && xs[0] == ws[1],
            node_msg(rec_.nodes.size(), "affine input width mismatch"));
    require(bs.size() == 1 && bs[0] == ws[0],
            node_msg(rec_.nodes.size(), "affine bias width mismatch"));
    return push_node({OpKind::Affine, x, weight, bias, 1.0, 0.0, 2}, {ws[0]});
}

ValueId RecordBuilder::tanh(ValueId x) {
    check_ref(x, "tanh x");
    return push_node({OpKind::Tanh, x, kNoValue, kNoValue, 1.0, 0.0, 2}, shape_of(x));
}

ValueId RecordBuilder::gelu(ValueId x) {
    check_ref(x, "gelu x");
    return push_node({OpKind::Gelu, x, kNoValue, kNoValue, 1.0, 0.0, 2}, shape_of(x));
}

ValueId RecordBuilder::layer_norm(ValueId x, ValueId gain, ValueId bias, double eps) {
    check_ref(x, "layer_norm x");
    check_ref(gain, "layer_norm gain");
    check_ref(bias, "layer_norm bias");
    require(eps > 0.0, node_msg(rec_.nodes.size(), "layer_norm eps must be positive"));
    const auto& xs = shape_of(x);
    require(shape_of(gain) == xs && shape_of(bias) == xs,
            node_msg(rec_.nodes.size(), "layer_norm parameter shape mismatch"));
    return push_node({OpKind::LayerNorm, x, gain, bias, 1.0, eps, 2}, xs);
}

ValueId RecordBuilder::mean(ValueId x) {
    check_ref(x, "mean x");
    return push_node({OpKind::Mean, x, kNoValue, kNoValue, 1.0, 0.0, 2}, {1});
}

ValueId RecordBuilder::lp_norm(ValueId x, int p) {
    check_ref(x, "lp_norm x");
    require(p == 1 || p == 2, node_msg(rec_.nodes.size(), "lp_norm p must be 1 or 2"));
    return push_node({OpKind::LpNorm, x, kNoValue, kNoValue, 1.0, 0.0, p}, {1});
}

ValueId RecordBuilder::add(ValueId a, ValueId b) {
    check_ref(a, "add a");
    check_ref(b, "add b");
    require(shape_of(a) == shape_of(b),
            node_msg(rec_.nodes.size(), "add operand shape mismatch"));
    return push_node({OpKind::Add, a, b, kNoValue, 1.0, 0.0, 2}, shape_of(a));
}

ValueId RecordBuilder::scale(ValueId x, double factor) {
    check_ref(x, "scale x");
    require(std::isfinite(factor), node_msg(rec_.nodes.size(), "scale factor not finite"));
    return push_node({OpKind::Scale, x, kNoValue, kNoValue, factor, 0.0, 2}, shape_of(x));
}

void RecordBuilder::set_output(ValueId v) {
    check_ref(v, "output");
    rec_.output = v;
}

ComputationRecord RecordBuilder::build() {
    require(!built_, "RecordBuilder: build() called twice");
    require(rec_.output != kNoValue, "RecordBuilder: no output set");
    built_ = true;
    return std::move(rec_);
}

// ---------------------------------------------------------------------------
// Forward

namespace {

void eval_node(const Node& n, std::size_t idx, std::vector<Tensor>& v,
               const std::vector<std::vector<std::size_t>>& shapes,
               std::size_t out_id) {
    Tensor out(shapes[out_id]);
    switch (n.kind) {
        case OpKind::Affine: {
            const Tensor& x = v[n.a];
            const Tensor& w = v[n.b_op];
            const Tensor& b = v[n.c_op];
            const std::size_t rows = w.shape()[0], cols = w.shape()[1];
            for (std::size_t r = 0; r < rows; ++r) {
                double acc = b[r];
                const double* wr = w.data() + r * cols;
                for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * x[c];
                out[r] = acc;
            }
            break;
        }
        case OpKind::Tanh: {
            const Tensor& x = v[n.a];
            for (std::size_t i = 0; i < x.numel(); ++i) out[i] = std::tanh(x[i]);
            break;
        }
        case OpKind::Gelu: {
            const Tensor& x = v[n.a];
            for (std::size_t i = 0; i < x.numel(); ++i)
                out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * kInvSqrt2));
            break;
        }
        case OpKind::LayerNorm: {
            const Tensor& x = v[n.a];
            const Tensor& g = v[n.b_op];
            const Tensor& b = v[n.c_op];
            const auto st = layer_norm_stats(x, n.eps);
            for (std::size_t i = 0; i < x.numel(); ++i)
                out[i] = g[i] * ((x[i] - st.mu) / st.s) + b[i];
            break;
        }
        case OpKind::Mean: {
            const Tensor& x = v[n.a];
            double s = 0.0;
            for (std::size_t i = 0; i < x.numel(); ++i) s += x[i];
            out[0] = s / static_cast<double>(x.numel());
            break;
        }
        case OpKind::LpNorm: {
            out[0] = v[n.a].lp_norm(n.p);
            break;
        }
        case OpKind::Add: {
            const Tensor& a = v[n.a];
            const Tensor& b = v[n.b_op];
            for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
            break;
        }
        case OpKind::Scale: {
            const Tensor& x = v[n.a];
            for (std::size_t i = 0; i < x.numel(); ++i) out[i] = n.factor * x[i];
            break;
        }
    }
    if (!out.all_finite()) fail(node_msg(idx, "produced non-finite values"));
    v[out_id] = std::move(out);
}

std::vector<Tensor> run_forward(const ComputationRecord& rec,
                                std::span<const Tensor> inputs) {
    require(inputs.size() == rec.input_count(),
            "forward: expected " + std::to_string(rec.input_count()) +
                " inputs, got " + std::to_string(inputs.size()));
    std::vector<Tensor> values(rec.value_count());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        require(inputs[i].shape() == rec.input_shapes[i],
                "forward: input " + std::to_string(i) + " shape mismatch, expected " +
                    Tensor(rec.input_shapes[i]).shape_str() + " got " +
                    inputs[i].shape_str());
        inputs[i].require_finite("forward input");
        values[i] = inputs[i];
    }
    for (ValueId id = 0; id < rec.value_count(); ++id) {
        const auto& ref = rec.value_refs[id];
        if (ref.kind == ComputationRecord::ValueKind::Constant)
            values[id] = rec.constants[ref.index];
    }
    for (std::size_t i = 0; i < rec.nodes.size(); ++i)
        eval_node(rec.nodes[i], i, values, rec.value_shapes, rec.node_outputs[i]);
    return values;
}

} // namespace

Tensor forward(const ComputationRecord& rec, std::span<const Tensor> inputs) {
    return run_forward(rec, inputs)[rec.output];
}

std::vector<Tensor> forward_values(const ComputationRecord& rec,
                                   std::span<const Tensor> inputs) {
    return run_forward(rec, inputs);
}

// ---------------------------------------------------------------------------
// Reverse mode

namespace {

void backward_node(const Node& n, const std::vector<Tensor>& v,
                   std::vector<Tensor>& adj, std::size_t out_id) {
    const Tensor& gy = adj[out_id];
    if (gy.empty()) return; // no adjoint reached this node
    switch (n.kind) {
        case OpKind::Affine: {
            const Tensor& x = v[n.a];
            const Tensor& w = v[n.b_op];
            const std::size_t rows = w.shape()[0], cols = w.shape()[1];
            Tensor& gx = adj[n.a];
            Tensor& gw = adj[n.b_op];
            Tensor& gb = adj[n.c_op];
            if (gx.empty()) gx = Tensor(v[n.a].shape());
            if (gw.empty()) gw = Tensor(w.shape());
            if (gb.empty()) gb = Tensor(v[n.c_op].shape());
            for (std::size_t r = 0; r < rows; ++r) {
                const double gr = gy[r];
                const double* wr = w.data() + r * cols;
                double* gwr = gw.data() + r * cols;
                for (std::size_t c = 0; c < cols; ++c) {
                    gx[c] += wr[c] * gr;
                    gwr[c] += gr * x[c];
                }
                gb[r] += gr;
            }
            break;
        }
        case OpKind::Tanh: {
            const Tensor& x = v[n.a];
            Tensor& gx = adj[n.a];
            if (gx.empty()) gx = Tensor(x.shape());
            for (std::size_t i = 0; i < x.numel(); ++i) {
                const double t = std::tanh(x[i]);
                gx[i] += (1.0 - t * t) * gy[i];
            }
            break;
        }
        case OpKind::Gelu: {
            const Tensor& x = v[n.a];
            Tensor& gx = adj[n.a];
            if (gx.empty()) gx = Tensor(x.shape());
            for (std::size_t i = 0; i < x.numel(); ++i) {
                const double cdf = 0.5 * (1.0 + std::erf(x[i] * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x[i] * x[i]);
                gx[i] += (cdf + x[i] * pdf) * gy[i];
            }
            break;
        }
        case OpKind::LayerNorm: {
            const Tensor& x = v[n.a];
            const Tensor& g = v[n.b_op];
            const auto st = layer_norm_stats(x, n.eps);
            const std::size_t m = x.numel();
            Tensor& gx = adj[n.a];
            Tensor& gg = adj[n.b_op];
            Tensor& gb = adj[n.c_op];
            if (gx.empty()) gx = Tensor(x.shape());
            if (gg.empty()) gg = Tensor(g.shape());
            if (gb.empty()) gb = Tensor(v[n.c_op].shape());
            double mean_h = 0.0, mean_hx = 0.0;
            std::vector<double> xhat(m), h(m);
            for (std::size_t i = 0; i < m; ++i) {
                xhat[i] = (x[i] - st.mu) / st.s;
                h[i] = g[i] * gy[i];
                mean_h += h[i];
                mean_hx += h[i] * xhat[i];
            }
            mean_h /= static_cast<double>(m);
            mean_hx /= static_cast<double>(m);
            for (std::size_t i = 0; i < m; ++i) {
                gx[i] += (h[i] - mean_h - xhat[i] * mean_hx) / st.s;
                gg[i] += gy[i] * xhat[i];
                gb[i] += gy[i];
            }
            break;
        }
        case OpKind::Mean: {
            const Tensor& x = v[n.a];
            Tensor& gx = adj[n.a];
            if (gx.empty()) gx = Tensor(x.shape());
            const double gscaled = gy[0] / static_cast<double>(x.numel());
            for (std::size_t i = 0; i < x.numel(); ++i) gx[i] += gscaled;
            break;
        }
        case OpKind::LpNorm: {
            const Tensor& x = v[n.a];
            Tensor& gx = adj[n.a];
            if (gx.empty()) gx = Tensor(x.shape());
            if (n.p == 1) {
                for (std::size_t i = 0; i < x.numel(); ++i)
                    gx[i] += sign(x[i]) * gy[0];
            } else {
                const double norm = x.l2_norm();
                // subgradient 0 at the origin, matching sign(0) = 0
                if (norm > 0.0) {
                    for (std::size_t i = 0; i < x.numel(); ++i)
                        gx[i] += (x[i] / norm) * gy[0];
                }
            }
            break;
        }
        case OpKind::Add: {
            Tensor& ga = adj[n.a];
            Tensor& gb = adj[n.b_op];
            if (ga.empty()) ga = Tensor(v[n.a].shape());
            if (gb.empty()) gb = Tensor(v[n.b_op].shape());
            for (std::size_t i = 0; i < gy.numel(); ++i) {
                ga[i] += gy[i];
                gb[i] += gy[i];
            }
            break;
        }
        case OpKind::Scale: {
            Tensor& gx = adj[n.a];
            if (gx.empty()) gx = Tensor(v[n.a].shape());
            for (std::size_t i = 0; i < gy.numel(); ++i) gx[i] += n.factor * gy[i];
            break;
        }
    }
}

std::vector<Tensor> run_backward(const ComputationRecord& rec,
                                 std::span<const Tensor> inputs) {
    require(rec.output_shape() == std::vector<std::size_t>{1},
            "gradient: record output is not scalar");
    const std::vector<Tensor> values = run_forward(rec, inputs);
    std::vector<Tensor> adj(rec.value_count());
    adj[rec.output] = Tensor::scalar(1.0);
    for (std::size_t i = rec.nodes.size(); i-- > 0;)
        backward_node(rec.nodes[i], values, adj, rec.node_outputs[i]);
    std::vector<Tensor> grads(rec.input_count());
    for (std::size_t i = 0; i < grads.size(); ++i) {
        grads[i] = adj[i].empty() ? Tensor(rec.input_shapes[i]) : std::move(adj[i]);
        grads[i].require_finite("gradient");
    }
    return grads;
}

} // namespace

Tensor gradient(const ComputationRecord& rec, std::span<const Tensor> inputs,
                std::size_t wrt_input) {
    require(wrt_input < rec.input_count(), "gradient: input index out of range");
    return run_backward(rec, inputs)[wrt_input];
}

std::vector<Tensor> gradient_all(const ComputationRecord& rec,
                                 std::span<const Tensor> inputs) {
    return run_backward(rec, inputs);
}

// ---------------------------------------------------------------------------
// Dense Jacobian via exact tangent propagation

namespace {

void jvp_node(const Node& n, const std::vector<Tensor>& v,
              std::vector<Tensor>& tan, std::size_t out_id) {
    Tensor out(v[out_id].shape());
    auto tangent_of = [&](ValueId id) -> const Tensor& {
        if (tan[id].empty()) tan[id] = Tensor(v[id].shape());
        return tan[id];
    };
    switch (n.kind) {
        case OpKind::Affine: {
            const Tensor& x = v[n.a];
            const Tensor& w = v[n.b_op];
            const Tensor& dx = tangent_of(n.a);
            const Tensor& dw = tangent_of(n.b_op);
            const Tensor& db = tangent_of(n.c_op);
            const std::size_t rows = w.shape()[0], cols = w.shape()[1];
            for (std::size_t r = 0; r < rows; ++r) {
                double acc = db[r];
                const double* wr = w.data() + r * cols;
                const double* dwr = dw.data() + r * cols;
                for (std::size_t c = 0; c < cols; ++c)
                    acc += wr[c] * dx[c] + dwr[c] * x[c];
                out[r] = acc;
            }
            break;
        }
        case OpKind::Tanh: {
            const Tensor& x = v[n.a];
            const Tensor& dx = tangent_of(n.a);
            for (std::size_t i = 0; i < x.numel(); ++i) {
                const double t = std::tanh(x[i]);
                out[i] = (1.0 - t * t) * dx[i];
            }
            break;
        }
        case OpKind::Gelu: {
            const Tensor& x = v[n.a];
            const Tensor& dx = tangent_of(n.a);
            for (std::size_t i = 0; i < x.numel(); ++i) {
                const double cdf = 0.5 * (1.0 + std::erf(x[i] * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x[i] * x[i]);
                out[i] = (cdf + x[i] * pdf) * dx[i];
            }
            break;
        }
        case OpKind::LayerNorm: {
            const Tensor& x = v[n.a];
            const Tensor& g = v[n.b_op];
            const Tensor& dx = tangent_of(n.a);
            const Tensor& dg = tangent_of(n.b_op);
            const Tensor& db = tangent_of(n.c_op);
            const auto st = layer_norm_stats(x, n.eps);
            const std::size_t m = x.numel();
            double dmu = 0.0;
            for (std::size_t i = 0; i < m; ++i) dmu += dx[i];
            dmu /= static_cast<double>(m);
            double ds = 0.0;
            for (std::size_t i = 0; i < m; ++i)
                ds += (x[i] - st.mu) * (dx[i] - dmu);
            ds /= (static_cast<double>(m) * st.s);
            for (std::size_t i = 0; i < m; ++i) {
                const double xhat = (x[i] - st.mu) / st.s;
                const double dxhat = (dx[i] - dmu) / st.s - xhat * ds / st.s;
                out[i] = g[i] * dxhat + dg[i] * xhat + db[i];
            }
            break;
        }
        case OpKind::Mean: {
            const Tensor& dx = tangent_of(n.a);
            double s = 0.0;
            for (std::size_t i = 0; i < dx.numel(); ++i) s += dx[i];
            out[0] = s / static_cast<double>(dx.numel());
            break;
        }
        case OpKind::LpNorm: {
            const Tensor& x = v[n.a];
            const Tensor& dx = tangent_of(n.a);
            double s = 0.0;
            if (n.p == 1) {
                for (std::size_t i = 0; i < x.numel(); ++i) s += sign(x[i]) * dx[i];
            } else {
                const double norm = x.l2_norm();
                if (norm > 0.0)
                    for (std::size_t i = 0; i < x.numel(); ++i)
                        s += (x[i] / norm) * dx[i];
            }
            out[0] = s;
            break;
        }
        case OpKind::Add: {
            const Tensor& da = tangent_of(n.a);
            const Tensor& db = tangent_of(n.b_op);
            for (std::size_t i = 0; i < out.numel(); ++i) out[i] = da[i] + db[i];
            break;
        }
        case OpKind::Scale: {
            const Tensor& dx = tangent_of(n.a);
            for (std::size_t i = 0; i < out.numel(); ++i) out[i] = n.factor * dx[i];
            break;
        }
    }
    tan[out_id] = std::move(out);
}

} // namespace

Tensor jacobian(const ComputationRecord& rec, std::span<const Tensor> inputs,
                std::size_t wrt_input, std::size_t dense_limit) {
    require(wrt_input < rec.input_count(), "jacobian: input index out of range");
    const std::vector<Tensor> values = run_forward(rec, inputs);
    const std::size_t out_n = values[rec.output].numel();
    const std::size_t in_n = inputs[wrt_input].numel();
    require(out_n <= dense_limit && in_n <= dense_limit,
            "jacobian: dimensions " + std::to_string(out_n) + "x" +
                std::to_string(in_n) + " exceed dense limit " +
                std::to_string(dense_limit));
    Tensor jac({out_n, in_n});
    std::vector<Tensor> tan(rec.value_count());
    for (std::size_t j = 0; j < in_n; ++j) {
        for (auto& t : tan) t = Tensor();
        Tensor seed(inputs[wrt_input].shape());
        seed[j] = 1.0;
        tan[wrt_input] = std::move(seed);
        for (std::size_t i = 0; i < rec.nodes.size(); ++i)
            jvp_node(rec.nodes[i], values, tan, rec.node_outputs[i]);
        const Tensor& col = tan[rec.output];
        for (std::size_t r = 0; r < out_n; ++r) jac[r * in_n + j] = col[r];
    }
    jac.require_finite("jacobian");
    return jac;
}

} // namespace umigrat
