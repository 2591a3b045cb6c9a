#include "umigrat/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "umigrat/rng.hpp"

namespace umigrat {

namespace {

bool same_bits(double a, double b) {
    return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

/// Appends one module's stages to a builder. Weight value ids may reference
/// constants (frozen models) or inputs (training).
ValueId append_module(RecordBuilder& b, ValueId x, ValueId w, ValueId bias,
                      ValueId gain, ValueId ln_bias, const Module& m) {
    ValueId v = b.affine(x, w, bias);
    if (m.layer_norm) v = b.layer_norm(v, gain, ln_bias, m.ln_eps);
    switch (m.activation) {
        case Activation::None: break;
        case Activation::Tanh: v = b.tanh(v); break;
        case Activation::Gelu: v = b.gelu(v); break;
    }
    return v;
}

ValueId append_module_const(RecordBuilder& b, ValueId x, const Module& m) {
    const ValueId w = b.constant(m.weight);
    const ValueId bias = b.constant(m.bias);
    ValueId gain = kNoValue, lnb = kNoValue;
    if (m.layer_norm) {
        gain = b.constant(m.ln_gain);
        lnb = b.constant(m.ln_bias);
    }
    return append_module(b, x, w, bias, gain, lnb, m);
}

ComputationRecord build_module_record(const Module& m) {
    RecordBuilder b;
    const ValueId x = b.input({m.in_dim});
    b.set_output(append_module_const(b, x, m));
    return b.build();
}

Tensor flatten_input(const Tensor& x, std::size_t dim, const char* what) {
    require(x.numel() == dim, std::string(what) + ": input has " +
                                  std::to_string(x.numel()) + " entries, expected " +
                                  std::to_string(dim));
    return x.rank() == 1 ? x : x.reshaped({dim});
}

} // namespace

// ---------------------------------------------------------------------------
// Module

void Module::validate() const {
    require(in_dim > 0 && out_dim > 0, "Module: dimensions must be positive");
    require(weight.shape() == std::vector<std::size_t>{out_dim, in_dim},
            "Module: weight shape mismatch");
    require(bias.shape() == std::vector<std::size_t>{out_dim}, "Module: bias shape mismatch");
    if (layer_norm) {
        require(ln_gain.shape() == std::vector<std::size_t>{out_dim} &&
                    ln_bias.shape() == std::vector<std::size_t>{out_dim},
                "Module: layer norm parameter shape mismatch");
        require(ln_eps > 0.0, "Module: layer norm eps must be positive");
    }
    weight.require_finite("module weight");
    bias.require_finite("module bias");
}

Tensor module_forward(const Module& m, const Tensor& x) {
    const ComputationRecord rec = build_module_record(m);
    const Tensor flat = flatten_input(x, m.in_dim, "module_forward");
    return forward(rec, std::span<const Tensor>(&flat, 1));
}

Tensor module_jacobian(const Module& m, const Tensor& x, std::size_t dense_limit) {
    const ComputationRecord rec = build_module_record(m);
    const Tensor flat = flatten_input(x, m.in_dim, "module_jacobian");
    return jacobian(rec, std::span<const Tensor>(&flat, 1), 0, dense_limit);
}

// ---------------------------------------------------------------------------
// SequentialModel

SequentialModel::SequentialModel(std::vector<Module> modules,
                                 std::vector<std::size_t> input_shape)
    : modules_(std::move(modules)), input_shape_(std::move(input_shape)) {
    require(modules_.size() >= 2,
            "SequentialModel: at least two modules required (the gradient-robust "
            "loss needs an intermediate output)");
    input_dim_ = 1;
    for (std::size_t e : input_shape_) input_dim_ *= e;
    require(!input_shape_.empty() && input_dim_ > 0, "SequentialModel: bad input shape");
    require(modules_.front().in_dim == input_dim_,
            "SequentialModel: first module width does not match input shape");
    for (std::size_t i = 0; i < modules_.size(); ++i) {
        modules_[i].validate();
        if (i > 0)
            require(modules_[i].in_dim == modules_[i - 1].out_dim,
                    "SequentialModel: module " + std::to_string(i) +
                        " input width does not match previous output");
    }
    RecordBuilder b;
    ValueId v = b.input({input_dim_});
    for (const Module& m : modules_) {
        v = append_module_const(b, v, m);
        module_outputs_.push_back(v);
    }
    b.set_output(v);
    record_ = b.build();
}

std::vector<Tensor> SequentialModel::embed(const Tensor& x,
                                           bool collect_intermediates) const {
    const Tensor flat = flatten_input(x, input_dim_, "embed");
    const std::vector<Tensor> values =
        forward_values(record_, std::span<const Tensor>(&flat, 1));
    std::vector<Tensor> out;
    if (collect_intermediates) {
        out.reserve(module_outputs_.size());
        for (ValueId id : module_outputs_) out.push_back(values[id]);
    } else {
        out.push_back(values[module_outputs_.back()]);
    }
    return out;
}

Tensor SequentialModel::final_embedding(const Tensor& x) const {
    return embed(x, false).front();
}

std::uint64_t SequentialModel::fingerprint() const {
    std::uint64_t h = fnv1a_u64(modules_.size());
    for (std::size_t e : input_shape_) h = fnv1a_u64(e, h);
    for (const Module& m : modules_) {
        h = fnv1a_u64(m.in_dim, h);
        h = fnv1a_u64(m.out_dim, h);
        h = fnv1a_u64(static_cast<std::uint64_t>(m.activation), h);
        h = fnv1a_u64(m.layer_norm ? 1 : 0, h);
        h = umigrat::fingerprint(m.weight, h);
        h = umigrat::fingerprint(m.bias, h);
        if (m.layer_norm) {
            h = fnv1a(&m.ln_eps, sizeof(double), h);
            h = umigrat::fingerprint(m.ln_gain, h);
            h = umigrat::fingerprint(m.ln_bias, h);
        }
    }
    return h;
}

// ---------------------------------------------------------------------------
// ParamPatch

ParamPatch ParamPatch::from_delta(const Tensor& base, Tensor delta) {
    require_same_shape(base, delta, "ParamPatch::from_delta");
    ParamPatch p;
    p.delta = std::move(delta);
    p.apply_comp = Tensor(base.shape());
    p.remove_comp = Tensor(base.shape());
    const Tensor victim = p.apply(base);
    // record what compensated subtraction needs to restore base exactly
    for (std::size_t i = 0; i < base.numel(); ++i) {
        if (p.delta[i] == 0.0) continue;
        const double z = victim[i] - p.delta[i];
        p.remove_comp[i] = base[i] - z;
    }
    const Tensor restored = p.remove(victim);
    for (std::size_t i = 0; i < base.numel(); ++i)
        if (!same_bits(restored[i], base[i]))
            p.remove_fix.emplace_back(static_cast<std::uint32_t>(i), base[i]);
    return p;
}

ParamPatch ParamPatch::between(const Tensor& victim, const Tensor& base) {
    require_same_shape(victim, base, "ParamPatch::between");
    ParamPatch p;
    p.delta = Tensor(base.shape());
    p.apply_comp = Tensor(base.shape());
    p.remove_comp = Tensor(base.shape());
    for (std::size_t i = 0; i < base.numel(); ++i) {
        if (same_bits(victim[i], base[i])) continue;
        p.delta[i] = victim[i] - base[i];
        const double z = base[i] + p.delta[i];
        p.apply_comp[i] = victim[i] - z;
        const double z2 = victim[i] - p.delta[i];
        p.remove_comp[i] = base[i] - z2;
    }
    Tensor applied = p.apply(base);
    for (std::size_t i = 0; i < base.numel(); ++i)
        if (!same_bits(applied[i], victim[i]))
            p.apply_fix.emplace_back(static_cast<std::uint32_t>(i), victim[i]);
    Tensor restored = p.remove(victim);
    for (std::size_t i = 0; i < base.numel(); ++i)
        if (!same_bits(restored[i], base[i]))
            p.remove_fix.emplace_back(static_cast<std::uint32_t>(i), base[i]);
    return p;
}

Tensor ParamPatch::apply(const Tensor& base) const {
    require_same_shape(base, delta, "ParamPatch::apply");
    Tensor out = base;
    for (std::size_t i = 0; i < out.numel(); ++i) {
        if (delta[i] == 0.0 && apply_comp[i] == 0.0) continue; // bit-exact no-op
        out[i] = (base[i] + delta[i]) + apply_comp[i];
    }
    for (const auto& [i, v] : apply_fix) out[i] = v;
    return out;
}

Tensor ParamPatch::remove(const Tensor& victim) const {
    require_same_shape(victim, delta, "ParamPatch::remove");
    Tensor out = victim;
    for (std::size_t i = 0; i < out.numel(); ++i) {
        if (delta[i] == 0.0 && remove_comp[i] == 0.0) continue;
        out[i] = (victim[i] - delta[i]) + remove_comp[i];
    }
    for (const auto& [i, v] : remove_fix) out[i] = v;
    return out;
}

bool ParamPatch::is_zero() const {
    for (std::size_t i = 0; i < delta.numel(); ++i)
        if (delta[i] != 0.0) return false;
    return apply_fix.empty() && remove_fix.empty();
}

// ---------------------------------------------------------------------------
// WeightDelta

WeightDelta WeightDelta::lowrank(const SequentialModel& base, double strength,
                                 std::size_t rank, std::uint64_t seed) {
    require(strength > 0.0 && strength <= 1.0,
            "WeightDelta::lowrank: strength must lie in (0, 1]");
    require(rank >= 1, "WeightDelta::lowrank: rank must be positive");
    WeightDelta d;
    d.rank_ = rank;
    for (std::size_t mi = 0; mi < base.module_count(); ++mi) {
        const Module& m = base.modules()[mi];
        Rng rng(derive_seed(seed, "lowrank-delta", mi));
        const std::size_t r = std::min({rank, m.out_dim, m.in_dim});
        ModuleDelta md;
        md.lowrank_u = Tensor({m.out_dim, r});
        md.lowrank_v = Tensor({r, m.in_dim});
        for (std::size_t i = 0; i < md.lowrank_u.numel(); ++i) md.lowrank_u[i] = rng.normal();
        for (std::size_t i = 0; i < md.lowrank_v.numel(); ++i) md.lowrank_v[i] = rng.normal();
        Tensor raw({m.out_dim, m.in_dim});
        for (std::size_t row = 0; row < m.out_dim; ++row)
            for (std::size_t col = 0; col < m.in_dim; ++col) {
                double acc = 0.0;
                for (std::size_t k = 0; k < r; ++k)
                    acc += md.lowrank_u[row * r + k] * md.lowrank_v[k * m.in_dim + col];
                raw[row * m.in_dim + col] = acc;
            }
        const double raw_norm = raw.frobenius_norm();
        md.gain = raw_norm > 0.0 ? strength * m.weight.frobenius_norm() / raw_norm : 0.0;
        md.weight = ParamPatch::from_delta(m.weight, scale(raw, md.gain));

        Tensor braw({m.out_dim});
        for (std::size_t i = 0; i < m.out_dim; ++i) braw[i] = rng.normal();
        const double bnorm = braw.frobenius_norm();
        const double btarget = strength * m.bias.frobenius_norm();
        md.bias = ParamPatch::from_delta(
            m.bias, bnorm > 0.0 ? scale(braw, btarget / bnorm) : Tensor(m.bias.shape()));
        d.entries_.push_back(std::move(md));
    }
    d.magnitude_ratio_ = d.recompute_magnitude(base);
    return d;
}

WeightDelta WeightDelta::between(const SequentialModel& victim, const SequentialModel& base) {
    require(victim.module_count() == base.module_count(),
            "WeightDelta::between: module count mismatch");
    WeightDelta d;
    for (std::size_t mi = 0; mi < base.module_count(); ++mi) {
        const Module& mb = base.modules()[mi];
        const Module& mv = victim.modules()[mi];
        require(mb.in_dim == mv.in_dim && mb.out_dim == mv.out_dim,
                "WeightDelta::between: module shape mismatch");
        ModuleDelta md;
        md.weight = ParamPatch::between(mv.weight, mb.weight);
        md.bias = ParamPatch::between(mv.bias, mb.bias);
        d.entries_.push_back(std::move(md));
        d.rank_ = std::max(d.rank_, std::min(mb.in_dim, mb.out_dim)); // dense
    }
    d.magnitude_ratio_ = d.recompute_magnitude(base);
    return d;
}

WeightDelta WeightDelta::zero(const SequentialModel& base) {
    WeightDelta d;
    for (const Module& m : base.modules()) {
        ModuleDelta md;
        md.weight = ParamPatch::from_delta(m.weight, Tensor(m.weight.shape()));
        md.bias = ParamPatch::from_delta(m.bias, Tensor(m.bias.shape()));
        d.entries_.push_back(std::move(md));
    }
    return d;
}

SequentialModel WeightDelta::apply(const SequentialModel& base) const {
    require(entries_.size() == base.module_count(), "WeightDelta::apply: module count mismatch");
    std::vector<Module> modules = base.modules();
    for (std::size_t i = 0; i < modules.size(); ++i) {
        modules[i].weight = entries_[i].weight.apply(modules[i].weight);
        modules[i].bias = entries_[i].bias.apply(modules[i].bias);
    }
    SequentialModel out(std::move(modules), base.input_shape());
    out.training_converged = base.training_converged;
    return out;
}

SequentialModel WeightDelta::remove(const SequentialModel& victim) const {
    require(entries_.size() == victim.module_count(),
            "WeightDelta::remove: module count mismatch");
    std::vector<Module> modules = victim.modules();
    for (std::size_t i = 0; i < modules.size(); ++i) {
        modules[i].weight = entries_[i].weight.remove(modules[i].weight);
        modules[i].bias = entries_[i].bias.remove(modules[i].bias);
    }
    SequentialModel out(std::move(modules), victim.input_shape());
    out.training_converged = victim.training_converged;
    return out;
}

Tensor WeightDelta::module_update(const SequentialModel& base, std::size_t module_index,
                                  const Tensor& y) const {
    require(module_index < entries_.size(), "WeightDelta::module_update: bad index");
    Module updated = base.modules()[module_index];
    updated.weight = entries_[module_index].weight.apply(updated.weight);
    updated.bias = entries_[module_index].bias.apply(updated.bias);
    return sub(module_forward(updated, y), module_forward(base.modules()[module_index], y));
}

double WeightDelta::recompute_magnitude(const SequentialModel& base) const {
    require(entries_.size() == base.module_count(),
            "WeightDelta::recompute_magnitude: module count mismatch");
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const auto sq = [](const Tensor& t) {
            double s = 0.0;
            for (std::size_t k = 0; k < t.numel(); ++k) s += t[k] * t[k];
            return s;
        };
        num += sq(entries_[i].weight.delta) + sq(entries_[i].bias.delta);
        den += sq(base.modules()[i].weight) + sq(base.modules()[i].bias);
    }
    return den > 0.0 ? std::sqrt(num / den) : 0.0;
}

bool WeightDelta::is_zero() const {
    for (const ModuleDelta& e : entries_)
        if (!e.weight.is_zero() || !e.bias.is_zero()) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Training (denoising-regression proxy objective)

namespace {

struct TrainableRecord {
    ComputationRecord rec;
    std::size_t x_input = 0;
    std::size_t target_input = 1;
    // record-input index of every trainable tensor, module params first
    // (weight, bias, [gain, ln_bias]) then head weight and bias
    std::vector<std::size_t> param_inputs;
};

TrainableRecord build_training_record(const std::vector<Module>& modules,
                                      std::size_t input_dim, std::size_t head_out) {
    TrainableRecord tr;
    RecordBuilder b;
    const ValueId x = b.input({input_dim});
    const ValueId target = b.input({head_out});
    struct Ids {
        ValueId w, bias, gain = kNoValue, lnb = kNoValue;
    };
    std::vector<Ids> ids;
    for (const Module& m : modules) {
        Ids id;
        id.w = b.input({m.out_dim, m.in_dim});
        id.bias = b.input({m.out_dim});
        tr.param_inputs.push_back(id.w);
        tr.param_inputs.push_back(id.bias);
        if (m.layer_norm) {
            id.gain = b.input({m.out_dim});
            id.lnb = b.input({m.out_dim});
            tr.param_inputs.push_back(id.gain);
            tr.param_inputs.push_back(id.lnb);
        }
        ids.push_back(id);
    }

    const ValueId hw = b.input({head_out, modules.back().out_dim});
    const ValueId hb = b.input({head_out});
    tr.param_inputs.push_back(hw);
    tr.param_inputs.push_back(hb);

    ValueId v = x;
    for (std::size_t i = 0; i < modules.size(); ++i)
        v = append_module(b, v, ids[i].w, ids[i].bias, ids[i].gain, ids[i].lnb, modules[i]);
    v = b.affine(v, hw, hb);
    b.set_output(b.lp_norm(b.sub(v, target), 2));
    tr.rec = b.build();
    return tr;
}

struct TrainableParam {
    Tensor* tensor;
    bool is_layer_norm;
    bool is_head;
};

std::vector<TrainableParam> trainable_tensors(std::vector<Module>& modules, TaskHead& head) {
    std::vector<TrainableParam> out;
    for (Module& m : modules) {
        out.push_back({&m.weight, false, false});
        out.push_back({&m.bias, false, false});
        if (m.layer_norm) {
            out.push_back({&m.ln_gain, true, false});
            out.push_back({&m.ln_bias, true, false});
        }
    }
    out.push_back({&head.weight, false, true});
    out.push_back({&head.bias, false, true});
    return out;
}

struct DenoiseTrainOptions {
    std::size_t epochs = 0;
    std::size_t batch_size = 16;
    double learning_rate = 0.05;
    double momentum = 0.9;
    double noise_std = 0.1;
    double target_loss = -1.0; // < 0: no plateau stop
    std::uint64_t seed = 0;
    bool update_encoder = true;
    // fine-tuning freezes the norm parameters so the victim differs from
    // the base only in affine weights and biases (what the delta covers)
    bool update_layer_norm = true;
};

struct DenoiseTrainResult {
    double last_epoch_loss = 0.0;
    std::size_t epochs_run = 0;
    bool reached_target = false;
};

Tensor noised_input(const Tensor& image, double noise_std, Rng& rng, std::size_t dim) {
    Tensor x = image.reshaped({dim});
    for (std::size_t i = 0; i < dim; ++i) x[i] = clamp01(x[i] + noise_std * rng.normal());
    return x;
}

DenoiseTrainResult run_denoise_training(std::vector<Module>& modules, TaskHead& head,
                                        const std::vector<Tensor>& images,
                                        const DenoiseTrainOptions& opt) {
    require(!images.empty(), "denoise training: empty dataset");
    const std::size_t input_dim = modules.front().in_dim;
    const std::size_t head_out = head.weight.shape()[0];
    const TrainableRecord tr = build_training_record(modules, input_dim, head_out);
    std::vector<TrainableParam> params = trainable_tensors(modules, head);
    std::vector<Tensor> velocity;
    velocity.reserve(params.size());
    for (const TrainableParam& p : params) velocity.push_back(Tensor(p.tensor->shape()));

    std::vector<Tensor> inputs(tr.rec.input_count());
    DenoiseTrainResult res;
    std::vector<std::size_t> order(images.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(opt.seed, "train-shuffle", epoch));
        shuffle_rng.shuffle(order);
        Rng noise_rng(derive_seed(opt.seed, "train-noise", epoch));
        double epoch_loss = 0.0;
        std::size_t pos = 0;
        while (pos < order.size()) {
            const std::size_t bsz = std::min(opt.batch_size, order.size() - pos);
            std::vector<Tensor> grad_acc;
            grad_acc.reserve(params.size());
            for (const TrainableParam& p : params) grad_acc.push_back(Tensor(p.tensor->shape()));
            for (std::size_t k = 0; k < bsz; ++k) {
                const Tensor& img = images[order[pos + k]];
                inputs[tr.x_input] = noised_input(img, opt.noise_std, noise_rng, input_dim);
                inputs[tr.target_input] = img.reshaped({head_out});
                for (std::size_t pi = 0; pi < params.size(); ++pi)
                    inputs[tr.param_inputs[pi]] = *params[pi].tensor;
                std::vector<Tensor> grads = gradient_all(tr.rec, inputs);
                epoch_loss += forward(tr.rec, inputs)[0];
                for (std::size_t pi = 0; pi < params.size(); ++pi) {
                    const Tensor& g = grads[tr.param_inputs[pi]];
                    for (std::size_t j = 0; j < g.numel(); ++j) grad_acc[pi][j] += g[j];
                }
            }
            for (std::size_t pi = 0; pi < params.size(); ++pi) {
                if (!params[pi].is_head && !opt.update_encoder) continue;
                if (params[pi].is_layer_norm && !opt.update_layer_norm) continue;
                Tensor& v = velocity[pi];
                Tensor& p = *params[pi].tensor;
                const double scale = opt.learning_rate / static_cast<double>(bsz);
                for (std::size_t j = 0; j < p.numel(); ++j) {
                    v[j] = opt.momentum * v[j] - scale * grad_acc[pi][j];
                    p[j] += v[j];
                }
            }
            pos += bsz;
        }
        epoch_loss /= static_cast<double>(images.size());
        res.last_epoch_loss = epoch_loss;
        res.epochs_run = epoch + 1;
        if (opt.target_loss >= 0.0 && epoch_loss < opt.target_loss) {
            res.reached_target = true;
            break;
        }
    }
    return res;
}

/// Forward pass loss is wasted as a separate evaluation above; acceptable at
/// this scale, revisit only if the training stage ever dominates profiles.
double denoise_eval(const std::vector<Module>& modules, const TaskHead& head,
                    const std::vector<Tensor>& images, double noise_std,
                    std::uint64_t noise_seed) {
    const std::size_t input_dim = modules.front().in_dim;
    const std::size_t head_out = head.weight.shape()[0];
    RecordBuilder b;
    ValueId v = b.input({input_dim});
    const ValueId target = b.input({head_out});
    for (const Module& m : modules) v = append_module_const(b, v, m);
    const ValueId hw = b.constant(head.weight);
    const ValueId hb = b.constant(head.bias);
    v = b.affine(v, hw, hb);
    b.set_output(b.lp_norm(b.sub(v, target), 2));
    const ComputationRecord rec = b.build();

    double total = 0.0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        Rng rng(derive_seed(noise_seed, "eval-noise", i));
        std::vector<Tensor> in{noised_input(images[i], noise_std, rng, input_dim),
                               images[i].reshaped({head_out})};
        total += forward(rec, in)[0];
    }
    return total / static_cast<double>(images.size());
}

std::vector<Module> init_modules(const ArchitectureSpec& arch, std::uint64_t seed) {
    require(arch.module_count >= 2, "architecture: module count must be >= 2");
    const std::size_t input_dim = arch.input_h * arch.input_w;
    std::vector<Module> modules;
    for (std::size_t i = 0; i < arch.module_count; ++i) {
        Module m;
        m.in_dim = i == 0 ? input_dim : arch.width;
        m.out_dim = i + 1 == arch.module_count ? arch.embedding_dim : arch.width;
        m.activation = arch.activation;
        m.layer_norm = arch.layer_norm;
        Rng rng(derive_seed(seed, "init-module", i));
        m.weight = Tensor({m.out_dim, m.in_dim});
        const double std_dev = std::sqrt(2.0 / static_cast<double>(m.in_dim));
        for (std::size_t k = 0; k < m.weight.numel(); ++k) m.weight[k] = std_dev * rng.normal();
        m.bias = Tensor({m.out_dim});
        if (m.layer_norm) {
            m.ln_gain = Tensor({m.out_dim});
            for (std::size_t k = 0; k < m.out_dim; ++k) m.ln_gain[k] = 1.0;
            m.ln_bias = Tensor({m.out_dim});
        }
        modules.push_back(std::move(m));
    }
    return modules;
}

TaskHead init_head(std::size_t embedding_dim, std::size_t out_dim, std::uint64_t seed) {
    TaskHead head;
    Rng rng(seed);
    head.weight = Tensor({out_dim, embedding_dim});
    const double std_dev = std::sqrt(1.0 / static_cast<double>(embedding_dim));
    for (std::size_t k = 0; k < head.weight.numel(); ++k) head.weight[k] = std_dev * rng.normal();
    head.bias = Tensor({out_dim});
    head.valid = true;
    return head;
}

} // namespace

FoundationResult build_foundation(const FoundationSpec& spec, std::uint64_t seed) {
    DatasetSpec data;
    data.kind = DatasetKind::Natural;
    data.count = spec.train.sample_count;
    data.height = spec.arch.input_h;
    data.width = spec.arch.input_w;
    data.octaves = spec.train.octaves;
    data.seed = derive_seed(seed, "foundation-data");
    return build_foundation(spec, seed, sample_natural(data));
}

FoundationResult build_foundation(const FoundationSpec& spec, std::uint64_t seed,
                                  const Dataset& data) {
    require(!data.items.empty(), "build_foundation: empty training data");
    const std::size_t input_dim = spec.arch.input_h * spec.arch.input_w;
    std::vector<Module> modules = init_modules(spec.arch, seed);
    TaskHead head = init_head(spec.arch.embedding_dim, input_dim, derive_seed(seed, "init-head"));

    DatasetSpec probe_spec = data.spec;
    probe_spec.kind = DatasetKind::Natural;
    probe_spec.count = std::max<std::size_t>(1, spec.train.probe_count);
    probe_spec.seed = derive_seed(seed, "foundation-probe");
    const Dataset probe = sample_natural(probe_spec);

    const std::uint64_t probe_noise = derive_seed(seed, "probe-noise");
    const double initial = denoise_eval(modules, head, probe.items, spec.train.noise_std, probe_noise);

    DenoiseTrainOptions opt;
    opt.epochs = spec.train.max_epochs;
    opt.batch_size = spec.train.batch_size;
    opt.learning_rate = spec.train.learning_rate;
    opt.momentum = spec.train.momentum;
    opt.noise_std = spec.train.noise_std;
    opt.target_loss = spec.train.target_loss;
    opt.seed = derive_seed(seed, "foundation-train");
    const DenoiseTrainResult tr = run_denoise_training(modules, head, data.items, opt);

    const double final_loss = denoise_eval(modules, head, probe.items, spec.train.noise_std, probe_noise);

    SequentialModel model(std::move(modules),
                          {spec.arch.input_h, spec.arch.input_w});
    model.training_converged = tr.reached_target;
    FoundationResult res{std::move(model), std::move(head), tr.reached_target,
                         initial, final_loss, tr.epochs_run};
    return res;
}

VictimResult derive_victim(const SequentialModel& base, VictimMode mode, double strength,
                           std::uint64_t seed, const Dataset* d_tau, const FineTuneSpec& ft) {
    require(strength > 0.0 && strength <= 1.0,
            "derive_victim: strength must lie in (0, 1]");

    if (mode == VictimMode::LowRank) {
        WeightDelta delta = WeightDelta::lowrank(base, strength, ft.lowrank_rank, seed);
        SequentialModel victim = delta.apply(base);
        return VictimResult{std::move(victim), std::move(delta), TaskHead{}, 0.0, 0.0};
    }

    require(d_tau != nullptr && !d_tau->items.empty(),
            "derive_victim: fine-tune modes need a downstream dataset");
    require(d_tau->items.front().numel() == base.input_dim(),
            "derive_victim: downstream dataset does not match the model input");

    SequentialModel start = base;
    if (mode == VictimMode::Both) {
        start = WeightDelta::lowrank(base, strength, ft.lowrank_rank,
                                     derive_seed(seed, "both-lowrank"))
                    .apply(base);
    }

    // deterministic holdout split
    std::vector<std::size_t> order(d_tau->items.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng split_rng(derive_seed(seed, "finetune-split"));
    split_rng.shuffle(order);
    const std::size_t holdout_n = std::max<std::size_t>(
        1, static_cast<std::size_t>(ft.holdout_fraction * static_cast<double>(order.size())));
    require(holdout_n < order.size(), "derive_victim: holdout fraction leaves no training data");
    std::vector<Tensor> train_items, holdout_items;
    for (std::size_t i = 0; i < order.size(); ++i) {
        (i < order.size() - holdout_n ? train_items : holdout_items)
            .push_back(d_tau->items[order[i]]);
    }

    std::vector<Module> modules = start.modules();
    TaskHead head = init_head(base.embedding_dim(), base.input_dim(),
                              derive_seed(seed, "finetune-head"));

    DenoiseTrainOptions warm;
    warm.epochs = ft.head_epochs;
    warm.batch_size = ft.batch_size;
    warm.learning_rate = ft.learning_rate;
    warm.momentum = ft.momentum;
    warm.noise_std = ft.noise_std;
    warm.seed = derive_seed(seed, "finetune-warmup");
    warm.update_encoder = false;
    warm.update_layer_norm = false;
    run_denoise_training(modules, head, train_items, warm);

    const std::uint64_t eval_noise = derive_seed(seed, "finetune-eval");
    const double base_loss = denoise_eval(modules, head, holdout_items, ft.noise_std, eval_noise);

    DenoiseTrainOptions joint = warm;
    joint.epochs = ft.joint_epochs;
    joint.learning_rate = ft.learning_rate * strength;
    joint.seed = derive_seed(seed, "finetune-joint");
    joint.update_encoder = true;
    run_denoise_training(modules, head, train_items, joint);

    const double victim_loss = denoise_eval(modules, head, holdout_items, ft.noise_std, eval_noise);

    SequentialModel victim(std::move(modules), base.input_shape());
    victim.training_converged = base.training_converged;
    WeightDelta delta = WeightDelta::between(victim, base);
    return VictimResult{std::move(victim), std::move(delta), std::move(head), base_loss,
                        victim_loss};
}

Tensor natural_mean_embedding(const SequentialModel& model, const Dataset& dataset) {
    require(!dataset.items.empty(), "natural_mean_embedding: empty dataset");
    Tensor acc({model.embedding_dim()});
    for (const Tensor& img : dataset.items) {
        const Tensor e = model.final_embedding(img);
        for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] += e[i];
    }
    return scale(acc, 1.0 / static_cast<double>(dataset.items.size()));
}

} // namespace umigrat
