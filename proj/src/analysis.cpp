#include "umigrat/analysis.hpp"

#include <algorithm>
#include <cmath>

namespace umigrat {

namespace {

/// row (1 x rows) times matrix {rows, cols} -> (1 x cols).
Tensor row_times(const Tensor& row, const Tensor& mat) {
    const std::size_t rows = mat.shape()[0], cols = mat.shape()[1];
    require(row.numel() == rows, "row_times: width mismatch");
    Tensor out({cols});
    for (std::size_t r = 0; r < rows; ++r) {
        const double v = row[r];
        if (v == 0.0) continue;
        const double* mr = mat.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) out[c] += v * mr[c];
    }
    return out;
}

/// d||v||_p / dv with the zero-point subgradient convention used everywhere.
Tensor norm_gradient(const Tensor& v, int p) {
    Tensor g(v.shape());
    if (p == 1) {
        for (std::size_t i = 0; i < v.numel(); ++i) g[i] = sign(v[i]);
    } else {
        const double n = v.l2_norm();
        if (n > 0.0)
            for (std::size_t i = 0; i < v.numel(); ++i) g[i] = v[i] / n;
    }
    return g;
}

} // namespace

double median_of(std::vector<double> values) {
    require(!values.empty(), "median of empty set");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

Tensor seeded_gradient(const SequentialModel& model, const Tensor& x, const Tensor& seed) {
    require(seed.numel() == model.embedding_dim(), "seeded_gradient: seed width mismatch");
    RecordBuilder b;
    ValueId v = b.input({model.input_dim()});
    for (const Module& m : model.modules()) {
        v = b.affine(v, b.constant(m.weight), b.constant(m.bias));
        if (m.layer_norm)
            v = b.layer_norm(v, b.constant(m.ln_gain), b.constant(m.ln_bias), m.ln_eps);
        if (m.activation == Activation::Tanh) v = b.tanh(v);
        if (m.activation == Activation::Gelu) v = b.gelu(v);
    }
    // <seed, emb> as a 1-wide affine map
    b.set_output(b.affine(v, b.constant(seed.reshaped({1, seed.numel()})),
                          b.constant(Tensor({1}))));
    const ComputationRecord rec = b.build();
    const Tensor flat_x = x.reshaped({model.input_dim()});
    return gradient(rec, std::span<const Tensor>(&flat_x, 1), 0).reshaped(x.shape());
}

DeviationReport deviation(const SequentialModel& surrogate, const SequentialModel& victim,
                          const WeightDelta& delta_weights, const Tensor& x,
                          const Tensor& loss_seed, std::size_t dense_limit) {
    require(surrogate.module_count() == victim.module_count(),
            "deviation: module count mismatch");
    require(loss_seed.numel() == surrogate.embedding_dim(),
            "deviation: loss seed width mismatch");
    require(delta_weights.apply(surrogate).fingerprint() == victim.fingerprint(),
            "deviation: victim is not surrogate with the given delta applied");

    const std::size_t m = surrogate.module_count();
    const Tensor flat_x = x.reshaped({surrogate.input_dim()});
    std::vector<Tensor> victim_acts = victim.embed(flat_x, true);
    victim_acts.insert(victim_acts.begin(), flat_x);

    // both Jacobian chains evaluated at the victim's activations
    Tensor row_victim = loss_seed.reshaped({loss_seed.numel()});
    Tensor row_surr = row_victim;
    for (std::size_t i = m; i-- > 0;) {
        const Tensor& point = victim_acts[i];
        row_victim = row_times(row_victim, module_jacobian(victim.modules()[i], point, dense_limit));
        row_surr = row_times(row_surr, module_jacobian(surrogate.modules()[i], point, dense_limit));
    }

    DeviationReport rep;
    rep.deviation = sub(row_victim, row_surr).reshaped(x.shape());
    rep.surrogate_product_at_victim = row_surr.reshaped(x.shape());
    rep.victim_gradient = seeded_gradient(victim, x, loss_seed);
    rep.surrogate_gradient = seeded_gradient(surrogate, x, loss_seed);
    rep.empirical_gap = sub(rep.victim_gradient, rep.surrogate_gradient);
    rep.residual = sub(rep.deviation, rep.empirical_gap);
    rep.deviation_norm = rep.deviation.l2_norm();
    rep.gap_norm = rep.empirical_gap.l2_norm();
    rep.residual_norm = rep.residual.l2_norm();
    rep.cosine_deviation_vs_gap = perturbation_cosine(rep.deviation, rep.empirical_gap).value;
    return rep;
}

AugmentedGradientReport augmented_gradient_chain(std::span<const Module> modules,
                                                 const Tensor& x_clean, const Tensor& x_adv,
                                                 std::span<const double> noise, int p,
                                                 std::size_t dense_limit) {
    const std::size_t m = modules.size();
    require(m >= 1, "augmented_gradient: empty module chain");
    require(noise.size() == m - 1, "augmented_gradient: need one noise entry per intermediate");
    require(p == 1 || p == 2, "augmented_gradient: p must be 1 or 2");
    require(x_clean.numel() == modules.front().in_dim && x_adv.numel() == x_clean.numel(),
            "augmented_gradient: input size mismatch");

    // clean and adversarial trajectories plus per-module Jacobians (adv side)
    std::vector<Tensor> clean{x_clean.reshaped({modules.front().in_dim})};
    std::vector<Tensor> adv{x_adv.reshaped({modules.front().in_dim})};
    std::vector<Tensor> jac;
    for (std::size_t i = 0; i < m; ++i) {
        jac.push_back(module_jacobian(modules[i], adv.back(), dense_limit));
        clean.push_back(module_forward(modules[i], clean.back()));
        adv.push_back(module_forward(modules[i], adv.back()));
    }
    const std::size_t emb = modules.back().out_dim;

    const double weight_scale = m > 1 ? 1.0 / static_cast<double>(m - 1) : 0.0;
    std::vector<Tensor> pooled_diffs; // intermediate differences in embedding width
    std::vector<Tensor> pools;
    for (std::size_t i = 0; i + 1 < m; ++i) {
        pools.push_back(pooling_matrix(modules[i].out_dim, emb));
        Tensor diff = sub(adv[i + 1], clean[i + 1]);
        Tensor pooled({emb});
        for (std::size_t r = 0; r < emb; ++r) {
            const double* pr = pools.back().data() + r * modules[i].out_dim;
            double acc = 0.0;
            for (std::size_t c = 0; c < modules[i].out_dim; ++c) acc += pr[c] * diff[c];
            pooled[r] = acc;
        }
        pooled_diffs.push_back(std::move(pooled));
    }

    Tensor v = sub(adv[m], clean[m]);
    for (std::size_t i = 0; i + 1 < m; ++i)
        for (std::size_t k = 0; k < emb; ++k)
            v[k] += noise[i] * weight_scale * pooled_diffs[i][k];
    const Tensor u = norm_gradient(v, p);
    const Tensor u_plain = norm_gradient(sub(adv[m], clean[m]), p);

    // row of the outer gradient pushed through the chain down to the input,
    // optionally entering at an intermediate level through its pooling map
    const auto chain_row = [&](const Tensor& outer, std::size_t from_module) {
        Tensor row = outer;
        if (from_module + 1 < m) row = row_times(row, pools[from_module]);
        for (std::size_t j = from_module + 1; j-- > 0;) row = row_times(row, jac[j]);
        return row;
    };

    AugmentedGradientReport rep;
    rep.plain = chain_row(u_plain, m - 1).reshaped(x_adv.shape());
    Tensor expansion = chain_row(u, m - 1);
    Tensor residual(expansion.shape());
    for (std::size_t i = 0; i + 1 < m; ++i) {
        const double w = noise[i] * weight_scale;
        if (w == 0.0) continue;
        const Tensor term = chain_row(u, i);
        for (std::size_t k = 0; k < expansion.numel(); ++k) expansion[k] += w * term[k];
        // multiplicative accumulation factor of the later noise entries
        double later = 1.0;
        for (std::size_t j = i + 1; j + 1 < m; ++j)
            later *= 1.0 + noise[j] * weight_scale;
        if (later != 1.0)
            for (std::size_t k = 0; k < residual.numel(); ++k)
                residual[k] += w * (later - 1.0) * term[k];
    }
    rep.expansion = expansion.reshaped(x_adv.shape());
    rep.residual = residual.reshaped(x_adv.shape());
    rep.product = add(expansion, residual).reshaped(x_adv.shape());
    return rep;
}

AugmentedGradientReport augmented_gradient(const SequentialModel& surrogate,
                                           const Tensor& x_clean, const Tensor& x_adv,
                                           std::span<const double> noise, int p,
                                           std::size_t dense_limit) {
    return augmented_gradient_chain(surrogate.modules(), x_clean, x_adv, noise, p,
                                    dense_limit);
}

CosineResult perturbation_cosine(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "perturbation_cosine");
    const double na = a.l2_norm();
    const double nb = b.l2_norm();
    if (na == 0.0 || nb == 0.0) return {0.0, true};
    double d = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) d += a[i] * b[i];
    // clamp rounding just past the unit interval
    return {std::min(1.0, std::max(-1.0, d / (na * nb))), false};
}

TransferReport transfer_gap(std::span<const Perturbation> perturbations,
                            std::span<const Tensor> inputs,
                            const SequentialModel& surrogate,
                            std::span<const SequentialModel* const> victims, int p) {
    require(perturbations.size() == inputs.size(),
            "transfer_gap: one perturbation per input required");
    require(!victims.empty(), "transfer_gap: no victims");
    TransferReport rep;
    std::vector<double> surr, vict, ratios;
    for (std::size_t ii = 0; ii < inputs.size(); ++ii) {
        require(perturbations[ii].anchor_fingerprint == fingerprint(inputs[ii]),
                "transfer_gap: perturbation " + std::to_string(ii) +
                    " was generated for a different input (anchor fingerprint mismatch)");
        const Tensor x_adv = add(inputs[ii], perturbations[ii].delta);
        const double s = feature_loss(surrogate, inputs[ii], x_adv, p);
        for (std::size_t vi = 0; vi < victims.size(); ++vi) {
            TransferRow row;
            row.input_index = ii;
            row.victim_index = vi;
            row.surrogate_loss = s;
            row.victim_loss = feature_loss(*victims[vi], inputs[ii], x_adv, p);
            row.ratio_defined = s > 0.0;
            row.drop_ratio = row.ratio_defined ? row.victim_loss / s : 0.0;
            surr.push_back(row.surrogate_loss);
            vict.push_back(row.victim_loss);
            if (row.ratio_defined) ratios.push_back(row.drop_ratio);
            rep.rows.push_back(row);
        }
    }
    rep.median_surrogate_loss = median_of(surr);
    rep.median_victim_loss = median_of(vict);
    rep.drop_ratio_defined = !ratios.empty();
    if (rep.drop_ratio_defined) rep.median_drop_ratio = median_of(std::move(ratios));
    return rep;
}

} // namespace umigrat
