#include "umigrat/attack.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "umigrat/rng.hpp"

namespace umigrat {

namespace {

double clamp(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

Tensor flat(const Tensor& x, const SequentialModel& model, const char* what) {
    require(x.numel() == model.input_dim(), std::string(what) + ": input size mismatch");
    return x.rank() == 1 ? x : x.reshaped({model.input_dim()});
}

/// Record computing || emb(x_adv) - emb_clean ||_p with x_adv as the input.
ComputationRecord build_feature_loss_record(const SequentialModel& model,
                                            const Tensor& emb_clean, int p) {
    RecordBuilder b;
    ValueId v = b.input({model.input_dim()});
    for (const Module& m : model.modules()) {
        const ValueId w = b.constant(m.weight);
        const ValueId bias = b.constant(m.bias);
        v = b.affine(v, w, bias);
        if (m.layer_norm)
            v = b.layer_norm(v, b.constant(m.ln_gain), b.constant(m.ln_bias), m.ln_eps);
        if (m.activation == Activation::Tanh) v = b.tanh(v);
        if (m.activation == Activation::Gelu) v = b.gelu(v);
    }
    b.set_output(b.lp_norm(b.sub(v, b.constant(emb_clean)), p));
    return b.build();
}

/// Record computing the gradient-robust loss with fixed noise weights and
/// precomputed clean per-module outputs.
ComputationRecord build_gr_loss_record(const SequentialModel& model,
                                       const std::vector<Tensor>& clean_outputs,
                                       std::span<const double> noise, int p) {
    const std::size_t m = model.module_count();
    const std::size_t emb = model.embedding_dim();
    RecordBuilder b;
    ValueId v = b.input({model.input_dim()});
    std::vector<ValueId> adv_outputs;
    for (const Module& mod : model.modules()) {
        const ValueId w = b.constant(mod.weight);
        const ValueId bias = b.constant(mod.bias);
        v = b.affine(v, w, bias);
        if (mod.layer_norm)
            v = b.layer_norm(v, b.constant(mod.ln_gain), b.constant(mod.ln_bias), mod.ln_eps);
        if (mod.activation == Activation::Tanh) v = b.tanh(v);
        if (mod.activation == Activation::Gelu) v = b.gelu(v);
        adv_outputs.push_back(v);
    }
    ValueId acc = b.sub(adv_outputs.back(), b.constant(clean_outputs.back()));
    for (std::size_t i = 0; i + 1 < m; ++i) {
        ValueId diff = b.sub(adv_outputs[i], b.constant(clean_outputs[i]));
        const std::size_t width = model.modules()[i].out_dim;
        if (width != emb) {
            const ValueId pool = b.constant(pooling_matrix(width, emb));
            diff = b.affine(diff, pool, b.constant(Tensor({emb})));
        }
        acc = b.add(acc, b.scale(diff, noise[i] / static_cast<double>(m - 1)));
    }
    b.set_output(b.lp_norm(acc, p));
    return b.build();
}

} // namespace

// ---------------------------------------------------------------------------
// Budget / perturbation

void AttackBudget::validate() const {
    require(epsilon > 0.0, "AttackBudget: epsilon must be positive");
    require(alpha > 0.0, "AttackBudget: alpha must be positive");
    require(iterations >= 1, "AttackBudget: at least one iteration required");
    require(alpha <= 2.0 * epsilon,
            "AttackBudget: alpha exceeds the ball diameter (alpha <= 2*epsilon)");
    require(loss_norm == 1 || loss_norm == 2, "AttackBudget: loss norm must be 1 or 2");
    require(momentum_decay >= 0.0, "AttackBudget: momentum decay must be >= 0");
}

AttackBudget AttackBudget::from_255_units(double eps255, double alpha255,
                                          std::size_t iterations, int loss_norm,
                                          double momentum_decay) {
    AttackBudget b;
    b.epsilon = from_255(eps255);
    b.alpha = from_255(alpha255);
    b.iterations = iterations;
    b.loss_norm = loss_norm;
    b.momentum_decay = momentum_decay;
    b.validate();
    return b;
}

Perturbation Perturbation::zero(const Tensor& anchor, const AttackBudget& budget) {
    return Perturbation{Tensor(anchor.shape()), fingerprint(anchor), budget};
}

void Perturbation::check_feasible(const Tensor& anchor) const {
    require_same_shape(delta, anchor, "Perturbation::check_feasible");
    require(delta.linf_norm() <= budget.epsilon + 1e-12,
            "Perturbation: linf norm exceeds the budget");
    for (std::size_t i = 0; i < delta.numel(); ++i) {
        const double v = anchor[i] + delta[i];
        require(v >= -1e-12 && v <= 1.0 + 1e-12,
                "Perturbation: anchor + delta leaves the canonical range");
    }
}

// ---------------------------------------------------------------------------
// Projection

Tensor project(const Tensor& delta, const Tensor& anchor, const AttackBudget& budget) {
    require_same_shape(delta, anchor, "project");
    Tensor out = delta;
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const double d = clamp(out[i], -budget.epsilon, budget.epsilon);
        out[i] = clamp(d, -anchor[i], 1.0 - anchor[i]);
    }
    return out;
}

Tensor clip_ball(const Tensor& delta, double epsilon) {
    Tensor out = delta;
    for (std::size_t i = 0; i < out.numel(); ++i)
        out[i] = clamp(out[i], -epsilon, epsilon);
    return out;
}

// ---------------------------------------------------------------------------
// Losses

double feature_loss(const SequentialModel& model, const Tensor& x_clean,
                    const Tensor& x_adv, int p) {
    require(p == 1 || p == 2, "feature_loss: p must be 1 or 2");
    const ComputationRecord rec =
        build_feature_loss_record(model, model.final_embedding(x_clean), p);
    const Tensor xa = flat(x_adv, model, "feature_loss");
    return forward(rec, std::span<const Tensor>(&xa, 1))[0];
}

Tensor feature_loss_gradient(const SequentialModel& model, const Tensor& x_clean,
                             const Tensor& x_adv, int p) {
    require(p == 1 || p == 2, "feature_loss_gradient: p must be 1 or 2");
    const ComputationRecord rec =
        build_feature_loss_record(model, model.final_embedding(x_clean), p);
    const Tensor xa = flat(x_adv, model, "feature_loss_gradient");
    return gradient(rec, std::span<const Tensor>(&xa, 1), 0).reshaped(x_adv.shape());
}

Tensor pooling_matrix(std::size_t width, std::size_t target) {
    require(width > 0 && target > 0, "pooling_matrix: dimensions must be positive");
    Tensor q({target, width});
    if (width == target) {
        for (std::size_t i = 0; i < target; ++i) q[i * width + i] = 1.0;
    } else if (width > target) {
        for (std::size_t j = 0; j < target; ++j) {
            const std::size_t lo = j * width / target;
            const std::size_t hi = (j + 1) * width / target;
            for (std::size_t k = lo; k < hi; ++k)
                q[j * width + k] = 1.0 / static_cast<double>(hi - lo);
        }
    } else {
        for (std::size_t j = 0; j < width; ++j) q[j * width + j] = 1.0;
    }
    return q;
}

double gr_loss(const SequentialModel& model, const Tensor& x_clean, const Tensor& x_adv,
               std::span<const double> noise, int p) {
    require(p == 1 || p == 2, "gr_loss: p must be 1 or 2");
    require(noise.size() == model.module_count() - 1,
            "gr_loss: need one noise entry per intermediate module (" +
                std::to_string(model.module_count() - 1) + "), got " +
                std::to_string(noise.size()));
    const std::vector<Tensor> clean = model.embed(x_clean, true);
    const ComputationRecord rec = build_gr_loss_record(model, clean, noise, p);
    const Tensor xa = flat(x_adv, model, "gr_loss");
    return forward(rec, std::span<const Tensor>(&xa, 1))[0];
}

Tensor gr_loss_gradient(const SequentialModel& model, const Tensor& x_clean,
                        const Tensor& x_adv, std::span<const double> noise, int p) {
    require(p == 1 || p == 2, "gr_loss_gradient: p must be 1 or 2");
    require(noise.size() == model.module_count() - 1,
            "gr_loss_gradient: noise length mismatch");
    const std::vector<Tensor> clean = model.embed(x_clean, true);
    const ComputationRecord rec = build_gr_loss_record(model, clean, noise, p);
    const Tensor xa = flat(x_adv, model, "gr_loss_gradient");
    return gradient(rec, std::span<const Tensor>(&xa, 1), 0).reshaped(x_adv.shape());
}

// ---------------------------------------------------------------------------
// Sign-ascent engine

double AttackTrace::best_loss() const {
    double best = initial_loss;
    for (const AttackIteration& it : iterations) best = std::max(best, it.surrogate_loss);
    return best;
}

std::size_t AttackTrace::sign_flips() const {
    std::size_t flips = 0;
    const AttackIteration* prev = nullptr;
    for (const AttackIteration& it : iterations) {
        if (!it.stepped || it.step.empty()) continue;
        if (prev) {
            for (std::size_t i = 0; i < it.step.numel(); ++i) {
                if (it.step[i] * (*prev).step[i] < 0.0) {
                    ++flips;
                    break;
                }
            }
        }
        prev = &it;
    }
    return flips;
}

AttackResult run_sign_ascent(const SignAscentProblem& problem, const Tensor& init,
                             const SignAscentOptions& options) {
    using clock = std::chrono::steady_clock;
    Tensor delta = problem.project(init);
    AttackTrace trace;
    trace.initial_loss = problem.loss(delta);

    Tensor best_delta = delta;
    double best_loss = trace.initial_loss;
    std::size_t best_index = 0;

    Tensor momentum(delta.shape());
    bool any_step = false;

    for (std::size_t k = 0; k < options.iterations; ++k) {
        const auto t0 = clock::now();
        AttackIteration it;
        if (problem.noise_draws) it.noise = problem.noise_draws(k);

        const Tensor g = problem.grad(delta, k);
        bool zero_grad = true;
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (g[i] != 0.0) {
                zero_grad = false;
                break;
            }

        Tensor next = delta;
        if (zero_grad) {
            it.stepped = false; // stationary iterate, no step and no momentum update
        } else {
            Tensor direction;
            if (options.use_momentum) {
                const double l1 = g.l1_norm();
                for (std::size_t i = 0; i < momentum.numel(); ++i)
                    momentum[i] = options.momentum_decay * momentum[i] + g[i] / l1;
                direction = sign(momentum);
            } else {
                direction = sign(g);
            }
            for (std::size_t i = 0; i < next.numel(); ++i)
                next[i] = delta[i] + options.alpha * direction[i];
            next = problem.project(next);
            any_step = true;
        }

        it.step = sub(next, delta);
        it.step_norm = it.step.linf_norm();
        delta = std::move(next);
        it.surrogate_loss = problem.loss(delta);
        it.objective = problem.objective ? problem.objective(delta, k) : it.surrogate_loss;
        it.wall_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
        trace.iterations.push_back(std::move(it));

        if (trace.iterations.back().surrogate_loss > best_loss) {
            best_loss = trace.iterations.back().surrogate_loss;
            best_delta = delta;
            best_index = k + 1;
        }
    }

    trace.best_index = best_index;
    trace.stationary = !any_step;

    AttackResult res;
    res.perturbation.delta = options.return_best ? std::move(best_delta) : std::move(delta);
    res.trace = std::move(trace);
    return res;
}

// ---------------------------------------------------------------------------
// Attacks

namespace {

AttackResult feature_sign_attack(const SequentialModel& model, const Tensor& x,
                                 const AttackBudget& budget, const Perturbation* init,
                                 bool use_momentum) {
    budget.validate();
    const Tensor anchor = flat(x, model, "attack");
    const ComputationRecord rec =
        build_feature_loss_record(model, model.final_embedding(anchor), budget.loss_norm);

    SignAscentProblem problem;
    problem.project = [&](const Tensor& d) { return project(d, anchor, budget); };
    problem.loss = [&](const Tensor& d) {
        const Tensor xa = add(anchor, d);
        return forward(rec, std::span<const Tensor>(&xa, 1))[0];
    };
    problem.grad = [&](const Tensor& d, std::size_t) {
        const Tensor xa = add(anchor, d);
        return gradient(rec, std::span<const Tensor>(&xa, 1), 0);
    };

    SignAscentOptions opt;
    opt.iterations = budget.iterations;
    opt.alpha = budget.alpha;
    opt.use_momentum = use_momentum;
    opt.momentum_decay = budget.momentum_decay;

    Tensor start = init ? flat(init->delta, model, "attack init") : Tensor(anchor.shape());
    AttackResult res = run_sign_ascent(problem, start, opt);
    res.perturbation.delta = res.perturbation.delta.reshaped(x.shape());
    res.perturbation.anchor_fingerprint = fingerprint(x);
    res.perturbation.budget = budget;
    return res;
}

} // namespace

AttackResult ifgsm(const SequentialModel& model, const Tensor& x, const AttackBudget& budget,
                   const Perturbation* init) {
    return feature_sign_attack(model, x, budget, init, false);
}

AttackResult mifgsm(const SequentialModel& model, const Tensor& x, const AttackBudget& budget,
                    const Perturbation* init) {
    return feature_sign_attack(model, x, budget, init, true);
}

Perturbation adapt_init(const SequentialModel& model, const Tensor& x_tau,
                        const Tensor& umi_delta, const Tensor& y_tilde, double alpha_adp,
                        AdaptDirection direction, const AttackBudget& budget) {
    budget.validate();
    require(alpha_adp >= 0.0, "adapt_init: step size must be >= 0");
    require(y_tilde.numel() == model.embedding_dim(),
            "adapt_init: natural mean embedding has the wrong width");
    const Tensor anchor = flat(x_tau, model, "adapt_init");
    Tensor delta = flat(umi_delta, model, "adapt_init umi delta");

    if (alpha_adp > 0.0) {
        RecordBuilder b;
        ValueId v = b.input({model.input_dim()});
        for (const Module& m : model.modules()) {
            v = b.affine(v, b.constant(m.weight), b.constant(m.bias));
            if (m.layer_norm)
                v = b.layer_norm(v, b.constant(m.ln_gain), b.constant(m.ln_bias), m.ln_eps);
            if (m.activation == Activation::Tanh) v = b.tanh(v);
            if (m.activation == Activation::Gelu) v = b.gelu(v);
        }
        b.set_output(b.lp_norm(b.sub(v, b.constant(y_tilde)), budget.loss_norm));
        const ComputationRecord rec = b.build();
        const Tensor g = gradient(rec, std::span<const Tensor>(&anchor, 1), 0);
        const double dir = direction == AdaptDirection::AlgorithmLiteral ? 1.0 : -1.0;
        for (std::size_t i = 0; i < delta.numel(); ++i)
            delta[i] += alpha_adp * dir * sign(g[i]);
    }

    Perturbation out;
    out.delta = project(delta, anchor, budget).reshaped(x_tau.shape());
    out.anchor_fingerprint = fingerprint(x_tau);
    out.budget = budget;
    return out;
}

AttackResult gr_attack(const SequentialModel& model, const Tensor& x_tau,
                       const AttackBudget& budget, const Tensor& umi_delta,
                       const AdaptSpec& adapt, double sigma, std::uint64_t seed,
                       const std::vector<std::vector<double>>* replay_noise) {
    budget.validate();
    require(sigma >= 0.0, "gr_attack: sigma must be >= 0");
    const Tensor anchor = flat(x_tau, model, "gr_attack");
    const std::size_t m1 = model.module_count() - 1;

    // one fresh noise vector per iteration, drawn up front so a stored trace
    // can be replayed bit-exactly
    std::vector<std::vector<double>> noise;
    if (replay_noise) {
        require(replay_noise->size() == budget.iterations,
                "gr_attack: replay noise iteration count mismatch");
        for (const auto& n : *replay_noise)
            require(n.size() == m1, "gr_attack: replay noise width mismatch");
        noise = *replay_noise;
    } else {
        Rng rng(derive_seed(seed, "gr-noise"));
        noise.resize(budget.iterations);
        for (auto& n : noise) {
            n.resize(m1);
            for (double& v : n) v = sigma * rng.normal();
        }
    }

    Tensor init;
    if (adapt.enabled) {
        init = adapt_init(model, anchor, flat(umi_delta, model, "gr_attack umi delta"),
                          adapt.y_tilde, adapt.alpha_adp, adapt.direction, budget)
                   .delta;
    } else {
        init = flat(umi_delta, model, "gr_attack umi delta");
    }

    const std::vector<Tensor> clean = model.embed(anchor, true);
    const ComputationRecord feature_rec =
        build_feature_loss_record(model, clean.back(), budget.loss_norm);

    SignAscentProblem problem;
    problem.project = [&](const Tensor& d) { return project(d, anchor, budget); };
    problem.loss = [&](const Tensor& d) {
        const Tensor xa = add(anchor, d);
        return forward(feature_rec, std::span<const Tensor>(&xa, 1))[0];
    };
    problem.grad = [&](const Tensor& d, std::size_t k) {
        const ComputationRecord rec =
            build_gr_loss_record(model, clean, noise[k], budget.loss_norm);
        const Tensor xa = add(anchor, d);
        return gradient(rec, std::span<const Tensor>(&xa, 1), 0);
    };
    problem.objective = [&](const Tensor& d, std::size_t k) {
        const ComputationRecord rec =
            build_gr_loss_record(model, clean, noise[k], budget.loss_norm);
        const Tensor xa = add(anchor, d);
        return forward(rec, std::span<const Tensor>(&xa, 1))[0];
    };
    problem.noise_draws = [&](std::size_t k) { return noise[k]; };

    SignAscentOptions opt;
    opt.iterations = budget.iterations;
    opt.alpha = budget.alpha;

    AttackResult res = run_sign_ascent(problem, init, opt);
    res.perturbation.delta = res.perturbation.delta.reshaped(x_tau.shape());
    res.perturbation.anchor_fingerprint = fingerprint(x_tau);
    res.perturbation.budget = budget;
    return res;
}

} // namespace umigrat
