#include "umigrat/umi.hpp"

#include <algorithm>
#include <cmath>

#include "umigrat/rng.hpp"

namespace umigrat {

namespace {

double median(std::vector<double> v) {
    require(!v.empty(), "median of empty set");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Dataset subset(const Dataset& data, const std::vector<std::size_t>& indices) {
    Dataset out;
    out.spec = data.spec;
    out.degenerate_shift = data.degenerate_shift;
    out.items.reserve(indices.size());
    for (std::size_t i : indices) out.items.push_back(data.items[i]);
    return out;
}

} // namespace

AttackResult u_mu1(const Tensor& delta, const SequentialModel& model, const Tensor& x,
                   const AttackBudget& budget, std::size_t t) {
    budget.validate();
    require(t >= 1, "u_mu1: at least one inner step required");
    require(delta.numel() == model.input_dim(), "u_mu1: delta size mismatch");
    const Tensor anchor = x.rank() == 1 ? x : x.reshaped({model.input_dim()});
    // same loss/gradient path as the anchored attacks; projection is
    // ball-only because a universal delta has no single anchor
    const SequentialModel& m = model;
    SignAscentProblem problem;
    problem.project = [&](const Tensor& d) { return clip_ball(d, budget.epsilon); };
    problem.loss = [&](const Tensor& d) {
        return feature_loss(m, anchor, add(anchor, d), budget.loss_norm);
    };
    problem.grad = [&](const Tensor& d, std::size_t) {
        return feature_loss_gradient(m, anchor, add(anchor, d), budget.loss_norm);
    };
    SignAscentOptions opt;
    opt.iterations = t;
    opt.alpha = budget.alpha;
    opt.return_best = false; // the meta objective uses the full t-step update
    const Tensor start = delta.rank() == 1 ? delta : delta.reshaped({model.input_dim()});
    AttackResult res = run_sign_ascent(problem, start, opt);
    res.perturbation.delta = res.perturbation.delta.reshaped(delta.shape());
    res.perturbation.budget = budget;
    return res;
}

std::vector<double> default_epsilon_schedule(double epsilon, std::size_t t) {
    require(epsilon > 0.0 && t >= 1, "default_epsilon_schedule: bad arguments");
    std::vector<double> sched(t);
    for (std::size_t j = 0; j < t; ++j) {
        const std::size_t phase = j * 4 / t; // 0..3
        sched[j] = epsilon * static_cast<double>(phase + 1) / 4.0;
    }
    return sched;
}

UMu2Result u_mu2(const Tensor& delta, const SequentialModel& model, const Tensor& x,
                 double lambda, std::span<const double> schedule,
                 const AttackBudget& budget) {
    budget.validate();
    require(!schedule.empty(), "u_mu2: empty schedule");
    for (std::size_t j = 0; j + 1 < schedule.size(); ++j)
        require(schedule[j] <= schedule[j + 1], "u_mu2: schedule must be nondecreasing");
    require(schedule.back() <= budget.epsilon + 1e-12,
            "u_mu2: schedule exceeds the training epsilon");
    require(delta.numel() == model.input_dim(), "u_mu2: delta size mismatch");

    const Tensor anchor = x.rank() == 1 ? x : x.reshaped({model.input_dim()});
    const Tensor start = clip_ball(
        delta.rank() == 1 ? delta : delta.reshaped({model.input_dim()}), budget.epsilon);

    UMu2Result res;
    res.delta = start;
    res.final_loss = feature_loss(model, anchor, add(anchor, res.delta), budget.loss_norm);
    if (res.final_loss > lambda) {
        res.threshold_reached = true; // zero update is already minimal
        res.delta = res.delta.reshaped(delta.shape());
        return res;
    }

    Tensor cumulative(start.shape()); // the update being minimized
    for (std::size_t j = 0; j < schedule.size(); ++j) {
        const Tensor g =
            feature_loss_gradient(model, anchor, add(anchor, res.delta), budget.loss_norm);
        bool zero = true;
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (g[i] != 0.0) {
                zero = false;
                break;
            }
        if (!zero) {
            for (std::size_t i = 0; i < cumulative.numel(); ++i) {
                const double stepped = cumulative[i] + budget.alpha * sign(g[i]);
                cumulative[i] = std::min(schedule[j], std::max(-schedule[j], stepped));
            }
            res.delta = clip_ball(add(start, cumulative), budget.epsilon);
        }
        res.steps_taken = j + 1;
        res.final_loss =
            feature_loss(model, anchor, add(anchor, res.delta), budget.loss_norm);
        if (res.final_loss > lambda) {
            res.threshold_reached = true;
            break;
        }
    }
    res.delta = res.delta.reshaped(delta.shape());
    return res;
}

double calibrate_lambda(const SequentialModel& model, const Dataset& data, double factor,
                        int p, std::uint64_t seed) {
    require(data.size() >= 2, "calibrate_lambda: need at least two samples");
    require(factor > 0.0, "calibrate_lambda: factor must be positive");
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed, "lambda-pairs"));
    rng.shuffle(order);
    const std::size_t pairs = std::min<std::size_t>(512, data.size() / 2);
    std::vector<double> dists;
    dists.reserve(pairs);
    for (std::size_t k = 0; k < pairs; ++k) {
        const Tensor ea = model.final_embedding(data.items[order[2 * k]]);
        const Tensor eb = model.final_embedding(data.items[order[2 * k + 1]]);
        dists.push_back(sub(ea, eb).lp_norm(p));
    }
    return factor * median(std::move(dists));
}

double fooling_rate(const Tensor& delta, const SequentialModel& model,
                    const Dataset& dataset, double lambda, const AttackBudget& budget) {
    require(!dataset.items.empty(), "fooling_rate: empty dataset");
    std::size_t fooled = 0;
    for (const Tensor& x : dataset.items) {
        const Tensor flat_x = x.reshaped({model.input_dim()});
        const Tensor d = project(delta.reshaped({model.input_dim()}), flat_x, budget);
        const double loss =
            feature_loss(model, flat_x, add(flat_x, d), budget.loss_norm);
        if (loss > lambda) ++fooled;
    }
    return static_cast<double>(fooled) / static_cast<double>(dataset.items.size());
}

Tensor reptile_update(const Tensor& delta, const std::vector<Tensor>& candidates,
                      double eta) {
    require(!candidates.empty(), "reptile_update: no candidates");
    Tensor acc(delta.shape());
    for (const Tensor& c : candidates) {
        require_same_shape(c, delta, "reptile_update");
        for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] += c[i] - delta[i];
    }
    Tensor out = delta;
    const double scale = eta / static_cast<double>(candidates.size());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += scale * acc[i];
    return out;
}

UmiTrainResult train_umi(const SequentialModel& model, const Dataset& data,
                         const UmiConfig& config) {
    require(!data.items.empty(), "train_umi: empty dataset");
    config.budget.validate();
    require(config.meta_rounds >= 1 && config.inner_steps >= 1,
            "train_umi: rounds and inner steps must be positive");
    require(config.holdout_fraction > 0.0 && config.holdout_fraction < 1.0,
            "train_umi: holdout fraction must lie in (0, 1)");

    // deterministic holdout split; the sweep itself runs in dataset order
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng split_rng(derive_seed(config.seed, "umi-split"));
    split_rng.shuffle(order);
    const std::size_t holdout_n = std::max<std::size_t>(
        1, static_cast<std::size_t>(config.holdout_fraction * static_cast<double>(order.size())));
    require(holdout_n < order.size(), "train_umi: holdout fraction leaves no training data");
    std::vector<std::size_t> train_idx(order.begin(), order.end() - holdout_n);
    std::vector<std::size_t> holdout_idx(order.end() - holdout_n, order.end());
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(holdout_idx.begin(), holdout_idx.end());
    const Dataset train = subset(data, train_idx);
    const Dataset holdout = subset(data, holdout_idx);

    const double lambda =
        config.lambda >= 0.0
            ? config.lambda
            : calibrate_lambda(model, train, config.lambda_factor, config.budget.loss_norm,
                               derive_seed(config.seed, "umi-lambda"));

    const std::vector<double> schedule =
        default_epsilon_schedule(config.budget.epsilon, config.inner_steps);

    // the all-zero start is a stationary point of the feature distance, so
    // the initialization is broken with small seeded noise
    Tensor delta(model.input_shape());
    {
        Rng rng(derive_seed(config.seed, "umi-init"));
        const double bound = config.init_noise_scale * config.budget.epsilon;
        for (std::size_t i = 0; i < delta.numel(); ++i) delta[i] = rng.uniform(-bound, bound);
    }

    UmiTrainResult res;
    double prev_rate = fooling_rate(delta, model, holdout, lambda, config.budget);
    for (std::size_t round = 0; round < config.meta_rounds; ++round) {
        Tensor d1 = delta;
        Tensor d2 = delta;
        for (const Tensor& x : train.items) {
            d1 = u_mu1(d1, model, x, config.budget, config.inner_steps).perturbation.delta;
            d2 = u_mu2(d2, model, x, lambda, schedule, config.budget).delta;
        }
        const Tensor candidate =
            clip_ball(reptile_update(delta, {d1, d2}, config.eta), config.budget.epsilon);
        const double rate = fooling_rate(candidate, model, holdout, lambda, config.budget);
        res.round_fooling_rates.push_back(rate);
        if (rate < prev_rate - 0.5) {
            res.artifact.rolled_back_rounds.push_back(round);
        } else {
            delta = candidate;
            prev_rate = rate;
        }
    }

    res.holdout_fooling_rate = fooling_rate(delta, model, holdout, lambda, config.budget);
    res.artifact.delta = std::move(delta);
    res.artifact.eta = config.eta;
    res.artifact.meta_rounds = config.meta_rounds;
    res.artifact.inner_steps = config.inner_steps;
    res.artifact.lambda = lambda;
    res.artifact.epsilon_schedule = schedule;
    res.artifact.budget = config.budget;
    res.artifact.dataset_fingerprint = data.fingerprint();
    res.artifact.model_fingerprint = model.fingerprint();
    res.artifact.fooling_rate_at_train = res.holdout_fooling_rate;
    return res;
}

} // namespace umigrat
