#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "umigrat/model.hpp"
#include "umigrat/rng.hpp"
#include "umigrat/umi.hpp"

using namespace umigrat;
using namespace umigrat::testing;

namespace {

AttackBudget budget(std::size_t iters = 10) {
    return AttackBudget::from_255_units(10, 2, iters);
}

SequentialModel small_trained(std::uint64_t seed) {
    FoundationSpec spec;
    spec.arch.module_count = 3;
    spec.arch.width = 16;
    spec.arch.embedding_dim = 8;
    spec.arch.input_h = 8;
    spec.arch.input_w = 8;
    spec.train.sample_count = 48;
    spec.train.max_epochs = 12;
    spec.train.target_loss = -1.0;
    return build_foundation(spec, seed).model;
}

Tensor interior_anchor(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Tensor x({n});
    for (std::size_t i = 0; i < n; ++i) x[i] = rng.uniform(0.2, 0.8);
    return x;
}

Dataset natural_set(std::size_t count, std::uint64_t seed) {
    DatasetSpec s;
    s.kind = DatasetKind::Natural;
    s.count = count;
    s.height = 8;
    s.width = 8;
    s.seed = seed;
    return sample_natural(s);
}

} // namespace

TEST_CASE("u_mu1 with one step equals a single manual sign step") {
    const SequentialModel model = small_trained(3);
    const Tensor x = interior_anchor(64, 4);
    const AttackBudget b = budget();
    Rng rng(5);
    Tensor delta({64});
    for (std::size_t i = 0; i < 64; ++i) delta[i] = rng.uniform(-b.epsilon / 2, b.epsilon / 2);

    const AttackResult res = u_mu1(delta, model, x, b, 1);
    const Tensor g = feature_loss_gradient(model, x, add(x, delta), b.loss_norm);
    Tensor manual = delta;
    for (std::size_t i = 0; i < 64; ++i) manual[i] += b.alpha * sign(g[i]);
    manual = clip_ball(manual, b.epsilon);
    CHECK(bit_equal(res.perturbation.delta, manual));
}

TEST_CASE("u_mu1 on a stationary objective returns the projected init") {
    const SequentialModel model = small_trained(7);
    const Tensor x = interior_anchor(64, 8);
    // zero init makes the feature distance and its gradient identically zero
    const AttackResult res = u_mu1(Tensor({64}), model, x, budget(), 5);
    CHECK(res.trace.stationary);
    CHECK(res.perturbation.delta.linf_norm() == 0.0);
}

TEST_CASE("u_mu1 traces match an equally initialized ifgsm run bit-exactly") {
    // interior anchor: the anchored box clamp of the attack never binds, so
    // the ball-only projection of the universal update agrees bit for bit
    const SequentialModel model = small_trained(9);
    const Tensor x = interior_anchor(64, 10);
    const AttackBudget b = budget(5);
    Rng rng(11);
    Tensor delta({64});
    for (std::size_t i = 0; i < 64; ++i) delta[i] = rng.uniform(-b.epsilon / 2, b.epsilon / 2);

    const AttackResult meta = u_mu1(delta, model, x, b, 5);
    Perturbation init;
    init.delta = delta;
    init.budget = b;
    const AttackResult plain = ifgsm(model, x, b, &init);
    CHECK(meta.trace.initial_loss == plain.trace.initial_loss);
    REQUIRE(meta.trace.iterations.size() == plain.trace.iterations.size());
    for (std::size_t k = 0; k < 5; ++k) {
        CHECK(meta.trace.iterations[k].surrogate_loss ==
              plain.trace.iterations[k].surrogate_loss);
        CHECK(bit_equal(meta.trace.iterations[k].step, plain.trace.iterations[k].step));
    }
}

TEST_CASE("u_mu2 returns immediately when the threshold is already exceeded") {
    const SequentialModel model = small_trained(13);
    const Tensor x = interior_anchor(64, 14);
    const AttackBudget b = budget();
    Rng rng(15);
    Tensor delta({64});
    for (std::size_t i = 0; i < 64; ++i) delta[i] = rng.uniform(-b.epsilon, b.epsilon);
    const double loss0 = feature_loss(model, x, add(x, delta), b.loss_norm);
    REQUIRE(loss0 > 0.0);

    const auto sched = default_epsilon_schedule(b.epsilon, 5);
    const UMu2Result res = u_mu2(delta, model, x, loss0 / 2.0, sched, b);
    CHECK(res.threshold_reached);
    CHECK(res.steps_taken == 0);
    CHECK(bit_equal(res.delta, delta));
}

TEST_CASE("u_mu2 flags an unreachable threshold and returns the final iterate") {
    const SequentialModel model = small_trained(17);
    const Tensor x = interior_anchor(64, 18);
    const AttackBudget b = budget();
    Rng rng(19);
    Tensor delta({64});
    for (std::size_t i = 0; i < 64; ++i) delta[i] = rng.uniform(-b.epsilon / 4, b.epsilon / 4);

    const auto sched = default_epsilon_schedule(b.epsilon, 5);
    const UMu2Result res = u_mu2(delta, model, x, 1e9, sched, b);
    CHECK_FALSE(res.threshold_reached);
    CHECK(res.steps_taken == 5);
    CHECK(res.delta.linf_norm() <= b.epsilon + 1e-12);
}

TEST_CASE("u_mu2 finds the analytically minimal update on a 1-d linear toy") {
    // f(x) = x through two identity modules; loss is |delta|, so the
    // minimal update crossing lambda is exactly lambda
    Module id;
    id.in_dim = id.out_dim = 1;
    id.weight = Tensor({1, 1}, {1.0});
    id.bias = Tensor({1});
    id.activation = Activation::None;
    const SequentialModel model({id, id}, {1});

    const Tensor x({1}, {0.5});
    AttackBudget b = budget();
    const double lambda = 0.011;
    const std::vector<double> sched(5, b.epsilon); // wide-open schedule
    // start epsilon-away from the origin; the exact zero is a stationary
    // point of the norm objective
    const Tensor start({1}, {b.alpha / 4.0});
    const UMu2Result res = u_mu2(start, model, x, lambda, sched, b);
    CHECK(res.threshold_reached);
    CHECK(std::abs(res.delta.linf_norm() - lambda) <= b.alpha);
}

TEST_CASE("u_mu2 validates its schedule") {
    const SequentialModel model = small_trained(21);
    const Tensor x = interior_anchor(64, 22);
    const AttackBudget b = budget();
    CHECK_THROWS_AS((void)u_mu2(Tensor({64}), model, x, 1.0, std::vector<double>{}, b),
                    Error);
    const std::vector<double> decreasing{b.epsilon, b.epsilon / 2};
    CHECK_THROWS_AS((void)u_mu2(Tensor({64}), model, x, 1.0, decreasing, b), Error);
    const std::vector<double> too_big{2 * b.epsilon};
    CHECK_THROWS_AS((void)u_mu2(Tensor({64}), model, x, 1.0, too_big, b), Error);
}

TEST_CASE("default schedule ramps from a quarter of the ball to its boundary") {
    const auto sched = default_epsilon_schedule(0.4, 5);
    REQUIRE(sched.size() == 5);
    CHECK(sched.front() == doctest::Approx(0.1));
    CHECK(sched.back() == doctest::Approx(0.4));
    for (std::size_t i = 0; i + 1 < sched.size(); ++i) CHECK(sched[i] <= sched[i + 1]);
}

TEST_CASE("meta update: zero step size is a fixed point") {
    Rng rng(23);
    const Tensor delta = random_tensor({10}, rng);
    const Tensor c1 = random_tensor({10}, rng);
    const Tensor c2 = random_tensor({10}, rng);
    const Tensor out = reptile_update(delta, {c1, c2}, 0.0);
    CHECK(bit_equal(out, delta));
}

TEST_CASE("meta update: unchanged candidates are a fixed point") {
    Rng rng(24);
    const Tensor delta = random_tensor({10}, rng);
    const Tensor out = reptile_update(delta, {delta, delta}, 1.0);
    CHECK(max_abs_diff(out, delta) < 1e-15);
}

TEST_CASE("meta update: averaging arithmetic on canonical units") {
    const double k = 1.0 / 255.0;
    const Tensor delta({1}, {0.0});
    const Tensor c1({1}, {2 * k});
    const Tensor c2({1}, {4 * k});
    const Tensor out = reptile_update(delta, {c1, c2}, 1.0);
    CHECK(out[0] == doctest::Approx(3 * k).epsilon(1e-15));
}

TEST_CASE("meta update matches the hand-rolled elementwise expression") {
    Rng rng(25);
    const Tensor delta = random_tensor({32}, rng);
    const Tensor c1 = random_tensor({32}, rng);
    const Tensor c2 = random_tensor({32}, rng);
    const double eta = 0.7;
    const Tensor out = reptile_update(delta, {c1, c2}, eta);
    for (std::size_t i = 0; i < 32; ++i) {
        const double expect = delta[i] + (eta / 2.0) * ((c1[i] - delta[i]) + (c2[i] - delta[i]));
        CHECK(std::abs(out[i] - expect) < 1e-12);
    }
}

TEST_CASE("fooling rate: null perturbation fools nothing") {
    const SequentialModel model = small_trained(27);
    const Dataset d = natural_set(12, 28);
    CHECK(fooling_rate(Tensor({8, 8}), model, d, 0.01, budget()) == 0.0);
}

TEST_CASE("fooling rate: zero threshold with an effective delta fools everything") {
    const SequentialModel model = small_trained(29);
    const Dataset d = natural_set(12, 30);
    Rng rng(31);
    const AttackBudget b = budget();
    Tensor delta({8, 8});
    for (std::size_t i = 0; i < 64; ++i)
        delta[i] = (rng.uniform() < 0.5 ? -1.0 : 1.0) * b.epsilon;
    CHECK(fooling_rate(delta, model, d, 0.0, b) == 1.0);
}

TEST_CASE("fooling rate matches a per-sample recomputation oracle") {
    const SequentialModel model = small_trained(33);
    const Dataset d = natural_set(20, 34);
    Rng rng(35);
    const AttackBudget b = budget();
    Tensor delta({8, 8});
    for (std::size_t i = 0; i < 64; ++i) delta[i] = rng.uniform(-b.epsilon, b.epsilon);
    const double lambda = calibrate_lambda(model, d, 0.25, b.loss_norm, 36);

    std::size_t fooled = 0;
    for (const Tensor& x : d.items) {
        const Tensor flat = x.reshaped({64});
        const Tensor pd = project(delta.reshaped({64}), flat, b);
        if (feature_loss(model, flat, add(flat, pd), b.loss_norm) > lambda) ++fooled;
    }
    const double expect = static_cast<double>(fooled) / static_cast<double>(d.size());
    CHECK(fooling_rate(delta, model, d, lambda, b) == expect);
}

TEST_CASE("umi training: deterministic, feasible, and better than random") {
    const SequentialModel model = small_trained(37);
    const Dataset corpus = natural_set(40, 38);

    UmiConfig cfg;
    cfg.meta_rounds = 3;
    cfg.inner_steps = 3;
    cfg.budget = budget();
    cfg.holdout_fraction = 0.25;
    cfg.seed = 39;

    const UmiTrainResult a = train_umi(model, corpus, cfg);
    const UmiTrainResult b = train_umi(model, corpus, cfg);
    CHECK(bit_equal(a.artifact.delta, b.artifact.delta));
    CHECK(a.artifact.delta.linf_norm() <= cfg.budget.epsilon + 1e-12);
    CHECK(a.artifact.fooling_rate_at_train >= 0.0);
    CHECK(a.artifact.fooling_rate_at_train <= 1.0);
    CHECK(a.artifact.model_fingerprint == model.fingerprint());
    CHECK(a.artifact.dataset_fingerprint == corpus.fingerprint());

    // median over five training seeds: the learned delta fools at least as
    // well as a norm-matched uniform-random one on held-out data
    const Dataset heldout = natural_set(24, 40);
    std::vector<double> umi_rates, random_rates;
    for (std::uint64_t s = 0; s < 5; ++s) {
        UmiConfig c = cfg;
        c.seed = 100 + s;
        const UmiTrainResult r = train_umi(model, corpus, c);
        umi_rates.push_back(
            fooling_rate(r.artifact.delta, model, heldout, r.artifact.lambda, cfg.budget));
        Rng rng(200 + s);
        Tensor rnd(r.artifact.delta.shape());
        const double v = r.artifact.delta.linf_norm();
        for (std::size_t i = 0; i < rnd.numel(); ++i) rnd[i] = rng.uniform(-v, v);
        random_rates.push_back(
            fooling_rate(rnd, model, heldout, r.artifact.lambda, cfg.budget));
    }
    std::sort(umi_rates.begin(), umi_rates.end());
    std::sort(random_rates.begin(), random_rates.end());
    CHECK(umi_rates[2] > random_rates[2]);
}

TEST_CASE("umi training rejects degenerate configuration") {
    const SequentialModel model = small_trained(41);
    const Dataset corpus = natural_set(10, 42);
    UmiConfig cfg;
    cfg.budget = budget();
    cfg.holdout_fraction = 0.0;
    CHECK_THROWS_AS((void)train_umi(model, corpus, cfg), Error);
    Dataset empty;
    empty.spec = corpus.spec;
    cfg.holdout_fraction = 0.2;
    CHECK_THROWS_AS((void)train_umi(model, empty, cfg), Error);
}
