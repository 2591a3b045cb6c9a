#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "umigrat/attack.hpp"
#include "umigrat/model.hpp"
#include "umigrat/rng.hpp"
#include "umigrat/synth.hpp"

using namespace umigrat;
using namespace umigrat::testing;

namespace {

constexpr double kEps = 10.0 / 255.0;
constexpr double kAlpha = 2.0 / 255.0;

AttackBudget budget(std::size_t iters = 10, int p = 2) {
    return AttackBudget::from_255_units(10, 2, iters, p);
}

/// Two-module linear stack y = W2 W1 x (no bias, no norm, no activation).
SequentialModel linear_model(const Tensor& w1, const Tensor& w2,
                             std::vector<std::size_t> input_shape) {
    Module m1;
    m1.in_dim = w1.shape()[1];
    m1.out_dim = w1.shape()[0];
    m1.weight = w1;
    m1.bias = Tensor({m1.out_dim});
    m1.activation = Activation::None;
    Module m2;
    m2.in_dim = w2.shape()[1];
    m2.out_dim = w2.shape()[0];
    m2.weight = w2;
    m2.bias = Tensor({m2.out_dim});
    m2.activation = Activation::None;
    return SequentialModel({m1, m2}, std::move(input_shape));
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

/// Interior anchor: the box constraint never binds inside the epsilon ball.
Tensor interior_anchor(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Tensor x({n});
    for (std::size_t i = 0; i < n; ++i) x[i] = rng.uniform(0.2, 0.8);
    return x;
}

} // namespace

TEST_CASE("budget validation") {
    CHECK_NOTHROW(budget().validate());
    AttackBudget b = budget();
    b.epsilon = 0.0;
    CHECK_THROWS_AS(b.validate(), Error);
    b = budget();
    b.alpha = 3.0 * b.epsilon; // beyond the ball diameter
    CHECK_THROWS_AS(b.validate(), Error);
    b = budget();
    b.iterations = 0;
    CHECK_THROWS_AS(b.validate(), Error);
    b = budget();
    b.loss_norm = 3;
    CHECK_THROWS_AS(b.validate(), Error);
}

TEST_CASE("project: feasible deltas pass through unchanged") {
    Rng rng(1);
    const Tensor anchor = interior_anchor(16, 2);
    Tensor d({16});
    for (std::size_t i = 0; i < 16; ++i) d[i] = rng.uniform(-kEps, kEps);
    const Tensor p = project(d, anchor, budget());
    CHECK(bit_equal(p, d));
}

TEST_CASE("project: clamp arithmetic") {
    const Tensor anchor({1}, {0.5});
    const Tensor d({1}, {0.08});
    const Tensor p = project(d, anchor, budget());
    CHECK(p[0] == kEps); // 10/255 = 0.0392...
}

TEST_CASE("project: idempotent and feasible over random sweeps") {
    Rng rng(3);
    const AttackBudget b = budget();
    for (int trial = 0; trial < 10000; ++trial) {
        Tensor anchor({4}), d({4});
        for (std::size_t i = 0; i < 4; ++i) {
            anchor[i] = rng.uniform(0.0, 1.0);
            d[i] = rng.uniform(-0.5, 0.5);
        }
        const Tensor p1 = project(d, anchor, b);
        const Tensor p2 = project(p1, anchor, b);
        CHECK(bit_equal(p1, p2));
        CHECK(p1.linf_norm() <= b.epsilon + 1e-12);
        for (std::size_t i = 0; i < 4; ++i) {
            CHECK(anchor[i] + p1[i] >= 0.0);
            CHECK(anchor[i] + p1[i] <= 1.0);
        }
    }
}

TEST_CASE("project: non-expansive in the sup norm") {
    Rng rng(5);
    const AttackBudget b = budget();
    for (int trial = 0; trial < 2000; ++trial) {
        Tensor anchor({3}), d1({3}), d2({3});
        for (std::size_t i = 0; i < 3; ++i) {
            anchor[i] = rng.uniform(0.0, 1.0);
            d1[i] = rng.uniform(-0.3, 0.3);
            d2[i] = rng.uniform(-0.3, 0.3);
        }
        const double before = sub(d1, d2).linf_norm();
        const double after = sub(project(d1, anchor, b), project(d2, anchor, b)).linf_norm();
        CHECK(after <= before + 1e-15);
    }
}

TEST_CASE("feature loss: coincident inputs give zero") {
    const SequentialModel model = small_trained(7);
    const Tensor x = interior_anchor(64, 8);
    CHECK(feature_loss(model, x, x, 2) == 0.0);
    CHECK(feature_loss(model, x, x, 1) == 0.0);
}

TEST_CASE("feature loss: single-coordinate embedding difference") {
    // identity stack: embeddings equal inputs, so a lone 3.0 difference in
    // one coordinate is the whole distance
    Tensor id({4, 4});
    for (int i = 0; i < 4; ++i) id[i * 4 + i] = 1.0;
    const SequentialModel model = linear_model(id, id, {4});
    const Tensor a({4}, {0.1, 0.2, 0.3, 0.4});
    Tensor b = a;
    b[2] += 3.0;
    CHECK(feature_loss(model, a, b, 2) == doctest::Approx(3.0).epsilon(1e-15));
    CHECK(feature_loss(model, a, b, 1) == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("feature loss: matches an independent norm computation") {
    const SequentialModel model = small_trained(9);
    Rng rng(10);
    const Tensor x = interior_anchor(64, 11);
    Tensor d({64});
    for (std::size_t i = 0; i < 64; ++i) d[i] = rng.uniform(-kEps, kEps);
    const Tensor x_adv = add(x, d);
    for (int p : {1, 2}) {
        const Tensor ea = model.final_embedding(x);
        const Tensor eb = model.final_embedding(x_adv);
        double expect = 0.0;
        if (p == 1) {
            for (std::size_t i = 0; i < ea.numel(); ++i) expect += std::abs(eb[i] - ea[i]);
        } else {
            for (std::size_t i = 0; i < ea.numel(); ++i)
                expect += (eb[i] - ea[i]) * (eb[i] - ea[i]);
            expect = std::sqrt(expect);
        }
        CHECK(std::abs(feature_loss(model, x, x_adv, p) - expect) < 1e-12);
    }
}

TEST_CASE("sign ascent: single-step update arithmetic") {
    // constant gradient with sign pattern (+, -, 0)
    const Tensor anchor({3}, {0.5, 0.5, 0.5});
    const AttackBudget b = budget(1);
    SignAscentProblem prob;
    prob.project = [&](const Tensor& d) { return project(d, anchor, b); };
    prob.loss = [](const Tensor&) { return 0.0; };
    prob.grad = [](const Tensor&, std::size_t) {
        return Tensor({3}, {5.0, -3.0, 0.0});
    };
    SignAscentOptions opt;
    opt.iterations = 1;
    opt.alpha = b.alpha;
    opt.return_best = false;
    const AttackResult res = run_sign_ascent(prob, Tensor({3}), opt);
    CHECK(res.perturbation.delta[0] == kAlpha);
    CHECK(res.perturbation.delta[1] == -kAlpha);
    CHECK(res.perturbation.delta[2] == 0.0);
}

TEST_CASE("sign ascent: infeasible init is projected before anything else") {
    const Tensor anchor({2}, {0.5, 0.99});
    const AttackBudget b = budget(1);
    SignAscentProblem prob;
    prob.project = [&](const Tensor& d) { return project(d, anchor, b); };
    prob.loss = [](const Tensor&) { return 0.0; };
    prob.grad = [](const Tensor&, std::size_t) { return Tensor({2}); }; // stationary
    SignAscentOptions opt;
    opt.iterations = 1;
    opt.alpha = b.alpha;
    const AttackResult res = run_sign_ascent(prob, Tensor({2}, {1.0, 1.0}), opt);
    CHECK(res.trace.stationary);
    CHECK(res.perturbation.delta[0] == kEps); // ball binds
    CHECK(res.perturbation.delta[1] == doctest::Approx(0.01).epsilon(1e-12)); // box binds
}

TEST_CASE("ifgsm: reported loss is the best over the trace and beats the start") {
    const SequentialModel model = small_trained(13);
    const Tensor x = interior_anchor(64, 14);
    const AttackResult res = ifgsm(model, x, budget());
    double best = res.trace.initial_loss;
    for (const auto& it : res.trace.iterations) best = std::max(best, it.surrogate_loss);
    CHECK(res.trace.best_loss() == best);
    CHECK(res.trace.best_loss() >= res.trace.initial_loss);
    // the returned delta realizes the best traced loss
    const double realized = feature_loss(model, x, add(x, res.perturbation.delta), 2);
    CHECK(realized == doctest::Approx(best).epsilon(1e-12));
    res.perturbation.check_feasible(x);
}

TEST_CASE("ifgsm: zero gradient everywhere returns the init with a stationary flag") {
    const SequentialModel model = small_trained(15);
    const Tensor x = interior_anchor(64, 16);
    // delta = 0 makes the feature distance identically zero with a zero
    // subgradient, so the attack cannot move
    const AttackResult res = ifgsm(model, x, budget(4));
    CHECK(res.trace.stationary);
    CHECK(res.perturbation.delta.linf_norm() == 0.0);
}

TEST_CASE("mifgsm: zero momentum decay reproduces ifgsm bit-exactly") {
    const SequentialModel model = small_trained(17);
    const Tensor x = interior_anchor(64, 18);
    AttackBudget b = budget(6);
    b.momentum_decay = 0.0;
    Perturbation init = Perturbation::zero(x, b);
    Rng rng(19);
    for (std::size_t i = 0; i < init.delta.numel(); ++i)
        init.delta[i] = rng.uniform(-b.epsilon / 2, b.epsilon / 2);

    const AttackResult a = ifgsm(model, x, b, &init);
    const AttackResult m = mifgsm(model, x, b, &init);
    CHECK(bit_equal(a.perturbation.delta, m.perturbation.delta));
    REQUIRE(a.trace.iterations.size() == m.trace.iterations.size());
    for (std::size_t k = 0; k < a.trace.iterations.size(); ++k) {
        CHECK(a.trace.iterations[k].surrogate_loss == m.trace.iterations[k].surrogate_loss);
        CHECK(bit_equal(a.trace.iterations[k].step, m.trace.iterations[k].step));
    }
}

TEST_CASE("mifgsm: constant gradient direction matches ifgsm's final delta") {
    const Tensor anchor({2}, {0.5, 0.5});
    const AttackBudget b = budget(5);
    SignAscentProblem prob;
    prob.project = [&](const Tensor& d) { return project(d, anchor, b); };
    prob.loss = [](const Tensor&) { return 0.0; };
    prob.grad = [](const Tensor&, std::size_t) { return Tensor({2}, {1.3, -0.2}); };
    SignAscentOptions plain;
    plain.iterations = 5;
    plain.alpha = b.alpha;
    plain.return_best = false;
    SignAscentOptions with_momentum = plain;
    with_momentum.use_momentum = true;
    with_momentum.momentum_decay = 1.0;
    const AttackResult pa = run_sign_ascent(prob, Tensor({2}), plain);
    const AttackResult ma = run_sign_ascent(prob, Tensor({2}), with_momentum);
    CHECK(bit_equal(pa.perturbation.delta, ma.perturbation.delta));
}

TEST_CASE("mifgsm: momentum damps an alternating 1-d gradient") {
    const Tensor anchor({1}, {0.5});
    const AttackBudget b = budget(6);
    SignAscentProblem prob;
    prob.project = [&](const Tensor& d) { return project(d, anchor, b); };
    prob.loss = [](const Tensor&) { return 0.0; };
    prob.grad = [](const Tensor&, std::size_t k) {
        return Tensor({1}, {k % 2 == 0 ? 1.0 : -1.0});
    };
    SignAscentOptions plain;
    plain.iterations = 6;
    plain.alpha = b.alpha;
    plain.return_best = false;
    SignAscentOptions with_momentum = plain;
    with_momentum.use_momentum = true;
    with_momentum.momentum_decay = 1.0;
    const AttackResult pa = run_sign_ascent(prob, Tensor({1}), plain);
    const AttackResult ma = run_sign_ascent(prob, Tensor({1}), with_momentum);
    CHECK(ma.trace.sign_flips() < pa.trace.sign_flips());
}

TEST_CASE("gr loss: zero noise collapses to the feature loss") {
    const SequentialModel model = small_trained(21);
    Rng rng(22);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = interior_anchor(64, 1000 + trial);
        Tensor d({64});
        for (std::size_t i = 0; i < 64; ++i) d[i] = rng.uniform(-kEps, kEps);
        const Tensor x_adv = add(x, d);
        const std::vector<double> noise(model.module_count() - 1, 0.0);
        const double g = gr_loss(model, x, x_adv, noise, 2);
        const double f = feature_loss(model, x, x_adv, 2);
        CHECK(std::abs(g - f) < 1e-12);
    }
}

TEST_CASE("gr loss: coincident inputs vanish for any noise") {
    const SequentialModel model = small_trained(23);
    const Tensor x = interior_anchor(64, 24);
    const std::vector<double> noise{0.7, -1.3};
    CHECK(gr_loss(model, x, x, noise, 2) == 0.0);
    CHECK(gr_loss(model, x, x, noise, 1) == 0.0);
}

TEST_CASE("gr loss: noise length must match the intermediate count") {
    const SequentialModel model = small_trained(25);
    const Tensor x = interior_anchor(64, 26);
    const std::vector<double> wrong{1.0};
    CHECK_THROWS_AS((void)gr_loss(model, x, x, wrong, 2), Error);
}

TEST_CASE("gr loss: matches an independent sum-of-differences oracle") {
    // three-module linear stack, equal widths, fixed noise (1, 1)
    Rng rng(27);
    Tensor w1({4, 4}), w2({4, 4}), w3({4, 4});
    for (std::size_t i = 0; i < 16; ++i) {
        w1[i] = rng.uniform(-0.8, 0.8);
        w2[i] = rng.uniform(-0.8, 0.8);
        w3[i] = rng.uniform(-0.8, 0.8);
    }
    Module m1, m2, m3;
    m1.in_dim = m1.out_dim = 4;
    m1.weight = w1;
    m1.bias = Tensor({4});
    m2 = m1;
    m2.weight = w2;
    m3 = m1;
    m3.weight = w3;
    const SequentialModel model({m1, m2, m3}, {4});

    const Tensor x({4}, {0.3, 0.6, 0.2, 0.8});
    const Tensor x_adv({4}, {0.32, 0.55, 0.23, 0.77});
    const std::vector<double> noise{1.0, 1.0};

    // independent oracle: explicit per-module outputs and the weighted sum
    const auto chain = [&](const Tensor& in) {
        std::vector<Tensor> ys;
        Tensor cur = in;
        for (const Module& m : model.modules()) {
            Tensor next({4});
            for (int r = 0; r < 4; ++r) {
                double acc = 0.0;
                for (int c = 0; c < 4; ++c) acc += m.weight[r * 4 + c] * cur[c];
                next[r] = acc;
            }
            ys.push_back(next);
            cur = next;
        }
        return ys;
    };
    const auto clean = chain(x);
    const auto adv = chain(x_adv);
    double expect = 0.0;
    for (int k = 0; k < 4; ++k) {
        double v = adv[2][k] - clean[2][k];
        for (int i = 0; i < 2; ++i)
            v += (noise[i] / 2.0) * (adv[i][k] - clean[i][k]);
        expect += v * v;
    }
    expect = std::sqrt(expect);
    CHECK(std::abs(gr_loss(model, x, x_adv, noise, 2) - expect) < 1e-12);
}

TEST_CASE("adapt_init: stationary adaptation returns the projected universal delta") {
    const SequentialModel model = small_trained(29);
    const Tensor x = interior_anchor(64, 30);
    const Tensor y_tilde = model.final_embedding(x); // exact coincidence
    Rng rng(31);
    Tensor umi({64});
    for (std::size_t i = 0; i < 64; ++i) umi[i] = rng.uniform(-0.1, 0.1);
    const AttackBudget b = budget();
    const Perturbation p = adapt_init(model, x, umi, y_tilde, b.alpha * 2,
                                      AdaptDirection::AlgorithmLiteral, b);
    CHECK(bit_equal(p.delta, project(umi, x, b)));
}

TEST_CASE("adapt_init: zero step size returns the projected universal delta") {
    const SequentialModel model = small_trained(33);
    const Tensor x = interior_anchor(64, 34);
    Tensor y_tilde({8});
    y_tilde[0] = 0.5;
    Rng rng(35);
    Tensor umi({64});
    for (std::size_t i = 0; i < 64; ++i) umi[i] = rng.uniform(-0.1, 0.1);
    const AttackBudget b = budget();
    const Perturbation p =
        adapt_init(model, x, umi, y_tilde, 0.0, AdaptDirection::AlgorithmLiteral, b);
    CHECK(bit_equal(p.delta, project(umi, x, b)));
}

TEST_CASE("adapt_init: descent direction reduces the adaptation loss on a linear model") {
    Rng rng(37);
    Tensor w1({4, 4}), w2({4, 4});
    for (std::size_t i = 0; i < 16; ++i) {
        w1[i] = rng.uniform(-0.8, 0.8);
        w2[i] = rng.uniform(-0.8, 0.8);
    }
    const SequentialModel model = linear_model(w1, w2, {4});
    const Tensor x({4}, {0.4, 0.6, 0.5, 0.3});
    Tensor y_tilde({4});
    for (int i = 0; i < 4; ++i) y_tilde[i] = rng.uniform(-0.5, 0.5);

    AttackBudget b = budget();
    const double alpha_adp = 1e-4;
    const Perturbation p =
        adapt_init(model, x, Tensor({4}), y_tilde, alpha_adp, AdaptDirection::Minimize, b);
    const double before = sub(model.final_embedding(x), y_tilde).l2_norm();
    const double after = sub(model.final_embedding(add(x, p.delta)), y_tilde).l2_norm();
    CHECK(after < before);
}

TEST_CASE("gr_attack: sigma 0 with a zero universal delta bit-matches ifgsm") {
    const SequentialModel model = small_trained(39);
    const Tensor x = interior_anchor(64, 40);
    const AttackBudget b = budget(8);
    DatasetSpec ds;
    ds.kind = DatasetKind::Natural;
    ds.count = 6;
    ds.height = 8;
    ds.width = 8;
    ds.seed = 41;
    const Tensor y_tilde = natural_mean_embedding(model, sample_natural(ds));

    AdaptSpec adapt;
    adapt.alpha_adp = from_255(4);
    adapt.y_tilde = y_tilde;
    const Tensor zero_umi({64});

    const AttackResult grat = gr_attack(model, x, b, zero_umi, adapt, 0.0, 4242);
    const Perturbation init =
        adapt_init(model, x, zero_umi, y_tilde, adapt.alpha_adp, adapt.direction, b);
    const AttackResult plain = ifgsm(model, x, b, &init);

    CHECK(bit_equal(grat.perturbation.delta, plain.perturbation.delta));
    CHECK(grat.trace.initial_loss == plain.trace.initial_loss);
    REQUIRE(grat.trace.iterations.size() == plain.trace.iterations.size());
    for (std::size_t k = 0; k < grat.trace.iterations.size(); ++k) {
        CHECK(grat.trace.iterations[k].surrogate_loss ==
              plain.trace.iterations[k].surrogate_loss);
        CHECK(bit_equal(grat.trace.iterations[k].step, plain.trace.iterations[k].step));
    }
    CHECK(grat.trace.best_index == plain.trace.best_index);
}

TEST_CASE("gr_attack: fixed seed reproduces the perturbation bit-exactly") {
    const SequentialModel model = small_trained(43);
    const Tensor x = interior_anchor(64, 44);
    const AttackBudget b = budget(5);
    AdaptSpec adapt;
    adapt.alpha_adp = from_255(4);
    adapt.y_tilde = model.final_embedding(interior_anchor(64, 45));
    Rng rng(46);
    Tensor umi({64});
    for (std::size_t i = 0; i < 64; ++i) umi[i] = rng.uniform(-kEps, kEps);

    const AttackResult a = gr_attack(model, x, b, umi, adapt, 0.5, 777);
    const AttackResult c = gr_attack(model, x, b, umi, adapt, 0.5, 777);
    CHECK(bit_equal(a.perturbation.delta, c.perturbation.delta));
    const AttackResult d = gr_attack(model, x, b, umi, adapt, 0.5, 778);
    CHECK_FALSE(bit_equal(a.perturbation.delta, d.perturbation.delta));
}

TEST_CASE("gr_attack: replaying the stored noise reproduces the run bit-exactly") {
    const SequentialModel model = small_trained(47);
    const Tensor x = interior_anchor(64, 48);
    const AttackBudget b = budget(6);
    AdaptSpec adapt;
    adapt.alpha_adp = from_255(4);
    adapt.y_tilde = model.final_embedding(interior_anchor(64, 49));
    const Tensor umi({64});

    const AttackResult first = gr_attack(model, x, b, umi, adapt, 0.5, 999);
    std::vector<std::vector<double>> noise;
    for (const auto& it : first.trace.iterations) noise.push_back(it.noise);
    const AttackResult replay = gr_attack(model, x, b, umi, adapt, 0.5, 1, &noise);
    CHECK(bit_equal(first.perturbation.delta, replay.perturbation.delta));
    for (std::size_t k = 0; k < first.trace.iterations.size(); ++k)
        CHECK(first.trace.iterations[k].surrogate_loss ==
              replay.trace.iterations[k].surrogate_loss);
}

TEST_CASE("attack feasibility: every iterate respects the ball and the box") {
    const SequentialModel model = small_trained(51);
    Rng rng(52);
    const AttackBudget b = budget(6);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor x({64});
        for (std::size_t i = 0; i < 64; ++i) x[i] = rng.uniform(0.0, 1.0);
        Perturbation init = Perturbation::zero(x, b);
        for (std::size_t i = 0; i < 64; ++i)
            init.delta[i] = rng.uniform(-b.epsilon, b.epsilon);
        init.delta = project(init.delta, x, b);
        const AttackResult res = mifgsm(model, x, b, &init);
        res.perturbation.check_feasible(x);

        // replay the steps to verify every intermediate iterate was feasible
        Tensor cur = init.delta;
        for (const auto& it : res.trace.iterations) {
            cur = add(cur, it.step);
            CHECK(cur.linf_norm() <= b.epsilon + 1e-12);
            for (std::size_t i = 0; i < 64; ++i) {
                CHECK(x[i] + cur[i] >= -1e-12);
                CHECK(x[i] + cur[i] <= 1.0 + 1e-12);
            }
        }
    }
}

TEST_CASE("pooling matrix: identity, averaging, zero padding") {
    const Tensor id = pooling_matrix(4, 4);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 4; ++c) CHECK(id[r * 4 + c] == (r == c ? 1.0 : 0.0));

    const Tensor avg = pooling_matrix(6, 3); // buckets of two
    for (std::size_t r = 0; r < 3; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < 6; ++c) sum += avg[r * 6 + c];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-15));
    }

    const Tensor pad = pooling_matrix(2, 5);
    CHECK(pad[0 * 2 + 0] == 1.0);
    CHECK(pad[1 * 2 + 1] == 1.0);
    for (std::size_t r = 2; r < 5; ++r)
        for (std::size_t c = 0; c < 2; ++c) CHECK(pad[r * 2 + c] == 0.0);
}

TEST_CASE("gr loss handles mixed module widths through pooling") {
    // widths 6 -> 3: intermediate differences are pooled into the embedding
    Rng rng(53);
    Tensor w1({6, 4}), w2({3, 6});
    for (std::size_t i = 0; i < w1.numel(); ++i) w1[i] = rng.uniform(-0.8, 0.8);
    for (std::size_t i = 0; i < w2.numel(); ++i) w2[i] = rng.uniform(-0.8, 0.8);
    const SequentialModel model = linear_model(w1, w2, {4});
    const Tensor x({4}, {0.2, 0.4, 0.6, 0.8});
    const Tensor x_adv({4}, {0.25, 0.35, 0.62, 0.74});
    const std::vector<double> noise{0.8};

    const auto y1 = [&](const Tensor& in) {
        Tensor out({6});
        for (int r = 0; r < 6; ++r) {
            double acc = 0.0;
            for (int c = 0; c < 4; ++c) acc += w1[r * 4 + c] * in[c];
            out[r] = acc;
        }
        return out;
    };
    const auto y2 = [&](const Tensor& in) {
        const Tensor mid = y1(in);
        Tensor out({3});
        for (int r = 0; r < 3; ++r) {
            double acc = 0.0;
            for (int c = 0; c < 6; ++c) acc += w2[r * 6 + c] * mid[c];
            out[r] = acc;
        }
        return out;
    };
    const Tensor d1 = sub(y1(x_adv), y1(x));
    const Tensor d2 = sub(y2(x_adv), y2(x));
    double expect = 0.0;
    for (int k = 0; k < 3; ++k) {
        const double pooled = 0.5 * (d1[2 * k] + d1[2 * k + 1]);
        const double v = d2[k] + noise[0] * pooled; // m-1 = 1
        expect += v * v;
    }
    expect = std::sqrt(expect);
    CHECK(std::abs(gr_loss(model, x, x_adv, noise, 2) - expect) < 1e-12);
}
