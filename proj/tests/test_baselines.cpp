#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "syrenets/baselines.hpp"
#include "syrenets/expr_tape.hpp"
#include "syrenets/mechanics.hpp"
#include "syrenets/rng.hpp"
#include "syrenets/training.hpp"

#include <cmath>

using namespace syrenets;

namespace {

MlpConfig tiny_mlp() {
    MlpConfig cfg;
    cfg.n_hidden_layers = 2;
    cfg.width = 12;
    return cfg;
}

} // namespace

TEST_CASE("mlp shapes and zero-weight output") {
    MlpConfig cfg;  // the real baseline: 5 x 300 softplus
    MlpModel mlp(cfg, 1);
    CHECK(mlp.param_store().size() == cfg.n_params());
    CHECK(cfg.n_params() == 363001);

    MlpModel tiny(tiny_mlp(), 2);
    tiny.param_store().fill(0.0);
    Dataset ds = sample_dataset(8, 1);
    Tape t(tiny.param_store().values());
    std::vector<TapeValue> out = tiny.forward_values(t, ds.samples);
    for (const TapeValue& v : out) CHECK(v.value == 0.0);
}

TEST_CASE("mlp gradcheck against finite differences") {
    MlpModel mlp(tiny_mlp(), 5);
    Dataset ds = sample_dataset(8, 9);
    Rng rng(3);
    std::vector<size_t> slots;
    for (int i = 0; i < 20; ++i) slots.push_back(rng.next_below(mlp.param_store().size()));

    SUBCASE("direct loss") {
        LossConfig lc;
        lc.mode = LearnMode::Direct;
        GradcheckReport rep = gradcheck(
            [&](Tape& t) { return mlp.build_loss(t, ds.samples, lc).total; },
            mlp.param_store().values(), 1e-5, 1e-5, slots);
        size_t ok = 0;
        for (const GradcheckEntry& e : rep.entries)
            if (e.rel_err < 1e-5 || e.abs_err < 1e-7) ++ok;
        CHECK(ok == rep.entries.size());
    }
    SUBCASE("indirect loss") {
        // the 1/h^2 stencil amplifies evaluation rounding ~2.5e5x, so the FD
        // probe step must be large enough to clear that noise floor
        LossConfig lc;
        lc.mode = LearnMode::Indirect;
        GradcheckReport rep = gradcheck(
            [&](Tape& t) { return mlp.build_loss(t, ds.samples, lc).total; },
            mlp.param_store().values(), 1e-3, 1e-4, slots);
        size_t ok = 0;
        for (const GradcheckEntry& e : rep.entries)
            if (e.rel_err < 1e-4 || e.abs_err < 1e-5) ++ok;
        CHECK(ok == rep.entries.size());
    }
}

TEST_CASE("el_stencil: engineered quadratic Lagrangian gives tau = qdd") {
    // L = qd1^2 / 2: the stencil is exact for quadratics up to rounding
    TapeLagrangian L = [](Tape& t, std::span<const double>, std::span<const double> qd) {
        TapeValue v = t.constant(qd[0]);
        return t.mul_const(t.mul(v, v), 0.5);
    };
    Rng rng(7);
    std::vector<double> params;
    for (int i = 0; i < 10; ++i) {
        StateSample s;
        s.q = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
        s.qdot = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
        s.qddot = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
        s.tau = {0, 0};
        Tape t(params);
        std::vector<TapeValue> tau = el_stencil(t, L, s, 1e-3);
        CHECK(tau[0].value == doctest::Approx(s.qddot[0]).epsilon(1e-7));
        CHECK(std::fabs(tau[1].value) < 1e-7);
    }
}

TEST_CASE("el_stencil matches the symbolic EL on the ground truth") {
    Pendulum p = Pendulum::make();
    TapeLagrangian L = [&](Tape& t, std::span<const double> q, std::span<const double> qd) {
        std::vector<double> st{q[0], q[1], qd[0], qd[1], 0, 0};
        return t.constant(p.store.eval(p.lagrangian, st));
    };
    Dataset ds = sample_dataset(50, 19);
    std::vector<double> params;
    double max_rel = 0.0;
    for (const StateSample& s : ds.samples) {
        Tape t(params);
        std::vector<TapeValue> tau = el_stencil(t, L, s, 1e-3);
        for (int j = 0; j < 2; ++j) {
            double rel = std::fabs(tau[j].value - s.tau[j]) /
                         std::max({std::fabs(tau[j].value), std::fabs(s.tau[j]), 1.0});
            max_rel = std::max(max_rel, rel);
        }
    }
    CHECK(max_rel < 1e-3);
}

TEST_CASE("el_stencil error shrinks ~4x when h halves") {
    // smooth non-quadratic Lagrangian with a known closed-form torque
    auto Lval = [](double q1, double qd1) { return std::sin(qd1) * std::cos(q1); };
    TapeLagrangian L = [&](Tape& t, std::span<const double> q, std::span<const double> qd) {
        return t.constant(Lval(q[0], qd[0]));
    };
    StateSample s;
    s.q = {0.4, 0.0};
    s.qdot = {0.7, 0.0};
    s.qddot = {1.3, 0.0};
    s.tau = {0, 0};
    // tau1 = d/dt (cos(qd1) cos(q1)) - (-sin(qd1) sin(q1))
    //      = -sin(qd1) cos(q1) qdd1 ... plus the cross term
    double exact = -std::sin(s.qdot[0]) * std::cos(s.q[0]) * s.qddot[0] -
                   std::cos(s.qdot[0]) * std::sin(s.q[0]) * s.qdot[0] +
                   std::sin(s.qdot[0]) * std::sin(s.q[0]);
    std::vector<double> params;
    auto err_at = [&](double h) {
        Tape t(params);
        return std::fabs(el_stencil(t, L, s, h)[0].value - exact);
    };
    double e1 = err_at(2e-3);
    double e2 = err_at(1e-3);
    CHECK(e1 / e2 == doctest::Approx(4.0).epsilon(0.5));
}

TEST_CASE("sysid: exact parameters reproduce torques exactly") {
    SysIdModel sysid(11);
    sysid.set_exact(PendulumParams{});
    std::array<double, 4> est = sysid.estimate_values();
    CHECK(est[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(est[1] == doctest::Approx(2.67).epsilon(1e-12));
    CHECK(est[2] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(est[3] == doctest::Approx(1.67).epsilon(1e-12));

    Dataset ds = sample_dataset(128, 23);
    Tape t(sysid.param_store().values());
    LossConfig lc;
    lc.mode = LearnMode::Indirect;
    CHECK(sysid.build_loss(t, ds.samples, lc).values.total < 1e-18);

    // perturbing one estimate makes the loss strictly positive
    auto w2 = sysid.param_store().block_values("est.w2");
    w2[0] += 0.1 / std::log(2.0);  // shifts m1 by ~0.1
    Tape t2(sysid.param_store().values());
    CHECK(sysid.build_loss(t2, ds.samples, lc).values.total > 1e-4);
}

TEST_CASE("sysid: loss gradient w.r.t. the four estimates matches FD") {
    SysIdModel sysid(13);
    Dataset ds = sample_dataset(16, 29);
    // estimates enter as tape leaves directly
    BatchEvaluator taus(sysid.store(), sysid.tau_exprs());
    std::vector<double> states(ds.size() * 6);
    std::vector<double> targets(ds.size() * 2);
    for (size_t s = 0; s < ds.size(); ++s) {
        const StateSample& smp = ds.samples[s];
        double* row = states.data() + s * 6;
        row[0] = smp.q[0];
        row[1] = smp.q[1];
        row[2] = smp.qdot[0];
        row[3] = smp.qdot[1];
        row[4] = smp.qddot[0];
        row[5] = smp.qddot[1];
        targets[s * 2] = smp.tau[0];
        targets[s * 2 + 1] = smp.tau[1];
    }
    std::vector<double> point{2.0, 2.0, 0.8, 1.2};
    GradcheckReport rep = gradcheck(
        [&](Tape& t) {
            std::vector<uint32_t> ids{0, 1, 2, 3};
            TapeValue first = make_expr_batch_node(t, taus, states, 6, ds.size(), ids);
            std::vector<TapeValue> preds;
            for (size_t i = 0; i < targets.size(); ++i) {
                uint32_t id = first.id + static_cast<uint32_t>(i);
                preds.push_back({id, t.value(id)});
            }
            return mse_loss(t, preds, targets);
        },
        point, 1e-5, 1e-5);
    CHECK(rep.passed);
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("sysid: full network gradcheck") {
    SysIdModel sysid(17);
    Dataset ds = sample_dataset(16, 31);
    LossConfig lc;
    lc.mode = LearnMode::Indirect;
    Rng rng(2);
    std::vector<size_t> slots;
    for (int i = 0; i < 25; ++i) slots.push_back(rng.next_below(sysid.param_store().size()));
    GradcheckReport rep = gradcheck(
        [&](Tape& t) { return sysid.build_loss(t, ds.samples, lc).total; },
        sysid.param_store().values(), 1e-5, 1e-4, slots);
    size_t ok = 0;
    for (const GradcheckEntry& e : rep.entries)
        if (e.rel_err < 1e-4 || e.abs_err < 1e-6) ++ok;
    CHECK(ok == rep.entries.size());
}

TEST_CASE("mlp direct training is stable: 10x decrease early on most seeds") {
    Dataset ds = sample_dataset(4096, 55);
    size_t reached = 0;
    for (uint64_t seed = 0; seed < 10; ++seed) {
        MlpModel mlp(MlpConfig{}, derive_seed(seed, 1));
        TrainConfig cfg = default_train_config("nn");
        cfg.seed = seed;
        cfg.max_steps = 500;  // well inside the first 2000 steps
        LossConfig lc;
        lc.mode = LearnMode::Direct;
        StopCondition stop = [](const TrainReport& rep) {
            return rep.log.size() >= 5 &&
                   rep.log.back().loss.total <= rep.init_total / 10.0;
        };
        TrainReport rep = train_loop(mlp, ds, cfg, lc, nullptr, stop);
        if (rep.stop_reason == "stop condition" ||
            rep.best_total <= rep.init_total / 10.0)
            ++reached;
    }
    CHECK(reached >= 8);
}
