#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "support/engineer.hpp"
#include "syrenets/baselines.hpp"
#include "syrenets/errors.hpp"
#include "syrenets/expr_tape.hpp"
#include "syrenets/mechanics.hpp"
#include "syrenets/model.hpp"
#include "syrenets/objective.hpp"
#include "syrenets/rng.hpp"

#include <cmath>

using namespace syrenets;

namespace {

ArchConfig small_config() {
    ArchConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 3;
    cfg.latent_dim = 6;
    cfg.selection_hidden = 8;
    cfg.ae_hidden1 = 16;
    cfg.ae_hidden2 = 16;
    return cfg;
}

// per-slot acceptance: relative error below tol, with an absolute guard for
// slots whose true gradient sits at the FD noise floor
bool slot_ok(const GradcheckEntry& e, double rtol, double atol) {
    return e.rel_err < rtol || e.abs_err < atol;
}

} // namespace

TEST_CASE("mse_loss basics") {
    std::vector<double> params;
    Tape t(params);
    std::vector<TapeValue> preds{t.constant(2.0)};
    std::vector<double> targets{2.0};
    CHECK(mse_loss(t, preds, targets).value == 0.0);

    // constant prediction 0 against L = 2 on a 1-sample batch
    std::vector<TapeValue> zero{t.constant(0.0)};
    CHECK(mse_loss(t, zero, targets).value == 4.0);

    std::vector<TapeValue> bad{t.constant(std::numeric_limits<double>::quiet_NaN())};
    CHECK_THROWS_AS(mse_loss(t, bad, targets), NumericError);
}

TEST_CASE("indirect loss with ground-truth structural parameters is ~0") {
    SysIdModel sysid(3);
    sysid.set_exact(PendulumParams{});
    Dataset ds = sample_dataset(64, 17);
    Tape t(sysid.param_store().values());
    LossConfig lc;
    lc.mode = LearnMode::Indirect;
    LossIds loss = sysid.build_loss(t, ds.samples, lc);
    CHECK(loss.values.total < 1e-18);
}

TEST_CASE("ae loss terms") {
    std::vector<double> params;
    Tape t(params);
    // perfect reconstruction + zero Jacobian
    std::vector<TapeValue> recon{t.constant(0.0)};
    std::vector<TapeValue> pen{t.constant(0.0)};
    AeTermIds z = ae_loss_terms(t, recon, pen, 1.0);
    CHECK(z.reconstruction.value == 0.0);
    CHECK(z.contraction.value == 0.0);

    std::vector<TapeValue> r2{t.constant(0.25), t.constant(0.5)};
    std::vector<TapeValue> p2{t.constant(3.0), t.constant(4.0)};
    AeTermIds a = ae_loss_terms(t, r2, p2, 0.0);  // lambda1 = 0: reconstruction only
    CHECK(a.reconstruction.value == 0.75);
    CHECK(a.contraction.value == 0.0);
    AeTermIds b = ae_loss_terms(t, r2, p2, 0.5);
    CHECK(b.contraction.value == doctest::Approx(3.5).epsilon(1e-12));
}

TEST_CASE("complementary terms") {
    std::vector<double> params;
    Tape t(params);
    const uint32_t d_o = 304;

    // phi = 1, uniform P: H = ln(d_o)
    IdSpan uni{0, 1, d_o};
    for (uint32_t b = 0; b < d_o; ++b) {
        TapeValue v = t.constant(1.0 / d_o);
        if (b == 0) uni.first = v.id;
    }

    SUBCASE("single head per layer: no cross-entropy") {
        std::vector<std::vector<IdSpan>> gated{{uni}};
        CompTermIds c = complementary_terms(t, gated, 1e-12);
        CHECK(c.cross_entropy.value == 0.0);
        CHECK(c.entropy.value == doctest::Approx(std::log(304.0)).epsilon(1e-6));
        CHECK(std::fabs(c.entropy.value - 5.7170) < 1e-3);
    }

    SUBCASE("two identical heads: each ordered pair contributes H(P)") {
        std::vector<std::vector<IdSpan>> gated{{uni, uni}};
        CompTermIds c = complementary_terms(t, gated, 1e-12);
        // entropy: 2 H ; cross-entropy: both ordered pairs = 2 H
        CHECK(c.entropy.value == doctest::Approx(2 * std::log(304.0)).epsilon(1e-6));
        CHECK(c.cross_entropy.value == doctest::Approx(c.entropy.value).epsilon(1e-12));
    }
}

TEST_CASE("total assembly: weights, signs and exact breakdown") {
    ArchConfig cfg = small_config();
    SyrenetsModel model(cfg, 7);
    Dataset ds = sample_dataset(16, 5);
    LossConfig lc;
    lc.mode = LearnMode::Direct;

    SUBCASE("lambda2 = lambda3 = 0 reduces to the basic + AE loss") {
        lc.lambda2 = 0.0;
        lc.lambda3 = 0.0;
        Tape t(model.params().values());
        LossIds loss = model.build_loss(t, ds.samples, lc);
        CHECK(loss.values.entropy == 0.0);
        CHECK(loss.values.cross_entropy == 0.0);
        CHECK(loss.values.total ==
              doctest::Approx(loss.values.basic + loss.values.ae()).epsilon(1e-12));
    }

    SUBCASE("breakdown sums to the recorded total") {
        Tape t(model.params().values());
        LossIds loss = model.build_loss(t, ds.samples, lc);
        double sum = loss.values.basic + loss.values.reconstruction +
                     loss.values.contraction + loss.values.entropy -
                     loss.values.cross_entropy;
        CHECK(std::fabs(sum - loss.values.total) <= 1e-12 * std::fabs(loss.values.total));
        CHECK(loss.values.basic >= 0.0);
        CHECK(loss.values.reconstruction >= 0.0);
        CHECK(loss.values.contraction >= 0.0);
    }
}

TEST_CASE("total loss gradients match finite differences on random slots") {
    ArchConfig cfg = small_config();
    SyrenetsModel model(cfg, 21);
    Dataset ds = sample_dataset(32, 77);
    Rng rng(13);

    for (LearnMode mode : {LearnMode::Direct, LearnMode::Indirect}) {
        LossConfig lc;
        lc.mode = mode;
        std::vector<size_t> slots;
        for (int i = 0; i < 50; ++i)
            slots.push_back(rng.next_below(model.params().size()));
        GradcheckReport rep = gradcheck(
            [&](Tape& t) { return model.build_loss(t, ds.samples, lc).total; },
            model.params().values(), 1e-5, 1e-4, slots);
        size_t ok = 0;
        for (const GradcheckEntry& e : rep.entries)
            if (slot_ok(e, 1e-4, 1e-5)) ++ok;
        CHECK(ok == rep.entries.size());
    }
}

TEST_CASE("every parameter block receives gradient somewhere") {
    ArchConfig cfg = small_config();
    SyrenetsModel model(cfg, 33);
    Dataset ds = sample_dataset(24, 3);

    for (LearnMode mode : {LearnMode::Direct, LearnMode::Indirect}) {
        LossConfig lc;
        lc.mode = mode;
        Tape t(model.params().values());
        LossIds loss = model.build_loss(t, ds.samples, lc);
        std::vector<double> adj;
        t.backward(loss.total, adj);
        for (const ParamBlock& b : model.params().blocks()) {
            double norm = 0.0;
            for (size_t i = 0; i < b.count(); ++i) norm += std::fabs(adj[b.offset + i]);
            INFO(b.name);
            CHECK(norm > 0.0);
        }
    }
}
