// Acceptance suite: one pass/fail line per criterion, exit 1 on any failure.
// An optional list of criterion numbers on the command line runs a subset.

#include "support/engineer.hpp"
#include "support/expr_parse.hpp"
#include "syrenets/baselines.hpp"
#include "syrenets/cli.hpp"
#include "syrenets/expr_tape.hpp"
#include "syrenets/mechanics.hpp"
#include "syrenets/model.hpp"
#include "syrenets/rng.hpp"
#include "syrenets/training.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>
#include <unistd.h>

using namespace syrenets;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

double rel_unit(double a, double b) {
    return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1.0});
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

size_t worker_count() { return std::min<size_t>(sweep_thread_cap(), 10); }

// ---------------------------------------------------------------------------
// 1. Symbolic Euler-Lagrange torques vs the FD inverse-dynamics oracle.
// ---------------------------------------------------------------------------
Outcome criterion1() {
    Pendulum p = Pendulum::make();
    LagrangianFn L = [&](std::span<const double> q, std::span<const double> qd) {
        std::vector<double> st{q[0], q[1], qd[0], qd[1], 0.0, 0.0};
        return p.store.eval(p.lagrangian, st);
    };
    Rng rng(20260809);
    double max_rel = 0.0;
    for (int i = 0; i < 1000; ++i) {
        std::vector<double> st(6);
        for (double& x : st) x = rng.uniform(-M_PI / 2, M_PI / 2);
        std::vector<double> fd = inverse_dynamics_fd(
            L, std::span<const double>(st).subspan(0, 2),
            std::span<const double>(st).subspan(2, 2),
            std::span<const double>(st).subspan(4, 2), 1e-4);
        for (int j = 0; j < 2; ++j)
            max_rel = std::max(max_rel, rel_unit(p.store.eval(p.taus[j], st), fd[j]));
    }
    return {max_rel < 1e-5, fmt("max rel err %.3g over 1000 states (tol 1e-5, h=1e-4)",
                                max_rel)};
}

// ---------------------------------------------------------------------------
// 2. Reverse-mode gradients vs central differences for all three losses.
// ---------------------------------------------------------------------------
Outcome criterion2() {
    Dataset ds = sample_dataset(32, 424242);
    Rng rng(7);
    std::string detail;
    bool pass = true;

    auto check = [&](const char* name, TrainableModel& model, LearnMode mode, double h,
                     size_t n_slots) {
        LossConfig lc;
        lc.mode = mode;
        std::vector<size_t> slots;
        for (size_t i = 0; i < n_slots; ++i)
            slots.push_back(rng.next_below(model.param_store().size()));
        // plus a few deterministic high-signal slots (first weight, output head)
        slots.push_back(0);
        slots.push_back(model.param_store().size() - 1);
        slots.push_back(model.param_store().size() - 2);
        GradcheckReport rep = gradcheck(
            [&](Tape& t) { return model.build_loss(t, ds.samples, lc).total; },
            model.param_store().values(), h, 1e-4, slots);
        // slots whose true gradient sits at the FD rounding floor pass on the
        // absolute guard; everything else must meet the relative tolerance
        size_t bad = 0, guarded = 0;
        double rel_clean = 0.0;
        for (const GradcheckEntry& e : rep.entries) {
            if (e.rel_err < 1e-4) {
                rel_clean = std::max(rel_clean, e.rel_err);
            } else if (e.abs_err < 1e-5) {
                ++guarded;
            } else {
                ++bad;
            }
        }
        pass = pass && bad == 0;
        detail += fmt("%s %zu/%zu ok (%zu tiny-grad via abs guard, clean max_rel %.2g); ",
                      name, rep.n_checked - bad, rep.n_checked, guarded, rel_clean);
    };

    SyrenetsModel syr(ArchConfig{}, 99);
    check("syrenets/indirect", syr, LearnMode::Indirect, 1e-4, 50);
    check("syrenets/direct", syr, LearnMode::Direct, 1e-4, 50);
    MlpModel mlp(MlpConfig{}, 99);
    check("nn/direct", mlp, LearnMode::Direct, 1e-5, 50);
    check("nn/indirect", mlp, LearnMode::Indirect, 1e-3, 50);  // stencil noise floor
    SysIdModel sysid(99);
    check("sysid/indirect", sysid, LearnMode::Indirect, 1e-5, 50);
    return {pass, detail + "(rel tol 1e-4, abs guard 1e-5)"};
}

// ---------------------------------------------------------------------------
// 3. SysId scaled reproduction: >= 8/10 seeds below 1e-6 train torque MSE
//    within 20000 steps; divergent seeds reported.
// ---------------------------------------------------------------------------
Outcome criterion3() {
    Dataset train = sample_dataset(32000, 0);
    Dataset test = sample_dataset(10000, derive_seed(0, 3));
    TrainConfig cfg = default_train_config("sysid");
    cfg.max_steps = 20000;
    LossConfig lc;
    lc.mode = LearnMode::Indirect;
    ModelFactory factory = [](uint64_t seed) {
        return std::make_unique<SysIdModel>(derive_seed(seed, 1));
    };
    SweepSummary sw = seed_sweep(factory, train, test, 10, 0, cfg, lc);
    size_t ok = 0;
    std::string divergent;
    for (const SeedResult& r : sw.seeds) {
        if (!r.failed && r.train_mse < 1e-6) ++ok;
        else divergent += fmt("seed %llu mse %.3g; ", (unsigned long long)r.seed,
                              r.train_mse);
    }
    std::string detail = fmt("%zu/10 seeds < 1e-6 within 20000 steps", ok);
    if (!divergent.empty()) detail += " | divergent (reported, permitted): " + divergent;
    return {ok >= 8, detail};
}

// ---------------------------------------------------------------------------
// 4/5. SyReNets smoke: on >= 8/10 seeds the basic MSE term (the quantity the
// result tables report) falls 100x from its step-1 value within 30 CPU-min or
// 50000 steps, whichever first; selection distributions stay valid.
// ---------------------------------------------------------------------------
struct SmokeSeed {
    uint64_t seed = 0;
    bool reached = false;
    bool valid = true;
    size_t steps = 0;
    double ratio = 0.0;
    std::string error;
};

double trailing_basic_mean(const TrainReport& rep, size_t window) {
    size_t n = std::min(window, rep.log.size());
    if (n == 0) return std::numeric_limits<double>::infinity();
    double acc = 0.0;
    for (size_t i = rep.log.size() - n; i < rep.log.size(); ++i)
        acc += rep.log[i].loss.basic;
    return acc / static_cast<double>(n);
}

bool validate_distributions(SyrenetsModel& model, std::span<const StateSample> batch) {
    Tape tape(model.params().values());
    ForwardTrace tr = model.forward(tape, batch);
    const uint32_t d_o = model.config().n_candidates();
    for (const LayerTrace& L : tr.layers)
        for (const HeadTrace& H : L.heads) {
            double sum = 0.0;
            for (uint32_t b = 0; b < d_o; ++b) {
                double p = tape.value(H.P.id_at(b));
                if (p < 0.0) return false;
                sum += p;
            }
            if (std::fabs(sum - 1.0) > 1e-9) return false;
            if (!(H.phi.value > 0.0 && H.phi.value < 1.0)) return false;
        }
    return true;
}

Outcome smoke(LearnMode mode, const char* tag, std::string* equation_file_out) {
    Dataset train = sample_dataset(32000, 0);
    std::vector<SmokeSeed> seeds(10);
    std::atomic<size_t> next{0};
    std::atomic<bool> equation_written{false};
    std::string eq_path =
        "/tmp/syrenets_accept_eq_" + std::to_string(::getpid()) + ".txt";

    auto worker = [&]() {
        while (true) {
            size_t i = next.fetch_add(1);
            if (i >= seeds.size()) return;
            SmokeSeed& out = seeds[i];
            out.seed = i;
            try {
                SyrenetsModel model(ArchConfig{}, derive_seed(i, 1));
                TrainConfig cfg = default_train_config("syrenets");
                cfg.seed = i;
                cfg.max_steps = 50000;
                cfg.max_seconds = 1800.0;  // 30 CPU-minutes, whichever first
                LossConfig lc;
                lc.mode = mode;
                StopCondition stop = [&](const TrainReport& rep) {
                    if (rep.log.size() < 20) return false;
                    return trailing_basic_mean(rep, 100) <= rep.init_basic / 100.0;
                };
                TrainReport rep = train_loop(model, train, cfg, lc, nullptr, stop);
                out.steps = rep.steps_run;
                double tail = trailing_basic_mean(rep, 100);
                out.ratio = rep.init_basic / tail;
                out.reached = rep.stop_reason == "stop condition" ||
                              tail <= rep.init_basic / 100.0 ||
                              rep.best_basic <= rep.init_basic / 100.0;
                out.valid = validate_distributions(
                    model, std::span<const StateSample>(train.samples.data(), 32));
                if (mode == LearnMode::Indirect && out.reached &&
                    !equation_written.exchange(true)) {
                    ExprId eq = model.extract_equation(
                        ExtractMode::Argmax,
                        std::span<const StateSample>(train.samples.data(), 32));
                    std::ofstream f(eq_path);
                    f << "argmax: " << model.store().pretty(eq) << '\n';
                }
            } catch (const std::exception& e) {
                out.error = e.what();
                out.reached = false;
            }
        }
    };
    std::vector<std::thread> pool;
    for (size_t w = 1; w < worker_count(); ++w) pool.emplace_back(worker);
    worker();
    for (std::thread& th : pool) th.join();

    size_t ok = 0, valid = 0;
    std::string per_seed;
    for (const SmokeSeed& s : seeds) {
        if (s.reached) ++ok;
        if (s.valid) ++valid;
        per_seed += fmt("s%llu:%zu steps %.0fx%s; ", (unsigned long long)s.seed, s.steps,
                        s.ratio, s.valid ? "" : " INVALID");
    }
    if (equation_file_out) *equation_file_out = eq_path;
    bool pass = ok >= 8 && valid == seeds.size();
    return {pass, fmt("%s: %zu/10 seeds reached 100x, %zu/10 valid | ", tag, ok, valid) +
                      per_seed};
}

Outcome criterion4() {
    std::string ignored;
    Outcome o = smoke(LearnMode::Direct, "direct", nullptr);

    // magnitude ordering vs the NN baseline at an equal step budget
    // (reported, not gated)
    Dataset train = sample_dataset(32000, 0);
    TrainConfig cfg = default_train_config("nn");
    cfg.max_steps = 600;
    cfg.seed = 0;
    LossConfig lc;
    lc.mode = LearnMode::Direct;
    MlpModel mlp(MlpConfig{}, derive_seed(0, 1));
    TrainReport nn = train_loop(mlp, train, cfg, lc);

    SyrenetsModel syr(ArchConfig{}, derive_seed(0, 1));
    TrainConfig scfg = default_train_config("syrenets");
    scfg.max_steps = 600;
    scfg.seed = 0;
    TrainReport sr = train_loop(syr, train, scfg, lc);
    o.detail += fmt(" | 600-step basic MSE (reported, not gated): syrenets %.4g vs nn %.4g",
                    sr.best_basic, nn.best_basic);
    return o;
}

Outcome criterion5() {
    std::string eq_path;
    Outcome o = smoke(LearnMode::Indirect, "indirect", &eq_path);
    // the extracted argmax equation file parses back
    std::ifstream f(eq_path);
    std::string line;
    bool parsed = false;
    std::string text;
    if (std::getline(f, line) && line.rfind("argmax: ", 0) == 0) {
        text = line.substr(8);
        try {
            ExprStore store(StateLayout{2});
            ExprId e = syrenets::testing::parse_expr(store, text);
            parsed = store.pretty(e) == text;
        } catch (const std::exception&) {
            parsed = false;
        }
    }
    o.pass = o.pass && parsed;
    o.detail += parsed ? " | argmax equation file parses back"
                       : " | ARGMAX EQUATION FILE MISSING OR UNPARSEABLE";
    std::remove(eq_path.c_str());
    return o;
}

// ---------------------------------------------------------------------------
// 6. Architecture invariants.
// ---------------------------------------------------------------------------
Outcome criterion6() {
    if (candidate_slots(4).size() != 28 || candidate_slots(16).size() != 304)
        return {false, "candidate counts wrong"};

    ArchConfig cfg;
    SyrenetsModel model(cfg, 2024);
    Dataset ds = sample_dataset(32, 11);
    Tape tape(model.params().values());
    ForwardTrace tr = model.forward(tape, ds.samples);
    const uint32_t d_o = cfg.n_candidates();

    double worst_sum = 0.0;
    for (const LayerTrace& L : tr.layers)
        for (const HeadTrace& H : L.heads) {
            double sum = 0.0;
            for (uint32_t b = 0; b < d_o; ++b) {
                double p = tape.value(H.P.id_at(b));
                if (p < 0.0) return {false, "negative selection probability"};
                sum += p;
            }
            worst_sum = std::max(worst_sum, std::fabs(sum - 1.0));
            if (!(H.phi.value > 0.0 && H.phi.value < 1.0))
                return {false, "gate left (0,1)"};
        }
    if (worst_sum > 1e-9) return {false, fmt("P sums off by %.3g", worst_sum)};

    // joint probability == elementwise product
    for (const LayerTrace& L : tr.layers)
        for (uint32_t b = 0; b < d_o; b += 13) {
            double prod = 1.0;
            for (const HeadTrace& H : L.heads) prod *= tape.value(H.P.id_at(b));
            if (std::fabs(L.joint[b].value - prod) > 1e-12 * std::max(1.0, prod))
                return {false, "joint probability != product"};
        }

    // similarity symmetric and batch-permutation invariant
    std::vector<StateSample> perm(ds.samples.rbegin(), ds.samples.rend());
    Tape tape2(model.params().values());
    ForwardTrace tr2 = model.forward(tape2, perm);
    double worst_perm = 0.0;
    for (uint32_t l = 0; l < cfg.n_layers; ++l) {
        const LayerTrace& L = tr.layers[l];
        for (uint32_t a = 0; a < cfg.latent_dim; ++a)
            for (uint32_t b = 0; b < cfg.latent_dim; ++b) {
                if (L.similarity[a * cfg.latent_dim + b].id !=
                    L.similarity[b * cfg.latent_dim + a].id)
                    return {false, "similarity not symmetric"};
                worst_perm = std::max(
                    worst_perm,
                    std::fabs(L.similarity[a * cfg.latent_dim + b].value -
                              tr2.layers[l].similarity[a * cfg.latent_dim + b].value));
            }
    }
    if (worst_perm > 1e-12)
        return {false, fmt("similarity changed %.3g under permutation", worst_perm)};
    return {true, fmt("P sums within %.2g; gates interior; d_o 28/304; joint = product; "
                      "permutation drift %.2g",
                      worst_sum, worst_perm)};
}

// ---------------------------------------------------------------------------
// 7. Dual-path consistency over 10 random configurations.
// ---------------------------------------------------------------------------
Outcome criterion7() {
    double max_diff = 0.0;
    for (uint64_t seed = 1; seed <= 10; ++seed) {
        SyrenetsModel model(ArchConfig{}, derive_seed(seed, 5));
        Dataset ds = sample_dataset(32, seed);
        Tape tape(model.params().values());
        ForwardTrace tr = model.forward(tape, ds.samples);
        std::vector<double> coeffs = model.coeff_values(tape, tr);
        BatchEvaluator& fe = model.fhat_evaluator();
        std::vector<double> states(32 * 6), out(32);
        for (size_t s = 0; s < 32; ++s) {
            const StateSample& smp = ds.samples[s];
            double* row = states.data() + s * 6;
            row[0] = smp.q[0];
            row[1] = smp.q[1];
            row[2] = smp.qdot[0];
            row[3] = smp.qdot[1];
            row[4] = smp.qddot[0];
            row[5] = smp.qddot[1];
        }
        fe.eval(states, 6, 32, coeffs, out);
        for (size_t s = 0; s < 32; ++s)
            max_diff = std::max(max_diff, std::fabs(out[s] - tr.fhat[s].value));
    }
    return {max_diff < 1e-9, fmt("max |numeric - symbolic| = %.3g over 10 configs x 32 "
                                 "samples (tol 1e-9)",
                                 max_diff)};
}

// ---------------------------------------------------------------------------
// 8. Extraction round trip on the engineered (1/2) qd1^2 parameter set.
// ---------------------------------------------------------------------------
Outcome criterion8() {
    SyrenetsModel model(ArchConfig{}, 3030);
    syrenets::testing::engineer_half_qd1_squared(model);
    Dataset ds = sample_dataset(32, 44);
    ExprId eq = model.extract_equation(ExtractMode::Argmax, ds.samples);
    std::string text = model.store().pretty(eq);
    if (text != "0.5*qd1*qd1")
        return {false, "extracted '" + text + "' != '0.5*qd1*qd1'"};

    // indirect MSE against a free-particle dataset (tau = (qdd1, 0))
    std::vector<ExprId> taus = model.store().euler_lagrange(eq);
    double mse = 0.0;
    Rng rng(5);
    for (int i = 0; i < 256; ++i) {
        std::vector<double> st(6);
        for (double& x : st) x = rng.uniform(-M_PI / 2, M_PI / 2);
        double t1 = model.store().eval(taus[0], st);
        double t2 = model.store().eval(taus[1], st);
        mse += (t1 - st[4]) * (t1 - st[4]) + t2 * t2;
    }
    mse /= 512.0;
    return {mse < 1e-18, fmt("string '0.5*qd1*qd1' ok; free-particle torque MSE %.3g "
                             "(tol 1e-18)",
                             mse)};
}

// ---------------------------------------------------------------------------
// 9. Exact contractive penalty vs the FD Jacobian estimate.
// ---------------------------------------------------------------------------
Outcome criterion9() {
    Rng rng(606);
    double worst = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
        const uint32_t d_in = 7, h1 = 9, h2 = 8, d_out = 4;
        std::vector<double> W1(h1 * d_in), b1(h1), W2(h2 * h1), b2(h2), W3(d_out * h2),
            b3(d_out);
        for (auto* blk : {&W1, &b1, &W2, &b2, &W3, &b3})
            for (double& v : *blk) v = rng.uniform(-0.9, 0.9);
        std::vector<StackLayerRef> enc{{W1.data(), b1.data(), h1, d_in, true},
                                       {W2.data(), b2.data(), h2, h1, true},
                                       {W3.data(), b3.data(), d_out, h2, false}};
        std::vector<double> v(d_in);
        for (double& x : v) x = rng.uniform(-1, 1);
        double exact = stack_jacobian_fro2(enc, v.data());
        const double h = 1e-5;
        double fd = 0.0;
        std::vector<double> up, dn;
        for (uint32_t c = 0; c < d_in; ++c) {
            std::vector<double> vp(v), vm(v);
            vp[c] += h;
            vm[c] -= h;
            stack_eval(enc, vp, up);
            stack_eval(enc, vm, dn);
            for (uint32_t r = 0; r < d_out; ++r) {
                double jc = (up[r] - dn[r]) / (2 * h);
                fd += jc * jc;
            }
        }
        worst = std::max(worst, std::fabs(exact - fd) / std::max({exact, fd, 1e-30}));
    }
    return {worst < 1e-4, fmt("max rel err %.3g over 5 random encoders (tol 1e-4)", worst)};
}

// ---------------------------------------------------------------------------
// 10. Byte-identical reruns of metrics CSVs.
// ---------------------------------------------------------------------------
std::string slurp_file(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Silences the CLI's progress prints while the criterion drives it in-process.
struct StdoutMute {
    int saved;
    StdoutMute() {
        std::fflush(stdout);
        saved = dup(1);
        FILE* nul = std::fopen("/dev/null", "w");
        dup2(fileno(nul), 1);
        std::fclose(nul);
    }
    ~StdoutMute() {
        std::fflush(stdout);
        dup2(saved, 1);
        close(saved);
    }
};

Outcome criterion10() {
    fs::path root = fs::path("/tmp") / ("syrenets_accept10_" + std::to_string(::getpid()));
    fs::create_directories(root);
    StdoutMute mute;
    auto cli = [&](std::vector<std::string> args) {
        std::vector<std::string> owned{"syrenets"};
        owned.insert(owned.end(), args.begin(), args.end());
        std::vector<const char*> argv;
        for (const std::string& s : owned) argv.push_back(s.c_str());
        return run_cli(static_cast<int>(argv.size()), argv.data());
    };
    bool pass = true;
    std::string detail;

    if (cli({"gen-data", "--out", (root / "d1").string(), "--count", "256", "--test-count",
             "64", "--seed", "5"}) != 0 ||
        cli({"gen-data", "--out", (root / "d2").string(), "--count", "256", "--test-count",
             "64", "--seed", "5"}) != 0)
        return {false, "gen-data failed"};
    pass = pass && slurp_file(root / "d1/train.csv") == slurp_file(root / "d2/train.csv");
    detail += pass ? "gen-data identical; " : "gen-data DIFFERS; ";

    for (const char* method : {"sysid", "syrenets"}) {
        std::string steps = std::string(method) == "sysid" ? "200" : "25";
        for (const char* run : {"r1", "r2"}) {
            if (cli({"train", "--method", method, "--mode", "indirect", "--data",
                     (root / "d1").string(), "--out",
                     (root / (std::string(method) + run)).string(), "--seed", "7",
                     "--steps", steps, "--skip-test-eval", "1"}) != 0)
                return {false, std::string(method) + " train failed"};
        }
        bool same = slurp_file(root / (std::string(method) + "r1") / "metrics.csv") ==
                    slurp_file(root / (std::string(method) + "r2") / "metrics.csv");
        pass = pass && same;
        detail += std::string(method) + (same ? " metrics identical; " : " DIFFERS; ");
    }
    fs::remove_all(root);
    return {pass, detail};
}

} // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

    struct Entry {
        int id;
        const char* name;
        Outcome (*fn)();
        double budget_s;  // 0 = no stated runtime cap
    };
    const Entry entries[] = {
        {1, "oracle agreement (symbolic EL vs FD inverse dynamics)", criterion1, 30},
        {2, "gradient correctness (reverse mode vs FD, all losses)", criterion2, 120},
        {3, "sysid scaled reproduction (8/10 seeds < 1e-6 in 20k steps)", criterion3, 900},
        {4, "syrenets direct-mode smoke (100x basic-MSE decrease, 8/10)", criterion4, 0},
        {5, "syrenets indirect-mode smoke (100x + argmax equation file)", criterion5, 0},
        {6, "architecture invariants", criterion6, 10},
        {7, "dual-path consistency (numeric vs symbolic fhat)", criterion7, 0},
        {8, "extraction round trip ((1/2) qd1^2)", criterion8, 0},
        {9, "contractive penalty exactness vs FD", criterion9, 0},
        {10, "determinism (byte-identical metrics reruns)", criterion10, 0},
    };

    bool all_pass = true;
    for (const Entry& e : entries) {
        if (!only.empty() && !only.count(e.id)) continue;
        auto t0 = Clock::now();
        Outcome o;
        try {
            o = e.fn();
        } catch (const std::exception& ex) {
            o = {false, std::string("exception: ") + ex.what()};
        }
        double secs = std::chrono::duration<double>(Clock::now() - t0).count();
        if (e.budget_s > 0 && secs > e.budget_s) {
            o.pass = false;
            o.detail += fmt(" | RUNTIME %.1fs exceeds the %.0fs budget", secs, e.budget_s);
        }
        std::printf("[%s] criterion %d: %s — %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", e.id,
                    e.name, o.detail.c_str(), secs);
        std::fflush(stdout);
        all_pass = all_pass && o.pass;
    }
    return all_pass ? 0 : 1;
}
