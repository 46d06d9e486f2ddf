#include "syrenets/cli.hpp"

#include "syrenets/baselines.hpp"
#include "syrenets/errors.hpp"
#include "syrenets/expr_tape.hpp"
#include "syrenets/mechanics.hpp"
#include "syrenets/model.hpp"
#include "syrenets/rng.hpp"
#include "syrenets/training.hpp"

#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace syrenets {

namespace fs = std::filesystem;

namespace {

constexpr const char* kUsage = R"(usage: syrenets <command> [--flags]

commands:
  gen-data   sample a double-pendulum dataset (train.csv + test.csv)
             --out DIR --count N --test-count N --seed S
             [--range-lo R --range-hi R --m1 --l1 --m2 --l2 --g]
  train      train a model
             --method syrenets|nn|sysid --mode direct|indirect
             --data DIR --out DIR --seed S (--steps N | --seconds T)
             [--batch-size N --lr0 X --patience N --lambda1 X --lambda2 X
              --lambda3 X --skip-test-eval 1]
  eval       evaluate a checkpoint
             --method M --mode M --checkpoint FILE --data DIR [--split train|test]
  extract    print/extract learned equations from a checkpoint
             --checkpoint FILE --data DIR [--mode soft|argmax|both]
             [--ref-count N --out FILE]
  gradcheck  reverse-mode gradients vs central differences on a fresh init
             [--method syrenets|nn|sysid|all --mode M --slots N --h X
              --tol X --atol X --seed S]
  sweep      multi-seed protocol with best/5-best/all/5-worst summary
             --method M --mode M --data DIR --out DIR --seeds N --seed BASE
             (--steps N | --seconds T)

Any command accepts --config FILE with key=value lines; command-line flags
override file values. SYRENETS_THREADS caps sweep parallelism.
)";

// ----------------------------------------------------------------------------
// Option handling: defaults < config file < command-line flags.
// ----------------------------------------------------------------------------
class Opts {
public:
    Opts(int argc, const char* const* argv, const std::set<std::string>& allowed) {
        std::map<std::string, std::string> flags;
        for (int i = 0; i < argc; ++i) {
            std::string arg = argv[i];
            if (arg.rfind("--", 0) != 0)
                throw UsageError("unexpected argument '" + arg + "'");
            arg = arg.substr(2);
            std::string value;
            size_t eq = arg.find('=');
            if (eq != std::string::npos) {
                value = arg.substr(eq + 1);
                arg = arg.substr(0, eq);
            } else {
                if (i + 1 >= argc) throw UsageError("flag --" + arg + " needs a value");
                value = argv[++i];
            }
            if (arg != "config" && !allowed.count(arg))
                throw UsageError("unknown flag --" + arg);
            flags[arg] = value;
        }
        auto cfg_it = flags.find("config");
        if (cfg_it != flags.end()) {
            std::ifstream in(cfg_it->second);
            if (!in) throw UsageError("cannot open config file: " + cfg_it->second);
            std::string line;
            size_t lineno = 0;
            while (std::getline(in, line)) {
                ++lineno;
                if (!line.empty() && line.back() == '\r') line.pop_back();
                if (line.empty() || line[0] == '#') continue;
                size_t eq = line.find('=');
                if (eq == std::string::npos)
                    throw ParseError("config line is not key=value: " + line, lineno);
                std::string key = line.substr(0, eq);
                if (!allowed.count(key))
                    throw UsageError("unknown config key '" + key + "'");
                kv_.emplace(key, line.substr(eq + 1));
            }
        }
        for (auto& [k, v] : flags) kv_[k] = v;  // flags win
    }

    bool has(const std::string& k) const { return kv_.count(k) > 0; }
    std::string get(const std::string& k, const std::string& fallback) {
        auto it = kv_.find(k);
        if (it == kv_.end()) {
            resolved_[k] = fallback;
            return fallback;
        }
        resolved_[k] = it->second;
        return it->second;
    }
    double get_d(const std::string& k, double fallback) {
        return has(k) ? std::stod(get(k, "")) : (get(k, format_g(fallback)), fallback);
    }
    long long get_i(const std::string& k, long long fallback) {
        return has(k) ? std::stoll(get(k, "")) : (get(k, std::to_string(fallback)), fallback);
    }
    const std::map<std::string, std::string>& resolved() const { return resolved_; }

    static std::string format_g(double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return buf;
    }

private:
    std::map<std::string, std::string> kv_;
    std::map<std::string, std::string> resolved_;
};

void write_manifest(const fs::path& dir, const std::string& command, const Opts& opts) {
    std::ofstream out(dir / "manifest.txt");
    if (!out) throw UsageError("cannot write manifest in " + dir.string());
    std::time_t now = std::time(nullptr);
    char stamp[64];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    out << "command " << command << '\n';
    out << "timestamp " << stamp << '\n';  // excluded from identity comparisons
    for (const auto& [k, v] : opts.resolved()) out << k << " " << v << '\n';
}

LearnMode parse_mode(const std::string& mode) {
    if (mode == "direct") return LearnMode::Direct;
    if (mode == "indirect") return LearnMode::Indirect;
    throw UsageError("unknown mode '" + mode + "' (want direct|indirect)");
}

std::unique_ptr<TrainableModel> make_model(const std::string& method, uint64_t seed) {
    uint64_t init_seed = derive_seed(seed, 1);
    if (method == "syrenets") return std::make_unique<SyrenetsModel>(ArchConfig{}, init_seed);
    if (method == "nn") return std::make_unique<MlpModel>(MlpConfig{}, init_seed);
    if (method == "sysid") return std::make_unique<SysIdModel>(init_seed);
    throw UsageError("unknown method '" + method + "' (want syrenets|nn|sysid)");
}

Dataset load_split(const fs::path& data_dir, const char* split) {
    fs::path p = data_dir / (std::string(split) + ".csv");
    if (!fs::exists(p))
        throw UsageError("missing dataset: " + p.string() + " (run gen-data first)");
    return load_dataset(p.string());
}

// Shared by train/sweep: budgets and optimizer settings from flags.
TrainConfig resolve_train_config(const std::string& method, Opts& opts) {
    TrainConfig cfg = default_train_config(method);
    // default seed 1; SysId diverges from the seed-0 init
    cfg.seed = static_cast<uint64_t>(opts.get_i("seed", 1));
    long long steps = opts.get_i("steps", -1);
    double seconds = opts.get_d("seconds", 0.0);
    if (steps >= 0) cfg.max_steps = static_cast<size_t>(steps);
    if (seconds > 0) {
        cfg.max_seconds = seconds;
        cfg.wallclock_in_csv = true;
    }
    if (steps < 0 && seconds <= 0)
        throw UsageError("need a budget: --steps N or --seconds T");
    cfg.batch_size = static_cast<uint32_t>(opts.get_i("batch-size", 32));
    cfg.lr0 = opts.get_d("lr0", cfg.lr0);
    cfg.lr_patience = static_cast<uint32_t>(opts.get_i("patience", cfg.lr_patience));
    return cfg;
}

LossConfig resolve_loss_config(Opts& opts, const std::string& default_mode = "indirect") {
    LossConfig lc;
    lc.mode = parse_mode(opts.get("mode", default_mode));
    lc.lambda1 = opts.get_d("lambda1", lc.lambda1);
    lc.lambda2 = opts.get_d("lambda2", lc.lambda2);
    lc.lambda3 = opts.get_d("lambda3", lc.lambda3);
    return lc;
}

// Soft-form expressions of the full model print astronomically long; keep the
// file sane with a node budget and say what was omitted.
constexpr size_t kSoftPrintNodeBudget = 20000;

void write_equations(std::ostream& out, SyrenetsModel& model,
                     std::span<const StateSample> reference, const std::string& mode) {
    if (mode == "argmax" || mode == "both") {
        ExprId eq = model.extract_equation(ExtractMode::Argmax, reference);
        out << "argmax: " << model.store().pretty(eq) << '\n';
    }
    if (mode == "soft" || mode == "both") {
        ExprId eq = model.extract_equation(ExtractMode::Soft, reference);
        size_t nodes = model.store().count_reachable(eq);
        if (nodes <= kSoftPrintNodeBudget)
            out << "soft: " << model.store().pretty(eq) << '\n';
        else
            out << "# soft form omitted: " << nodes << " DAG nodes exceed the "
                << kSoftPrintNodeBudget << "-node print budget\n";
    }
}

// ----------------------------------------------------------------------------
// gen-data
// ----------------------------------------------------------------------------
int cmd_gen_data(Opts& opts) {
    fs::path out_dir = opts.get("out", "data");
    size_t count = static_cast<size_t>(opts.get_i("count", 32000));
    size_t test_count = static_cast<size_t>(opts.get_i("test-count", 10000));
    uint64_t seed = static_cast<uint64_t>(opts.get_i("seed", 0));
    double lo = opts.get_d("range-lo", -M_PI / 2);
    double hi = opts.get_d("range-hi", M_PI / 2);
    PendulumParams p;
    p.m1 = opts.get_d("m1", p.m1);
    p.l1 = opts.get_d("l1", p.l1);
    p.m2 = opts.get_d("m2", p.m2);
    p.l2 = opts.get_d("l2", p.l2);
    p.g = opts.get_d("g", p.g);
    p.validate();

    fs::create_directories(out_dir);
    Dataset train = sample_dataset(count, seed, lo, hi, p);
    Dataset test = sample_dataset(test_count, derive_seed(seed, 3), lo, hi, p);
    save_dataset(train, (out_dir / "train.csv").string());
    save_dataset(test, (out_dir / "test.csv").string());
    write_manifest(out_dir, "gen-data", opts);

    auto stats = [](const Dataset& ds, auto&& get) {
        double m = 0, s = 0;
        for (const StateSample& x : ds.samples) m += get(x);
        m /= std::max<size_t>(1, ds.size());
        for (const StateSample& x : ds.samples) s += (get(x) - m) * (get(x) - m);
        s = std::sqrt(s / std::max<size_t>(1, ds.size()));
        return std::pair{m, s};
    };
    auto [lm, ls] = stats(train, [](const StateSample& s) { return s.lagrangian; });
    auto [tm, ts] = stats(train, [](const StateSample& s) { return s.tau[0]; });
    std::printf("wrote %zu train / %zu test samples to %s\n", train.size(), test.size(),
                out_dir.string().c_str());
    std::printf("train lagrangian mean %.6g sd %.6g; tau1 mean %.6g sd %.6g\n", lm, ls, tm,
                ts);
    return 0;
}

// ----------------------------------------------------------------------------
// train
// ----------------------------------------------------------------------------
int cmd_train(Opts& opts) {
    std::string method = opts.get("method", "");
    if (method.empty()) throw UsageError("train: --method is required");
    LossConfig lc = resolve_loss_config(opts);
    TrainConfig cfg = resolve_train_config(method, opts);
    fs::path data_dir = opts.get("data", "data");
    fs::path out_dir = opts.get("out", "runs/" + method);
    bool skip_test = opts.get_i("skip-test-eval", 0) != 0;

    Dataset train = load_split(data_dir, "train");
    fs::create_directories(out_dir);
    write_manifest(out_dir, "train", opts);

    std::unique_ptr<TrainableModel> model = make_model(method, cfg.seed);
    std::ofstream metrics(out_dir / "metrics.csv");
    if (!metrics) throw UsageError("cannot write metrics.csv in " + out_dir.string());
    TrainReport report = train_loop(*model, train, cfg, lc, &metrics);
    metrics.close();

    CheckpointMeta meta;
    meta.set("kind", method);
    meta.set("mode", opts.get("mode", "indirect"));
    meta.set("seed", std::to_string(cfg.seed));
    meta.set("step", std::to_string(report.best_step));
    meta.set("best_loss", Opts::format_g(report.best_total));
    save_checkpoint((out_dir / "best.ckpt").string(), meta, model->param_store());

    double test_mse = std::numeric_limits<double>::quiet_NaN();
    if (!skip_test && report.steps_run > 0 && report.stop_reason != "numeric blow-up") {
        Dataset test = load_split(data_dir, "test");
        test_mse = evaluate(*model, test, lc.mode, cfg.batch_size);
    }

    {
        std::ofstream rep(out_dir / "report.txt");
        rep << "method " << method << "\nmode " << opts.get("mode", "indirect") << "\nseed "
            << cfg.seed << "\nsteps_run " << report.steps_run << "\nstop_reason "
            << report.stop_reason << "\ninit_total " << Opts::format_g(report.init_total)
            << "\ninit_basic " << Opts::format_g(report.init_basic) << "\nbest_total "
            << Opts::format_g(report.best_total) << "\nbest_basic "
            << Opts::format_g(report.best_basic) << "\nbest_step " << report.best_step
            << "\nnonfinite_events " << report.nonfinite_events << "\ntest_mse "
            << Opts::format_g(test_mse) << '\n';
    }

    if (method == "syrenets" && report.steps_run > 0) {
        auto* sm = dynamic_cast<SyrenetsModel*>(model.get());
        std::ofstream eq(out_dir / "equations.txt");
        size_t ref = std::min<size_t>(cfg.batch_size, train.size());
        write_equations(eq, *sm, std::span<const StateSample>(train.samples.data(), ref),
                        "both");
    }

    std::printf("%s/%s seed %llu: steps %zu best_total %.6g best_basic %.6g test_mse %.6g\n",
                method.c_str(), opts.get("mode", "indirect").c_str(),
                static_cast<unsigned long long>(cfg.seed), report.steps_run,
                report.best_total, report.best_basic, test_mse);
    if (report.stop_reason == "numeric blow-up") {
        std::fprintf(stderr, "training blew up; last-good checkpoint retained\n");
        return 3;
    }
    return 0;
}

// ----------------------------------------------------------------------------
// eval
// ----------------------------------------------------------------------------
int cmd_eval(Opts& opts) {
    std::string method = opts.get("method", "");
    if (method.empty()) throw UsageError("eval: --method is required");
    std::string ckpt = opts.get("checkpoint", "");
    if (ckpt.empty()) throw UsageError("eval: --checkpoint is required");
    LearnMode mode = parse_mode(opts.get("mode", "indirect"));
    fs::path data_dir = opts.get("data", "data");
    std::string split = opts.get("split", "test");

    std::unique_ptr<TrainableModel> model = make_model(method, 0);
    load_checkpoint(ckpt, model->param_store());
    Dataset ds = load_split(data_dir, split.c_str());
    double mse = evaluate(*model, ds, mode,
                          static_cast<uint32_t>(opts.get_i("batch-size", 32)));
    std::printf("%s_mse %.17g\n", split.c_str(), mse);
    return 0;
}

// ----------------------------------------------------------------------------
// extract
// ----------------------------------------------------------------------------
int cmd_extract(Opts& opts) {
    std::string ckpt = opts.get("checkpoint", "");
    if (ckpt.empty()) throw UsageError("extract: --checkpoint is required");
    fs::path data_dir = opts.get("data", "data");
    std::string mode = opts.get("mode", "both");
    if (mode != "soft" && mode != "argmax" && mode != "both")
        throw UsageError("extract: --mode must be soft|argmax|both");
    size_t ref_count = static_cast<size_t>(opts.get_i("ref-count", 32));

    auto model = std::make_unique<SyrenetsModel>(ArchConfig{}, 0);
    load_checkpoint(ckpt, model->param_store());
    Dataset train = load_split(data_dir, "train");
    if (train.size() < 2) throw UsageError("extract: reference data too small");
    ref_count = std::min(ref_count, train.size());
    std::span<const StateSample> ref(train.samples.data(), ref_count);

    std::string out_path = opts.get("out", "");
    if (out_path.empty()) {
        write_equations(std::cout, *model, ref, mode);
    } else {
        std::ofstream out(out_path);
        if (!out) throw UsageError("cannot write " + out_path);
        write_equations(out, *model, ref, mode);
    }
    return 0;
}

// ----------------------------------------------------------------------------
// gradcheck
// ----------------------------------------------------------------------------
int cmd_gradcheck(Opts& opts) {
    std::string method = opts.get("method", "all");
    uint64_t seed = static_cast<uint64_t>(opts.get_i("seed", 0));
    size_t n_slots = static_cast<size_t>(opts.get_i("slots", 50));
    double tol = opts.get_d("tol", 1e-4);
    double atol = opts.get_d("atol", 1e-5);

    std::vector<std::string> methods;
    if (method == "all") methods = {"syrenets", "nn", "sysid"};
    else methods = {method};

    Dataset ds = sample_dataset(32, derive_seed(seed, 7));
    bool all_ok = true;
    for (const std::string& m : methods) {
        std::vector<std::string> modes{"direct", "indirect"};
        if (m == "sysid") modes = {"indirect", "direct"};
        for (const std::string& mode_s : modes) {
            LossConfig lc;
            lc.mode = parse_mode(mode_s);
            // stencil-based losses need a larger probe step (1/h^2 noise)
            double h = opts.get_d("h", (m == "nn" && lc.mode == LearnMode::Indirect)
                                           ? 1e-3
                                           : 1e-5);
            std::unique_ptr<TrainableModel> model = make_model(m, seed);
            Rng rng(derive_seed(seed, 11));
            std::vector<size_t> slots;
            for (size_t i = 0; i < n_slots; ++i)
                slots.push_back(rng.next_below(model->param_store().size()));
            GradcheckReport rep = gradcheck(
                [&](Tape& t) { return model->build_loss(t, ds.samples, lc).total; },
                model->param_store().values(), h, tol, slots);
            size_t bad = 0;
            for (const GradcheckEntry& e : rep.entries)
                if (!(e.rel_err < tol || e.abs_err < atol)) {
                    ++bad;
                    std::fprintf(stderr,
                                 "  slot %zu analytic %.8g numeric %.8g rel %.3g abs %.3g\n",
                                 e.slot, e.analytic, e.numeric, e.rel_err, e.abs_err);
                }
            std::printf("gradcheck %s/%s: %zu slots, max_rel %.3g, %zu failures\n",
                        m.c_str(), mode_s.c_str(), rep.n_checked, rep.max_rel_err, bad);
            all_ok = all_ok && bad == 0;
        }
    }
    return all_ok ? 0 : 3;
}

// ----------------------------------------------------------------------------
// sweep
// ----------------------------------------------------------------------------
int cmd_sweep(Opts& opts) {
    std::string method = opts.get("method", "");
    if (method.empty()) throw UsageError("sweep: --method is required");
    LossConfig lc = resolve_loss_config(opts);
    TrainConfig cfg = resolve_train_config(method, opts);
    size_t n_seeds = static_cast<size_t>(opts.get_i("seeds", 10));
    fs::path data_dir = opts.get("data", "data");
    fs::path out_dir = opts.get("out", "sweeps/" + method);

    Dataset train = load_split(data_dir, "train");
    Dataset test = load_split(data_dir, "test");
    fs::create_directories(out_dir);
    write_manifest(out_dir, "sweep", opts);

    ModelFactory factory = [&](uint64_t seed) { return make_model(method, seed); };
    MetricsSink sink = [&](uint64_t seed) -> std::unique_ptr<std::ostream> {
        fs::path dir = out_dir / ("seed" + std::to_string(seed));
        fs::create_directories(dir);
        return std::make_unique<std::ofstream>(dir / "metrics.csv");
    };
    SweepSummary summary =
        seed_sweep(factory, train, test, n_seeds, cfg.seed, cfg, lc, sink);

    {
        std::ofstream seeds_csv(out_dir / "seeds.csv");
        seeds_csv << "seed,status,train_mse,test_mse,best_total,steps\n";
        for (const SeedResult& r : summary.seeds) {
            seeds_csv << r.seed << ',' << (r.failed ? "failed" : "ok") << ','
                      << Opts::format_g(r.train_mse) << ',' << Opts::format_g(r.test_mse)
                      << ',' << Opts::format_g(r.best_total) << ',' << r.steps << '\n';
            if (r.failed)
                std::fprintf(stderr, "seed %llu failed: %s\n",
                             static_cast<unsigned long long>(r.seed), r.error.c_str());
        }
        std::ofstream sum_csv(out_dir / "summary.csv");
        sum_csv << "group,split,mse_mean,mse_std,n\n";
        for (const SweepGroup& g : summary.groups) {
            sum_csv << g.name << ",train," << Opts::format_g(g.train_mean) << ','
                    << Opts::format_g(g.train_std) << ',' << g.n << '\n';
            sum_csv << g.name << ",test," << Opts::format_g(g.test_mean) << ','
                    << Opts::format_g(g.test_std) << ',' << g.n << '\n';
        }
    }
    for (const SweepGroup& g : summary.groups)
        std::printf("%-7s n=%zu train %.6g (+/- %.3g)  test %.6g (+/- %.3g)\n",
                    g.name.c_str(), g.n, g.train_mean, g.train_std, g.test_mean, g.test_std);
    return 0;
}

const std::set<std::string> kGenKeys{"out", "count", "test-count", "seed", "range-lo",
                                     "range-hi", "m1", "l1", "m2", "l2", "g"};
const std::set<std::string> kTrainKeys{"method", "mode", "data", "out", "seed", "steps",
                                       "seconds", "batch-size", "lr0", "patience",
                                       "lambda1", "lambda2", "lambda3", "skip-test-eval"};
const std::set<std::string> kEvalKeys{"method", "mode", "checkpoint", "data", "split",
                                      "batch-size"};
const std::set<std::string> kExtractKeys{"checkpoint", "data", "mode", "ref-count", "out"};
const std::set<std::string> kGradKeys{"method", "mode", "slots", "h", "tol", "atol",
                                      "seed"};
const std::set<std::string> kSweepKeys{"method", "mode", "data", "out", "seed", "seeds",
                                       "steps", "seconds", "batch-size", "lr0", "patience",
                                       "lambda1", "lambda2", "lambda3"};

} // namespace

int run_cli(int argc, const char* const* argv) {
    try {
        if (argc < 2) {
            std::fputs(kUsage, stderr);
            return 2;
        }
        std::string cmd = argv[1];
        int rest_argc = argc - 2;
        const char* const* rest = argv + 2;
        if (cmd == "gen-data") {
            Opts o(rest_argc, rest, kGenKeys);
            return cmd_gen_data(o);
        }
        if (cmd == "train") {
            Opts o(rest_argc, rest, kTrainKeys);
            return cmd_train(o);
        }
        if (cmd == "eval") {
            Opts o(rest_argc, rest, kEvalKeys);
            return cmd_eval(o);
        }
        if (cmd == "extract") {
            Opts o(rest_argc, rest, kExtractKeys);
            return cmd_extract(o);
        }
        if (cmd == "gradcheck") {
            Opts o(rest_argc, rest, kGradKeys);
            return cmd_gradcheck(o);
        }
        if (cmd == "sweep") {
            Opts o(rest_argc, rest, kSweepKeys);
            return cmd_sweep(o);
        }
        if (cmd == "--help" || cmd == "help") {
            std::fputs(kUsage, stdout);
            return 0;
        }
        std::fprintf(stderr, "unknown command '%s'\n%s", cmd.c_str(), kUsage);
        return 2;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 3;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const ParseError& e) {
        std::fprintf(stderr, "parse error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}

} // namespace syrenets
