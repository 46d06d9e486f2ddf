#include "syrenets/training.hpp"

#include "syrenets/errors.hpp"
#include "syrenets/rng.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <ostream>
#include <thread>

namespace syrenets {

TrainConfig default_train_config(const std::string& method) {
    TrainConfig cfg;
    if (method == "syrenets") {
        cfg.lr_patience = 1000;
    } else if (method == "nn") {
        cfg.lr_patience = 2000;
    } else if (method == "sysid") {
        cfg.lr_decay_enabled = false;
    } else {
        throw UsageError("unknown method: " + method);
    }
    return cfg;
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               double lr, double beta1, double beta2, double eps) {
    if (state.m.size() != params.size()) state.init(params.size());
    state.t += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        const double mh = state.m[i] / bc1;
        const double vh = state.v[i] / bc2;
        params[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
}

std::string metrics_csv_header() {
    return "step,elapsed_s,lr,total,basic,ae,entropy,xent,best_total";
}

namespace {

void append_g17(std::string& s, double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    s += buf;
}

} // namespace

std::string metrics_csv_row(const StepRecord& r) {
    std::string s = std::to_string(r.step);
    s += ',';
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", r.elapsed_s);
    s += buf;
    s += ',';
    append_g17(s, r.lr);
    s += ',';
    append_g17(s, r.loss.total);
    s += ',';
    append_g17(s, r.loss.basic);
    s += ',';
    append_g17(s, r.loss.ae());
    s += ',';
    append_g17(s, r.loss.entropy);
    s += ',';
    append_g17(s, r.loss.cross_entropy);
    s += ',';
    append_g17(s, r.best_total);
    return s;
}

TrainReport train_loop(TrainableModel& model, const Dataset& train, const TrainConfig& cfg,
                       const LossConfig& loss_cfg, std::ostream* metrics,
                       const StopCondition& stop_when) {
    if (train.samples.empty()) throw UsageError("train_loop: empty training set");
    if (cfg.max_steps == TrainConfig::kNoStepBudget && cfg.max_seconds <= 0.0)
        throw UsageError("train_loop: need a step or wall-clock budget");

    ParamStore& params = model.param_store();
    Tape tape(params.values());
    AdamState adam;
    adam.init(params.size());
    LrSchedule schedule(cfg.lr0, cfg.lr_patience, cfg.lr_decay_factor, cfg.lr_floor,
                        cfg.lr_decay_enabled);

    TrainReport report;
    report.best_total = std::numeric_limits<double>::infinity();
    report.best_basic = std::numeric_limits<double>::infinity();
    report.best_params.assign(params.values().begin(), params.values().end());

    if (metrics) *metrics << metrics_csv_header() << '\n';

    Rng shuffle_rng(derive_seed(cfg.seed, 2));
    std::vector<size_t> order(train.samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    size_t cursor = order.size();  // forces an initial shuffle

    double epoch_sum = 0.0, epoch_basic_sum = 0.0;
    size_t epoch_count = 0;
    size_t consecutive_nonfinite = 0;
    std::vector<StateSample> batch;
    std::vector<double> adjoints;

    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&]() {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    if (cfg.max_steps == 0) {
        // zero-step budget: report only initialization metrics
        size_t take = std::min<size_t>(cfg.batch_size, train.samples.size());
        batch.assign(train.samples.begin(), train.samples.begin() + take);
        tape.reset();
        LossIds loss = model.build_loss(tape, batch, loss_cfg);
        report.init_total = loss.values.total;
        report.init_basic = loss.values.basic;
        report.stop_reason = "step budget";
        return report;
    }

    size_t step = 0;
    while (true) {
        if (cfg.max_steps != TrainConfig::kNoStepBudget && step >= cfg.max_steps) {
            report.stop_reason = "step budget";
            break;
        }
        if (cfg.max_seconds > 0.0 && elapsed() >= cfg.max_seconds) {
            report.stop_reason = "wall-clock budget";
            break;
        }
        ++step;

        if (cursor >= order.size()) {  // new epoch: reshuffle, reset running mean
            for (size_t i = order.size() - 1; i > 0; --i) {
                size_t j = static_cast<size_t>(shuffle_rng.next_below(i + 1));
                std::swap(order[i], order[j]);
            }
            cursor = 0;
            epoch_sum = 0.0;
            epoch_basic_sum = 0.0;
            epoch_count = 0;
        }
        size_t take = std::min<size_t>(cfg.batch_size, order.size() - cursor);
        batch.clear();
        for (size_t i = 0; i < take; ++i) batch.push_back(train.samples[order[cursor + i]]);
        cursor += take;

        tape.reset();
        bool finite = true;
        LossIds loss;
        try {
            loss = model.build_loss(tape, batch, loss_cfg);
            finite = std::isfinite(loss.values.total);
        } catch (const NumericError&) {
            finite = false;
            loss.values = LossBreakdown{};
            loss.values.total = std::numeric_limits<double>::quiet_NaN();
        }

        bool improved = false;
        if (finite) {
            if (step == 1) {
                report.init_total = loss.values.total;
                report.init_basic = loss.values.basic;
            }
            epoch_sum += loss.values.total;
            epoch_basic_sum += loss.values.basic;
            epoch_count += 1;
            double running = epoch_sum / static_cast<double>(epoch_count);
            double running_basic = epoch_basic_sum / static_cast<double>(epoch_count);
            report.best_basic = std::min(report.best_basic, running_basic);
            if (running < report.best_total) {
                report.best_total = running;
                report.best_step = step;
                std::copy(params.values().begin(), params.values().end(),
                          report.best_params.begin());
                improved = true;
            }
        } else {
            report.nonfinite_events += 1;
            if (++consecutive_nonfinite >= 50) {
                // params are unrecoverable; keep the last good checkpoint
                report.stop_reason = "numeric blow-up";
                StepRecord rec;
                rec.step = step;
                rec.elapsed_s = cfg.wallclock_in_csv ? elapsed() : 0.0;
                rec.lr = schedule.lr();
                rec.loss = loss.values;
                rec.best_total = report.best_total;
                report.log.push_back(rec);
                if (metrics) *metrics << metrics_csv_row(rec) << '\n';
                break;
            }
        }
        if (finite) consecutive_nonfinite = 0;

        StepRecord rec;
        rec.step = step;
        rec.elapsed_s = cfg.wallclock_in_csv ? elapsed() : 0.0;
        rec.lr = schedule.lr();
        rec.loss = loss.values;
        rec.best_total = report.best_total;
        report.log.push_back(rec);
        if (metrics) *metrics << metrics_csv_row(rec) << '\n';
        if (stop_when && stop_when(report)) {
            report.stop_reason = "stop condition";
            schedule.observe(improved);
            break;
        }

        if (finite) {
            tape.backward(loss.total, adjoints);
            adam_step(params.values(), std::span<const double>(adjoints).first(params.size()),
                      adam, schedule.lr(), cfg.beta1, cfg.beta2, cfg.adam_eps);
        }
        schedule.observe(improved);
    }

    // restore the best state for final evaluation
    std::copy(report.best_params.begin(), report.best_params.end(), params.values().begin());
    report.steps_run = step;
    return report;
}

double evaluate(TrainableModel& model, const Dataset& data, LearnMode mode,
                uint32_t batch_size) {
    if (data.samples.empty()) throw UsageError("evaluate: empty dataset");
    double sse = 0.0;
    size_t count = 0;
    std::vector<double> preds;
    const size_t n = data.n_joints();
    for (size_t start = 0; start < data.samples.size(); start += batch_size) {
        size_t len = std::min<size_t>(batch_size, data.samples.size() - start);
        std::span<const StateSample> batch(data.samples.data() + start, len);
        model.predict(batch, mode, preds);
        for (size_t s = 0; s < len; ++s) {
            if (mode == LearnMode::Direct) {
                double e = preds[s] - batch[s].lagrangian;
                sse += e * e;
                ++count;
            } else {
                for (size_t i = 0; i < n; ++i) {
                    double e = preds[s * n + i] - batch[s].tau[i];
                    sse += e * e;
                    ++count;
                }
            }
        }
    }
    return sse / static_cast<double>(count);
}

size_t sweep_thread_cap() {
    if (const char* env = std::getenv("SYRENETS_THREADS")) {
        long v = std::strtol(env, nullptr, 10);
        if (v > 0) return static_cast<size_t>(v);
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? hw : 1;
}

SweepSummary seed_sweep(const ModelFactory& factory, const Dataset& train,
                        const Dataset& test, size_t n_seeds, uint64_t base_seed,
                        const TrainConfig& cfg, const LossConfig& loss_cfg,
                        const MetricsSink& sink) {
    if (n_seeds < 1) throw UsageError("seed_sweep: need at least one seed");
    SweepSummary summary;
    summary.seeds.resize(n_seeds);

    std::atomic<size_t> next{0};
    size_t n_workers = std::min(sweep_thread_cap(), n_seeds);
    auto worker = [&]() {
        while (true) {
            size_t i = next.fetch_add(1);
            if (i >= n_seeds) return;
            uint64_t seed = base_seed + i;
            SeedResult res;
            res.seed = seed;
            try {
                std::unique_ptr<TrainableModel> model = factory(seed);
                TrainConfig run_cfg = cfg;
                run_cfg.seed = seed;
                std::unique_ptr<std::ostream> out = sink ? sink(seed) : nullptr;
                TrainReport rep = train_loop(*model, train, run_cfg, loss_cfg, out.get());
                res.best_total = rep.best_total;
                res.steps = rep.steps_run;
                res.train_mse = evaluate(*model, train, loss_cfg.mode, cfg.batch_size);
                res.test_mse = evaluate(*model, test, loss_cfg.mode, cfg.batch_size);
            } catch (const std::exception& e) {
                res.failed = true;
                res.error = e.what();
            }
            summary.seeds[i] = std::move(res);
        }
    };
    std::vector<std::thread> pool;
    for (size_t w = 1; w < n_workers; ++w) pool.emplace_back(worker);
    worker();
    for (std::thread& th : pool) th.join();

    // group by train MSE; non-finite train errors sort last
    std::vector<const SeedResult*> ok;
    for (const SeedResult& r : summary.seeds)
        if (!r.failed) ok.push_back(&r);
    std::sort(ok.begin(), ok.end(), [](const SeedResult* a, const SeedResult* b) {
        bool fa = std::isfinite(a->train_mse), fb = std::isfinite(b->train_mse);
        if (fa != fb) return fa;
        return a->train_mse < b->train_mse;
    });

    auto group = [&](const std::string& name, size_t from, size_t len) {
        SweepGroup g;
        g.name = name;
        g.n = len;
        if (len == 0) {
            summary.groups.push_back(g);
            return;
        }
        double tm = 0, em = 0;
        for (size_t i = from; i < from + len; ++i) {
            tm += ok[i]->train_mse;
            em += ok[i]->test_mse;
        }
        tm /= static_cast<double>(len);
        em /= static_cast<double>(len);
        double tv = 0, ev = 0;
        for (size_t i = from; i < from + len; ++i) {
            tv += (ok[i]->train_mse - tm) * (ok[i]->train_mse - tm);
            ev += (ok[i]->test_mse - em) * (ok[i]->test_mse - em);
        }
        g.train_mean = tm;
        g.train_std = std::sqrt(tv / static_cast<double>(len));
        g.test_mean = em;
        g.test_std = std::sqrt(ev / static_cast<double>(len));
        summary.groups.push_back(g);
    };

    const size_t n_ok = ok.size();
    group("best", 0, n_ok > 0 ? 1 : 0);
    size_t five = std::min<size_t>(5, n_ok);
    group("best5", 0, five);
    group("all", 0, n_ok);
    group("worst5", n_ok - five, five);
    return summary;
}

} // namespace syrenets
