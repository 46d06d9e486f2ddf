#pragma once

#include "syrenets/mechanics.hpp"
#include "syrenets/objective.hpp"
#include "syrenets/trainable.hpp"

#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace syrenets {

struct TrainConfig {
    uint32_t batch_size = 32;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    double lr0 = 1e-3;
    double lr_floor = 1e-5;
    double lr_decay_factor = 10.0;
    uint32_t lr_patience = 1000;
    bool lr_decay_enabled = true;
    static constexpr size_t kNoStepBudget = static_cast<size_t>(-1);
    size_t max_steps = kNoStepBudget;
    double max_seconds = 0.0;  // 0 = no wall-clock budget
    uint64_t seed = 0;
    // Step budgets are the reproducible mode: elapsed_s is written as 0 so
    // reruns are byte-identical. Wall-clock runs log real elapsed time.
    bool wallclock_in_csv = false;
};

// Per-method defaults: SyReNets decays every 1000 non-improving steps, the NN
// baseline every 2000, SysId keeps lr constant at 1e-3.
TrainConfig default_train_config(const std::string& method);

struct AdamState {
    std::vector<double> m, v;
    size_t t = 0;
    void init(size_t n) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
        t = 0;
    }
};

// Bias-corrected Adam with eps = 1e-8.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// Counter resets on improvement; hitting the patience divides lr by the
// factor down to the floor.
class LrSchedule {
public:
    LrSchedule(double lr0, uint32_t patience, double factor, double floor, bool enabled)
        : lr_(lr0), factor_(factor), floor_(floor), patience_(patience), enabled_(enabled) {}
    double lr() const { return lr_; }
    void observe(bool improved) {
        if (improved) {
            counter_ = 0;
            return;
        }
        if (!enabled_) return;
        if (++counter_ >= patience_) {
            lr_ = std::max(lr_ / factor_, floor_);
            counter_ = 0;
        }
    }

private:
    double lr_, factor_, floor_;
    uint32_t patience_, counter_ = 0;
    bool enabled_;
};

struct StepRecord {
    size_t step = 0;
    double elapsed_s = 0.0;
    double lr = 0.0;
    LossBreakdown loss;
    double best_total = 0.0;
};

struct TrainReport {
    std::vector<StepRecord> log;
    double init_total = 0.0;  // first-step loss, before any update
    double init_basic = 0.0;
    double best_total = 0.0;  // best running-epoch-average total
    double best_basic = 0.0;  // best running-epoch-average basic term
    size_t best_step = 0;
    std::vector<double> best_params;  // snapshot of the best state
    size_t steps_run = 0;
    size_t nonfinite_events = 0;
    std::string stop_reason;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const StepRecord& r);

// Seeded shuffle each epoch; improvement = strict decrease of the running
// epoch average of the total loss; the best state is snapshotted before the
// update that follows it and restored at the end. Non-finite losses skip the
// update, count as non-improving and are logged. stop_when (optional) is
// polled after every logged step and ends the run when it returns true.
using StopCondition = std::function<bool(const TrainReport&)>;
TrainReport train_loop(TrainableModel& model, const Dataset& train, const TrainConfig& cfg,
                       const LossConfig& loss_cfg, std::ostream* metrics = nullptr,
                       const StopCondition& stop_when = {});

// Mean squared error over the full set, in minibatch order (deterministic).
double evaluate(TrainableModel& model, const Dataset& data, LearnMode mode,
                uint32_t batch_size = 32);

// ----------------------------------------------------------------------------
// Seed sweeps (Tables 1-2 protocol): independent seeds, grouped as
// best / 5 best / all / 5 worst by train MSE.
// ----------------------------------------------------------------------------
struct SeedResult {
    uint64_t seed = 0;
    bool failed = false;
    std::string error;
    double train_mse = 0.0;
    double test_mse = 0.0;
    double best_total = 0.0;
    size_t steps = 0;
};

struct SweepGroup {
    std::string name;
    size_t n = 0;
    double train_mean = 0.0, train_std = 0.0;
    double test_mean = 0.0, test_std = 0.0;
};

struct SweepSummary {
    std::vector<SeedResult> seeds;   // in seed order; failures flagged
    std::vector<SweepGroup> groups;  // best, best5, all, worst5
};

using ModelFactory = std::function<std::unique_ptr<TrainableModel>(uint64_t seed)>;
// Sink receives the per-seed metrics stream (may return null). Seeds run in
// parallel worker threads capped by SYRENETS_THREADS; results merge in seed
// order. Individual failures are recorded, never silently dropped.
using MetricsSink = std::function<std::unique_ptr<std::ostream>(uint64_t seed)>;

SweepSummary seed_sweep(const ModelFactory& factory, const Dataset& train,
                        const Dataset& test, size_t n_seeds, uint64_t base_seed,
                        const TrainConfig& cfg, const LossConfig& loss_cfg,
                        const MetricsSink& sink = {});

size_t sweep_thread_cap();

} // namespace syrenets
