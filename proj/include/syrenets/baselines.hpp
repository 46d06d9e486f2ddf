#pragma once

#include "syrenets/expr.hpp"
#include "syrenets/mechanics.hpp"
#include "syrenets/trainable.hpp"

#include <array>
#include <functional>
#include <memory>

namespace syrenets {

// ----------------------------------------------------------------------------
// Euler-Lagrange torques of a black-box Lagrangian via central-difference
// stencils over recorded evaluations at perturbed inputs. The stencil is a
// fixed linear combination of forward evaluations, so parameter gradients
// only need first-order reverse mode. Evaluation points are deduplicated.
// ----------------------------------------------------------------------------
using TapeLagrangian = std::function<TapeValue(Tape&, std::span<const double> q,
                                               std::span<const double> qd)>;
std::vector<TapeValue> el_stencil(Tape& t, const TapeLagrangian& L, const StateSample& s,
                                  double h);

// ----------------------------------------------------------------------------
// NN baseline: plain MLP Lagrangian learner, inputs (q, qd).
// ----------------------------------------------------------------------------
struct MlpConfig {
    uint32_t n_joints = 2;
    uint32_t n_hidden_layers = 5;
    uint32_t width = 300;
    double stencil_h = 1e-3;

    uint32_t in_dim() const { return 2 * n_joints; }
    size_t n_params() const {
        size_t n = (in_dim() + 1ull) * width;  // first layer + bias
        n += (n_hidden_layers - 1ull) * (width + 1ull) * width;
        n += width + 1;  // scalar head
        return n;
    }
};

class MlpModel : public TrainableModel {
public:
    MlpModel(const MlpConfig& cfg, uint64_t param_seed);

    std::string kind() const override { return "nn"; }
    ParamStore& param_store() override { return params_; }
    const MlpConfig& config() const { return cfg_; }

    // scalar Lagrangian estimate per sample
    std::vector<TapeValue> forward_values(Tape& t, std::span<const StateSample> batch) const;
    TapeValue forward_one(Tape& t, std::span<const double> q,
                          std::span<const double> qd) const;
    // torques through the finite-difference Euler-Lagrange stencil
    std::vector<TapeValue> indirect_torques(Tape& t, std::span<const StateSample> batch,
                                            double h) const;

    LossIds build_loss(Tape& t, std::span<const StateSample> batch,
                       const LossConfig& cfg) override;
    void predict(std::span<const StateSample> batch, LearnMode mode,
                 std::vector<double>& out) override;

private:
    MlpConfig cfg_;
    ParamStore params_;
    struct Layer {
        size_t w, b;
        uint32_t rows, cols;
    };
    std::vector<Layer> layers_;
};

// ----------------------------------------------------------------------------
// SysId baseline: a constant-input estimator network produces
// (m1, l1, m2, l2); predicted torque is the exact symbolic Euler-Lagrange of
// the structural double-pendulum Lagrangian instantiated with the estimates.
// ----------------------------------------------------------------------------
class SysIdModel : public TrainableModel {
public:
    explicit SysIdModel(uint64_t param_seed, double g = 9.81);

    std::string kind() const override { return "sysid"; }
    ParamStore& param_store() override { return params_; }

    // (m1, l1, m2, l2) from the ones-input network
    std::array<TapeValue, 4> estimates(Tape& t) const;
    std::array<double, 4> estimate_values() const;
    // Plants the true parameters: useful as an exactness oracle.
    void set_exact(const PendulumParams& p);

    LossIds build_loss(Tape& t, std::span<const StateSample> batch,
                       const LossConfig& cfg) override;
    void predict(std::span<const StateSample> batch, LearnMode mode,
                 std::vector<double>& out) override;

    const ExprStore& store() const { return store_; }
    std::span<const ExprId> tau_exprs() const { return taus_; }

private:
    std::vector<double> el_states(std::span<const StateSample> batch) const;

    ParamStore params_;
    size_t w1_ = 0, w2_ = 0;
    ExprStore store_;
    ExprId lhat_ = kNoExpr;
    std::vector<ExprId> taus_;
    std::unique_ptr<BatchEvaluator> tau_eval_;
    std::unique_ptr<BatchEvaluator> l_eval_;
};

} // namespace syrenets
