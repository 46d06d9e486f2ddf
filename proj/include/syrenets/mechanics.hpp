#pragma once

#include "syrenets/expr.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace syrenets {

// Double-pendulum constants. g is a config default (overridable), the rest
// follow the reference experiment.
struct PendulumParams {
    double m1 = 3.0;
    double l1 = 2.67;
    double m2 = 1.0;
    double l2 = 1.67;
    double g = 9.81;

    void validate() const;  // all strictly positive
};

// One draw of (q, qdot, qddot, tau, L); torque comes from the symbolic
// Euler-Lagrange of the ground-truth Lagrangian (exact, not simulated).
struct StateSample {
    std::vector<double> q, qdot, qddot, tau;
    double lagrangian = 0.0;
};

struct Dataset {
    std::vector<StateSample> samples;
    uint64_t seed = 0;
    double range_lo = 0.0, range_hi = 0.0;
    PendulumParams params;

    size_t size() const { return samples.size(); }
    size_t n_joints() const { return samples.empty() ? 0 : samples[0].q.size(); }
};

// Ground truth bundle: store with the 2-joint layout, the Lagrangian
// expression and its Euler-Lagrange torques.
struct Pendulum {
    PendulumParams params;
    ExprStore store;
    ExprId lagrangian = kNoExpr;
    std::vector<ExprId> taus;

    static Pendulum make(const PendulumParams& p = {});
};

// Expression realizing the double-pendulum Lagrangian over (q1,q2,qd1,qd2)
// with numeric constant coefficients; no qddot slots.
ExprId dp_lagrangian_expr(ExprStore& store, const PendulumParams& p);

// Numeric inverse-dynamics oracle: central differences for dL/dq_i plus the
// Hessian contraction  d/dt dL/dqd_i = sum_j d2L/(dqd_i dq_j) qd_j
//                                    + sum_j d2L/(dqd_i dqd_j) qdd_j,
// every second partial by nested central differences. Error O(h^2).
using LagrangianFn =
    std::function<double(std::span<const double> q, std::span<const double> qd)>;
std::vector<double> inverse_dynamics_fd(const LagrangianFn& L,
                                        std::span<const double> q,
                                        std::span<const double> qd,
                                        std::span<const double> qdd, double h);

// q, qdot, qddot i.i.d. uniform over [lo, hi] per coordinate; tau and L from
// the symbolic ground truth. Fully determined by (seed, count, range, params).
Dataset sample_dataset(size_t count, uint64_t seed, double range_lo = -1.5707963267948966,
                       double range_hi = 1.5707963267948966,
                       const PendulumParams& params = {});

// CSV persistence; header for two joints is exactly
//   q1,q2,qd1,qd2,qdd1,qdd2,tau1,tau2,lagrangian
// and values round-trip bitwise (17 significant digits).
std::string dataset_csv_header(size_t n_joints);
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

} // namespace syrenets
