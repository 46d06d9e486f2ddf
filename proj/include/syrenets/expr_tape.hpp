#pragma once

#include "syrenets/expr.hpp"
#include "syrenets/tape.hpp"

#include <functional>
#include <span>
#include <vector>

namespace syrenets {

// Records an expression onto a tape: state entries become constants, Coeff
// slots bind to the supplied tape values. backward then yields d(expr)/d(coeff)
// for every coefficient slot. Intended for small expressions; the training
// path for large DAGs goes through make_expr_batch_node below.
TapeValue eval_expr_on_tape(Tape& tape, const ExprStore& store, ExprId root,
                            std::span<const double> state,
                            std::span<const TapeValue> coeffs_by_slot);

// Fused tape node evaluating a fixed set of roots over a whole batch with a
// shared BatchEvaluator (owned by the caller; must outlive the recording and
// is reused across steps). Outputs are sample-major: out[s*n_roots + r].
// coeff_ids maps coeff slot -> tape id; unused slots may be kNoTapeId.
constexpr uint32_t kNoTapeId = 0xffffffffu;
TapeValue make_expr_batch_node(Tape& tape, BatchEvaluator& evaluator,
                               std::vector<double> states, size_t state_stride,
                               size_t n_samples, std::vector<uint32_t> coeff_ids);

// ----------------------------------------------------------------------------
// Finite-difference gradient checking.
// ----------------------------------------------------------------------------
struct GradcheckEntry {
    size_t slot;
    double analytic;
    double numeric;
    double abs_err;
    double rel_err;  // |a-n| / max(|a|, |n|, 1e-8)
};

struct GradcheckReport {
    double max_rel_err = 0.0;
    size_t n_checked = 0;
    std::vector<GradcheckEntry> entries;
    std::vector<size_t> failures;  // slots with rel_err > tol
    bool passed = true;
};

// f records a scalar over tape leaves; point is perturbed in place and
// restored. Empty `slots` checks every coordinate. Failures are data, not
// errors.
using ScalarFn = std::function<TapeValue(Tape&)>;
GradcheckReport gradcheck(const ScalarFn& f, std::span<double> point, double h,
                          double tol, std::span<const size_t> slots = {});

} // namespace syrenets
