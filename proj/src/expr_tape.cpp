#include "syrenets/expr_tape.hpp"

#include "syrenets/errors.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_map>

namespace syrenets {

TapeValue eval_expr_on_tape(Tape& tape, const ExprStore& store, ExprId root,
                            std::span<const double> state,
                            std::span<const TapeValue> coeffs_by_slot) {
    ExprId roots[1] = {root};
    std::vector<ExprId> order = store.postorder(roots);
    std::unordered_map<ExprId, TapeValue> memo;
    memo.reserve(order.size() * 2);
    for (ExprId id : order) {
        const ExprNode& n = store.node(id);
        TapeValue v;
        switch (n.kind) {
        case ExprKind::Const:
            v = tape.constant(n.value);
            break;
        case ExprKind::Var:
            if (n.slot >= state.size())
                throw std::out_of_range("eval_expr_on_tape: unbound state slot " +
                                        std::to_string(n.slot));
            v = tape.constant(state[n.slot]);
            break;
        case ExprKind::Coeff:
            if (n.slot >= coeffs_by_slot.size())
                throw std::out_of_range("eval_expr_on_tape: unbound coeff slot " +
                                        std::to_string(n.slot));
            v = coeffs_by_slot[n.slot];
            break;
        case ExprKind::Add: v = tape.add(memo[n.a], memo[n.b]); break;
        case ExprKind::Mul: v = tape.mul(memo[n.a], memo[n.b]); break;
        case ExprKind::Sin: v = tape.sin(memo[n.a]); break;
        case ExprKind::Cos: v = tape.cos(memo[n.a]); break;
        }
        memo[id] = v;
    }
    return memo[root];
}

namespace {

class ExprBatchNode final : public CustomNode {
public:
    ExprBatchNode(BatchEvaluator& evaluator, std::vector<double> states,
                  size_t state_stride, size_t n_samples, std::vector<uint32_t> coeff_ids)
        : eval_(&evaluator), states_(std::move(states)), stride_(state_stride),
          n_samples_(n_samples), coeff_ids_(std::move(coeff_ids)) {}

    uint32_t n_outputs() const override {
        return static_cast<uint32_t>(n_samples_ * eval_->n_roots());
    }

    void forward(const Tape& tape, std::span<double> out) override {
        coeff_values_.resize(coeff_ids_.size());
        for (size_t s = 0; s < coeff_ids_.size(); ++s)
            coeff_values_[s] = coeff_ids_[s] == kNoTapeId ? 0.0 : tape.value(coeff_ids_[s]);
        eval_->forward_retain(states_, stride_, n_samples_, coeff_values_, out);
    }

    void backward(const Tape&, std::span<const double> out_adj,
                  std::span<double> adj) override {
        coeff_adj_.assign(coeff_ids_.size(), 0.0);
        eval_->backward(out_adj, coeff_adj_);
        for (size_t s = 0; s < coeff_ids_.size(); ++s)
            if (coeff_ids_[s] != kNoTapeId) adj[coeff_ids_[s]] += coeff_adj_[s];
    }

private:
    BatchEvaluator* eval_;
    std::vector<double> states_;
    size_t stride_;
    size_t n_samples_;
    std::vector<uint32_t> coeff_ids_;
    std::vector<double> coeff_values_;
    std::vector<double> coeff_adj_;
};

} // namespace

TapeValue make_expr_batch_node(Tape& tape, BatchEvaluator& evaluator,
                               std::vector<double> states, size_t state_stride,
                               size_t n_samples, std::vector<uint32_t> coeff_ids) {
    return tape.add_custom(std::make_unique<ExprBatchNode>(
        evaluator, std::move(states), state_stride, n_samples, std::move(coeff_ids)));
}

GradcheckReport gradcheck(const ScalarFn& f, std::span<double> point, double h,
                          double tol, std::span<const size_t> slots) {
    if (h <= 0.0) throw UsageError("gradcheck: h must be > 0");
    Tape tape(point);
    TapeValue out = f(tape);
    GradientMap grad = tape.backward(out);

    std::vector<size_t> all;
    if (slots.empty()) {
        all.resize(point.size());
        for (size_t i = 0; i < all.size(); ++i) all[i] = i;
        slots = all;
    }

    auto value_at = [&]() {
        Tape t(point);
        return f(t).value;
    };

    GradcheckReport report;
    report.entries.reserve(slots.size());
    for (size_t slot : slots) {
        double saved = point[slot];
        point[slot] = saved + h;
        double fp = value_at();
        point[slot] = saved - h;
        double fm = value_at();
        point[slot] = saved;

        double numeric = (fp - fm) / (2.0 * h);
        double analytic = grad.at(slot);
        double abs_err = std::fabs(analytic - numeric);
        double denom = std::fmax(std::fmax(std::fabs(analytic), std::fabs(numeric)), 1e-8);
        double rel = abs_err / denom;
        report.entries.push_back({slot, analytic, numeric, abs_err, rel});
        report.max_rel_err = std::fmax(report.max_rel_err, rel);
        if (rel > tol) {
            report.failures.push_back(slot);
            report.passed = false;
        }
        ++report.n_checked;
    }
    return report;
}

} // namespace syrenets
