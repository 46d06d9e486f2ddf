#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace syrenets {

// ============================================================================
// Immutable symbolic expression DAG with structural deduplication.
//
// Nodes live in an append-only store; children always have smaller ids than
// their parent. Interning two structurally identical trees yields one id
// (Add/Mul are looked up under an order-insensitive key, so a+b and b+a share
// an id). A completed store is immutable and safe to share across threads for
// read-only evaluation; it is also cheap to copy for snapshots.
// ============================================================================

using ExprId = uint32_t;
constexpr ExprId kNoExpr = 0xffffffffu;

enum class ExprKind : uint8_t { Const, Var, Coeff, Add, Mul, Sin, Cos };

struct ExprNode {
    ExprKind kind;
    uint32_t slot;  // Var/Coeff slot index
    double value;   // Const payload
    ExprId a, b;    // children (b unused for unary)
};

// Maps (q, qdot, qddot) of an n-joint system onto Var slots:
// q_i -> i, qdot_i -> n + i, qddot_i -> 2n + i.
struct StateLayout {
    uint32_t n_joints = 0;

    uint32_t n_slots() const { return 3 * n_joints; }
    uint32_t q(uint32_t i) const { return i; }
    uint32_t qd(uint32_t i) const { return n_joints + i; }
    uint32_t qdd(uint32_t i) const { return 2 * n_joints + i; }
    bool is_qdd(uint32_t slot) const { return slot >= 2 * n_joints && slot < 3 * n_joints; }

    std::string slot_name(uint32_t slot) const;
};

class ExprStore {
public:
    explicit ExprStore(StateLayout layout = {}) : layout_(layout) {}

    const StateLayout& layout() const { return layout_; }
    const ExprNode& node(ExprId id) const { return nodes_[id]; }
    size_t size() const { return nodes_.size(); }

    // --- interning (raw): canonical operand order applied for Add/Mul ------
    ExprId constant(double v);
    ExprId var(uint32_t slot);
    ExprId coeff(uint32_t slot);
    ExprId add(ExprId a, ExprId b);
    ExprId mul(ExprId a, ExprId b);
    ExprId sin_of(ExprId a);
    ExprId cos_of(ExprId a);

    // --- folding constructors: the local rules of simplify(eps=0) applied
    //     during construction (0+x->x, 0*x->0, 1*x->x, const folding).
    ExprId fold_add(ExprId a, ExprId b);
    ExprId fold_mul(ExprId a, ExprId b);
    ExprId fold_sin(ExprId a);
    ExprId fold_cos(ExprId a);
    ExprId negate(ExprId a) { return fold_mul(constant(-1.0), a); }

    bool is_const(ExprId id, double v) const {
        return nodes_[id].kind == ExprKind::Const && nodes_[id].value == v;
    }

    // --- queries ------------------------------------------------------------
    // True if any reachable Var node uses a slot in [lo, hi).
    bool uses_var_in(ExprId root, uint32_t lo, uint32_t hi) const;
    size_t count_reachable(ExprId root) const;
    // Reachable node ids of `roots` in a topological (children-first) order.
    std::vector<ExprId> postorder(std::span<const ExprId> roots) const;

    // --- evaluation ----------------------------------------------------------
    // Standard recursion with DAG memoization; touches only reachable nodes.
    // Throws std::out_of_range when the expression uses an unbound slot.
    double eval(ExprId root, std::span<const double> state,
                std::span<const double> coeffs = {}) const;

    // --- calculus ------------------------------------------------------------
    // Interned symbolic derivative w.r.t. one Var slot; Const/Coeff -> 0.
    // Results are built with the folding constructors and memoized, so shared
    // subterms are differentiated once.
    ExprId partial(ExprId root, uint32_t var_slot);

    // tau_i = sum_j d2L/(dqd_i dq_j) qd_j + sum_j d2L/(dqd_i dqd_j) qdd_j - dL/dq_i.
    // Precondition: L has no qddot slots (throws UsageError otherwise).
    std::vector<ExprId> euler_lagrange(ExprId lagrangian);

    // --- cleanup -------------------------------------------------------------
    // Constant/identity folding; with eps > 0, additionally drops sum terms
    // whose constant factor is below eps in magnitude. Idempotent.
    ExprId simplify(ExprId root, double eps);

    // Replaces Coeff slots by Const values (folding); used by extraction.
    ExprId instantiate_coeffs(ExprId root, std::span<const double> coeff_values);

    // --- rendering -----------------------------------------------------------
    // Deterministic infix form, minimal parentheses. Variables print as
    // q1/qd1/qdd1..., coefficients as c<slot>, constants with 6 significant
    // digits. See docs/expression-grammar.md.
    std::string pretty(ExprId root) const;

private:
    struct Key {
        ExprKind kind;
        uint32_t x, y;
        uint64_t bits;
        bool operator==(const Key& o) const {
            return kind == o.kind && x == o.x && y == o.y && bits == o.bits;
        }
    };
    struct KeyHash {
        size_t operator()(const Key& k) const;
    };

    ExprId intern(ExprKind kind, const Key& key, uint32_t slot, double value,
                  ExprId a, ExprId b);
    static Key binary_key(ExprKind kind, ExprId a, ExprId b);

    // |constant factor| of a product chain; 1 if none.
    double const_factor(ExprId id) const;

    StateLayout layout_;
    std::vector<ExprNode> nodes_;
    std::unordered_map<Key, ExprId, KeyHash> interned_;
    std::unordered_map<uint64_t, ExprId> partial_memo_;  // (id, slot) -> derivative
};

// ============================================================================
// Batched evaluation of a fixed set of roots over many (state, coeff) samples.
// Precomputes the reachable postorder once; eval then runs dense loops without
// hashing. Coefficients are shared across the batch, states vary per sample.
// Also provides the reverse sweep used to backpropagate root adjoints into
// coefficient slots (states are treated as constants).
// ============================================================================
class BatchEvaluator {
public:
    BatchEvaluator(const ExprStore& store, std::span<const ExprId> roots);

    size_t n_nodes() const { return order_.size(); }
    size_t n_roots() const { return roots_.size(); }

    // states: row-major n_samples x state_stride; out: n_samples x n_roots.
    void eval(std::span<const double> states, size_t state_stride, size_t n_samples,
              std::span<const double> coeffs, std::span<double> out);

    // Like eval but retains per-node values for a later backward pass.
    void forward_retain(std::span<const double> states, size_t state_stride,
                        size_t n_samples, std::span<const double> coeffs,
                        std::span<double> out);
    // out_adj: n_samples x n_roots; accumulates into coeff_adj (per coeff slot).
    void backward(std::span<const double> out_adj, std::span<double> coeff_adj);

private:
    void run_forward(std::span<const double> states, size_t state_stride,
                     size_t n_samples, std::span<const double> coeffs,
                     std::span<double> out);

    const ExprStore* store_;
    std::vector<ExprId> roots_;
    std::vector<ExprId> order_;             // children-first
    std::vector<uint32_t> pos_;             // ExprId -> dense position (or ~0)
    std::vector<double> values_;            // n_nodes x batch
    std::vector<double> adjoints_;          // n_nodes x batch
    size_t batch_ = 0;
};

} // namespace syrenets
