#include "syrenets/expr.hpp"

#include "syrenets/errors.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace syrenets {

std::string StateLayout::slot_name(uint32_t slot) const {
    if (n_joints == 0) return "v" + std::to_string(slot + 1);
    if (slot < n_joints) return "q" + std::to_string(slot + 1);
    if (slot < 2 * n_joints) return "qd" + std::to_string(slot - n_joints + 1);
    return "qdd" + std::to_string(slot - 2 * n_joints + 1);
}

size_t ExprStore::KeyHash::operator()(const Key& k) const {
    uint64_t h = static_cast<uint64_t>(k.kind) * 0x9e3779b97f4a7c15ULL;
    h ^= (static_cast<uint64_t>(k.x) << 32 | k.y) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    h ^= k.bits + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    return static_cast<size_t>(h);
}

ExprStore::Key ExprStore::binary_key(ExprKind kind, ExprId a, ExprId b) {
    // Order-insensitive lookup key: a+b and b+a intern to one node.
    if (a > b) std::swap(a, b);
    return Key{kind, a, b, 0};
}

ExprId ExprStore::intern(ExprKind kind, const Key& key, uint32_t slot, double value,
                         ExprId a, ExprId b) {
    auto it = interned_.find(key);
    if (it != interned_.end()) return it->second;
    ExprId id = static_cast<ExprId>(nodes_.size());
    nodes_.push_back(ExprNode{kind, slot, value, a, b});
    interned_.emplace(key, id);
    return id;
}

ExprId ExprStore::constant(double v) {
    if (v == 0.0) v = 0.0;  // collapse -0.0
    return intern(ExprKind::Const, Key{ExprKind::Const, 0, 0, std::bit_cast<uint64_t>(v)},
                  0, v, kNoExpr, kNoExpr);
}

ExprId ExprStore::var(uint32_t slot) {
    return intern(ExprKind::Var, Key{ExprKind::Var, slot, 0, 0}, slot, 0.0, kNoExpr, kNoExpr);
}

ExprId ExprStore::coeff(uint32_t slot) {
    return intern(ExprKind::Coeff, Key{ExprKind::Coeff, slot, 0, 0}, slot, 0.0, kNoExpr, kNoExpr);
}

ExprId ExprStore::add(ExprId a, ExprId b) {
    return intern(ExprKind::Add, binary_key(ExprKind::Add, a, b), 0, 0.0, a, b);
}

ExprId ExprStore::mul(ExprId a, ExprId b) {
    return intern(ExprKind::Mul, binary_key(ExprKind::Mul, a, b), 0, 0.0, a, b);
}

ExprId ExprStore::sin_of(ExprId a) {
    return intern(ExprKind::Sin, Key{ExprKind::Sin, a, 0, 0}, 0, 0.0, a, kNoExpr);
}

ExprId ExprStore::cos_of(ExprId a) {
    return intern(ExprKind::Cos, Key{ExprKind::Cos, a, 0, 0}, 0, 0.0, a, kNoExpr);
}

ExprId ExprStore::fold_add(ExprId a, ExprId b) {
    const ExprNode& na = nodes_[a];
    const ExprNode& nb = nodes_[b];
    if (na.kind == ExprKind::Const && nb.kind == ExprKind::Const)
        return constant(na.value + nb.value);
    if (na.kind == ExprKind::Const && na.value == 0.0) return b;
    if (nb.kind == ExprKind::Const && nb.value == 0.0) return a;
    return add(a, b);
}

ExprId ExprStore::fold_mul(ExprId a, ExprId b) {
    const ExprNode na = nodes_[a];
    const ExprNode nb = nodes_[b];
    if (na.kind == ExprKind::Const && nb.kind == ExprKind::Const)
        return constant(na.value * nb.value);
    if (nb.kind == ExprKind::Const) return fold_mul(b, a);
    if (na.kind == ExprKind::Const) {
        if (na.value == 0.0) return a;
        if (na.value == 1.0) return b;
        // consolidate constants across a product chain
        if (nb.kind == ExprKind::Mul) {
            const ExprNode& x = nodes_[nb.a];
            const ExprNode& y = nodes_[nb.b];
            if (x.kind == ExprKind::Const)
                return fold_mul(constant(na.value * x.value), nb.b);
            if (y.kind == ExprKind::Const)
                return fold_mul(constant(na.value * y.value), nb.a);
        }
    }
    return mul(a, b);
}

ExprId ExprStore::fold_sin(ExprId a) {
    if (nodes_[a].kind == ExprKind::Const) return constant(std::sin(nodes_[a].value));
    return sin_of(a);
}

ExprId ExprStore::fold_cos(ExprId a) {
    if (nodes_[a].kind == ExprKind::Const) return constant(std::cos(nodes_[a].value));
    return cos_of(a);
}

bool ExprStore::uses_var_in(ExprId root, uint32_t lo, uint32_t hi) const {
    std::vector<ExprId> stack{root};
    std::vector<bool> seen(nodes_.size(), false);
    while (!stack.empty()) {
        ExprId id = stack.back();
        stack.pop_back();
        if (seen[id]) continue;
        seen[id] = true;
        const ExprNode& n = nodes_[id];
        if (n.kind == ExprKind::Var && n.slot >= lo && n.slot < hi) return true;
        if (n.a != kNoExpr) stack.push_back(n.a);
        if (n.b != kNoExpr) stack.push_back(n.b);
    }
    return false;
}

size_t ExprStore::count_reachable(ExprId root) const {
    ExprId roots[1] = {root};
    return postorder(roots).size();
}

std::vector<ExprId> ExprStore::postorder(std::span<const ExprId> roots) const {
    std::vector<ExprId> order;
    std::vector<bool> done(nodes_.size(), false);
    std::vector<std::pair<ExprId, bool>> stack;
    for (ExprId r : roots) stack.emplace_back(r, false);
    while (!stack.empty()) {
        auto [id, expanded] = stack.back();
        stack.pop_back();
        if (done[id]) continue;
        if (expanded) {
            done[id] = true;
            order.push_back(id);
            continue;
        }
        stack.emplace_back(id, true);
        const ExprNode& n = nodes_[id];
        if (n.b != kNoExpr && !done[n.b]) stack.emplace_back(n.b, false);
        if (n.a != kNoExpr && !done[n.a]) stack.emplace_back(n.a, false);
    }
    return order;
}

double ExprStore::eval(ExprId root, std::span<const double> state,
                       std::span<const double> coeffs) const {
    ExprId roots[1] = {root};
    std::vector<ExprId> order = postorder(roots);
    std::unordered_map<ExprId, double> memo;
    memo.reserve(order.size() * 2);
    for (ExprId id : order) {
        const ExprNode& n = nodes_[id];
        double v = 0.0;
        switch (n.kind) {
        case ExprKind::Const: v = n.value; break;
        case ExprKind::Var:
            if (n.slot >= state.size())
                throw std::out_of_range("eval: unbound state slot " + std::to_string(n.slot));
            v = state[n.slot];
            break;
        case ExprKind::Coeff:
            if (n.slot >= coeffs.size())
                throw std::out_of_range("eval: unbound coeff slot " + std::to_string(n.slot));
            v = coeffs[n.slot];
            break;
        case ExprKind::Add: v = memo[n.a] + memo[n.b]; break;
        case ExprKind::Mul: v = memo[n.a] * memo[n.b]; break;
        case ExprKind::Sin: v = std::sin(memo[n.a]); break;
        case ExprKind::Cos: v = std::cos(memo[n.a]); break;
        }
        memo[id] = v;
    }
    return memo[root];
}

ExprId ExprStore::partial(ExprId root, uint32_t var_slot) {
    uint64_t key = (static_cast<uint64_t>(root) << 32) | var_slot;
    auto it = partial_memo_.find(key);
    if (it != partial_memo_.end()) return it->second;

    const ExprNode n = nodes_[root];  // by value: nodes_ may grow below
    ExprId out = kNoExpr;
    switch (n.kind) {
    case ExprKind::Const:
    case ExprKind::Coeff:
        out = constant(0.0);
        break;
    case ExprKind::Var:
        out = constant(n.slot == var_slot ? 1.0 : 0.0);
        break;
    case ExprKind::Add:
        out = fold_add(partial(n.a, var_slot), partial(n.b, var_slot));
        break;
    case ExprKind::Mul:
        out = fold_add(fold_mul(partial(n.a, var_slot), n.b),
                       fold_mul(n.a, partial(n.b, var_slot)));
        break;
    case ExprKind::Sin:
        out = fold_mul(fold_cos(n.a), partial(n.a, var_slot));
        break;
    case ExprKind::Cos:
        out = negate(fold_mul(fold_sin(n.a), partial(n.a, var_slot)));
        break;
    }
    partial_memo_.emplace(key, out);
    return out;
}

std::vector<ExprId> ExprStore::euler_lagrange(ExprId lagrangian) {
    const uint32_t n = layout_.n_joints;
    if (n == 0) throw UsageError("euler_lagrange: store has no joint layout");
    if (uses_var_in(lagrangian, layout_.qdd(0), layout_.qdd(0) + n))
        throw UsageError("euler_lagrange: Lagrangian references qddot slots");

    std::vector<ExprId> taus;
    taus.reserve(n);
    for (uint32_t i = 0; i < n; ++i) {
        ExprId d_qdi = partial(lagrangian, layout_.qd(i));
        ExprId acc = constant(0.0);
        for (uint32_t j = 0; j < n; ++j)
            acc = fold_add(acc, fold_mul(partial(d_qdi, layout_.q(j)), var(layout_.qd(j))));
        for (uint32_t j = 0; j < n; ++j)
            acc = fold_add(acc, fold_mul(partial(d_qdi, layout_.qd(j)), var(layout_.qdd(j))));
        acc = fold_add(acc, negate(partial(lagrangian, layout_.q(i))));
        taus.push_back(acc);
    }
    return taus;
}

double ExprStore::const_factor(ExprId id) const {
    const ExprNode& n = nodes_[id];
    if (n.kind == ExprKind::Const) return std::fabs(n.value);
    if (n.kind == ExprKind::Mul) return const_factor(n.a) * const_factor(n.b);
    return 1.0;
}

ExprId ExprStore::simplify(ExprId root, double eps) {
    if (eps < 0.0) throw UsageError("simplify: eps must be >= 0");
    std::unordered_map<ExprId, ExprId> memo;
    auto droppable = [&](ExprId id) { return eps > 0.0 && const_factor(id) < eps; };
    auto rec = [&](auto&& self, ExprId id) -> ExprId {
        auto it = memo.find(id);
        if (it != memo.end()) return it->second;
        const ExprNode n = nodes_[id];
        ExprId out = id;
        switch (n.kind) {
        case ExprKind::Const:
        case ExprKind::Var:
        case ExprKind::Coeff:
            break;
        case ExprKind::Sin: out = fold_sin(self(self, n.a)); break;
        case ExprKind::Cos: out = fold_cos(self(self, n.a)); break;
        case ExprKind::Mul: out = fold_mul(self(self, n.a), self(self, n.b)); break;
        case ExprKind::Add: {
            ExprId a = self(self, n.a);
            ExprId b = self(self, n.b);
            bool da = droppable(a);
            bool db = droppable(b);
            if (da && db) out = constant(0.0);
            else if (da) out = b;
            else if (db) out = a;
            else out = fold_add(a, b);
            break;
        }
        }
        memo.emplace(id, out);
        return out;
    };
    return rec(rec, root);
}

ExprId ExprStore::instantiate_coeffs(ExprId root, std::span<const double> coeff_values) {
    std::unordered_map<ExprId, ExprId> memo;
    auto rec = [&](auto&& self, ExprId id) -> ExprId {
        auto it = memo.find(id);
        if (it != memo.end()) return it->second;
        const ExprNode n = nodes_[id];
        ExprId out = id;
        switch (n.kind) {
        case ExprKind::Const:
        case ExprKind::Var:
            break;
        case ExprKind::Coeff:
            if (n.slot >= coeff_values.size())
                throw std::out_of_range("instantiate_coeffs: unbound coeff slot " +
                                        std::to_string(n.slot));
            out = constant(coeff_values[n.slot]);
            break;
        case ExprKind::Sin: out = fold_sin(self(self, n.a)); break;
        case ExprKind::Cos: out = fold_cos(self(self, n.a)); break;
        case ExprKind::Mul: out = fold_mul(self(self, n.a), self(self, n.b)); break;
        case ExprKind::Add: out = fold_add(self(self, n.a), self(self, n.b)); break;
        }
        memo.emplace(id, out);
        return out;
    };
    return rec(rec, root);
}

namespace {

std::string format_const(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

} // namespace

std::string ExprStore::pretty(ExprId root) const {
    // precedence: Add 1, Mul 2, atoms/calls 3
    auto rec = [&](auto&& self, ExprId id, int parent_prec) -> std::string {
        const ExprNode& n = nodes_[id];
        switch (n.kind) {
        case ExprKind::Const: return format_const(n.value);
        case ExprKind::Var: return layout_.slot_name(n.slot);
        case ExprKind::Coeff: return "c" + std::to_string(n.slot);
        case ExprKind::Sin: return "sin(" + self(self, n.a, 0) + ")";
        case ExprKind::Cos: return "cos(" + self(self, n.a, 0) + ")";
        case ExprKind::Add: {
            std::string s = self(self, n.a, 1) + " + " + self(self, n.b, 1);
            return parent_prec > 1 ? "(" + s + ")" : s;
        }
        case ExprKind::Mul: {
            std::string s = self(self, n.a, 2) + "*" + self(self, n.b, 2);
            return parent_prec > 2 ? "(" + s + ")" : s;
        }
        }
        return {};
    };
    return rec(rec, root, 0);
}

// ============================================================================
// BatchEvaluator
// ============================================================================

BatchEvaluator::BatchEvaluator(const ExprStore& store, std::span<const ExprId> roots)
    : store_(&store), roots_(roots.begin(), roots.end()) {
    order_ = store.postorder(roots);
    pos_.assign(store.size(), 0xffffffffu);
    for (uint32_t i = 0; i < order_.size(); ++i) pos_[order_[i]] = i;
}

void BatchEvaluator::run_forward(std::span<const double> states, size_t state_stride,
                                 size_t n_samples, std::span<const double> coeffs,
                                 std::span<double> out) {
    batch_ = n_samples;
    values_.resize(order_.size() * n_samples);
    double* vals = values_.data();
    for (size_t i = 0; i < order_.size(); ++i) {
        const ExprNode& n = store_->node(order_[i]);
        double* v = vals + i * n_samples;
        switch (n.kind) {
        case ExprKind::Const:
            for (size_t s = 0; s < n_samples; ++s) v[s] = n.value;
            break;
        case ExprKind::Var:
            if (n.slot >= state_stride)
                throw std::out_of_range("batch eval: unbound state slot " +
                                        std::to_string(n.slot));
            for (size_t s = 0; s < n_samples; ++s) v[s] = states[s * state_stride + n.slot];
            break;
        case ExprKind::Coeff:
            if (n.slot >= coeffs.size())
                throw std::out_of_range("batch eval: unbound coeff slot " +
                                        std::to_string(n.slot));
            for (size_t s = 0; s < n_samples; ++s) v[s] = coeffs[n.slot];
            break;
        case ExprKind::Add: {
            const double* a = vals + pos_[n.a] * n_samples;
            const double* b = vals + pos_[n.b] * n_samples;
            for (size_t s = 0; s < n_samples; ++s) v[s] = a[s] + b[s];
            break;
        }
        case ExprKind::Mul: {
            const double* a = vals + pos_[n.a] * n_samples;
            const double* b = vals + pos_[n.b] * n_samples;
            for (size_t s = 0; s < n_samples; ++s) v[s] = a[s] * b[s];
            break;
        }
        case ExprKind::Sin: {
            const double* a = vals + pos_[n.a] * n_samples;
            for (size_t s = 0; s < n_samples; ++s) v[s] = std::sin(a[s]);
            break;
        }
        case ExprKind::Cos: {
            const double* a = vals + pos_[n.a] * n_samples;
            for (size_t s = 0; s < n_samples; ++s) v[s] = std::cos(a[s]);
            break;
        }
        }
    }
    const size_t m = roots_.size();
    for (size_t r = 0; r < m; ++r) {
        const double* v = vals + pos_[roots_[r]] * n_samples;
        for (size_t s = 0; s < n_samples; ++s) out[s * m + r] = v[s];
    }
}

void BatchEvaluator::eval(std::span<const double> states, size_t state_stride,
                          size_t n_samples, std::span<const double> coeffs,
                          std::span<double> out) {
    run_forward(states, state_stride, n_samples, coeffs, out);
}

void BatchEvaluator::forward_retain(std::span<const double> states, size_t state_stride,
                                    size_t n_samples, std::span<const double> coeffs,
                                    std::span<double> out) {
    run_forward(states, state_stride, n_samples, coeffs, out);
}

void BatchEvaluator::backward(std::span<const double> out_adj, std::span<double> coeff_adj) {
    const size_t n_samples = batch_;
    const size_t m = roots_.size();
    adjoints_.assign(order_.size() * n_samples, 0.0);
    double* adj = adjoints_.data();
    const double* vals = values_.data();
    for (size_t r = 0; r < m; ++r) {
        double* a = adj + pos_[roots_[r]] * n_samples;
        for (size_t s = 0; s < n_samples; ++s) a[s] += out_adj[s * m + r];
    }
    for (size_t i = order_.size(); i-- > 0;) {
        const ExprNode& n = store_->node(order_[i]);
        const double* g = adj + i * n_samples;
        switch (n.kind) {
        case ExprKind::Const:
        case ExprKind::Var:
            break;
        case ExprKind::Coeff: {
            double acc = 0.0;
            for (size_t s = 0; s < n_samples; ++s) acc += g[s];
            coeff_adj[n.slot] += acc;
            break;
        }
        case ExprKind::Add: {
            double* a = adj + pos_[n.a] * n_samples;
            double* b = adj + pos_[n.b] * n_samples;
            for (size_t s = 0; s < n_samples; ++s) {
                a[s] += g[s];
                b[s] += g[s];
            }
            break;
        }
        case ExprKind::Mul: {
            double* a = adj + pos_[n.a] * n_samples;
            double* b = adj + pos_[n.b] * n_samples;
            const double* va = vals + pos_[n.a] * n_samples;
            const double* vb = vals + pos_[n.b] * n_samples;
            for (size_t s = 0; s < n_samples; ++s) {
                a[s] += g[s] * vb[s];
                b[s] += g[s] * va[s];
            }
            break;
        }
        case ExprKind::Sin: {
            double* a = adj + pos_[n.a] * n_samples;
            const double* va = vals + pos_[n.a] * n_samples;
            for (size_t s = 0; s < n_samples; ++s) a[s] += g[s] * std::cos(va[s]);
            break;
        }
        case ExprKind::Cos: {
            double* a = adj + pos_[n.a] * n_samples;
            const double* va = vals + pos_[n.a] * n_samples;
            for (size_t s = 0; s < n_samples; ++s) a[s] -= g[s] * std::sin(va[s]);
            break;
        }
        }
    }
}

} // namespace syrenets
