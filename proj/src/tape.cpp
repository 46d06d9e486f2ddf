#include "syrenets/tape.hpp"

#include "syrenets/errors.hpp"

#include <cmath>

namespace syrenets {

namespace {

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

// Overflow-safe softplus: max(x,0) + log1p(exp(-|x|)).
double stable_softplus(double x) {
    return std::fmax(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

} // namespace

Tape::Tape(std::span<const double> params)
    : params_(params), n_leaves_(static_cast<uint32_t>(params.size())) {}

void Tape::reset() {
    nodes_.clear();
    vals_.clear();
    customs_.clear();
}

TapeValue Tape::push(Op op, double value, const Node& n) {
    Node node = n;
    node.op = op;
    uint32_t id = static_cast<uint32_t>(n_leaves_ + nodes_.size());
    nodes_.push_back(node);
    vals_.push_back(value);
    return {id, value};
}

TapeValue Tape::constant(double v) { return push(Op::Const, v, Node{}); }

TapeValue Tape::add(TapeValue a, TapeValue b) {
    Node n;
    n.a = a.id;
    n.b = b.id;
    n.pa = 1.0;
    n.pb = 1.0;
    return push(Op::Add, a.value + b.value, n);
}

TapeValue Tape::sub(TapeValue a, TapeValue b) {
    Node n;
    n.a = a.id;
    n.b = b.id;
    n.pa = 1.0;
    n.pb = -1.0;
    return push(Op::Sub, a.value - b.value, n);
}

TapeValue Tape::mul(TapeValue a, TapeValue b) {
    Node n;
    n.a = a.id;
    n.b = b.id;
    n.pa = b.value;
    n.pb = a.value;
    return push(Op::Mul, a.value * b.value, n);
}

TapeValue Tape::div(TapeValue a, TapeValue b) {
    if (b.value == 0.0) throw NumericError("div", b.value);
    Node n;
    n.a = a.id;
    n.b = b.id;
    n.pa = 1.0 / b.value;
    n.pb = -a.value / (b.value * b.value);
    return push(Op::Div, a.value / b.value, n);
}

TapeValue Tape::unary(Op op, TapeValue a, double value, double partial) {
    Node n;
    n.a = a.id;
    n.pa = partial;
    return push(op, value, n);
}

TapeValue Tape::sin(TapeValue a) { return unary(Op::Sin, a, std::sin(a.value), std::cos(a.value)); }
TapeValue Tape::cos(TapeValue a) { return unary(Op::Cos, a, std::cos(a.value), -std::sin(a.value)); }
TapeValue Tape::exp(TapeValue a) {
    double e = std::exp(a.value);
    return unary(Op::Exp, a, e, e);
}
TapeValue Tape::log(TapeValue a) {
    if (a.value <= 0.0) throw NumericError("log", a.value);
    return unary(Op::Log, a, std::log(a.value), 1.0 / a.value);
}
TapeValue Tape::sqrt(TapeValue a) {
    if (a.value < 0.0) throw NumericError("sqrt", a.value);
    double s = std::sqrt(a.value);
    return unary(Op::Sqrt, a, s, 0.5 / (s == 0.0 ? 1e-300 : s));
}
TapeValue Tape::softplus(TapeValue a) {
    return unary(Op::Softplus, a, stable_softplus(a.value), stable_sigmoid(a.value));
}
TapeValue Tape::sigmoid(TapeValue a) {
    double s = stable_sigmoid(a.value);
    return unary(Op::Sigmoid, a, s, s * (1.0 - s));
}

TapeValue Tape::add_const(TapeValue a, double c) {
    return unary(Op::AddC, a, a.value + c, 1.0);
}
TapeValue Tape::mul_const(TapeValue a, double c) {
    return unary(Op::MulC, a, a.value * c, c);
}
TapeValue Tape::max_const(TapeValue a, double c) {
    return unary(Op::MaxC, a, std::fmax(a.value, c), a.value > c ? 1.0 : 0.0);
}

TapeValue Tape::sum_span(uint32_t first, uint32_t stride, uint32_t count) {
    // spans never straddle the leaf/node boundary
    const double* base = first < n_leaves_ ? params_.data() + first
                                           : vals_.data() + (first - n_leaves_);
    double acc = 0.0;
    for (uint32_t k = 0; k < count; ++k) acc += base[static_cast<size_t>(k) * stride];
    Node n;
    n.a = first;
    n.sa = stride;
    n.n = count;
    return push(Op::Sum, acc, n);
}

TapeValue Tape::dot_span(uint32_t a_first, uint32_t a_stride,
                         uint32_t b_first, uint32_t b_stride, uint32_t count) {
    const double* a = a_first < n_leaves_ ? params_.data() + a_first
                                          : vals_.data() + (a_first - n_leaves_);
    const double* b = b_first < n_leaves_ ? params_.data() + b_first
                                          : vals_.data() + (b_first - n_leaves_);
    double acc = 0.0;
    for (uint32_t k = 0; k < count; ++k)
        acc += a[static_cast<size_t>(k) * a_stride] * b[static_cast<size_t>(k) * b_stride];
    Node n;
    n.a = a_first;
    n.sa = a_stride;
    n.b = b_first;
    n.sb = b_stride;
    n.n = count;
    return push(Op::Dot, acc, n);
}

TapeValue Tape::dot(std::span<const TapeValue> a, std::span<const TapeValue> b) {
    if (a.size() != b.size()) throw UsageError("dot: length mismatch");
    if (a.empty()) return constant(0.0);
    auto uniform_stride = [](std::span<const TapeValue> v, uint32_t& first, uint32_t& stride) {
        first = v[0].id;
        stride = v.size() > 1 ? v[1].id - v[0].id : 1;
        for (size_t k = 1; k < v.size(); ++k)
            if (v[k].id != first + k * stride) return false;
        return true;
    };
    auto one_side = [&](uint32_t first, uint32_t stride, size_t n) {
        // span ops require the range on one side of the leaf/node boundary
        return (first < n_leaves_) == (first + (n - 1) * stride < n_leaves_);
    };
    uint32_t af, as, bf, bs;
    if (uniform_stride(a, af, as) && uniform_stride(b, bf, bs) &&
        one_side(af, as, a.size()) && one_side(bf, bs, b.size()))
        return dot_span(af, as, bf, bs, static_cast<uint32_t>(a.size()));
    TapeValue acc = mul(a[0], b[0]);
    for (size_t k = 1; k < a.size(); ++k) acc = add(acc, mul(a[k], b[k]));
    return acc;
}

TapeValue Tape::add_custom(std::unique_ptr<CustomNode> node) {
    uint32_t m = node->n_outputs();
    std::vector<double> out(m, 0.0);
    node->forward(*this, out);
    uint32_t idx = static_cast<uint32_t>(customs_.size());
    customs_.push_back(std::move(node));
    Node primary;
    primary.n = idx;
    TapeValue first = push(Op::Custom, out[0], primary);
    for (uint32_t k = 1; k < m; ++k) {
        Node rest;
        rest.n = idx;
        rest.b = k;
        push(Op::CustomOut, out[k], rest);
    }
    return first;
}

void Tape::backward(TapeValue output, std::vector<double>& adj) const {
    adj.assign(size(), 0.0);
    adj[output.id] = 1.0;

    std::vector<std::vector<double>> custom_adj(customs_.size());
    for (size_t c = 0; c < customs_.size(); ++c)
        custom_adj[c].assign(customs_[c]->n_outputs(), 0.0);

    for (size_t i = nodes_.size(); i-- > 0;) {
        const Node& n = nodes_[i];
        const double g = adj[n_leaves_ + i];
        switch (n.op) {
        case Op::Const:
            break;
        case Op::Add:
        case Op::Sub:
        case Op::Mul:
        case Op::Div:
            if (g != 0.0) {
                adj[n.a] += g * n.pa;
                adj[n.b] += g * n.pb;
            }
            break;
        case Op::Sin:
        case Op::Cos:
        case Op::Exp:
        case Op::Log:
        case Op::Sqrt:
        case Op::Softplus:
        case Op::Sigmoid:
        case Op::AddC:
        case Op::MulC:
        case Op::MaxC:
            if (g != 0.0) adj[n.a] += g * n.pa;
            break;
        case Op::Sum:
            if (g != 0.0) {
                double* ga = adj.data() + n.a;
                for (uint32_t k = 0; k < n.n; ++k) ga[static_cast<size_t>(k) * n.sa] += g;
            }
            break;
        case Op::Dot:
            if (g != 0.0) {
                const double* va = n.a < n_leaves_ ? params_.data() + n.a
                                                   : vals_.data() + (n.a - n_leaves_);
                const double* vb = n.b < n_leaves_ ? params_.data() + n.b
                                                   : vals_.data() + (n.b - n_leaves_);
                double* ga = adj.data() + n.a;
                double* gb = adj.data() + n.b;
                for (uint32_t k = 0; k < n.n; ++k) {
                    ga[static_cast<size_t>(k) * n.sa] += g * vb[static_cast<size_t>(k) * n.sb];
                    gb[static_cast<size_t>(k) * n.sb] += g * va[static_cast<size_t>(k) * n.sa];
                }
            }
            break;
        case Op::CustomOut:
            custom_adj[n.n][n.b] = g;
            break;
        case Op::Custom:
            custom_adj[n.n][0] = g;
            customs_[n.n]->backward(*this, custom_adj[n.n], adj);
            break;
        }
    }
}

GradientMap Tape::backward(TapeValue output) const {
    std::vector<double> adj;
    backward(output, adj);
    GradientMap g;
    g.values.assign(adj.begin(), adj.begin() + n_leaves_);
    return g;
}

} // namespace syrenets
