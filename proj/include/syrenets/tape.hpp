#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

namespace syrenets {

class Tape;

// A scalar participating in a recording. Plain handle: the id indexes the
// owning tape, the value is cached for convenience.
struct TapeValue {
    uint32_t id = 0;
    double value = 0.0;
};

// n tape values at ids first, first+stride, ... Regular layouts keep the
// span ops at one node per output scalar.
struct IdSpan {
    uint32_t first = 0;
    uint32_t stride = 0;
    uint32_t n = 0;
    uint32_t id_at(uint32_t k) const { return first + k * stride; }
};

// Leaf index -> accumulated adjoint. Leaves not reachable from the output
// have adjoint exactly 0.
struct GradientMap {
    std::vector<double> values;
    double at(size_t leaf) const { return values[leaf]; }
    size_t size() const { return values.size(); }
};

// Escape hatch for fused operations with hand-derived reverse rules (exact
// contractive penalty, batched expression evaluation). A custom node occupies
// n_outputs() consecutive tape ids; backward receives the adjoints of all its
// outputs and scatters into the full adjoint array (leaf ids included).
class CustomNode {
public:
    virtual ~CustomNode() = default;
    virtual uint32_t n_outputs() const = 0;
    virtual void forward(const Tape& tape, std::span<double> out) = 0;
    virtual void backward(const Tape& tape, std::span<const double> out_adj,
                          std::span<double> adj) = 0;
};

// ============================================================================
// Reverse-mode tape over scalars.
//
// Leaf ids [0, n_leaves) map straight onto an external parameter array, so
// parameters are addressable without per-leaf bookkeeping. Recorded nodes
// follow. A recording lives for one forward+backward step; reset() keeps the
// allocated capacity. One recording is confined to one thread.
//
// Span ops (sum/dot over strided id ranges) keep heavy linear algebra at one
// node per output scalar. Domain-guarded ops (div/log/sqrt) throw
// NumericError at record time.
// ============================================================================
class Tape {
public:
    enum class Op : uint8_t {
        Const, Add, Sub, Mul, Div, Sin, Cos, Exp, Log, Sqrt, Softplus, Sigmoid,
        AddC, MulC, MaxC, Sum, Dot, Custom, CustomOut
    };

    explicit Tape(std::span<const double> params);

    void reset();
    uint32_t n_leaves() const { return n_leaves_; }
    size_t size() const { return n_leaves_ + nodes_.size(); }
    size_t n_nodes() const { return nodes_.size(); }
    double value(uint32_t id) const {
        return id < n_leaves_ ? params_[id] : vals_[id - n_leaves_];
    }
    std::span<const double> leaf_values() const { return params_; }
    std::span<const double> node_values() const { return vals_; }
    std::vector<double> values_of(IdSpan s) const {
        std::vector<double> out(s.n);
        for (uint32_t k = 0; k < s.n; ++k) out[k] = value(s.id_at(k));
        return out;
    }

    TapeValue leaf(uint32_t param_index) const {
        return {param_index, params_[param_index]};
    }
    TapeValue constant(double v);

    TapeValue add(TapeValue a, TapeValue b);
    TapeValue sub(TapeValue a, TapeValue b);
    TapeValue mul(TapeValue a, TapeValue b);
    TapeValue div(TapeValue a, TapeValue b);
    TapeValue sin(TapeValue a);
    TapeValue cos(TapeValue a);
    TapeValue exp(TapeValue a);
    TapeValue log(TapeValue a);
    TapeValue sqrt(TapeValue a);
    TapeValue softplus(TapeValue a);
    TapeValue sigmoid(TapeValue a);

    TapeValue add_const(TapeValue a, double c);
    TapeValue mul_const(TapeValue a, double c);
    // max(a, c): partial is 1 where a > c, else 0.
    TapeValue max_const(TapeValue a, double c);

    // sum_{k<count} value(first + k*stride)
    TapeValue sum_span(uint32_t first, uint32_t stride, uint32_t count);
    // sum_{k<count} value(a_first + k*a_stride) * value(b_first + k*b_stride)
    TapeValue dot_span(uint32_t a_first, uint32_t a_stride,
                       uint32_t b_first, uint32_t b_stride, uint32_t count);
    // Convenience for tests/irregular ids; equivalent gradient semantics.
    TapeValue dot(std::span<const TapeValue> a, std::span<const TapeValue> b);

    // Returns the first output's TapeValue; outputs occupy consecutive ids.
    TapeValue add_custom(std::unique_ptr<CustomNode> node);

    // Single reverse sweep in fixed reverse-topological order; bitwise
    // deterministic for a fixed recording. adjoints is resized to size().
    void backward(TapeValue output, std::vector<double>& adjoints) const;
    GradientMap backward(TapeValue output) const;

private:
    struct Node {
        Op op;
        uint32_t a = 0, b = 0;   // parents / span firsts
        uint32_t sa = 0, sb = 0; // span strides
        uint32_t n = 0;          // span length / custom index
        double pa = 0.0, pb = 0.0;
    };

    TapeValue push(Op op, double value, const Node& n);
    TapeValue unary(Op op, TapeValue a, double value, double partial);

    std::span<const double> params_;
    uint32_t n_leaves_;
    std::vector<Node> nodes_;
    std::vector<double> vals_;
    std::vector<std::unique_ptr<CustomNode>> customs_;
};

} // namespace syrenets
