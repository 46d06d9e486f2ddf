#pragma once

#include "syrenets/tape.hpp"

#include <cstddef>
#include <span>

namespace syrenets {

// Dense building blocks recorded onto a tape. Weight matrices live row-major
// in the parameter array (leaf ids), so each output is one span-dot node.
// All helpers return outputs with a regular id stride.

// y_r = dot(W[r,:], x) + b_r (b_off < 0: no bias).
inline IdSpan linear_rows(Tape& t, size_t w_off, uint32_t rows, uint32_t cols,
                          IdSpan x, ptrdiff_t b_off = -1) {
    IdSpan out;
    out.n = rows;
    out.stride = b_off < 0 ? 1u : 2u;
    for (uint32_t r = 0; r < rows; ++r) {
        TapeValue d = t.dot_span(static_cast<uint32_t>(w_off + r * cols), 1, x.first,
                                 x.stride, cols);
        TapeValue y = b_off < 0 ? d : t.add(d, t.leaf(static_cast<uint32_t>(b_off + r)));
        if (r == 0) out.first = y.id;
    }
    return out;
}

// (x - mean) / sqrt(population variance + eps), over the span.
inline IdSpan layer_norm(Tape& t, IdSpan x, double eps = 1e-5) {
    const double inv_n = 1.0 / x.n;
    TapeValue mean = t.mul_const(t.sum_span(x.first, x.stride, x.n), inv_n);
    IdSpan diff{0, 1, x.n};
    for (uint32_t k = 0; k < x.n; ++k) {
        TapeValue d = t.sub(TapeValue{x.id_at(k), t.value(x.id_at(k))}, mean);
        if (k == 0) diff.first = d.id;
    }
    IdSpan sq{0, 1, x.n};
    for (uint32_t k = 0; k < x.n; ++k) {
        TapeValue dk{diff.id_at(k), t.value(diff.id_at(k))};
        TapeValue s = t.mul(dk, dk);
        if (k == 0) sq.first = s.id;
    }
    TapeValue var = t.mul_const(t.sum_span(sq.first, 1, x.n), inv_n);
    TapeValue denom = t.sqrt(t.add_const(var, eps));
    IdSpan out{0, 1, x.n};
    for (uint32_t k = 0; k < x.n; ++k) {
        TapeValue y = t.div(TapeValue{diff.id_at(k), t.value(diff.id_at(k))}, denom);
        if (k == 0) out.first = y.id;
    }
    return out;
}

// Max-subtracted softmax. The shift is picked from values and enters as a
// constant, which leaves gradients untouched.
inline IdSpan softmax(Tape& t, IdSpan logits) {
    double m = t.value(logits.first);
    for (uint32_t k = 1; k < logits.n; ++k)
        m = std::max(m, t.value(logits.id_at(k)));
    IdSpan exps{0, 2, logits.n};
    for (uint32_t k = 0; k < logits.n; ++k) {
        TapeValue xk{logits.id_at(k), t.value(logits.id_at(k))};
        TapeValue e = t.exp(t.add_const(xk, -m));
        if (k == 0) exps.first = e.id;
    }
    TapeValue total = t.sum_span(exps.first, 2, logits.n);
    IdSpan out{0, 1, logits.n};
    for (uint32_t k = 0; k < logits.n; ++k) {
        TapeValue e{exps.id_at(k), t.value(exps.id_at(k))};
        TapeValue p = t.div(e, total);
        if (k == 0) out.first = p.id;
    }
    return out;
}

inline IdSpan softplus_map(Tape& t, IdSpan x) {
    IdSpan out{0, 1, x.n};
    for (uint32_t k = 0; k < x.n; ++k) {
        TapeValue y = t.softplus(TapeValue{x.id_at(k), t.value(x.id_at(k))});
        if (k == 0) out.first = y.id;
    }
    return out;
}

// Plain MLP stack spec; used for the autoencoder halves and the baselines.
struct DenseLayer {
    size_t w_off;
    ptrdiff_t b_off;  // < 0: bias-free
    uint32_t rows, cols;
    bool softplus;
};

inline IdSpan dense_stack(Tape& t, std::span<const DenseLayer> layers, IdSpan x) {
    IdSpan cur = x;
    for (const DenseLayer& l : layers) {
        cur = linear_rows(t, l.w_off, l.rows, l.cols, cur, l.b_off);
        if (l.softplus) cur = softplus_map(t, cur);
    }
    return cur;
}

} // namespace syrenets
