#include "syrenets/model.hpp"

#include "syrenets/errors.hpp"
#include "syrenets/expr_tape.hpp"
#include "syrenets/nets.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace syrenets {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kCosineFloor = 1e-12;

double sigmoid_v(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus_v(double x) {
    return std::fmax(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

IdSpan span_of(const std::vector<TapeValue>& vals) {
    if (vals.empty()) return {};
    IdSpan s{vals[0].id, 1, static_cast<uint32_t>(vals.size())};
    if (vals.size() > 1) s.stride = vals[1].id - vals[0].id;
    for (size_t k = 1; k < vals.size(); ++k)
        if (vals[k].id != s.first + k * s.stride)
            throw UsageError("internal: irregular id span");
    return s;
}

void check_finite(const Tape& t, size_t from_node, const char* stage) {
    std::span<const double> v = t.node_values();
    for (size_t i = from_node; i < v.size(); ++i)
        if (!std::isfinite(v[i]))
            throw NumericError(std::string("non-finite activation in ") + stage, v[i]);
}

} // namespace

// ============================================================================
// Candidate enumeration
// ============================================================================

std::vector<CandidateSlot> candidate_slots(uint32_t n) {
    if (n < 1) throw UsageError("candidate_slots: need at least one input");
    std::vector<CandidateSlot> slots;
    slots.reserve(n * n + 3 * n);
    for (uint32_t a = 0; a < n; ++a) slots.push_back({CandidateSlot::SinOf, a, 0});
    for (uint32_t a = 0; a < n; ++a) slots.push_back({CandidateSlot::CosOf, a, 0});
    for (uint32_t a = 0; a < n; ++a)
        for (uint32_t b = a; b < n; ++b) slots.push_back({CandidateSlot::AddOf, a, b});
    for (uint32_t a = 0; a < n; ++a)
        for (uint32_t b = a; b < n; ++b) slots.push_back({CandidateSlot::MulOf, a, b});
    return slots;
}

std::vector<ExprId> enumerate_candidate_exprs(ExprStore& store,
                                              std::span<const ExprId> inputs) {
    std::vector<CandidateSlot> slots = candidate_slots(static_cast<uint32_t>(inputs.size()));
    std::vector<ExprId> out;
    out.reserve(slots.size());
    for (const CandidateSlot& s : slots) {
        switch (s.kind) {
        case CandidateSlot::SinOf: out.push_back(store.fold_sin(inputs[s.a])); break;
        case CandidateSlot::CosOf: out.push_back(store.fold_cos(inputs[s.a])); break;
        case CandidateSlot::AddOf: out.push_back(store.fold_add(inputs[s.a], inputs[s.b])); break;
        case CandidateSlot::MulOf: out.push_back(store.fold_mul(inputs[s.a], inputs[s.b])); break;
        }
    }
    return out;
}

std::vector<TapeValue> joint_prob(Tape& t, const std::vector<IdSpan>& heads) {
    if (heads.empty()) throw UsageError("joint_prob: no distributions");
    const uint32_t d_o = heads[0].n;
    std::vector<TapeValue> out(d_o);
    for (uint32_t b = 0; b < d_o; ++b) {
        TapeValue acc{heads[0].id_at(b), t.value(heads[0].id_at(b))};
        for (size_t j = 1; j < heads.size(); ++j)
            acc = t.mul(acc, TapeValue{heads[j].id_at(b), t.value(heads[j].id_at(b))});
        out[b] = acc;
    }
    return out;
}

// ============================================================================
// Exact contractive penalty (value helper + fused tape node)
// ============================================================================

void stack_eval(std::span<const StackLayerRef> layers, std::span<const double> in,
                std::vector<double>& out) {
    std::vector<double> cur(in.begin(), in.end());
    std::vector<double> next;
    for (const StackLayerRef& l : layers) {
        next.assign(l.rows, 0.0);
        for (uint32_t r = 0; r < l.rows; ++r) {
            double a = l.b ? l.b[r] : 0.0;
            const double* w = l.w + static_cast<size_t>(r) * l.cols;
            for (uint32_t c = 0; c < l.cols; ++c) a += w[c] * cur[c];
            next[r] = l.softplus ? softplus_v(a) : a;
        }
        cur.swap(next);
    }
    out = cur;
}

double stack_jacobian_fro2(std::span<const StackLayerRef> layers, const double* v) {
    if (layers.empty()) return 0.0;
    const uint32_t d_in = layers[0].cols;
    std::vector<double> cur(v, v + d_in);
    std::vector<double> pre, jac, jnew;
    bool first = true;
    for (const StackLayerRef& l : layers) {
        pre.assign(l.rows, 0.0);
        for (uint32_t r = 0; r < l.rows; ++r) {
            double a = l.b ? l.b[r] : 0.0;
            const double* w = l.w + static_cast<size_t>(r) * l.cols;
            for (uint32_t c = 0; c < l.cols; ++c) a += w[c] * cur[c];
            pre[r] = a;
        }
        // J <- D_act W J
        jnew.assign(static_cast<size_t>(l.rows) * d_in, 0.0);
        for (uint32_t r = 0; r < l.rows; ++r) {
            double* out_row = jnew.data() + static_cast<size_t>(r) * d_in;
            const double* w = l.w + static_cast<size_t>(r) * l.cols;
            if (first) {
                for (uint32_t c = 0; c < d_in; ++c) out_row[c] = w[c];
            } else {
                for (uint32_t k = 0; k < l.cols; ++k) {
                    const double wk = w[k];
                    if (wk == 0.0) continue;
                    const double* jrow = jac.data() + static_cast<size_t>(k) * d_in;
                    for (uint32_t c = 0; c < d_in; ++c) out_row[c] += wk * jrow[c];
                }
            }
            if (l.softplus) {
                const double d = sigmoid_v(pre[r]);
                for (uint32_t c = 0; c < d_in; ++c) out_row[c] *= d;
            }
        }
        jac.swap(jnew);
        first = false;
        cur.assign(l.rows, 0.0);
        for (uint32_t r = 0; r < l.rows; ++r)
            cur[r] = l.softplus ? softplus_v(pre[r]) : pre[r];
    }
    double p = 0.0;
    for (double x : jac) p += x * x;
    return p;
}

double contractive_penalty(std::span<const StackLayerRef> layers,
                           std::span<const double> V, size_t n_samples) {
    const uint32_t d_in = layers.empty() ? 0 : layers[0].cols;
    double acc = 0.0;
    for (size_t s = 0; s < n_samples; ++s)
        acc += stack_jacobian_fro2(layers, V.data() + s * d_in);
    return acc / static_cast<double>(n_samples);
}

namespace {

// Mean over the batch of ||J_enc(v)||_F^2 with a hand-derived reverse rule.
// Recomputes the encoder internally so the backward is self-contained: it
// scatters into the encoder leaves and the v-dagger tape values.
class ContractivePenaltyNode final : public CustomNode {
public:
    ContractivePenaltyNode(uint32_t d_in, uint32_t h1, uint32_t h2, uint32_t d_out,
                           size_t w1, size_t b1, size_t w2, size_t b2, size_t w3,
                           std::vector<uint32_t> v_firsts)
        : d_in_(d_in), h1_(h1), h2_(h2), d_out_(d_out), w1_(w1), b1_(b1), w2_(w2),
          b2_(b2), w3_(w3), v_firsts_(std::move(v_firsts)) {}

    uint32_t n_outputs() const override { return 1; }

    void forward(const Tape& tape, std::span<double> out) override {
        const size_t N = v_firsts_.size();
        const double* P = tape.leaf_values().data();
        v_.resize(N * d_in_);
        s1_.resize(N * h1_);
        h1v_.resize(N * h1_);
        s2_.resize(N * h2_);
        A_.resize(N * d_out_ * h2_);
        B_.resize(N * d_out_ * h1_);
        C_.resize(N * d_out_ * h1_);
        D_.resize(N * d_out_ * h1_);

        // ||C W1||_F^2 = tr(C G1 C^T) with the Gram matrix G1 = W1 W1^T:
        // shares the d_in-sized contraction across samples.
        G1_.assign(static_cast<size_t>(h1_) * h1_, 0.0);
        for (uint32_t j1 = 0; j1 < h1_; ++j1) {
            const double* r1 = P + w1_ + static_cast<size_t>(j1) * d_in_;
            for (uint32_t j2 = 0; j2 <= j1; ++j2) {
                const double* r2 = P + w1_ + static_cast<size_t>(j2) * d_in_;
                double acc = 0.0;
                for (uint32_t c = 0; c < d_in_; ++c) acc += r1[c] * r2[c];
                G1_[static_cast<size_t>(j1) * h1_ + j2] = acc;
                G1_[static_cast<size_t>(j2) * h1_ + j1] = acc;
            }
        }

        double total = 0.0;
        for (size_t s = 0; s < N; ++s) {
            double* v = v_.data() + s * d_in_;
            for (uint32_t c = 0; c < d_in_; ++c) v[c] = tape.value(v_firsts_[s] + c);
            double* s1 = s1_.data() + s * h1_;
            double* h1v = h1v_.data() + s * h1_;
            double* s2 = s2_.data() + s * h2_;
            for (uint32_t j = 0; j < h1_; ++j) {
                double a = P[b1_ + j];
                const double* w = P + w1_ + static_cast<size_t>(j) * d_in_;
                for (uint32_t c = 0; c < d_in_; ++c) a += w[c] * v[c];
                s1[j] = sigmoid_v(a);
                h1v[j] = softplus_v(a);
            }
            for (uint32_t k = 0; k < h2_; ++k) {
                double a = P[b2_ + k];
                const double* w = P + w2_ + static_cast<size_t>(k) * h1_;
                for (uint32_t j = 0; j < h1_; ++j) a += w[j] * h1v[j];
                s2[k] = sigmoid_v(a);
            }
            double* A = A_.data() + s * d_out_ * h2_;
            double* B = B_.data() + s * d_out_ * h1_;
            double* C = C_.data() + s * d_out_ * h1_;
            double* D = D_.data() + s * d_out_ * h1_;
            for (uint32_t i = 0; i < d_out_; ++i) {
                const double* w3 = P + w3_ + static_cast<size_t>(i) * h2_;
                double* Ai = A + i * h2_;
                for (uint32_t k = 0; k < h2_; ++k) Ai[k] = w3[k] * s2[k];
                double* Bi = B + i * h1_;
                for (uint32_t j = 0; j < h1_; ++j) Bi[j] = 0.0;
                for (uint32_t k = 0; k < h2_; ++k) {
                    const double ak = Ai[k];
                    const double* w2 = P + w2_ + static_cast<size_t>(k) * h1_;
                    for (uint32_t j = 0; j < h1_; ++j) Bi[j] += ak * w2[j];
                }
                double* Ci = C + i * h1_;
                for (uint32_t j = 0; j < h1_; ++j) Ci[j] = Bi[j] * s1[j];
                double* Di = D + i * h1_;
                for (uint32_t j = 0; j < h1_; ++j) Di[j] = 0.0;
                for (uint32_t j = 0; j < h1_; ++j) {
                    const double cj = Ci[j];
                    const double* g1 = G1_.data() + static_cast<size_t>(j) * h1_;
                    for (uint32_t j2 = 0; j2 < h1_; ++j2) Di[j2] += cj * g1[j2];
                }
                for (uint32_t j = 0; j < h1_; ++j) total += Ci[j] * Di[j];
            }
        }
        out[0] = total / static_cast<double>(N);
    }

    void backward(const Tape& tape, std::span<const double> out_adj,
                  std::span<double> adj) override {
        const size_t N = v_firsts_.size();
        const double* P = tape.leaf_values().data();
        const double gamma = out_adj[0] / static_cast<double>(N);
        if (gamma == 0.0) return;

        std::vector<double> dB(d_out_ * h1_), dA(d_out_ * h2_);
        std::vector<double> ds1(h1_), ds2(h2_), da1(h1_), da2(h2_), dh1(h1_);
        std::vector<double> SG(static_cast<size_t>(h1_) * h1_, 0.0);  // sum_s C^T C
        std::vector<double> tmp(d_in_);
        for (size_t s = 0; s < N; ++s) {
            const double* v = v_.data() + s * d_in_;
            const double* s1 = s1_.data() + s * h1_;
            const double* h1v = h1v_.data() + s * h1_;
            const double* s2 = s2_.data() + s * h2_;
            const double* A = A_.data() + s * d_out_ * h2_;
            const double* B = B_.data() + s * d_out_ * h1_;
            const double* C = C_.data() + s * d_out_ * h1_;
            const double* D = D_.data() + s * d_out_ * h1_;

            // dC = 2 gamma D (retained); the W1 path goes through SG below
            for (uint32_t i = 0; i < d_out_; ++i) {
                const double* Ci = C + i * h1_;
                for (uint32_t j1 = 0; j1 < h1_; ++j1) {
                    const double cij1 = Ci[j1];
                    if (cij1 == 0.0) continue;
                    double* sg = SG.data() + static_cast<size_t>(j1) * h1_;
                    for (uint32_t j2 = 0; j2 < h1_; ++j2) sg[j2] += cij1 * Ci[j2];
                }
            }
            // dB = dC . s1 ; ds1_j = sum_i dC_ij B_ij
            std::fill(ds1.begin(), ds1.end(), 0.0);
            for (uint32_t i = 0; i < d_out_; ++i) {
                const double* Bi = B + i * h1_;
                const double* Di = D + i * h1_;
                double* dBi = dB.data() + i * h1_;
                for (uint32_t j = 0; j < h1_; ++j) {
                    const double dcij = 2.0 * gamma * Di[j];
                    dBi[j] = dcij * s1[j];
                    ds1[j] += dcij * Bi[j];
                }
            }
            // dA = dB W2^T ; dW2 += A^T dB
            std::fill(dA.begin(), dA.end(), 0.0);
            for (uint32_t i = 0; i < d_out_; ++i) {
                const double* dBi = dB.data() + i * h1_;
                const double* Ai = A + i * h2_;
                double* dAi = dA.data() + i * h2_;
                for (uint32_t k = 0; k < h2_; ++k) {
                    const double* w2 = P + w2_ + static_cast<size_t>(k) * h1_;
                    double* gw2 = adj.data() + w2_ + static_cast<size_t>(k) * h1_;
                    const double aik = Ai[k];
                    double acc = 0.0;
                    for (uint32_t j = 0; j < h1_; ++j) {
                        acc += dBi[j] * w2[j];
                        gw2[j] += aik * dBi[j];
                    }
                    dAi[k] = acc;
                }
            }
            // dW3 += dA . s2 ; ds2_k = sum_i dA_ik W3_ik
            std::fill(ds2.begin(), ds2.end(), 0.0);
            for (uint32_t i = 0; i < d_out_; ++i) {
                const double* dAi = dA.data() + i * h2_;
                const double* w3 = P + w3_ + static_cast<size_t>(i) * h2_;
                double* gw3 = adj.data() + w3_ + static_cast<size_t>(i) * h2_;
                for (uint32_t k = 0; k < h2_; ++k) {
                    gw3[k] += dAi[k] * s2[k];
                    ds2[k] += dAi[k] * w3[k];
                }
            }
            // da2 = ds2 . s2(1-s2); dW2 += da2 h1v^T; db2 += da2; dh1 = W2^T da2
            for (uint32_t k = 0; k < h2_; ++k) da2[k] = ds2[k] * s2[k] * (1.0 - s2[k]);
            std::fill(dh1.begin(), dh1.end(), 0.0);
            for (uint32_t k = 0; k < h2_; ++k) {
                const double g = da2[k];
                if (g == 0.0) continue;
                const double* w2 = P + w2_ + static_cast<size_t>(k) * h1_;
                double* gw2 = adj.data() + w2_ + static_cast<size_t>(k) * h1_;
                for (uint32_t j = 0; j < h1_; ++j) {
                    gw2[j] += g * h1v[j];
                    dh1[j] += g * w2[j];
                }
                adj[b2_ + k] += g;
            }
            // da1 = ds1 . s1(1-s1) + dh1 . s1 ; dW1 += da1 v^T; db1 += da1; dv = W1^T da1
            for (uint32_t j = 0; j < h1_; ++j)
                da1[j] = ds1[j] * s1[j] * (1.0 - s1[j]) + dh1[j] * s1[j];
            for (uint32_t j = 0; j < h1_; ++j) {
                const double g = da1[j];
                if (g == 0.0) continue;
                const double* w1 = P + w1_ + static_cast<size_t>(j) * d_in_;
                double* gw1 = adj.data() + w1_ + static_cast<size_t>(j) * d_in_;
                double* gv = adj.data() + v_firsts_[s];
                for (uint32_t c = 0; c < d_in_; ++c) {
                    gw1[c] += g * v[c];
                    gv[c] += g * w1[c];
                }
                adj[b1_ + j] += g;
            }
        }

        // dW1 += 2 gamma (sum_s C^T C) W1, once per step
        for (uint32_t j1 = 0; j1 < h1_; ++j1) {
            std::fill(tmp.begin(), tmp.end(), 0.0);
            const double* sg = SG.data() + static_cast<size_t>(j1) * h1_;
            for (uint32_t j2 = 0; j2 < h1_; ++j2) {
                const double coef = sg[j2];
                if (coef == 0.0) continue;
                const double* w1 = P + w1_ + static_cast<size_t>(j2) * d_in_;
                for (uint32_t c = 0; c < d_in_; ++c) tmp[c] += coef * w1[c];
            }
            double* gw1 = adj.data() + w1_ + static_cast<size_t>(j1) * d_in_;
            for (uint32_t c = 0; c < d_in_; ++c) gw1[c] += 2.0 * gamma * tmp[c];
        }
    }

private:
    uint32_t d_in_, h1_, h2_, d_out_;
    size_t w1_, b1_, w2_, b2_, w3_;
    std::vector<uint32_t> v_firsts_;
    std::vector<double> v_, s1_, h1v_, s2_, A_, B_, C_, D_, G1_;
};

} // namespace

// ============================================================================
// SyrenetsModel
// ============================================================================

SyrenetsModel::SyrenetsModel(const ArchConfig& cfg, uint64_t param_seed)
    : cfg_(cfg), store_(StateLayout{cfg.n_joints}) {
    build_params(param_seed);
    build_exprs();
    tau_eval_ = std::make_unique<BatchEvaluator>(store_, tau_exprs_);
    ExprId roots[1] = {fhat_expr_};
    fhat_eval_ = std::make_unique<BatchEvaluator>(store_, roots);
}

void SyrenetsModel::build_params(uint64_t seed) {
    const uint32_t d_o = cfg_.n_candidates();
    const uint32_t d = cfg_.latent_dim;
    const uint32_t h1 = cfg_.ae_hidden1, h2 = cfg_.ae_hidden2;
    const uint32_t r = cfg_.selection_hidden;

    // Only the autoencoder carries biases; every other linear map is bias-free.
    off_.enc_w1 = params_.add_block("enc.w1", h1, d_o, d_o);
    off_.enc_b1 = params_.add_block("enc.b1", 1, h1, d_o);
    off_.enc_w2 = params_.add_block("enc.w2", h2, h1, h1);
    off_.enc_b2 = params_.add_block("enc.b2", 1, h2, h1);
    off_.enc_w3 = params_.add_block("enc.w3", d, h2, h2);
    off_.enc_b3 = params_.add_block("enc.b3", 1, d, h2);
    off_.dec_w1 = params_.add_block("dec.w1", h2, d, d);
    off_.dec_b1 = params_.add_block("dec.b1", 1, h2, d);
    off_.dec_w2 = params_.add_block("dec.w2", h1, h2, h2);
    off_.dec_b2 = params_.add_block("dec.b2", 1, h1, h2);
    off_.dec_w3 = params_.add_block("dec.w3", d_o, h1, h1);
    off_.dec_b3 = params_.add_block("dec.b3", 1, d_o, h1);

    off_.spec.resize(cfg_.n_layers);
    off_.head.resize(cfg_.n_layers);
    for (uint32_t l = 0; l < cfg_.n_layers; ++l) {
        std::string lp = "layer" + std::to_string(l + 1) + ".";
        off_.spec[l] = params_.add_block(lp + "spec", d, d, d);
        off_.head[l].resize(cfg_.n_heads);
        for (uint32_t j = 0; j < cfg_.n_heads; ++j) {
            std::string hp = lp + "head" + std::to_string(j + 1) + ".";
            HeadOffsets& ho = off_.head[l][j];
            ho.focus = params_.add_block(hp + "focus", 1, d, d);
            ho.sel_w1 = params_.add_block(hp + "sel.w1", r, d, d);
            ho.sel_w2 = params_.add_block(hp + "sel.w2", d_o, r, r);
            ho.scale = params_.add_block(hp + "scale", d_o, d_o, d_o);
            ho.gate_w1 = params_.add_block(hp + "gate.w1", 1, d_o, d_o);
            ho.gate_w2 = params_.add_block(hp + "gate.w2", 1, d_o, d_o);
        }
    }
    params_.init_uniform(seed);
}

void SyrenetsModel::build_exprs() {
    const uint32_t d_o = cfg_.n_candidates();
    n_coeff_slots_ = static_cast<size_t>(cfg_.n_layers) * cfg_.n_heads * d_o;

    std::vector<ExprId> x;
    for (uint32_t i = 0; i < cfg_.n_joints; ++i) x.push_back(store_.var(store_.layout().q(i)));
    for (uint32_t i = 0; i < cfg_.n_joints; ++i) x.push_back(store_.var(store_.layout().qd(i)));

    std::vector<ExprId> h(cfg_.n_heads, store_.constant(0.0));
    cand_exprs_.resize(cfg_.n_layers);
    for (uint32_t l = 0; l < cfg_.n_layers; ++l) {
        std::vector<ExprId> inputs(x);
        inputs.insert(inputs.end(), h.begin(), h.end());
        cand_exprs_[l] = enumerate_candidate_exprs(store_, inputs);
        for (uint32_t j = 0; j < cfg_.n_heads; ++j) {
            ExprId acc = store_.constant(0.0);
            for (uint32_t b = 0; b < d_o; ++b)
                acc = store_.fold_add(
                    acc, store_.fold_mul(store_.coeff(coeff_slot(l, j, b)), cand_exprs_[l][b]));
            h[j] = acc;
        }
    }
    ExprId fhat = store_.constant(0.0);
    for (uint32_t j = 0; j < cfg_.n_heads; ++j) fhat = store_.fold_add(fhat, h[j]);
    fhat_expr_ = fhat;
    tau_exprs_ = store_.euler_lagrange(fhat_expr_);
}

ForwardTrace SyrenetsModel::forward(Tape& t, std::span<const StateSample> batch) const {
    const size_t N = batch.size();
    if (N == 0) throw UsageError("forward: empty batch");
    const uint32_t n_in = cfg_.layer_inputs();
    const uint32_t d_o = cfg_.n_candidates();
    const uint32_t d = cfg_.latent_dim;
    const uint32_t k = cfg_.n_heads;
    const std::vector<CandidateSlot> slots = candidate_slots(n_in);

    ForwardTrace tr;
    tr.layers.resize(cfg_.n_layers);

    // layer inputs per sample: x then the previous layer's head outputs
    TapeValue zero = t.constant(0.0);
    std::vector<std::vector<TapeValue>> inputs(N);
    for (size_t s = 0; s < N; ++s) {
        inputs[s].reserve(n_in);
        for (uint32_t i = 0; i < cfg_.n_joints; ++i)
            inputs[s].push_back(t.constant(batch[s].q[i]));
        for (uint32_t i = 0; i < cfg_.n_joints; ++i)
            inputs[s].push_back(t.constant(batch[s].qdot[i]));
        for (uint32_t j = 0; j < k; ++j) inputs[s].push_back(zero);
    }

    const DenseLayer enc[3] = {
        {off_.enc_w1, static_cast<ptrdiff_t>(off_.enc_b1), cfg_.ae_hidden1, d_o, true},
        {off_.enc_w2, static_cast<ptrdiff_t>(off_.enc_b2), cfg_.ae_hidden2, cfg_.ae_hidden1, true},
        {off_.enc_w3, static_cast<ptrdiff_t>(off_.enc_b3), d, cfg_.ae_hidden2, false},
    };
    const DenseLayer dec[3] = {
        {off_.dec_w1, static_cast<ptrdiff_t>(off_.dec_b1), cfg_.ae_hidden2, d, true},
        {off_.dec_w2, static_cast<ptrdiff_t>(off_.dec_b2), cfg_.ae_hidden1, cfg_.ae_hidden2, true},
        {off_.dec_w3, static_cast<ptrdiff_t>(off_.dec_b3), d_o, cfg_.ae_hidden1, false},
    };

    IdSpan prev_joint;  // ones for layer 1
    {
        IdSpan ones{0, 1, d_o};
        for (uint32_t b = 0; b < d_o; ++b) {
            TapeValue one = t.constant(1.0);
            if (b == 0) ones.first = one.id;
        }
        prev_joint = ones;
    }

    for (uint32_t l = 0; l < cfg_.n_layers; ++l) {
        LayerTrace& L = tr.layers[l];
        const size_t layer_node_start = t.n_nodes();

        // ------- candidates -------------------------------------------------
        L.v_rows.resize(N);
        for (size_t s = 0; s < N; ++s) {
            uint32_t first = static_cast<uint32_t>(t.size());
            for (const CandidateSlot& c : slots) {
                switch (c.kind) {
                case CandidateSlot::SinOf: t.sin(inputs[s][c.a]); break;
                case CandidateSlot::CosOf: t.cos(inputs[s][c.a]); break;
                case CandidateSlot::AddOf: t.add(inputs[s][c.a], inputs[s][c.b]); break;
                case CandidateSlot::MulOf: t.mul(inputs[s][c.a], inputs[s][c.b]); break;
                }
            }
            L.v_rows[s] = {first, 1, d_o};
        }

        // ------- layer norm + autoencoder -----------------------------------
        L.vdag_rows.resize(N);
        L.z_rows.resize(N);
        std::vector<TapeValue> recon_per_sample(N);
        for (size_t s = 0; s < N; ++s) {
            L.vdag_rows[s] = layer_norm(t, L.v_rows[s], kLayerNormEps);
            IdSpan z = dense_stack(t, enc, L.vdag_rows[s]);
            L.z_rows[s] = z;
            IdSpan vhat = dense_stack(t, dec, z);
            IdSpan sq{0, 2, d_o};
            for (uint32_t c = 0; c < d_o; ++c) {
                TapeValue diff = t.sub(
                    TapeValue{L.vdag_rows[s].id_at(c), t.value(L.vdag_rows[s].id_at(c))},
                    TapeValue{vhat.id_at(c), t.value(vhat.id_at(c))});
                TapeValue m = t.mul(diff, diff);
                if (c == 0) sq.first = m.id;
            }
            recon_per_sample[s] = t.sum_span(sq.first, 2, d_o);
        }
        TapeValue recon_sum = recon_per_sample[0];
        for (size_t s = 1; s < N; ++s) recon_sum = t.add(recon_sum, recon_per_sample[s]);
        L.recon = t.mul_const(recon_sum, 1.0 / static_cast<double>(N));

        std::vector<uint32_t> vdag_firsts(N);
        for (size_t s = 0; s < N; ++s) vdag_firsts[s] = L.vdag_rows[s].first;
        L.penalty = t.add_custom(std::make_unique<ContractivePenaltyNode>(
            d_o, cfg_.ae_hidden1, cfg_.ae_hidden2, d, off_.enc_w1, off_.enc_b1, off_.enc_w2,
            off_.enc_b2, off_.enc_w3, std::move(vdag_firsts)));

        check_finite(t, layer_node_start, "autoencoder");

        // ------- channel cosine similarity ----------------------------------
        // latent channel c over the batch = strided column through the z rows
        uint32_t z_stride_samples = 0;
        if (N > 1) {
            z_stride_samples = L.z_rows[1].first - L.z_rows[0].first;
            for (size_t s = 1; s < N; ++s)
                if (L.z_rows[s].first != L.z_rows[0].first + s * z_stride_samples)
                    throw UsageError("internal: irregular z layout");
        }
        auto z_col = [&](uint32_t c) {
            return IdSpan{L.z_rows[0].id_at(c), z_stride_samples, static_cast<uint32_t>(N)};
        };
        std::vector<TapeValue> norms(d);
        for (uint32_t c = 0; c < d; ++c) {
            IdSpan col = z_col(c);
            TapeValue nn = t.sqrt(t.dot_span(col.first, col.stride, col.first, col.stride,
                                             col.n));
            norms[c] = t.max_const(nn, kCosineFloor);
        }
        L.similarity.assign(static_cast<size_t>(d) * d, TapeValue{});
        for (uint32_t a = 0; a < d; ++a)
            for (uint32_t b = a; b < d; ++b) {
                IdSpan ca = z_col(a), cb = z_col(b);
                TapeValue num = t.dot_span(ca.first, ca.stride, cb.first, cb.stride, ca.n);
                TapeValue m = t.div(num, t.mul(norms[a], norms[b]));
                L.similarity[a * d + b] = m;
                L.similarity[b * d + a] = m;  // same node: symmetric by construction
            }

        // ------- per-layer specialization (row-wise linear map) -------------
        L.specialized.assign(static_cast<size_t>(d) * d, TapeValue{});
        for (uint32_t rr = 0; rr < d; ++rr) {
            std::vector<TapeValue> mrow(L.similarity.begin() + rr * d,
                                        L.similarity.begin() + (rr + 1) * d);
            for (uint32_t c = 0; c < d; ++c) {
                std::vector<TapeValue> wrow(d);
                for (uint32_t kk = 0; kk < d; ++kk)
                    wrow[kk] = t.leaf(static_cast<uint32_t>(off_.spec[l] + c * d + kk));
                L.specialized[rr * d + c] = t.dot(mrow, wrow);
            }
        }

        // ------- selection heads ---------------------------------------------
        L.heads.resize(k);
        std::vector<IdSpan> p_spans(k);
        for (uint32_t j = 0; j < k; ++j) {
            const HeadOffsets& ho = off_.head[l][j];
            HeadTrace& H = L.heads[j];

            // focus: d x d -> d weighted row sum
            std::vector<TapeValue> focus(d);
            for (uint32_t rr = 0; rr < d; ++rr) {
                std::vector<TapeValue> mrow(L.specialized.begin() + rr * d,
                                            L.specialized.begin() + (rr + 1) * d);
                std::vector<TapeValue> w(d);
                for (uint32_t kk = 0; kk < d; ++kk)
                    w[kk] = t.leaf(static_cast<uint32_t>(ho.focus + kk));
                focus[rr] = t.dot(mrow, w);
            }
            IdSpan f = span_of(focus);

            // selection MLP: layer norm before each activation, no bias
            IdSpan u = linear_rows(t, ho.sel_w1, cfg_.selection_hidden, d, f);
            IdSpan y = softplus_map(t, layer_norm(t, u, kLayerNormEps));
            IdSpan logits = linear_rows(t, ho.sel_w2, d_o, cfg_.selection_hidden, y);
            H.P = softmax(t, layer_norm(t, logits, kLayerNormEps));
            p_spans[j] = H.P;

            // scale: single layer on a constant ones input = row sums
            {
                IdSpan S{0, 1, d_o};
                for (uint32_t b = 0; b < d_o; ++b) {
                    TapeValue sb = t.sum_span(static_cast<uint32_t>(ho.scale + b * d_o), 1, d_o);
                    if (b == 0) S.first = sb.id;
                }
                H.S = S;
            }

            // gate phi = sigma(w1 . P + w2 . prev_joint)
            TapeValue g1 = t.dot_span(static_cast<uint32_t>(ho.gate_w1), 1, H.P.first,
                                      H.P.stride, d_o);
            TapeValue g2 = t.dot_span(static_cast<uint32_t>(ho.gate_w2), 1, prev_joint.first,
                                      prev_joint.stride, d_o);
            H.phi = t.sigmoid(t.add(g1, g2));

            // gated distribution and coefficients
            {
                IdSpan gated{0, 1, d_o};
                for (uint32_t b = 0; b < d_o; ++b) {
                    TapeValue pb{H.P.id_at(b), t.value(H.P.id_at(b))};
                    TapeValue g = t.mul(H.phi, pb);
                    if (b == 0) gated.first = g.id;
                }
                H.gated = gated;
                IdSpan sp{0, 1, d_o};
                for (uint32_t b = 0; b < d_o; ++b) {
                    TapeValue sb{H.S.id_at(b), t.value(H.S.id_at(b))};
                    TapeValue pb{H.P.id_at(b), t.value(H.P.id_at(b))};
                    TapeValue x = t.mul(sb, pb);
                    if (b == 0) sp.first = x.id;
                }
                IdSpan coeff{0, 1, d_o};
                for (uint32_t b = 0; b < d_o; ++b) {
                    TapeValue spb{sp.id_at(b), t.value(sp.id_at(b))};
                    TapeValue c = t.mul(H.phi, spb);
                    if (b == 0) coeff.first = c.id;
                }
                H.coeff = coeff;
            }

            // head output per sample (Eq. 9)
            H.out.resize(N);
            for (size_t s = 0; s < N; ++s)
                H.out[s] = t.dot_span(H.coeff.first, 1, L.v_rows[s].first, 1, d_o);
        }

        check_finite(t, layer_node_start, ("layer " + std::to_string(l + 1)).c_str());

        // ------- joint probability, next-layer inputs ------------------------
        L.joint = joint_prob(t, p_spans);
        prev_joint = span_of(L.joint);

        for (size_t s = 0; s < N; ++s)
            for (uint32_t j = 0; j < k; ++j)
                inputs[s][cfg_.state_dim() + j] = L.heads[j].out[s];
    }

    // final output: sum of the last layer's head outputs (Eq. 10)
    tr.fhat.resize(N);
    const LayerTrace& last = tr.layers[cfg_.n_layers - 1];
    for (size_t s = 0; s < N; ++s) {
        TapeValue acc = last.heads[0].out[s];
        for (uint32_t j = 1; j < k; ++j) acc = t.add(acc, last.heads[j].out[s]);
        tr.fhat[s] = acc;
        if (!std::isfinite(acc.value))
            throw NumericError("non-finite model output", acc.value);
    }
    return tr;
}

std::vector<uint32_t> SyrenetsModel::coeff_tape_ids(const ForwardTrace& tr) const {
    std::vector<uint32_t> ids(n_coeff_slots_, kNoTapeId);
    const uint32_t d_o = cfg_.n_candidates();
    for (uint32_t l = 0; l < cfg_.n_layers; ++l)
        for (uint32_t j = 0; j < cfg_.n_heads; ++j) {
            const IdSpan& c = tr.layers[l].heads[j].coeff;
            for (uint32_t b = 0; b < d_o; ++b) ids[coeff_slot(l, j, b)] = c.id_at(b);
        }
    return ids;
}

std::vector<double> SyrenetsModel::coeff_values(const Tape& t, const ForwardTrace& tr) const {
    std::vector<uint32_t> ids = coeff_tape_ids(tr);
    std::vector<double> vals(ids.size(), 0.0);
    for (size_t i = 0; i < ids.size(); ++i)
        if (ids[i] != kNoTapeId) vals[i] = t.value(ids[i]);
    return vals;
}

std::vector<double> SyrenetsModel::el_states(std::span<const StateSample> batch) const {
    const uint32_t n = cfg_.n_joints;
    std::vector<double> states(batch.size() * 3 * n);
    for (size_t s = 0; s < batch.size(); ++s) {
        double* row = states.data() + s * 3 * n;
        for (uint32_t i = 0; i < n; ++i) row[i] = batch[s].q[i];
        for (uint32_t i = 0; i < n; ++i) row[n + i] = batch[s].qdot[i];
        for (uint32_t i = 0; i < n; ++i) row[2 * n + i] = batch[s].qddot[i];
    }
    return states;
}

LossIds SyrenetsModel::build_loss(Tape& t, std::span<const StateSample> batch,
                                  const LossConfig& cfg) {
    ForwardTrace tr = forward(t, batch);
    const size_t N = batch.size();
    const uint32_t n = cfg_.n_joints;

    TapeValue basic;
    if (cfg.mode == LearnMode::Direct) {
        std::vector<double> targets(N);
        for (size_t s = 0; s < N; ++s) targets[s] = batch[s].lagrangian;
        basic = mse_loss(t, tr.fhat, targets);
    } else {
        TapeValue first = make_expr_batch_node(t, *tau_eval_, el_states(batch), 3 * n, N,
                                               coeff_tape_ids(tr));
        std::vector<TapeValue> preds(N * n);
        std::vector<double> targets(N * n);
        for (size_t s = 0; s < N; ++s)
            for (uint32_t i = 0; i < n; ++i) {
                uint32_t id = first.id + static_cast<uint32_t>(s * n + i);
                preds[s * n + i] = {id, t.value(id)};
                targets[s * n + i] = batch[s].tau[i];
            }
        basic = mse_loss(t, preds, targets);
    }

    std::vector<TapeValue> recons, pens;
    std::vector<std::vector<IdSpan>> gated(cfg_.n_layers);
    for (uint32_t l = 0; l < cfg_.n_layers; ++l) {
        recons.push_back(tr.layers[l].recon);
        pens.push_back(tr.layers[l].penalty);
        for (const HeadTrace& h : tr.layers[l].heads) gated[l].push_back(h.gated);
    }
    AeTermIds ae = ae_loss_terms(t, recons, pens, cfg.lambda1);
    CompTermIds comp = complementary_terms(t, gated, cfg.entropy_floor);
    return assemble_total(t, basic, ae, comp, cfg);
}

void SyrenetsModel::predict(std::span<const StateSample> batch, LearnMode mode,
                            std::vector<double>& out) {
    Tape tape(params_.values());
    ForwardTrace tr = forward(tape, batch);
    if (mode == LearnMode::Direct) {
        out.resize(batch.size());
        for (size_t s = 0; s < batch.size(); ++s) out[s] = tr.fhat[s].value;
    } else {
        out.resize(batch.size() * cfg_.n_joints);
        std::vector<double> coeffs = coeff_values(tape, tr);
        tau_eval_->eval(el_states(batch), 3 * cfg_.n_joints, batch.size(), coeffs, out);
    }
}

ExprId SyrenetsModel::extract_equation(ExtractMode mode,
                                       std::span<const StateSample> reference) {
    Tape tape(params_.values());
    ForwardTrace tr = forward(tape, reference);

    if (mode == ExtractMode::Soft)
        return store_.instantiate_coeffs(fhat_expr_, coeff_values(tape, tr));

    const uint32_t d_o = cfg_.n_candidates();
    std::vector<ExprId> x;
    for (uint32_t i = 0; i < cfg_.n_joints; ++i) x.push_back(store_.var(store_.layout().q(i)));
    for (uint32_t i = 0; i < cfg_.n_joints; ++i) x.push_back(store_.var(store_.layout().qd(i)));
    std::vector<ExprId> h(cfg_.n_heads, store_.constant(0.0));
    for (uint32_t l = 0; l < cfg_.n_layers; ++l) {
        std::vector<ExprId> inputs(x);
        inputs.insert(inputs.end(), h.begin(), h.end());
        std::vector<ExprId> cands = enumerate_candidate_exprs(store_, inputs);
        for (uint32_t j = 0; j < cfg_.n_heads; ++j) {
            const HeadTrace& H = tr.layers[l].heads[j];
            uint32_t best = 0;
            double best_p = tape.value(H.P.id_at(0));
            for (uint32_t b = 1; b < d_o; ++b) {
                double p = tape.value(H.P.id_at(b));
                if (p > best_p) {  // ties break to the lowest index
                    best_p = p;
                    best = b;
                }
            }
            double coeff = H.phi.value * tape.value(H.S.id_at(best));
            h[j] = store_.fold_mul(store_.constant(coeff), cands[best]);
        }
    }
    ExprId f = store_.constant(0.0);
    for (uint32_t j = 0; j < cfg_.n_heads; ++j) f = store_.fold_add(f, h[j]);
    return store_.simplify(f, 1e-6);
}

} // namespace syrenets
