#pragma once

#include "syrenets/expr.hpp"
#include "syrenets/mechanics.hpp"
#include "syrenets/objective.hpp"
#include "syrenets/params.hpp"
#include "syrenets/tape.hpp"
#include "syrenets/trainable.hpp"

#include <array>
#include <span>
#include <string>
#include <vector>

namespace syrenets {

// ============================================================================
// SyReNets: stacked symbolic layers, each enumerating candidate terms over its
// inputs, embedding them with one shared contractive autoencoder, comparing
// latent channels by cosine similarity over the batch, and selecting terms
// with k gated softmax heads. The network simultaneously maintains a symbolic
// expression whose coefficient slots carry the head outputs, so the learned
// object is a genuine equation.
// ============================================================================

struct ArchConfig {
    uint32_t n_joints = 2;
    uint32_t n_layers = 3;
    uint32_t n_heads = 12;          // k
    uint32_t latent_dim = 16;       // d
    uint32_t selection_hidden = 64; // r
    uint32_t ae_hidden1 = 128;
    uint32_t ae_hidden2 = 128;

    uint32_t state_dim() const { return 2 * n_joints; }  // model inputs: (q, qd)
    // Layer 1 sees x concatenated with a zero vector of length k, so every
    // layer has the same input width and candidate count.
    uint32_t layer_inputs() const { return state_dim() + n_heads; }
    uint32_t n_candidates() const {
        uint32_t n = layer_inputs();
        return n * n + 3 * n;
    }
};

// Candidate enumeration order: sin(u_a), cos(u_a), u_a+u_b (a<=b), u_a*u_b
// (a<=b). Positional slots are kept even when expressions deduplicate.
struct CandidateSlot {
    enum Kind : uint8_t { SinOf, CosOf, AddOf, MulOf } kind;
    uint32_t a = 0, b = 0;
};
std::vector<CandidateSlot> candidate_slots(uint32_t n_inputs);

std::vector<ExprId> enumerate_candidate_exprs(ExprStore& store,
                                              std::span<const ExprId> inputs);

// Joint selection probability of one layer: elementwise product of its head
// distributions (not renormalized).
std::vector<TapeValue> joint_prob(Tape& t, const std::vector<IdSpan>& heads);

// ----------------------------------------------------------------------------
// Exact contractive penalty ||J(v)||_F^2 of a dense stack (the encoder
// family): weights row-major, optional bias, optional softplus per layer.
// ----------------------------------------------------------------------------
struct StackLayerRef {
    const double* w = nullptr;  // rows x cols
    const double* b = nullptr;  // nullable
    uint32_t rows = 0, cols = 0;
    bool softplus = false;
};
void stack_eval(std::span<const StackLayerRef> layers, std::span<const double> in,
                std::vector<double>& out);
double stack_jacobian_fro2(std::span<const StackLayerRef> layers, const double* v);
// Mean over samples; V is n_samples x d_in row-major.
double contractive_penalty(std::span<const StackLayerRef> layers,
                           std::span<const double> V, size_t n_samples);

// ----------------------------------------------------------------------------
// Per-step traces.
// ----------------------------------------------------------------------------
struct HeadTrace {
    IdSpan P;       // selection distribution (sums to 1)
    IdSpan S;       // scale vector
    IdSpan gated;   // phi * P (complementary loss input)
    IdSpan coeff;   // phi * S_b * P_b, feeds the symbolic coefficient slots
    TapeValue phi;  // on-off gate, strictly in (0,1)
    std::vector<TapeValue> out;  // per-sample head output values
};

struct LayerTrace {
    std::vector<IdSpan> v_rows;     // per-sample candidate values (d_o)
    std::vector<IdSpan> vdag_rows;  // layer-normalized candidates
    std::vector<IdSpan> z_rows;     // latents (d)
    std::vector<TapeValue> similarity;   // d x d, shared ids across the diagonal
    std::vector<TapeValue> specialized;  // d x d after the per-layer linear map
    TapeValue recon;    // mean over samples of sum_c (vdag - vhat)^2
    TapeValue penalty;  // mean over samples of ||J_enc||_F^2
    std::vector<TapeValue> joint;  // d_o joint probability of this layer
    std::vector<HeadTrace> heads;
};

struct ForwardTrace {
    std::vector<TapeValue> fhat;  // per-sample model output
    std::vector<LayerTrace> layers;
};

enum class ExtractMode { Soft, Argmax };

class SyrenetsModel : public TrainableModel {
public:
    SyrenetsModel(const ArchConfig& cfg, uint64_t param_seed);

    std::string kind() const override { return "syrenets"; }
    ParamStore& param_store() override { return params_; }

    const ArchConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    ExprStore& store() { return store_; }
    const ExprStore& store() const { return store_; }

    ExprId fhat_expr() const { return fhat_expr_; }
    std::span<const ExprId> tau_exprs() const { return tau_exprs_; }
    size_t n_coeff_slots() const { return n_coeff_slots_; }
    uint32_t coeff_slot(uint32_t layer, uint32_t head, uint32_t b) const {
        return (layer * cfg_.n_heads + head) * cfg_.n_candidates() + b;
    }

    // Records the whole batch; model inputs are (q, qd) only. Throws
    // NumericError when a non-finite activation shows up.
    ForwardTrace forward(Tape& t, std::span<const StateSample> batch) const;

    // slot -> tape id (and values) of every coefficient in the trace.
    std::vector<uint32_t> coeff_tape_ids(const ForwardTrace& tr) const;
    std::vector<double> coeff_values(const Tape& t, const ForwardTrace& tr) const;

    // Persistent evaluators for the Euler-Lagrange pathway and fhat.
    BatchEvaluator& tau_evaluator() { return *tau_eval_; }
    BatchEvaluator& fhat_evaluator() { return *fhat_eval_; }

    // Training loss. Indirect mode maps fhat through the symbolic
    // Euler-Lagrange transform with frozen coefficients.
    LossIds build_loss(Tape& t, std::span<const StateSample> batch,
                       const LossConfig& cfg) override;

    // No-grad predictions; direct: one value per sample, indirect: n_joints.
    void predict(std::span<const StateSample> batch, LearnMode mode,
                 std::vector<double>& out) override;

    // Soft keeps the full coefficient-weighted expression; argmax replaces
    // each head's P by a one-hot at its argmax bin (ties to the lowest index),
    // keeps S and phi, and simplifies with eps = 1e-6.
    ExprId extract_equation(ExtractMode mode, std::span<const StateSample> reference);

private:
    void build_params(uint64_t seed);
    void build_exprs();
    std::vector<double> el_states(std::span<const StateSample> batch) const;

    ArchConfig cfg_;
    ParamStore params_;
    ExprStore store_;
    std::vector<std::vector<ExprId>> cand_exprs_;  // per layer, d_o slots
    ExprId fhat_expr_ = kNoExpr;
    std::vector<ExprId> tau_exprs_;
    size_t n_coeff_slots_ = 0;
    std::unique_ptr<BatchEvaluator> tau_eval_;
    std::unique_ptr<BatchEvaluator> fhat_eval_;

    // cached block offsets
    struct HeadOffsets {
        size_t focus, sel_w1, sel_w2, scale, gate_w1, gate_w2;
    };
    struct Offsets {
        size_t enc_w1, enc_b1, enc_w2, enc_b2, enc_w3, enc_b3;
        size_t dec_w1, dec_b1, dec_w2, dec_b2, dec_w3, dec_b3;
        std::vector<size_t> spec;                   // per layer
        std::vector<std::vector<HeadOffsets>> head; // per layer, per head
    } off_;
};

} // namespace syrenets
