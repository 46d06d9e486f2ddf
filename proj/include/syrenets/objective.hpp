#pragma once

#include "syrenets/tape.hpp"

#include <span>
#include <vector>

namespace syrenets {

enum class LearnMode { Direct, Indirect };

struct LossConfig {
    double lambda1 = 1.0;    // contractive weight inside L_ae
    double lambda2 = 0.001;  // per-head entropy (minimized)
    double lambda3 = 1.0;    // cross-head cross-entropy (maximized)
    LearnMode mode = LearnMode::Indirect;
    double entropy_floor = 1e-12;  // eps inside logs
};

// Weighted terms as they enter the total:
// total = basic + reconstruction + contraction + entropy - cross_entropy.
struct LossBreakdown {
    double total = 0.0;
    double basic = 0.0;
    double reconstruction = 0.0;
    double contraction = 0.0;
    double entropy = 0.0;
    double cross_entropy = 0.0;

    double ae() const { return reconstruction + contraction; }
};

struct LossIds {
    TapeValue total;
    LossBreakdown values;
};

// Mean over entries of squared error; aborts the step on non-finite
// predictions (NumericError).
TapeValue mse_loss(Tape& t, std::span<const TapeValue> preds,
                   std::span<const double> targets);

struct AeTermIds {
    TapeValue reconstruction;  // sum over layer invocations of mean recon
    TapeValue contraction;     // lambda1-weighted sum of mean penalties
};
AeTermIds ae_loss_terms(Tape& t, std::span<const TapeValue> recon_means,
                        std::span<const TapeValue> penalty_means, double lambda1);

// Gated distributions p~ = phi * P per head, grouped by layer, used exactly as
// written (no renormalization). Ordered pairs j' != j are both counted.
struct CompTermIds {
    TapeValue entropy;        // sum_layers sum_heads H(p~)
    TapeValue cross_entropy;  // sum_layers sum_{j' != j} H(p~_{j'}, p~_j)
};
CompTermIds complementary_terms(Tape& t,
                                const std::vector<std::vector<IdSpan>>& gated_by_layer,
                                double entropy_floor);

// total = basic + recon + contraction + lambda2*H - lambda3*X, recorded in
// that order so the breakdown reproduces the tape value exactly.
LossIds assemble_total(Tape& t, TapeValue basic, const AeTermIds& ae,
                       const CompTermIds& comp, const LossConfig& cfg);

} // namespace syrenets
