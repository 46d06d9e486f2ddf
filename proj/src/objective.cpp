#include "syrenets/objective.hpp"

#include "syrenets/errors.hpp"

#include <cmath>

namespace syrenets {

TapeValue mse_loss(Tape& t, std::span<const TapeValue> preds,
                   std::span<const double> targets) {
    if (preds.size() != targets.size() || preds.empty())
        throw UsageError("mse_loss: prediction/target size mismatch");
    for (const TapeValue& p : preds)
        if (!std::isfinite(p.value))
            throw NumericError("mse_loss: non-finite prediction", p.value);

    // (add_const, mul) pair per entry: squared errors sit at stride 2
    IdSpan sq{0, 2, static_cast<uint32_t>(preds.size())};
    for (size_t i = 0; i < preds.size(); ++i) {
        TapeValue e = t.add_const(preds[i], -targets[i]);
        TapeValue s = t.mul(e, e);
        if (i == 0) sq.first = s.id;
    }
    TapeValue total = t.sum_span(sq.first, 2, sq.n);
    return t.mul_const(total, 1.0 / static_cast<double>(preds.size()));
}

AeTermIds ae_loss_terms(Tape& t, std::span<const TapeValue> recon_means,
                        std::span<const TapeValue> penalty_means, double lambda1) {
    TapeValue recon = t.constant(0.0);
    for (const TapeValue& r : recon_means) recon = t.add(recon, r);
    TapeValue pen = t.constant(0.0);
    for (const TapeValue& p : penalty_means) pen = t.add(pen, p);
    return {recon, t.mul_const(pen, lambda1)};
}

CompTermIds complementary_terms(Tape& t,
                                const std::vector<std::vector<IdSpan>>& gated_by_layer,
                                double entropy_floor) {
    TapeValue ent = t.constant(0.0);
    TapeValue xent = t.constant(0.0);
    for (const auto& heads : gated_by_layer) {
        const size_t k = heads.size();
        // log(p~ + eps) per head, reused by the self and cross terms
        std::vector<IdSpan> logs(k);
        for (size_t j = 0; j < k; ++j) {
            const IdSpan& p = heads[j];
            IdSpan lp{0, 2, p.n};
            for (uint32_t b = 0; b < p.n; ++b) {
                TapeValue pb{p.id_at(b), t.value(p.id_at(b))};
                TapeValue l = t.log(t.add_const(pb, entropy_floor));
                if (b == 0) lp.first = l.id;
            }
            logs[j] = lp;
        }
        for (size_t j = 0; j < k; ++j) {
            TapeValue h = t.mul_const(
                t.dot_span(heads[j].first, heads[j].stride, logs[j].first, logs[j].stride,
                           heads[j].n),
                -1.0);
            ent = t.add(ent, h);
            for (size_t jp = 0; jp < k; ++jp) {
                if (jp == j) continue;
                TapeValue x = t.mul_const(
                    t.dot_span(heads[jp].first, heads[jp].stride, logs[j].first,
                               logs[j].stride, heads[j].n),
                    -1.0);
                xent = t.add(xent, x);
            }
        }
    }
    return {ent, xent};
}

LossIds assemble_total(Tape& t, TapeValue basic, const AeTermIds& ae,
                       const CompTermIds& comp, const LossConfig& cfg) {
    TapeValue ent_w = t.mul_const(comp.entropy, cfg.lambda2);
    TapeValue xent_w = t.mul_const(comp.cross_entropy, cfg.lambda3);
    TapeValue total = t.add(basic, ae.reconstruction);
    total = t.add(total, ae.contraction);
    total = t.add(total, ent_w);
    total = t.sub(total, xent_w);

    LossIds out;
    out.total = total;
    out.values.total = total.value;
    out.values.basic = basic.value;
    out.values.reconstruction = ae.reconstruction.value;
    out.values.contraction = ae.contraction.value;
    out.values.entropy = ent_w.value;
    out.values.cross_entropy = xent_w.value;
    return out;
}

} // namespace syrenets
