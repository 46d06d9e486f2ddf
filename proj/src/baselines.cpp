#include "syrenets/baselines.hpp"

#include "syrenets/errors.hpp"
#include "syrenets/expr_tape.hpp"
#include "syrenets/nets.hpp"

#include <cmath>
#include <map>

namespace syrenets {

// ============================================================================
// Finite-difference Euler-Lagrange stencil
// ============================================================================

std::vector<TapeValue> el_stencil(Tape& t, const TapeLagrangian& L, const StateSample& s,
                                  double h) {
    if (h <= 0.0) throw UsageError("el_stencil: h must be > 0");
    const size_t n = s.q.size();

    // evaluation cache keyed by up to two perturbations (coord, sign);
    // coord < n perturbs q, otherwise qd.
    std::map<std::array<uint32_t, 4>, TapeValue> cache;
    std::vector<double> q(s.q), qd(s.qdot);
    auto eval_at = [&](std::array<std::pair<uint32_t, int>, 2> pert, size_t n_pert) {
        std::array<uint32_t, 4> key{0xffffffffu, 0, 0xffffffffu, 0};
        if (n_pert == 2 && pert[1].first < pert[0].first) std::swap(pert[0], pert[1]);
        for (size_t i = 0; i < n_pert; ++i) {
            key[2 * i] = pert[i].first;
            key[2 * i + 1] = pert[i].second > 0 ? 1u : 0u;
        }
        auto it = cache.find(key);
        if (it != cache.end()) return it->second;
        for (size_t i = 0; i < n_pert; ++i) {
            double d = pert[i].second > 0 ? h : -h;
            if (pert[i].first < n) q[pert[i].first] += d;
            else qd[pert[i].first - n] += d;
        }
        TapeValue v = L(t, q, qd);
        for (size_t i = 0; i < n_pert; ++i) {
            double d = pert[i].second > 0 ? h : -h;
            if (pert[i].first < n) q[pert[i].first] -= d;
            else qd[pert[i].first - n] -= d;
        }
        cache.emplace(key, v);
        return v;
    };
    auto center = eval_at({}, 0);

    const double inv4h2 = 1.0 / (4.0 * h * h);
    const double invh2 = 1.0 / (h * h);
    const double inv2h = 1.0 / (2.0 * h);

    std::vector<TapeValue> tau(n);
    for (uint32_t i = 0; i < n; ++i) {
        const uint32_t qdi = static_cast<uint32_t>(n) + i;
        TapeValue acc = t.constant(0.0);
        for (uint32_t j = 0; j < n; ++j) {
            // d2L/(dqd_i dq_j) * qd_j
            TapeValue pp = eval_at({{{qdi, +1}, {j, +1}}}, 2);
            TapeValue pm = eval_at({{{qdi, +1}, {j, -1}}}, 2);
            TapeValue mp = eval_at({{{qdi, -1}, {j, +1}}}, 2);
            TapeValue mm = eval_at({{{qdi, -1}, {j, -1}}}, 2);
            TapeValue d2 = t.mul_const(t.add(t.sub(pp, pm), t.sub(mm, mp)), inv4h2);
            acc = t.add(acc, t.mul_const(d2, s.qdot[j]));
        }
        for (uint32_t j = 0; j < n; ++j) {
            // d2L/(dqd_i dqd_j) * qdd_j
            const uint32_t qdj = static_cast<uint32_t>(n) + j;
            TapeValue d2;
            if (i == j) {
                TapeValue p = eval_at({{{qdi, +1}, {0, 0}}}, 1);
                TapeValue m = eval_at({{{qdi, -1}, {0, 0}}}, 1);
                d2 = t.mul_const(t.add(t.sub(p, t.mul_const(center, 2.0)), m), invh2);
            } else {
                TapeValue pp = eval_at({{{qdi, +1}, {qdj, +1}}}, 2);
                TapeValue pm = eval_at({{{qdi, +1}, {qdj, -1}}}, 2);
                TapeValue mp = eval_at({{{qdi, -1}, {qdj, +1}}}, 2);
                TapeValue mm = eval_at({{{qdi, -1}, {qdj, -1}}}, 2);
                d2 = t.mul_const(t.add(t.sub(pp, pm), t.sub(mm, mp)), inv4h2);
            }
            acc = t.add(acc, t.mul_const(d2, s.qddot[j]));
        }
        // - dL/dq_i
        TapeValue p = eval_at({{{i, +1}, {0, 0}}}, 1);
        TapeValue m = eval_at({{{i, -1}, {0, 0}}}, 1);
        acc = t.sub(acc, t.mul_const(t.sub(p, m), inv2h));
        tau[i] = acc;
    }
    return tau;
}

// ============================================================================
// MLP baseline
// ============================================================================

MlpModel::MlpModel(const MlpConfig& cfg, uint64_t param_seed) : cfg_(cfg) {
    uint32_t in = cfg.in_dim();
    for (uint32_t l = 0; l < cfg.n_hidden_layers; ++l) {
        std::string p = "l" + std::to_string(l + 1) + ".";
        Layer layer;
        layer.rows = cfg.width;
        layer.cols = l == 0 ? in : cfg.width;
        layer.w = params_.add_block(p + "w", layer.rows, layer.cols, layer.cols);
        layer.b = params_.add_block(p + "b", 1, layer.rows, layer.cols);
        layers_.push_back(layer);
    }
    Layer head;
    head.rows = 1;
    head.cols = cfg.width;
    head.w = params_.add_block("out.w", 1, cfg.width, cfg.width);
    head.b = params_.add_block("out.b", 1, 1, cfg.width);
    layers_.push_back(head);
    params_.init_uniform(param_seed);
    if (params_.size() != cfg.n_params())
        throw UsageError("mlp parameter count mismatch");
}

TapeValue MlpModel::forward_one(Tape& t, std::span<const double> q,
                                std::span<const double> qd) const {
    IdSpan x{0, 1, cfg_.in_dim()};
    for (uint32_t i = 0; i < q.size(); ++i) {
        TapeValue c = t.constant(q[i]);
        if (i == 0) x.first = c.id;
    }
    for (uint32_t i = 0; i < qd.size(); ++i) t.constant(qd[i]);
    IdSpan cur = x;
    for (size_t l = 0; l < layers_.size(); ++l) {
        cur = linear_rows(t, layers_[l].w, layers_[l].rows, layers_[l].cols, cur,
                          static_cast<ptrdiff_t>(layers_[l].b));
        if (l + 1 < layers_.size()) cur = softplus_map(t, cur);
    }
    return {cur.first, t.value(cur.first)};
}

std::vector<TapeValue> MlpModel::forward_values(Tape& t,
                                                std::span<const StateSample> batch) const {
    std::vector<TapeValue> out;
    out.reserve(batch.size());
    for (const StateSample& s : batch) {
        TapeValue v = forward_one(t, s.q, s.qdot);
        if (!std::isfinite(v.value))
            throw NumericError("non-finite MLP output", v.value);
        out.push_back(v);
    }
    return out;
}

std::vector<TapeValue> MlpModel::indirect_torques(Tape& t,
                                                  std::span<const StateSample> batch,
                                                  double h) const {
    TapeLagrangian L = [this](Tape& tape, std::span<const double> q,
                              std::span<const double> qd) {
        return forward_one(tape, q, qd);
    };
    std::vector<TapeValue> out;
    out.reserve(batch.size() * cfg_.n_joints);
    for (const StateSample& s : batch) {
        std::vector<TapeValue> tau = el_stencil(t, L, s, h);
        out.insert(out.end(), tau.begin(), tau.end());
    }
    return out;
}

LossIds MlpModel::build_loss(Tape& t, std::span<const StateSample> batch,
                             const LossConfig& cfg) {
    TapeValue basic;
    if (cfg.mode == LearnMode::Direct) {
        std::vector<TapeValue> preds = forward_values(t, batch);
        std::vector<double> targets(batch.size());
        for (size_t s = 0; s < batch.size(); ++s) targets[s] = batch[s].lagrangian;
        basic = mse_loss(t, preds, targets);
    } else {
        std::vector<TapeValue> preds = indirect_torques(t, batch, cfg_.stencil_h);
        std::vector<double> targets;
        targets.reserve(preds.size());
        for (const StateSample& s : batch)
            targets.insert(targets.end(), s.tau.begin(), s.tau.end());
        basic = mse_loss(t, preds, targets);
    }
    LossIds out;
    out.total = basic;
    out.values.total = basic.value;
    out.values.basic = basic.value;
    return out;
}

void MlpModel::predict(std::span<const StateSample> batch, LearnMode mode,
                       std::vector<double>& out) {
    Tape tape(params_.values());
    if (mode == LearnMode::Direct) {
        std::vector<TapeValue> preds = forward_values(tape, batch);
        out.resize(preds.size());
        for (size_t i = 0; i < preds.size(); ++i) out[i] = preds[i].value;
    } else {
        std::vector<TapeValue> preds = indirect_torques(tape, batch, cfg_.stencil_h);
        out.resize(preds.size());
        for (size_t i = 0; i < preds.size(); ++i) out[i] = preds[i].value;
    }
}

// ============================================================================
// SysId baseline
// ============================================================================

SysIdModel::SysIdModel(uint64_t param_seed, double g) : store_(StateLayout{2}) {
    w1_ = params_.add_block("est.w1", 64, 1, 1);
    w2_ = params_.add_block("est.w2", 4, 64, 64);
    params_.init_uniform(param_seed);

    // structural Lagrangian over coefficient slots (m1, l1, m2, l2)
    const StateLayout& lay = store_.layout();
    ExprId q1 = store_.var(lay.q(0)), q2 = store_.var(lay.q(1));
    ExprId qd1 = store_.var(lay.qd(0)), qd2 = store_.var(lay.qd(1));
    ExprId m1 = store_.coeff(0), l1 = store_.coeff(1);
    ExprId m2 = store_.coeff(2), l2 = store_.coeff(3);

    ExprId diff = store_.fold_add(q1, store_.negate(q2));
    ExprId k1 = store_.fold_mul(
        store_.constant(0.5),
        store_.fold_mul(store_.fold_add(store_.fold_mul(store_.constant(1.0 / 3.0), m1), m2),
                        store_.fold_mul(l1, l1)));
    ExprId t1 = store_.fold_mul(k1, store_.fold_mul(qd1, qd1));
    ExprId k2 = store_.fold_mul(store_.constant(1.0 / 6.0),
                                store_.fold_mul(m2, store_.fold_mul(l2, l2)));
    ExprId t2 = store_.fold_mul(k2, store_.fold_mul(qd2, qd2));
    ExprId k3 = store_.fold_mul(store_.constant(0.5),
                                store_.fold_mul(m2, store_.fold_mul(l1, l2)));
    ExprId t3 = store_.fold_mul(
        k3, store_.fold_mul(store_.fold_mul(qd1, qd2), store_.fold_cos(diff)));
    ExprId k4 = store_.fold_mul(
        store_.fold_add(store_.fold_mul(store_.constant(0.5), m1), m2),
        store_.fold_mul(store_.constant(g), l1));
    ExprId t4 = store_.fold_mul(k4, store_.fold_cos(q1));
    ExprId k5 = store_.fold_mul(store_.fold_mul(store_.constant(0.5 * g), m2), l2);
    ExprId t5 = store_.fold_mul(k5, store_.fold_cos(q2));
    lhat_ = store_.fold_add(
        store_.fold_add(store_.fold_add(store_.fold_add(t1, t2), t3), t4), t5);
    taus_ = store_.euler_lagrange(lhat_);

    tau_eval_ = std::make_unique<BatchEvaluator>(store_, taus_);
    ExprId roots[1] = {lhat_};
    l_eval_ = std::make_unique<BatchEvaluator>(store_, roots);
}

std::array<TapeValue, 4> SysIdModel::estimates(Tape& t) const {
    TapeValue one = t.constant(1.0);
    IdSpan x{one.id, 1, 1};
    IdSpan hidden = softplus_map(t, linear_rows(t, w1_, 64, 1, x));
    IdSpan outs = linear_rows(t, w2_, 4, 64, hidden);
    std::array<TapeValue, 4> est;
    for (uint32_t i = 0; i < 4; ++i)
        est[i] = {outs.id_at(i), t.value(outs.id_at(i))};
    return est;
}

std::array<double, 4> SysIdModel::estimate_values() const {
    Tape tape(params_.values());
    std::array<TapeValue, 4> est = estimates(tape);
    return {est[0].value, est[1].value, est[2].value, est[3].value};
}

void SysIdModel::set_exact(const PendulumParams& p) {
    // zero hidden weights make every hidden unit softplus(0) = ln 2
    std::span<double> w1 = params_.block_values("est.w1");
    for (double& v : w1) v = 0.0;
    std::span<double> w2 = params_.block_values("est.w2");
    for (double& v : w2) v = 0.0;
    const double ln2 = std::log(2.0);
    w2[0 * 64] = p.m1 / ln2;
    w2[1 * 64] = p.l1 / ln2;
    w2[2 * 64] = p.m2 / ln2;
    w2[3 * 64] = p.l2 / ln2;
}

std::vector<double> SysIdModel::el_states(std::span<const StateSample> batch) const {
    std::vector<double> states(batch.size() * 6);
    for (size_t s = 0; s < batch.size(); ++s) {
        double* row = states.data() + s * 6;
        row[0] = batch[s].q[0];
        row[1] = batch[s].q[1];
        row[2] = batch[s].qdot[0];
        row[3] = batch[s].qdot[1];
        row[4] = batch[s].qddot[0];
        row[5] = batch[s].qddot[1];
    }
    return states;
}

LossIds SysIdModel::build_loss(Tape& t, std::span<const StateSample> batch,
                               const LossConfig& cfg) {
    std::array<TapeValue, 4> est = estimates(t);
    std::vector<uint32_t> coeff_ids{est[0].id, est[1].id, est[2].id, est[3].id};
    const size_t N = batch.size();

    TapeValue basic;
    if (cfg.mode == LearnMode::Direct) {
        TapeValue first = make_expr_batch_node(t, *l_eval_, el_states(batch), 6, N, coeff_ids);
        std::vector<TapeValue> preds(N);
        std::vector<double> targets(N);
        for (size_t s = 0; s < N; ++s) {
            uint32_t id = first.id + static_cast<uint32_t>(s);
            preds[s] = {id, t.value(id)};
            targets[s] = batch[s].lagrangian;
        }
        basic = mse_loss(t, preds, targets);
    } else {
        TapeValue first = make_expr_batch_node(t, *tau_eval_, el_states(batch), 6, N, coeff_ids);
        std::vector<TapeValue> preds(N * 2);
        std::vector<double> targets(N * 2);
        for (size_t s = 0; s < N; ++s)
            for (uint32_t i = 0; i < 2; ++i) {
                uint32_t id = first.id + static_cast<uint32_t>(s * 2 + i);
                preds[s * 2 + i] = {id, t.value(id)};
                targets[s * 2 + i] = batch[s].tau[i];
            }
        basic = mse_loss(t, preds, targets);
    }
    LossIds out;
    out.total = basic;
    out.values.total = basic.value;
    out.values.basic = basic.value;
    return out;
}

void SysIdModel::predict(std::span<const StateSample> batch, LearnMode mode,
                         std::vector<double>& out) {
    std::array<double, 4> est = estimate_values();
    std::vector<double> coeffs(est.begin(), est.end());
    if (mode == LearnMode::Direct) {
        out.resize(batch.size());
        l_eval_->eval(el_states(batch), 6, batch.size(), coeffs, out);
    } else {
        out.resize(batch.size() * 2);
        tau_eval_->eval(el_states(batch), 6, batch.size(), coeffs, out);
    }
}

} // namespace syrenets
