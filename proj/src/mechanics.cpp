#include "syrenets/mechanics.hpp"

#include "syrenets/errors.hpp"
#include "syrenets/rng.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace syrenets {

void PendulumParams::validate() const {
    if (m1 <= 0 || m2 <= 0 || l1 <= 0 || l2 <= 0 || g <= 0)
        throw UsageError("pendulum parameters must be strictly positive");
}

ExprId dp_lagrangian_expr(ExprStore& store, const PendulumParams& p) {
    p.validate();
    if (store.layout().n_joints != 2)
        throw UsageError("dp_lagrangian_expr: store layout must have 2 joints");
    const StateLayout& lay = store.layout();
    ExprId q1 = store.var(lay.q(0));
    ExprId q2 = store.var(lay.q(1));
    ExprId qd1 = store.var(lay.qd(0));
    ExprId qd2 = store.var(lay.qd(1));

    const double c_k1 = 0.5 * (p.m1 / 3.0 + p.m2) * p.l1 * p.l1;
    const double c_k2 = 0.5 * (p.m2 / 3.0) * p.l2 * p.l2;
    const double c_cross = 0.5 * p.m2 * p.l1 * p.l2;
    const double c_g1 = (p.m1 / 2.0 + p.m2) * p.g * p.l1;
    const double c_g2 = (p.m2 / 2.0) * p.g * p.l2;

    ExprId diff = store.fold_add(q1, store.negate(q2));
    ExprId t1 = store.fold_mul(store.constant(c_k1), store.fold_mul(qd1, qd1));
    ExprId t2 = store.fold_mul(store.constant(c_k2), store.fold_mul(qd2, qd2));
    ExprId t3 = store.fold_mul(store.constant(c_cross),
                               store.fold_mul(store.fold_mul(qd1, qd2), store.fold_cos(diff)));
    ExprId t4 = store.fold_mul(store.constant(c_g1), store.fold_cos(q1));
    ExprId t5 = store.fold_mul(store.constant(c_g2), store.fold_cos(q2));
    return store.fold_add(store.fold_add(store.fold_add(store.fold_add(t1, t2), t3), t4), t5);
}

Pendulum Pendulum::make(const PendulumParams& p) {
    Pendulum pend;
    pend.params = p;
    pend.store = ExprStore(StateLayout{2});
    pend.lagrangian = dp_lagrangian_expr(pend.store, p);
    pend.taus = pend.store.euler_lagrange(pend.lagrangian);
    return pend;
}

std::vector<double> inverse_dynamics_fd(const LagrangianFn& L,
                                        std::span<const double> q,
                                        std::span<const double> qd,
                                        std::span<const double> qdd, double h) {
    if (h <= 0.0) throw UsageError("inverse_dynamics_fd: h must be > 0");
    const size_t n = q.size();
    std::vector<double> wq(q.begin(), q.end());
    std::vector<double> wqd(qd.begin(), qd.end());

    auto at = [&](size_t qi, double dq, size_t qdi, double dqd) {
        wq[qi] += dq;
        wqd[qdi] += dqd;
        double v = L(wq, wqd);
        wq[qi] -= dq;
        wqd[qdi] -= dqd;
        return v;
    };

    const double base = L(wq, wqd);
    std::vector<double> tau(n, 0.0);
    for (size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        // sum_j d2L/(dqd_i dq_j) qd_j
        for (size_t j = 0; j < n; ++j) {
            double d2 = (at(j, h, i, h) - at(j, -h, i, h) - at(j, h, i, -h) + at(j, -h, i, -h)) /
                        (4.0 * h * h);
            acc += d2 * qd[j];
        }
        // sum_j d2L/(dqd_i dqd_j) qdd_j
        for (size_t j = 0; j < n; ++j) {
            double d2;
            if (i == j) {
                d2 = (at(0, 0.0, i, h) - 2.0 * base + at(0, 0.0, i, -h)) / (h * h);
            } else {
                auto at2 = [&](double di, double dj) {
                    wqd[i] += di;
                    wqd[j] += dj;
                    double v = L(wq, wqd);
                    wqd[i] -= di;
                    wqd[j] -= dj;
                    return v;
                };
                d2 = (at2(h, h) - at2(h, -h) - at2(-h, h) + at2(-h, -h)) / (4.0 * h * h);
            }
            acc += d2 * qdd[j];
        }
        // - dL/dq_i
        acc -= (at(i, h, i, 0.0) - at(i, -h, i, 0.0)) / (2.0 * h);
        tau[i] = acc;
    }
    return tau;
}

Dataset sample_dataset(size_t count, uint64_t seed, double range_lo, double range_hi,
                       const PendulumParams& params) {
    Pendulum pend = Pendulum::make(params);
    const size_t n = 2;

    Dataset ds;
    ds.seed = seed;
    ds.range_lo = range_lo;
    ds.range_hi = range_hi;
    ds.params = params;
    ds.samples.resize(count);

    Rng rng(seed);
    std::vector<double> states(count * 3 * n);
    for (size_t s = 0; s < count; ++s)
        for (size_t k = 0; k < 3 * n; ++k)
            states[s * 3 * n + k] = rng.uniform(range_lo, range_hi);

    std::vector<ExprId> roots(pend.taus);
    roots.push_back(pend.lagrangian);
    BatchEvaluator evaluator(pend.store, roots);

    const size_t chunk = 1024;
    std::vector<double> out(chunk * roots.size());
    for (size_t start = 0; start < count; start += chunk) {
        size_t len = std::min(chunk, count - start);
        evaluator.eval(std::span<const double>(states).subspan(start * 3 * n, len * 3 * n),
                       3 * n, len, {}, out);
        for (size_t s = 0; s < len; ++s) {
            StateSample& smp = ds.samples[start + s];
            const double* st = states.data() + (start + s) * 3 * n;
            smp.q.assign(st, st + n);
            smp.qdot.assign(st + n, st + 2 * n);
            smp.qddot.assign(st + 2 * n, st + 3 * n);
            smp.tau.assign(out.data() + s * roots.size(), out.data() + s * roots.size() + n);
            smp.lagrangian = out[s * roots.size() + n];
        }
    }
    return ds;
}

std::string dataset_csv_header(size_t n_joints) {
    std::string h;
    auto block = [&](const char* name) {
        for (size_t i = 1; i <= n_joints; ++i) {
            if (!h.empty()) h += ',';
            h += name + std::to_string(i);
        }
    };
    block("q");
    block("qd");
    block("qdd");
    block("tau");
    h += ",lagrangian";
    return h;
}

namespace {

void append_value(std::string& line, double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    line += buf;
}

} // namespace

void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw UsageError("cannot open for writing: " + path);
    const size_t n = ds.samples.empty() ? 2 : ds.samples[0].q.size();
    out << dataset_csv_header(n) << '\n';
    std::string line;
    for (const StateSample& s : ds.samples) {
        line.clear();
        auto block = [&](const std::vector<double>& v) {
            for (double x : v) {
                if (!line.empty()) line += ',';
                append_value(line, x);
            }
        };
        block(s.q);
        block(s.qdot);
        block(s.qddot);
        block(s.tau);
        line += ',';
        append_value(line, s.lagrangian);
        out << line << '\n';
    }
    if (!out) throw UsageError("write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open dataset: " + path);
    std::string line;
    if (!std::getline(in, line)) throw ParseError("empty dataset file: " + path, 1);
    if (!line.empty() && line.back() == '\r') line.pop_back();

    // Infer joint count from the header, then require an exact match.
    size_t n = 0;
    for (size_t k = 1; k <= 16; ++k)
        if (dataset_csv_header(k) == line) {
            n = k;
            break;
        }
    if (n == 0) throw ParseError("dataset header mismatch in " + path, 1);

    Dataset ds;
    const size_t fields = 4 * n + 1;
    size_t lineno = 1;
    std::vector<double> row(fields);
    std::vector<std::string> toks;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        toks.clear();
        size_t start = 0;
        while (true) {
            size_t comma = line.find(',', start);
            toks.push_back(line.substr(start, comma == std::string::npos ? std::string::npos
                                                                         : comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (toks.size() != fields)
            throw ParseError("row has " + std::to_string(toks.size()) + " of " +
                                 std::to_string(fields) + " fields in " + path,
                             lineno);
        for (size_t idx = 0; idx < fields; ++idx) {
            const std::string& tok = toks[idx];
            char* end = nullptr;
            row[idx] = std::strtod(tok.c_str(), &end);
            if (tok.empty() || end != tok.c_str() + tok.size())
                throw ParseError("bad number '" + tok + "' in " + path, lineno);
        }
        StateSample s;
        s.q.assign(row.begin(), row.begin() + n);
        s.qdot.assign(row.begin() + n, row.begin() + 2 * n);
        s.qddot.assign(row.begin() + 2 * n, row.begin() + 3 * n);
        s.tau.assign(row.begin() + 3 * n, row.begin() + 4 * n);
        s.lagrangian = row[4 * n];
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

} // namespace syrenets
