#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "syrenets/errors.hpp"
#include "syrenets/mechanics.hpp"
#include "syrenets/rng.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

using namespace syrenets;

namespace {

double rel_err(double a, double b) {
    return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1.0});
}

std::string tmp_path(const char* name) {
    return std::string("/tmp/syrenets_test_") + name + "_" + std::to_string(::getpid()) +
           ".csv";
}

} // namespace

TEST_CASE("ground-truth Lagrangian values") {
    Pendulum p = Pendulum::make();
    // direct substitution at q = qd = 0: (m1/2+m2) g l1 + (m2/2) g l2
    double expect0 = (3.0 / 2 + 1.0) * 9.81 * 2.67 + 0.5 * 9.81 * 1.67;
    CHECK(expect0 == doctest::Approx(73.67310).epsilon(1e-6));
    std::vector<double> st{0, 0, 0, 0, 0, 0};
    CHECK(p.store.eval(p.lagrangian, st) == doctest::Approx(expect0).epsilon(1e-12));

    // adding qd1 = 1 contributes (1/2)(m1/3+m2) l1^2
    st[2] = 1.0;
    double expect1 = expect0 + 0.5 * (1.0 + 1.0) * 2.67 * 2.67;
    CHECK(expect1 == doctest::Approx(80.80200).epsilon(1e-6));
    CHECK(p.store.eval(p.lagrangian, st) == doctest::Approx(expect1).epsilon(1e-12));
}

TEST_CASE("Lagrangian is even: L(q,qd) = L(-q,-qd)") {
    Pendulum p = Pendulum::make();
    Rng rng(4);
    for (int i = 0; i < 50; ++i) {
        std::vector<double> st(6), neg(6);
        for (int k = 0; k < 6; ++k) {
            st[k] = rng.uniform(-1.5, 1.5);
            neg[k] = -st[k];
        }
        CHECK(p.store.eval(p.lagrangian, st) ==
              doctest::Approx(p.store.eval(p.lagrangian, neg)).epsilon(1e-12));
    }
}

TEST_CASE("parameter validation") {
    PendulumParams bad;
    bad.m1 = -1.0;
    CHECK_THROWS_AS(bad.validate(), UsageError);
}

TEST_CASE("FD oracle on closed-form Lagrangians") {
    // free particle: tau = qdd
    LagrangianFn free_particle = [](std::span<const double>, std::span<const double> qd) {
        return 0.5 * qd[0] * qd[0];
    };
    std::vector<double> q{0.3}, qd{-0.8}, qdd{1.7};
    std::vector<double> tau = inverse_dynamics_fd(free_particle, q, qd, qdd, 1e-4);
    CHECK(tau[0] == doctest::Approx(1.7).epsilon(1e-6));

    // gravity toy: L = cos(q1), tau = sin(q1)
    LagrangianFn grav = [](std::span<const double> q, std::span<const double>) {
        return std::cos(q[0]);
    };
    q[0] = M_PI / 2;
    tau = inverse_dynamics_fd(grav, q, qd, qdd, 1e-4);
    CHECK(tau[0] == doctest::Approx(1.0).epsilon(1e-6));

    CHECK_THROWS_AS(inverse_dynamics_fd(grav, q, qd, qdd, 0.0), UsageError);
}

TEST_CASE("symbolic Euler-Lagrange agrees with the FD oracle on Eq. 15") {
    Pendulum p = Pendulum::make();
    LagrangianFn L = [&](std::span<const double> q, std::span<const double> qd) {
        std::vector<double> st{q[0], q[1], qd[0], qd[1], 0.0, 0.0};
        return p.store.eval(p.lagrangian, st);
    };
    Rng rng(12);
    double max_rel = 0.0;
    for (int i = 0; i < 100; ++i) {
        std::vector<double> st(6);
        for (double& x : st) x = rng.uniform(-M_PI / 2, M_PI / 2);
        std::vector<double> fd = inverse_dynamics_fd(
            L, std::span<const double>(st).subspan(0, 2),
            std::span<const double>(st).subspan(2, 2),
            std::span<const double>(st).subspan(4, 2), 1e-4);
        for (int j = 0; j < 2; ++j) {
            double sym = p.store.eval(p.taus[j], st);
            max_rel = std::max(max_rel, rel_err(sym, fd[j]));
        }
    }
    CHECK(max_rel < 1e-5);
}

TEST_CASE("torque at the origin is exactly zero") {
    Pendulum p = Pendulum::make();
    std::vector<double> st{0, 0, 0, 0, 0, 0};
    CHECK(p.store.eval(p.taus[0], st) == 0.0);
    CHECK(p.store.eval(p.taus[1], st) == 0.0);
}

TEST_CASE("torque is linear in qdd at fixed (q, qd)") {
    Pendulum p = Pendulum::make();
    Rng rng(9);
    for (int i = 0; i < 20; ++i) {
        std::vector<double> base(6);
        for (int k = 0; k < 4; ++k) base[k] = rng.uniform(-1.5, 1.5);
        auto tau_at = [&](double a1, double a2) {
            std::vector<double> st(base);
            st[4] = a1;
            st[5] = a2;
            return std::pair{p.store.eval(p.taus[0], st), p.store.eval(p.taus[1], st)};
        };
        double alpha = rng.uniform(-2, 2), beta = rng.uniform(-2, 2);
        auto t0 = tau_at(0, 0);
        auto te1 = tau_at(1, 0);
        auto te2 = tau_at(0, 1);
        auto tc = tau_at(alpha, beta);
        double lin1 = t0.first + alpha * (te1.first - t0.first) + beta * (te2.first - t0.first);
        double lin2 = t0.second + alpha * (te1.second - t0.second) + beta * (te2.second - t0.second);
        CHECK(std::fabs(tc.first - lin1) < 1e-10);
        CHECK(std::fabs(tc.second - lin2) < 1e-10);
    }
}

TEST_CASE("dataset sampling") {
    Dataset a = sample_dataset(200, 77);
    Dataset b = sample_dataset(200, 77);
    REQUIRE(a.size() == 200);
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a.samples[i].q == b.samples[i].q);
        CHECK(a.samples[i].tau == b.samples[i].tau);
        CHECK(a.samples[i].lagrangian == b.samples[i].lagrangian);
    }
    CHECK(sample_dataset(0, 1).size() == 0);

    // self-consistency: stored tau equals the symbolic EL at the sample
    Pendulum p = Pendulum::make();
    for (size_t i = 0; i < 20; ++i) {
        const StateSample& s = a.samples[i];
        std::vector<double> st{s.q[0], s.q[1], s.qdot[0], s.qdot[1], s.qddot[0], s.qddot[1]};
        CHECK(std::fabs(p.store.eval(p.taus[0], st) - s.tau[0]) < 1e-10);
        CHECK(std::fabs(p.store.eval(p.taus[1], st) - s.tau[1]) < 1e-10);
        CHECK(std::fabs(p.store.eval(p.lagrangian, st) - s.lagrangian) < 1e-10);
    }
}

TEST_CASE("empirical mean of q1 over 32000 samples is near zero") {
    Dataset ds = sample_dataset(32000, 123);
    double mean = 0.0;
    for (const StateSample& s : ds.samples) mean += s.q[0];
    mean /= static_cast<double>(ds.size());
    // 3 sigma of the mean of U(-pi/2, pi/2):  3 * (pi/2) / sqrt(3 * 32000)
    CHECK(std::fabs(mean) < 3.0 * (M_PI / 2) / std::sqrt(3.0 * 32000.0));
}

TEST_CASE("CSV round trip is bitwise exact") {
    Dataset ds = sample_dataset(64, 5);
    std::string path = tmp_path("roundtrip");
    save_dataset(ds, path);
    Dataset back = load_dataset(path);
    REQUIRE(back.size() == ds.size());
    for (size_t i = 0; i < ds.size(); ++i) {
        CHECK(back.samples[i].q == ds.samples[i].q);
        CHECK(back.samples[i].qdot == ds.samples[i].qdot);
        CHECK(back.samples[i].qddot == ds.samples[i].qddot);
        CHECK(back.samples[i].tau == ds.samples[i].tau);
        CHECK(back.samples[i].lagrangian == ds.samples[i].lagrangian);
    }
    std::remove(path.c_str());
}

TEST_CASE("CSV header is the documented exact string") {
    CHECK(dataset_csv_header(2) == "q1,q2,qd1,qd2,qdd1,qdd2,tau1,tau2,lagrangian");
}

TEST_CASE("CSV parse errors carry line numbers") {
    std::string path = tmp_path("badhdr");
    {
        std::ofstream out(path);
        out << "q1,q2,bogus\n1,2,3\n";
    }
    CHECK_THROWS_AS(load_dataset(path), ParseError);

    {
        std::ofstream out(path);
        out << dataset_csv_header(2) << "\n";
        out << "1,2,3,4,5,6,7,8,9\n";
        out << "1,2,3\n";  // truncated
    }
    try {
        load_dataset(path);
        CHECK(false);
    } catch (const ParseError& e) {
        CHECK(e.line() == 3);
    }

    {
        std::ofstream out(path);
        out << dataset_csv_header(2) << "\n";
        out << "1,2,3,4,x,6,7,8,9\n";
    }
    CHECK_THROWS_AS(load_dataset(path), ParseError);
    std::remove(path.c_str());
}
