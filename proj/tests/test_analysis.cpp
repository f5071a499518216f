#include <doctest.h>

#include "qad/analysis.hpp"

#include <cmath>
#include <functional>
#include <random>

using namespace qad;

namespace {

MomentSeries make_series(long n_max, const std::function<double(long)>& f) {
    MomentSeries s;
    for (long N = 0; N <= n_max; ++N) {
        s.N.push_back(N);
        s.mean_q.push_back(0.0);
        s.variance_q.push_back(f(N));
        s.energy_variance.push_back(f(N));
    }
    return s;
}

Eigen::VectorXd exp_profile(int q_min, int q_max, double l_left, double l_right, double background = 0) {
    Eigen::VectorXd W(q_max - q_min + 1);
    for (int q = q_min; q <= q_max; ++q)
        W(q - q_min) = std::exp(-std::abs(q) / (q < 0 ? l_left : l_right)) + background;
    return W / W.sum();
}

}  // namespace

TEST_CASE("least squares line") {
    std::vector<double> x{1, 2, 3, 4, 5}, y;
    for (double v : x) y.push_back(3.0 - 0.5 * v);
    auto f = linear_fit(x, y);
    CHECK(f.slope == doctest::Approx(-0.5));
    CHECK(f.intercept == doctest::Approx(3.0));
    CHECK(f.correlation == doctest::Approx(-1.0));
    CHECK(f.slope_err < 1e-12);
    CHECK(f.points == 5);
    CHECK_THROWS_AS(linear_fit({1.0}, {2.0}), InsufficientData);
    CHECK_THROWS_AS(linear_fit({1.0, 1.0}, {2.0, 3.0}), InsufficientData);
    CHECK_THROWS_AS(linear_fit({1.0, 2.0}, {2.0}), std::invalid_argument);
}

TEST_CASE("packet moments on closed-form distributions") {
    Eigen::VectorXd delta = Eigen::VectorXd::Zero(7);
    delta(5) = 1.0;
    auto m = packet_moments(delta, -3);
    CHECK(m.mean == 2.0);
    CHECK(m.variance == 0.0);

    Eigen::VectorXd two = Eigen::VectorXd::Zero(5);
    two(1) = 0.5;
    two(3) = 0.5;
    m = packet_moments(two, -2);
    CHECK(m.mean == 0.0);
    CHECK(m.variance == 1.0);

    Eigen::VectorXd flat = Eigen::VectorXd::Constant(5, 0.2);
    m = packet_moments(flat, -2);
    double ref = 0;
    for (int q = -2; q <= 2; ++q) ref += 0.2 * q * q;
    CHECK(m.mean == doctest::Approx(0.0).scale(1.0));
    CHECK(m.variance == doctest::Approx(ref));
    CHECK(m.variance == doctest::Approx(2.0));

    CHECK_THROWS_AS(packet_moments(Eigen::VectorXd::Zero(3), 0), std::invalid_argument);
}

TEST_CASE("moments do not depend on the global phase") {
    std::mt19937 rng(7);
    std::normal_distribution<double> g;
    std::vector<int> offset{0, 3, 7}, count{3, 4, 2};
    Eigen::VectorXcd c(9);
    for (int i = 0; i < 9; ++i) c(i) = cplx(g(rng), g(rng));
    c.normalize();
    auto a = packet_moments(c, offset, count, -1);
    for (double phi : {0.3, 1.7, -2.9}) {
        Eigen::VectorXcd r = c * std::polar(1.0, phi);
        auto b = packet_moments(r, offset, count, -1);
        CHECK(std::abs(a.mean - b.mean) <= 1e-15);
        CHECK(std::abs(a.variance - b.variance) <= 1e-15);
        CHECK((group_occupancy(offset, count, c) - group_occupancy(offset, count, r)).cwiseAbs().maxCoeff() <= 1e-15);
    }
}

TEST_CASE("quantum diffusion fit") {
    const double hw = 4.086184e-6, T = 150.0;
    auto lin = make_series(2000, [](long N) { return 0.02 * N; });
    auto f = fit_quantum_D(lin, hw, T);
    CHECK(f.diffusive);
    CHECK(f.N_min == 50);
    CHECK(f.N_max == 1000);
    CHECK(f.D == doctest::Approx(hw * hw * 0.02 / T).epsilon(1e-12));
    CHECK(f.correlation == doctest::Approx(1.0));

    auto capped = fit_quantum_D(lin, hw, T, {}, 400);
    CHECK(capped.N_max == 400);
    CHECK(capped.line.points == 351);

    std::mt19937 rng(11);
    std::normal_distribution<double> noise(0.0, 0.3);
    auto noisy = make_series(2000, [&](long N) { return 1.0 + 0.02 * N + noise(rng); });
    auto fn = fit_quantum_D(noisy, hw, T);
    CHECK(fn.diffusive);
    CHECK(std::abs(fn.line.slope - 0.02) < 3.0 * fn.line.slope_err);
    CHECK(std::abs(fn.D - hw * hw * 0.02 / T) < 3.0 * fn.stderr_D);
    // slope error from the residuals: sigma / sqrt(sum (N - mean)^2)
    double sxx = 0;
    for (long N = 50; N <= 1000; ++N) sxx += (N - 525.0) * (N - 525.0);
    CHECK(fn.line.slope_err == doctest::Approx(0.3 / std::sqrt(sxx)).epsilon(0.15));

    auto wobble = make_series(2000, [](long N) { return 1.0 + 0.5 * std::sin(2 * M_PI * N / 300.0); });
    auto fw = fit_quantum_D(wobble, hw, T);
    CHECK_FALSE(fw.diffusive);
    CHECK(fw.D == 0.0);

    auto shrinking = make_series(2000, [](long N) { return 100.0 - 0.01 * N; });
    CHECK_FALSE(fit_quantum_D(shrinking, hw, T).diffusive);
    CHECK_THROWS_AS(fit_quantum_D(make_series(40, [](long N) { return double(N); }), hw, T), InsufficientData);
}

TEST_CASE("autocorrelation period") {
    std::vector<double> r;
    for (int i = 0; i < 2000; ++i) r.push_back(std::sin(2 * M_PI * i / 137.0));
    CHECK(autocorrelation_period(r) == doctest::Approx(137.0).epsilon(0.01));
    std::vector<double> flat(100, 1.0);
    CHECK(autocorrelation_period(flat) == 0.0);
}

TEST_CASE("saturation detection") {
    const double T = 150.0;
    auto ramp = [](long N) { return 0.01 * std::min<long>(N, 1000); };
    auto sat = make_series(20000, [&](long N) { return ramp(N) + (N > 1000 ? 0.004 * std::sin(2 * M_PI * (N - 1000) / 3000.0) : 0.0); });
    auto r = detect_saturation(sat, T);
    REQUIRE(r.saturated);
    CHECK(r.initial_slope == doctest::Approx(0.01));
    CHECK(r.t0_periods >= 750);
    CHECK(r.t0_periods <= 1050);
    CHECK(r.t0 == doctest::Approx(r.t0_periods * T));
    CHECK(r.mean_variance == doctest::Approx(10.0).epsilon(1e-3));
    CHECK(r.oscillation_periods == doctest::Approx(3000.0).epsilon(0.05));
    CHECK(r.oscillation_time == doctest::Approx(r.oscillation_periods * T));

    // more data never pulls t0 earlier by more than one confirmation window
    SaturationPolicy p;
    long prev = -1;
    for (long L : {10000L, 12000L, 15000L, 20000L}) {
        MomentSeries cut = sat;
        cut.N.resize(L + 1);
        cut.variance_q.resize(L + 1);
        auto rc = detect_saturation(cut, T, p);
        REQUIRE(rc.saturated);
        if (prev >= 0) CHECK(rc.t0_periods >= prev - p.confirm_periods);
        prev = rc.t0_periods;
    }

    // plateau mean within three standard errors under noise
    std::mt19937 rng(3);
    std::normal_distribution<double> noise(0.0, 0.05);
    auto noisy = make_series(12000, [&](long N) { return ramp(N) + noise(rng); });
    auto rn = detect_saturation(noisy, T);
    REQUIRE(rn.saturated);
    CHECK(std::abs(rn.mean_variance - 10.0) < 3.0 * 0.05 / std::sqrt(static_cast<double>(rn.plateau_samples)));

    auto open = make_series(10000, [](long N) { return 0.01 * N; });
    CHECK_FALSE(detect_saturation(open, T).saturated);

    auto still = make_series(10000, [](long) { return 0.25; });
    auto rs = detect_saturation(still, T);
    CHECK(rs.saturated);
    CHECK(rs.t0_periods == 0);
    CHECK(rs.mean_variance == doctest::Approx(0.25));

    CHECK_THROWS_AS(detect_saturation(make_series(5000, ramp), T), InsufficientData);
    p.min_periods = 4000;
    CHECK(detect_saturation(make_series(5000, ramp), T, p).saturated);
}

TEST_CASE("profile tails") {
    auto W = exp_profile(-30, 30, 2.5, 2.5);
    auto f = fit_profile(W, -30, 0.0);
    REQUIRE(f.valid);
    CHECK(f.q_peak == 0);
    CHECK(f.l_s == doctest::Approx(2.5).epsilon(1e-9));
    CHECK(f.correlation == doctest::Approx(1.0));
    CHECK(f.total == doctest::Approx(1.0).epsilon(1e-12));
    // the core above 1e-2 of the peak stays out of the fit: exp(-q/2.5) > 1e-2 for q <= 11
    CHECK(f.left.points == 30 - 11);

    auto A = exp_profile(-30, 30, 2.0, 4.0);
    auto fa = fit_profile(A, -30, 0.0);
    CHECK(fa.left.length == doctest::Approx(2.0).epsilon(1e-9));
    CHECK(fa.right.length == doctest::Approx(4.0).epsilon(1e-9));
    CHECK(fa.l_s == doctest::Approx(3.0).epsilon(1e-9));

    // leakage floor cuts the fit off before the background dominates
    auto B = exp_profile(-30, 30, 2.5, 2.5, 1e-10);
    auto fb = fit_profile(B, -30, B(0));
    CHECK(fb.valid);
    CHECK(fb.l_s == doctest::Approx(2.5).epsilon(0.05));
    CHECK(fb.correlation >= 0.99);
    CHECK(fb.left.points < f.left.points);

    Eigen::VectorXd delta = Eigen::VectorXd::Zero(11);
    delta(5) = 1.0;
    auto fd = fit_profile(delta, -5, 0.0);
    CHECK_FALSE(fd.valid);
    CHECK(fd.l_s == 0.0);

    PacketSeries s;
    s.q_min = -30;
    s.N = {0, 1, 2};
    CHECK_THROWS_AS(average_profile(s, 0, 2), std::invalid_argument);
    s.occupancy = {W, A, W};
    auto avg = average_profile(s, 1, 2);
    CHECK((avg.W - 0.5 * (A + W)).cwiseAbs().maxCoeff() < 1e-15);
    CHECK_THROWS_AS(average_profile(s, 5, 9), InsufficientData);
}

TEST_CASE("scaling fit against 1/sqrt(mu)") {
    std::vector<double> mu{1e-4, 1.25e-4, 1.5e-4, 1.75e-4, 2e-4, 2.25e-4}, v;
    for (double m : mu) v.push_back(std::exp(4.0 - 0.03 / std::sqrt(m)));
    auto f = scaling_fit(mu, v);
    CHECK(f.slope == doctest::Approx(-0.03));
    CHECK(f.intercept == doctest::Approx(4.0));
    CHECK(f.correlation == doctest::Approx(-1.0));
    auto g = scaling_fit(mu, v);
    CHECK(g.slope == f.slope);
    CHECK(g.intercept == f.intercept);
    CHECK_THROWS_AS(scaling_fit({1e-4, 2e-4, 3e-4}, {1, 2, 3}), InsufficientData);
    CHECK_THROWS_AS(scaling_fit({1e-4, 2e-4, 3e-4, 4e-4}, {1, 2, 0, 3}), std::invalid_argument);
}

TEST_CASE("classical and quantum comparison") {
    std::vector<DPoint> cl{{1e-4, 4e-12, 4e-13}, {1.25e-4, 1e-11, 1e-12}, {2e-4, 5e-11, 5e-12}, {3e-4, 1e-10, 1e-11}};
    std::vector<DPoint> qu{{2e-4, 2.5e-11, 2.5e-12}, {1e-4, 1e-12, 2e-13}, {1.25e-4, 5e-12, 5e-13}};
    auto c = compare_classical_quantum(cl, qu);
    REQUIRE(c.rows.size() == 3);
    CHECK(c.rows[0].mu == 1e-4);
    CHECK(c.rows[2].mu == 2e-4);
    CHECK(c.rows[0].ratio == doctest::Approx(0.25));
    CHECK(c.rows[0].ratio_err == doctest::Approx(0.25 * std::sqrt(0.04 + 0.01)));
    CHECK(c.rows[1].inv_sqrt_mu == doctest::Approx(89.4427191));
    CHECK(c.all_weaker);
    CHECK(c.classical_log.points == 3);
    CHECK(c.quantum_log.slope < 0);

    qu.push_back({3e-4, 2e-10, 1e-11});
    CHECK_FALSE(compare_classical_quantum(cl, qu).all_weaker);
    CHECK_THROWS_AS(compare_classical_quantum(cl, {}), std::invalid_argument);
    CHECK_THROWS_AS(compare_classical_quantum({}, qu), std::invalid_argument);
    CHECK_THROWS_AS(compare_classical_quantum(cl, {{5e-5, 1e-13, 0}}), std::invalid_argument);
}

TEST_CASE("undriven packets: frozen profile and exact stationary Floquet states") {
    static const OscillatorBasis b = solve_quartic_eigen(1.77321e-5, 646);
    SpectrumOptions o;
    o.K_w = 10;
    o.P_w = 2;
    o.q_min = -3;
    o.q_max = 3;
    auto st = solve_resonance_spectrum(b, 1e-4, o);
    auto bl = dipole_blocks(b, st);
    DriveParams d;
    d.f0 = 0;
    d.mu = 1e-4;
    FloquetOptions fo;
    fo.q_min = -3;
    fo.q_max = 3;
    fo.s_band = 6;
    fo.s_center = st.group(0).mathieu(0);
    auto m = make_floquet_model(st, bl, d, fo);
    auto U = build_evolution_matrix(m, fo);
    auto dec = eigendecompose(U.dense(), b.hbar0, 150.0);
    std::vector<StateClass> classes(m.dim(), StateClass::below_separatrix);
    auto rows = qe_scatter(dec, m, &classes);
    REQUIRE(rows.size() == static_cast<size_t>(m.dim()));
    for (const auto& r : rows) {
        CHECK(r.sigma_q == 0.0);
        CHECK(r.dominant_weight == doctest::Approx(1.0));
        CHECK(r.mean_q == static_cast<double>(r.dominant_q));
        CHECK(r.state_class == "below_separatrix");
    }

    SeriesOptions so;
    so.record_occupancy = true;
    auto s = propagate_N(U, basis_state(m, 1, 0), 20, so);
    auto prof = average_profile(s, 0, 20);
    for (int g = 0; g < prof.W.size(); ++g) CHECK(prof.W(g) == doctest::Approx(g == 4 ? 1.0 : 0.0));
    auto ms = moment_series(s, st.hbar_omega);
    for (double v : ms.variance_q) CHECK(v == 0.0);
}
