#include <doctest.h>

#include "qad/classical.hpp"
#include "qad/ode.hpp"

#include <cmath>
#include <numbers>
#include <random>

using namespace qad;

namespace {

const double pi = std::numbers::pi;

DriveParams paper_drive(double mu, double f0) {
    return DriveParams::from_frequencies(f0, mu, 0.2094, 0.2513, 150.0);
}

}  // namespace

TEST_CASE("integrator finishes a rounding-sized remainder at late times") {
    using V = Eigen::Matrix<double, 1, 1>;
    const double t0 = 3.24e7;
    Dop853<V> ode([](double, const V& y) { return V(-1e-9 * y(0)); }, t0, V(1.0));
    const double stop = std::nextafter(t0, 1e300);
    REQUIRE(stop - t0 < 1e-15 * t0);
    CHECK_NOTHROW(ode.advance(stop));
    CHECK(ode.time() == stop);
}

TEST_CASE("drive parameters") {
    DriveParams p = paper_drive(2e-4, 2e-6);
    CHECK(p.harmonic1 == 5);
    CHECK(p.harmonic2 == 6);
    CHECK(p.omega1() == doctest::Approx(0.2094).epsilon(1e-3));
    CHECK(p.omega2() == doctest::Approx(0.2513).epsilon(1e-3));
    // T = 2 pi n / W1 = 2 pi m / W2
    CHECK(std::abs(2 * pi * p.harmonic1 / p.omega1() - p.period) < 1e-12 * p.period);
    CHECK(std::abs(2 * pi * p.harmonic2 / p.omega2() - p.period) < 1e-12 * p.period);
    CHECK(p.omega_mid() == doctest::Approx(0.23035).epsilon(2e-4));
    CHECK_THROWS_AS(DriveParams::from_frequencies(0, 0, 0.2, 0.2513, 150.0), std::invalid_argument);
    DriveParams bad = p;
    bad.f0 = -1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    CHECK(default_I2(p) == doctest::Approx(action_for_frequency(p.omega_mid(), classical_constants())));
}

TEST_CASE("uncoupled limit derivatives") {
    DriveParams p = paper_drive(0, 0);
    ClassicalState s{3e-4, 0.7, 8e-3, -1.2, 0};
    HamiltonianEval e = hamiltonian_and_derivatives(s, p, 12.0);
    QuarticConstants c = classical_constants();
    double wx = action_kinematics(s.I2 + s.I1, c).frequency, wy = action_kinematics(s.I2 - s.I1, c).frequency;
    CHECK(e.dI1 == 0.0);
    CHECK(e.dI2 == 0.0);
    CHECK(e.dtheta2 == doctest::Approx(wx + wy).epsilon(1e-14));
    CHECK(e.dtheta1 == doctest::Approx(wx - wy).epsilon(1e-12));
    ClassicalState centre{0, 0.3, 8e-3, 0.4, 0};
    CHECK(std::abs(hamiltonian_and_derivatives(centre, p, 0).dtheta1) < 1e-17);
    ClassicalState invalid{8e-3, 0, 8e-3, 0, 0};
    CHECK_THROWS_AS(hamiltonian_and_derivatives(invalid, p, 0), std::domain_error);
}

TEST_CASE("analytic gradient matches finite differences") {
    DriveParams p = paper_drive(2e-4, 2e-6);
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> ang(-pi, pi), frac(-0.8, 0.8), i2(2e-3, 2e-2), tt(0, 1000);
    double worst = 0;
    for (int k = 0; k < 100; ++k) {
        ClassicalState s;
        s.I2 = i2(rng);
        s.I1 = frac(rng) * s.I2;
        s.theta1 = ang(rng);
        s.theta2 = ang(rng);
        double t = tt(rng);
        HamiltonianEval e = hamiltonian_and_derivatives(s, p, t);
        auto H = [&](ClassicalState q) { return hamiltonian_and_derivatives(q, p, t).H; };
        auto fd = [&](double ClassicalState::*field, double h) {
            ClassicalState a = s, b = s;
            a.*field += h;
            b.*field -= h;
            return (H(a) - H(b)) / (2 * h);
        };
        double hI = 1e-6 * s.I2, hT = 1e-5;
        // Hamilton: theta' = dH/dI, I' = -dH/dtheta
        double checks[4][2] = {{e.dtheta1, fd(&ClassicalState::I1, hI)},
                               {e.dtheta2, fd(&ClassicalState::I2, hI)},
                               {e.dI1, -fd(&ClassicalState::theta1, hT)},
                               {e.dI2, -fd(&ClassicalState::theta2, hT)}};
        for (auto& pair : checks) {
            double scale = std::max(std::abs(pair[1]), 1e-12 * std::abs(e.H));
            worst = std::max(worst, std::abs(pair[0] - pair[1]) / scale);
        }
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("integrable limit keeps the actions") {
    DriveParams p = paper_drive(0, 0);
    ClassicalState s{1e-4, 0.3, default_I2(p), 0, 0};
    StepPolicy pol;
    pol.keep_samples = false;
    Trajectory tr = integrate(s, p, 1e4 * p.period, pol);
    CHECK(std::abs(tr.final_state.I1 - s.I1) < 1e-10 * s.I2);
    CHECK(std::abs(tr.final_state.I2 - s.I2) < 1e-10 * s.I2);
    CHECK(tr.periods() == 10000);
}

TEST_CASE("energy conservation and time reversal without drive") {
    DriveParams p = paper_drive(2e-4, 0);
    ClassicalState s{2e-5, -2.0, default_I2(p), 0.5, 0};
    StepPolicy pol;
    pol.samples_per_period = 4;
    Trajectory tr = integrate(s, p, 1e3 * p.period, pol);
    double h0 = tr.energy.front(), worst = 0;
    for (double h : tr.energy) worst = std::max(worst, std::abs(h / h0 - 1.0));
    CHECK(worst <= 1e-8);
    // H is even in the angles, so flipping them reverses the flow; the fast
    // phase winds through ~7e4 rad, hence the tighter tolerance
    StepPolicy tight;
    tight.rtol = 1e-13;
    tight.keep_samples = false;
    Trajectory fwd = integrate(s, p, 1e3 * p.period, tight);
    ClassicalState back = fwd.final_state;
    back.theta1 = -back.theta1;
    back.theta2 = -back.theta2;
    back.t = 0;
    Trajectory rev = integrate(back, p, 1e3 * p.period, tight);
    CHECK(std::abs(rev.final_state.I1 - s.I1) < 1e-6);
    CHECK(std::abs(rev.final_state.I2 - s.I2) < 1e-6);
    CHECK(std::abs(-rev.final_state.theta1 - s.theta1) < 1e-6);
    CHECK(std::abs(-rev.final_state.theta2 - s.theta2) < 1e-6);
}

TEST_CASE("fixed-step mode is deterministic and accurate") {
    DriveParams p = paper_drive(2e-4, 2e-6);
    ClassicalState s{0, -pi + 1e-9, default_I2(p), 0, 0};
    StepPolicy fixed;
    fixed.fixed_step = true;
    fixed.fixed_dt = 1.0;
    Trajectory a = integrate(s, p, 20 * p.period, fixed);
    Trajectory b = integrate(s, p, 20 * p.period, fixed);
    CHECK(a.final_state.I2 == b.final_state.I2);
    CHECK(a.accepted_steps == 20 * 150);
    Trajectory adaptive = integrate(s, p, 20 * p.period);
    CHECK(a.final_state.I2 == doctest::Approx(adaptive.final_state.I2).epsilon(1e-8));
}

TEST_CASE("small oscillations at the resonance frequency") {
    DriveParams p = paper_drive(2e-4, 0);
    double w = libration_frequency(p, 0.0, 0.05, default_I2(p), 20);
    CHECK(w == doctest::Approx(classical_constants().beta * std::sqrt(2e-4)).epsilon(0.02));
    // secondary 4:1 resonance inside the coupling resonance
    double w_half = libration_frequency(p, 0.0, -pi / 2, default_I2(p), 20);
    CHECK(4 * w_half == doctest::Approx(p.delta_omega()).epsilon(0.05));
    CHECK(w_half < w);
}

TEST_CASE("poincare section of the undriven system") {
    DriveParams p = paper_drive(2e-4, 0);
    double I2 = default_I2(p);
    ClassicalState s{0, 1.0, I2, 0, 0};
    StepPolicy pol;
    pol.record_section = true;
    Trajectory tr = integrate(s, p, 100 * p.period, pol);
    REQUIRE(tr.section.size() > 500);
    double h0 = hamiltonian_and_derivatives(s, p, 0).H;
    double V = pendulum_V(I2, p.mu);
    double hp0 = pendulum_energy(0, 1.0, I2, p.mu);
    double th_max = 0;
    for (const SectionPoint& pt : tr.section) {
        ClassicalState q{pt.I1, pt.theta1, pt.I2, 0, pt.t};
        CHECK(std::abs(hamiltonian_and_derivatives(q, p, pt.t).H / h0 - 1.0) < 1e-9);
        CHECK(std::abs(pendulum_energy(pt.I1, pt.theta1, pt.I2, p.mu) - hp0) < 0.05 * V);
        th_max = std::max(th_max, std::abs(pt.theta1));
    }
    // closed libration curve around the centre
    CHECK(th_max == doctest::Approx(1.0).epsilon(0.05));
    auto slices = poincare_section(tr, {I2, 2 * I2});
    CHECK(slices[0].points.size() == tr.section.size());
    CHECK(slices[1].points.empty());
    auto narrow = poincare_section(tr, {I2 * 1.5}, 1e-9);
    CHECK(narrow[0].points.empty());
}

TEST_CASE("resonance widths and overlap") {
    QuarticConstants c = classical_constants();
    DriveParams p1 = paper_drive(1e-4, 1e-6);
    ResonanceWidths w1 = resonance_widths(p1, 0.2719);
    CHECK(w1.omega_tilde == doctest::Approx(0.008472).epsilon(2e-4));
    CHECK(w1.lambda == doctest::Approx(2.4729).epsilon(5e-4));
    CHECK(w1.delta_omega / w1.omega_tilde == doctest::Approx(std::sqrt(2.0)));
    CHECK(resonance_widths(paper_drive(2e-4, 2e-6), 0.2719).omega_tilde == doctest::Approx(0.011982).epsilon(2e-4));
    CHECK(w1.delta_omega_drive == doctest::Approx(c.beta * std::sqrt(2e-6 / 0.2719)));

    OverlapCheck o = check_overlap(paper_drive(2e-4, 2e-6), 0.2719);
    CHECK_FALSE(o.overlapped);
    double rhs = std::sqrt(2 * 2e-6 / 0.2719) + std::sqrt(2e-4);
    CHECK(rhs == doctest::Approx(0.017977).epsilon(1e-4));
    CHECK(o.margin == doctest::Approx(paper_drive(0, 0).delta_omega() / (2 * c.beta) - rhs));
    double mu_edge = std::pow(paper_drive(0, 0).delta_omega() / (2 * c.beta), 2);
    CHECK(mu_edge == doctest::Approx(6.11e-4).epsilon(2e-3));
    CHECK(std::abs(check_overlap(paper_drive(mu_edge, 0), 0.2719).margin) < 1e-15);
    CHECK(check_overlap(paper_drive(mu_edge * 1.01, 0), 0.2719).overlapped);
    for (double mu = 3e-5; mu <= 2.25e-4 + 1e-12; mu += 0.25e-5)
        CHECK_FALSE(check_overlap(paper_drive(mu, mu / 100), 0.2719).overlapped);
    CHECK_THROWS_AS(resonance_widths(paper_drive(0, 0), 0.27), std::invalid_argument);
}

TEST_CASE("layer width formula") {
    DriveParams p = paper_drive(1e-4, 1e-6);
    double lam = resonance_widths(p, 0.2719).lambda;
    TheoreticalDiffusion d = theoretical_diffusion(p, 0.2719, 1.0, 400.0);
    CHECK(d.w_s == doctest::Approx(1.5815).epsilon(1e-3));
    // quartering mu doubles lambda
    DriveParams q = paper_drive(0.25e-4, 1e-6);
    double ratio = theoretical_diffusion(q, 0.2719, 1.0, 400.0).w_s / d.w_s;
    CHECK(ratio == doctest::Approx(4 * std::exp(-pi * lam / 2)).epsilon(1e-12));
    double prev = std::numeric_limits<double>::infinity();
    for (double l = 4 / pi + 0.01; l < 8; l += 0.1) {
        double w = p.delta_omega() / (2 * l);
        double mu = std::pow(w / classical_constants().beta, 2);
        double D = theoretical_diffusion(paper_drive(mu, 1e-6), 0.2719, 1.0, 400.0).D_I;
        CHECK(D < prev);
        prev = D;
    }
    CHECK_THROWS_AS(theoretical_diffusion(p, 0.27, 1.0, 0.0), std::invalid_argument);
}

TEST_CASE("diffusion estimator on a synthetic random walk") {
    const double D0 = 3e-14, T = 150.0;
    std::mt19937_64 rng(2024);
    int sub = 30;
    std::normal_distribution<double> step(0.0, std::sqrt(D0 * T / sub));
    std::vector<double> means;
    double h = 0;
    for (long k = 0; k < 300000; ++k) {
        // trapezoidal mean of the path over the period
        double acc = 0.5 * h;
        for (int j = 1; j <= sub; ++j) {
            h += step(rng);
            acc += (j == sub ? 0.5 : 1.0) * h;
        }
        means.push_back(acc / sub);
    }
    for (int n : {2, 3}) {
        DiffusionEstimate d = measure_diffusion(means, T, n);
        CHECK(std::abs(d.D - D0) < 3 * d.stderr_D);
        CHECK(d.raw == doctest::Approx(d.D / 1.5));
        CHECK(d.stderr_D < 0.2 * D0);
    }
    std::vector<double> few(400, 1.0);
    CHECK_THROWS_AS(measure_diffusion(few, T, 2), InsufficientData);
}

TEST_CASE("undriven trajectory has no diffusion") {
    DriveParams p = paper_drive(2e-4, 0);
    ClassicalState s{0, -pi + 1e-3, default_I2(p), 0, 0};
    StepPolicy pol;
    pol.keep_samples = false;
    Trajectory tr = integrate(s, p, 1000 * p.period, pol);
    DiffusionEstimate d = measure_diffusion(tr, 2);
    double h = hamiltonian_and_derivatives(s, p, 0).H;
    CHECK(d.D * 100 * p.period < 1e-18 * h * h);
    CHECK(d.blocks == 10);
}

TEST_CASE("separatrix period and verdicts") {
    Trajectory tr;
    tr.theta1_crossings = {10, 20, 30, 40};
    CHECK(separatrix_period(tr) == doctest::Approx(10));
    tr.theta1_crossings = {1};
    CHECK_THROWS_AS(separatrix_period(tr), InsufficientData);
    DiffusionEstimate a, b;
    a.D = 1.0;
    b.D = 0.8;
    CHECK(diffusion_verdict(a, b) == Verdict::diffusive);
    b.D = 0.05;
    CHECK(diffusion_verdict(a, b) == Verdict::non_diffusive);
    CHECK(to_string(Verdict::diffusive) == "diffusive");
}

TEST_CASE("pendulum reduction") {
    double I2 = 7.9e-3;
    QuarticConstants c = classical_constants();
    double a = action_kinematics(I2, c).amplitude;
    CHECK(pendulum_V(I2, 2e-4) == doctest::Approx(2e-4 * a * a / 2));
    CHECK(std::sqrt(pendulum_B(I2) * pendulum_V(I2, 2e-4)) == doctest::Approx(c.beta * std::sqrt(2e-4)).epsilon(1e-12));
    CHECK(pendulum_energy(0, pi, I2, 2e-4) == doctest::Approx(pendulum_V(I2, 2e-4)));
}
