#include <doctest.h>

#include "qad/quartic.hpp"

#include <cmath>
#include <numbers>

using namespace qad;

namespace {

// power series K(k) = pi/2 sum [(2n)!/(4^n n!^2)]^2 k^{2n}
double elliptic_k_series(double k) {
    double term = 1.0, sum = 1.0;
    for (int n = 1; n < 400; ++n) {
        double r = (2.0 * n - 1.0) / (2.0 * n);
        term *= r * r * k * k;
        sum += term;
    }
    return std::numbers::pi / 2.0 * sum;
}

// first Fourier harmonic of x(t)/a for x'' = -x^3, by RK4 over one period
double classical_first_harmonic() {
    double x = 1.0, v = 0.0;
    // period for unit amplitude: T = 4 K(1/sqrt2)
    double period = 4.0 * elliptic_k_series(1.0 / std::sqrt(2.0));
    int steps = 200000;
    double h = period / steps, w = 2.0 * std::numbers::pi / period, acc = 0.0;
    auto f = [](double xx) { return -xx * xx * xx; };
    for (int i = 0; i < steps; ++i) {
        double t = i * h;
        double k1x = v, k1v = f(x);
        double k2x = v + 0.5 * h * k1v, k2v = f(x + 0.5 * h * k1x);
        double k3x = v + 0.5 * h * k2v, k3v = f(x + 0.5 * h * k2x);
        double k4x = v + h * k3v, k4v = f(x + h * k3x);
        acc += x * std::cos(w * t) * h;  // rectangle rule is spectral for periodic integrands
        x += h / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x);
        v += h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v);
    }
    return 2.0 * acc / period;
}

const OscillatorBasis& default_basis() {
    static OscillatorBasis b = solve_quartic_eigen(1.77321e-5, 646);
    return b;
}

}  // namespace

TEST_CASE("elliptic K against its power series") {
    CHECK(complete_elliptic_k(0.0) == doctest::Approx(std::numbers::pi / 2).epsilon(1e-15));
    double k = 1.0 / std::sqrt(2.0);
    CHECK(std::abs(complete_elliptic_k(k) / elliptic_k_series(k) - 1.0) < 1e-12);
    CHECK(complete_elliptic_k(k) == doctest::Approx(1.854075).epsilon(1e-6));
    CHECK(std::abs(complete_elliptic_k(0.3) / elliptic_k_series(0.3) - 1.0) < 1e-12);
    double big = complete_elliptic_k(0.999999);
    CHECK(std::isfinite(big));
    CHECK(big > 7.0);
    CHECK_THROWS_AS(complete_elliptic_k(1.0), std::domain_error);
    CHECK_THROWS_AS(complete_elliptic_k(-0.1), std::domain_error);
}

TEST_CASE("classical constants") {
    QuarticConstants c = classical_constants();
    CHECK(c.beta == doctest::Approx(0.8472).epsilon(1e-4));
    CHECK(c.A == doctest::Approx(0.8671).epsilon(1e-4));
    CHECK(c.beta == std::numbers::pi / (2.0 * c.k_half));
    CHECK(c.beta > 0.84);
    CHECK(c.beta < 0.86);
    CHECK(c.beta * std::sqrt(2.0) == doctest::Approx(1.1982).epsilon(1e-4));
}

TEST_CASE("action kinematics") {
    QuarticConstants c = classical_constants();
    double i = action_for_frequency(0.23035, c);
    ActionKinematics k = action_kinematics(i, c);
    CHECK(k.frequency == doctest::Approx(0.23035).epsilon(1e-12));
    CHECK(k.amplitude == doctest::Approx(0.2719).epsilon(5e-4));
    for (double a : {1e-6, 3e-3, 2.0}) {
        ActionKinematics kk = action_kinematics(a, c);
        CHECK(kk.amplitude / kk.frequency == doctest::Approx(1.1803).epsilon(1e-4));
        CHECK(kk.amplitude / kk.frequency == doctest::Approx(3.0 / std::pow(4.0 * c.A, 0.75)));
    }
    ActionKinematics zero = action_kinematics(0.0, c);
    CHECK(zero.amplitude == 0.0);
    CHECK(zero.frequency == 0.0);
    CHECK_THROWS_AS(action_kinematics(-1.0, c), std::domain_error);
    // the frequency law follows from E = A I^{4/3}
    double h = 1e-7;
    CHECK((energy_of_action(i + h, c) - energy_of_action(i - h, c)) / (2 * h) ==
          doctest::Approx(0.23035).epsilon(1e-7));
}

TEST_CASE("classical first harmonic oracle") {
    CHECK(classical_first_harmonic() == doctest::Approx(0.9550).epsilon(2e-4));
}

TEST_CASE("quartic spectrum at the default Planck constant") {
    const OscillatorBasis& b = default_basis();
    QuarticConstants c = classical_constants();
    REQUIRE(b.size() == 647);
    for (int n = 1; n <= b.n_max; ++n) CHECK(b.energies[n] > b.energies[n - 1]);
    CHECK(b.energies[0] > 0);
    double worst = 0;
    for (int n = 10; n <= b.n_max; ++n) {
        double wkb = energy_of_action(b.hbar0 * (n + 0.5), c);
        worst = std::max(worst, std::abs(b.energies[n] / wkb - 1.0));
    }
    CHECK(worst < 1e-2);
    double w = b.local_frequency(446);
    CHECK(w == doctest::Approx(0.23046).epsilon(5e-3));
    CHECK(w == doctest::Approx(0.2304).epsilon(5e-3));
    double w_sc = action_kinematics(b.hbar0 * 446.5, c).frequency;
    CHECK(w_sc == doctest::Approx(0.23046).epsilon(1e-4));
    // second difference follows from dw/dI = w / (3I)
    double epp = b.hbar0 * b.hbar0 * w_sc / (3.0 * b.hbar0 * 446.5);
    CHECK(b.second_difference(446) == doctest::Approx(epp).epsilon(2e-2));
    for (int n = 0; n <= b.n_max; ++n)
        CHECK(b.residuals[n] <= 1e-9 * b.hbar0 * action_kinematics(b.hbar0 * (n + 0.5), c).frequency);
}

TEST_CASE("parity and sign of the eigenfunctions") {
    const OscillatorBasis& b = default_basis();
    int m = b.grid.points;
    for (int n : {0, 1, 2, 3, 445, 446, 447, 646}) {
        Eigen::VectorXd v = b.wavefunctions.col(n);
        double sym = (v - v.reverse()).norm() / v.norm();
        double anti = (v + v.reverse()).norm() / v.norm();
        if (n % 2 == 0)
            CHECK(sym < 1e-12);
        else
            CHECK(anti < 1e-12);
        double xt = std::pow(4.0 * b.energies[n], 0.25);
        int j = static_cast<int>(std::lround((b.grid.half_width - xt) / b.grid.step));
        CHECK(v[std::clamp(j, 0, m - 1)] > 0);
    }
}

TEST_CASE("position matrix elements") {
    const OscillatorBasis& b = default_basis();
    QuarticConstants c = classical_constants();
    const Eigen::MatrixXd& x = b.x_elements;
    CHECK((x - x.transpose()).cwiseAbs().maxCoeff() == 0.0);
    double mx = x.cwiseAbs().maxCoeff();
    for (int n = 0; n < b.size(); ++n)
        for (int m = n % 2; m < b.size(); m += 2) CHECK_MESSAGE(std::abs(x(n, m)) <= 1e-10 * mx, n, m);

    // same-parity zeros come out of the raw overlap integrals as well
    Eigen::VectorXd xs = b.grid_points();
    double raw = b.grid.step * b.wavefunctions.col(446).dot(xs.cwiseProduct(b.wavefunctions.col(448)));
    CHECK(std::abs(raw) < 1e-10 * mx);

    int n0 = 446;
    double a_mid = action_kinematics(b.hbar0 * (n0 + 1.0), c).amplitude;
    CHECK(std::abs(x(n0, n0 + 1)) / (a_mid / 2) == doctest::Approx(0.9550).epsilon(0.02));
    for (int n = n0 - 3; n <= n0 + 3; ++n) {
        double ratio = std::abs(x(n, n + 3)) / std::abs(x(n, n + 1));
        CHECK(ratio == doctest::Approx(1.0 / (23.0 * 0.9550)).epsilon(0.2));
        CHECK(std::abs(x(n, n + 1)) > std::abs(x(n, n + 3)));
    }
}

TEST_CASE("completeness and commutator") {
    const OscillatorBasis& b = default_basis();
    Eigen::VectorXd x2 = position_squared_expectations(b);
    Eigen::MatrixXd d = derivative_matrix_elements(b);
    CHECK((d + d.transpose()).cwiseAbs().maxCoeff() < 1e-8 * d.cwiseAbs().maxCoeff());
    const Eigen::MatrixXd& x = b.x_elements;
    double worst_c = 0, worst_k = 0;
    for (int n = 0; n <= b.n_max - 10; ++n) {
        double s = x.col(n).squaredNorm();
        worst_c = std::max(worst_c, std::abs(s / x2[n] - 1.0));
        // [x, p] = i hbar0 with p = -i hbar0 d/dx reduces to (x d - d x)_nn = -1
        double comm = x.row(n).dot(d.col(n)) - d.row(n).dot(x.col(n));
        worst_k = std::max(worst_k, std::abs(comm + 1.0));
    }
    CHECK(worst_c < 1e-6);
    CHECK(worst_k < 1e-6);
}

TEST_CASE("scaling with the Planck constant") {
    QuarticConstants c = classical_constants();
    OscillatorBasis small = solve_quartic_eigen(4e-4, 60);
    OscillatorBasis twice = solve_quartic_eigen(8e-4, 60);
    for (int n = 10; n <= 60; ++n) {
        double expect = std::pow(2.0, 4.0 / 3.0);
        CHECK(twice.energies[n] / small.energies[n] == doctest::Approx(expect).epsilon(1e-2));
        CHECK(small.energies[n] == doctest::Approx(energy_of_action(4e-4 * (n + 0.5), c)).epsilon(1e-2));
    }
}

TEST_CASE("truncation is reported with the offending level") {
    GridPolicy coarse;
    coarse.points_per_wavelength = 3.0;
    try {
        solve_quartic_eigen(1e-3, 40, coarse);
        FAIL("expected a truncation error");
    } catch (const TruncationError& e) {
        CHECK(e.first_bad_level() >= 0);
        CHECK(e.first_bad_level() <= 40);
    }
    GridPolicy tight;
    tight.turning_point_fraction = 0.97;
    try {
        solve_quartic_eigen(1e-3, 40, tight);
        FAIL("expected a truncation error");
    } catch (const TruncationError& e) {
        CHECK(e.first_bad_level() >= 0);
        CHECK(e.first_bad_level() <= 40);
        CHECK(std::string(e.what()).find("level " + std::to_string(e.first_bad_level())) !=
              std::string::npos);
    }
    CHECK_THROWS_AS(solve_quartic_eigen(-1.0, 10), std::invalid_argument);
    CHECK_THROWS_AS(solve_quartic_eigen(1e-3, 1), std::invalid_argument);
}
