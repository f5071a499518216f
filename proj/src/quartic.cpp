#include "qad/quartic.hpp"

#include <lapacke.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace qad {

namespace {

// symmetric central-difference weights for d2/dx2, index = offset
const std::vector<std::vector<double>> k_second_derivative = {
    {-2.0, 1.0},
    {-5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0},
    {-49.0 / 18.0, 3.0 / 2.0, -3.0 / 20.0, 1.0 / 90.0},
    {-205.0 / 72.0, 8.0 / 5.0, -1.0 / 5.0, 8.0 / 315.0, -1.0 / 560.0},
    {-5269.0 / 1800.0, 5.0 / 3.0, -5.0 / 21.0, 5.0 / 126.0, -5.0 / 1008.0, 1.0 / 3150.0},
};

// antisymmetric weights for d/dx, index = offset (offset 0 unused)
const std::vector<std::vector<double>> k_first_derivative = {
    {0.0, 1.0 / 2.0},
    {0.0, 2.0 / 3.0, -1.0 / 12.0},
    {0.0, 3.0 / 4.0, -3.0 / 20.0, 1.0 / 60.0},
    {0.0, 4.0 / 5.0, -1.0 / 5.0, 4.0 / 105.0, -1.0 / 280.0},
    {0.0, 5.0 / 6.0, -5.0 / 21.0, 5.0 / 84.0, -5.0 / 504.0, 1.0 / 1260.0},
};

struct BandedHamiltonian {
    int m = 0;
    int kd = 0;
    double dx = 0;
    std::vector<double> diag;      // kinetic diagonal + potential
    std::vector<double> offdiag;   // offdiag[d-1] for offset d
};

BandedHamiltonian build_hamiltonian(double hbar0, const GridInfo& g) {
    BandedHamiltonian h;
    h.m = g.points;
    h.kd = g.stencil_half_width;
    h.dx = g.step;
    const auto& c = k_second_derivative[h.kd - 1];
    double kin = -hbar0 * hbar0 / (2.0 * g.step * g.step);
    h.diag.resize(h.m);
    double centre = 0.5 * (h.m - 1);
    for (int j = 0; j < h.m; ++j) {
        double x = (j - centre) * g.step;
        h.diag[j] = kin * c[0] + 0.25 * x * x * x * x;
    }
    for (int d = 1; d <= h.kd; ++d) h.offdiag.push_back(kin * c[d]);
    return h;
}

Eigen::VectorXd apply(const BandedHamiltonian& h, const Eigen::VectorXd& v) {
    Eigen::VectorXd out(h.m);
    for (int j = 0; j < h.m; ++j) {
        double s = h.diag[j] * v[j];
        for (int d = 1; d <= h.kd; ++d) {
            if (j - d >= 0) s += h.offdiag[d - 1] * v[j - d];
            if (j + d < h.m) s += h.offdiag[d - 1] * v[j + d];
        }
        out[j] = s;
    }
    return out;
}

std::vector<double> banded_eigenvalues(const BandedHamiltonian& h, int count) {
    int ldab = h.kd + 1;
    std::vector<double> ab(static_cast<size_t>(ldab) * h.m, 0.0);
    // upper storage: ab[kd + i - j + j*ldab] = H(i, j)
    for (int j = 0; j < h.m; ++j) {
        ab[h.kd + static_cast<size_t>(j) * ldab] = h.diag[j];
        for (int d = 1; d <= h.kd && j - d >= 0; ++d)
            ab[h.kd - d + static_cast<size_t>(j) * ldab] = h.offdiag[d - 1];
    }
    std::vector<double> w(h.m);
    std::vector<lapack_int> ifail(h.m);
    lapack_int found = 0;
    double q_dummy = 0;
    double abstol = 2.0 * LAPACKE_dlamch('S');
    lapack_int info = LAPACKE_dsbevx(LAPACK_COL_MAJOR, 'N', 'I', 'U', h.m, h.kd, ab.data(), ldab,
                                     &q_dummy, 1, 0.0, 0.0, 1, count, abstol, &found, w.data(),
                                     &q_dummy, 1, ifail.data());
    if (info != 0 || found != count)
        throw std::runtime_error("dsbevx failed, info=" + std::to_string(info));
    w.resize(count);
    return w;
}

// inverse iteration on (H - sigma) in general band storage
Eigen::VectorXd inverse_iteration(const BandedHamiltonian& h, double sigma, int parity) {
    int kl = h.kd, ku = h.kd;
    int ldab = 2 * kl + ku + 1;
    std::vector<double> ab(static_cast<size_t>(ldab) * h.m);
    std::vector<lapack_int> ipiv(h.m);
    double shift = sigma;
    for (int attempt = 0; attempt < 4; ++attempt) {
        std::fill(ab.begin(), ab.end(), 0.0);
        // general band: ab[kl + ku + i - j + j*ldab] = A(i, j)
        for (int j = 0; j < h.m; ++j) {
            size_t col = static_cast<size_t>(j) * ldab;
            ab[kl + ku + col] = h.diag[j] - shift;
            for (int d = 1; d <= h.kd; ++d) {
                if (j - d >= 0) ab[kl + ku - d + col] = h.offdiag[d - 1];
                if (j + d < h.m) ab[kl + ku + d + col] = h.offdiag[d - 1];
            }
        }
        lapack_int info = LAPACKE_dgbtrf(LAPACK_COL_MAJOR, h.m, h.m, kl, ku, ab.data(), ldab,
                                         ipiv.data());
        if (info < 0) throw std::runtime_error("dgbtrf argument error");
        if (info > 0) {
            shift = sigma * (1.0 + 1e-14 * (attempt + 1));
            continue;
        }
        Eigen::VectorXd v(h.m);
        double centre = 0.5 * (h.m - 1);
        for (int j = 0; j < h.m; ++j) {
            double u = (j - centre) / h.m;
            v[j] = 1.0 + u + 0.3 * std::cos(7.0 * j);
        }
        for (int it = 0; it < 3; ++it) {
            info = LAPACKE_dgbtrs(LAPACK_COL_MAJOR, 'N', h.m, kl, ku, 1, ab.data(), ldab,
                                  ipiv.data(), v.data(), h.m);
            if (info != 0) throw std::runtime_error("dgbtrs failed");
            // project onto the parity sector, the grid is mirror symmetric
            Eigen::VectorXd r = v.reverse();
            v = parity == 0 ? Eigen::VectorXd(0.5 * (v + r)) : Eigen::VectorXd(0.5 * (v - r));
            v /= v.norm();
        }
        return v;
    }
    throw std::runtime_error("inverse iteration: singular shift");
}

}  // namespace

double complete_elliptic_k(double modulus) {
    if (!(modulus >= 0.0) || modulus >= 1.0)
        throw std::domain_error("complete_elliptic_k: modulus must lie in [0, 1)");
    double a = 1.0;
    double b = std::sqrt((1.0 - modulus) * (1.0 + modulus));
    for (int i = 0; i < 64 && std::abs(a - b) > 1e-16 * a; ++i) {
        double an = 0.5 * (a + b);
        b = std::sqrt(a * b);
        a = an;
    }
    return std::numbers::pi / (2.0 * a);
}

QuarticConstants classical_constants() {
    QuarticConstants c;
    c.k_half = complete_elliptic_k(1.0 / std::sqrt(2.0));
    c.beta = std::numbers::pi / (2.0 * c.k_half);
    c.A = std::pow(3.0 * std::numbers::pi / (4.0 * std::sqrt(2.0) * c.k_half), 4.0 / 3.0);
    return c;
}

ActionKinematics action_kinematics(double action, const QuarticConstants& c) {
    if (!(action >= 0.0)) throw std::domain_error("action_kinematics: negative action");
    double cube = std::cbrt(action);
    return {std::pow(4.0 * c.A, 0.25) * cube, 4.0 * c.A / 3.0 * cube};
}

double action_for_frequency(double omega, const QuarticConstants& c) {
    if (!(omega >= 0.0)) throw std::domain_error("action_for_frequency: negative frequency");
    double r = 3.0 * omega / (4.0 * c.A);
    return r * r * r;
}

double energy_of_action(double action, const QuarticConstants& c) {
    if (!(action >= 0.0)) throw std::domain_error("energy_of_action: negative action");
    return c.A * std::pow(action, 4.0 / 3.0);
}

double OscillatorBasis::local_frequency(int n) const {
    if (n < 1 || n >= n_max) throw std::out_of_range("local_frequency: level outside 1..n_max-1");
    return (energies[n + 1] - energies[n - 1]) / (2.0 * hbar0);
}

double OscillatorBasis::second_difference(int n) const {
    if (n < 1 || n >= n_max) throw std::out_of_range("second_difference: level outside 1..n_max-1");
    return energies[n + 1] - 2.0 * energies[n] + energies[n - 1];
}

Eigen::VectorXd OscillatorBasis::grid_points() const {
    Eigen::VectorXd x(grid.points);
    double centre = 0.5 * (grid.points - 1);
    for (int j = 0; j < grid.points; ++j) x[j] = (j - centre) * grid.step;
    return x;
}

OscillatorBasis solve_quartic_eigen(double hbar0, int n_max, const GridPolicy& policy) {
    if (!(hbar0 > 0.0)) throw std::invalid_argument("solve_quartic_eigen: hbar0 must be positive");
    if (n_max < 2) throw std::invalid_argument("solve_quartic_eigen: n_max must be >= 2");
    if (policy.stencil_half_width < 1 || policy.stencil_half_width > 5)
        throw std::invalid_argument("solve_quartic_eigen: stencil half width must be 1..5");
    if (!(policy.turning_point_fraction > 0.0 && policy.turning_point_fraction < 1.0))
        throw std::invalid_argument("solve_quartic_eigen: turning point fraction must be in (0,1)");

    QuarticConstants c = classical_constants();
    // semiclassical top level, padded a little so the estimate never undershoots
    double e_top = 1.05 * energy_of_action(hbar0 * (n_max + 1.0), c);
    double x_turn = std::pow(4.0 * e_top, 0.25);
    double p_max = std::sqrt(2.0 * e_top);
    double wavelength = 2.0 * std::numbers::pi * hbar0 / p_max;

    GridInfo g;
    g.stencil_half_width = policy.stencil_half_width;
    g.half_width = x_turn / policy.turning_point_fraction;
    double dx_target = wavelength / policy.points_per_wavelength;
    int intervals = static_cast<int>(std::ceil(2.0 * g.half_width / dx_target));
    g.points = intervals + 1;
    g.step = 2.0 * g.half_width / intervals;

    BandedHamiltonian h = build_hamiltonian(hbar0, g);
    std::vector<double> e = banded_eigenvalues(h, n_max + 1);

    OscillatorBasis b;
    b.hbar0 = hbar0;
    b.n_max = n_max;
    b.grid = g;
    b.energies = e;
    b.wavefunctions.resize(g.points, n_max + 1);
    b.residuals.resize(n_max + 1);

    Eigen::VectorXd xs = b.grid_points();
    double inv_sqrt_dx = 1.0 / std::sqrt(g.step);
    int edge_start = static_cast<int>(0.1 * g.points);
    for (int n = 0; n <= n_max; ++n) {
        Eigen::VectorXd v = inverse_iteration(h, e[n], n % 2);
        v *= inv_sqrt_dx;
        double xt = std::pow(4.0 * e[n], 0.25);
        int jt = std::clamp(static_cast<int>(std::lround((-xt + g.half_width) / g.step)), 0, g.points - 1);
        // sign: positive at the left turning point (odd levels vanish nowhere near it)
        if (v[jt] < 0) v = -v;
        Eigen::VectorXd r = apply(h, v) - e[n] * v;
        b.residuals[n] = std::sqrt(r.squaredNorm() * g.step);

        double edge = (v.head(edge_start).squaredNorm() + v.tail(edge_start).squaredNorm()) * g.step;
        double omega_n = 4.0 * c.A / 3.0 * std::cbrt(hbar0 * (n + 0.5));
        double tol = policy.residual_tolerance * hbar0 * omega_n;
        bool monotone = n == 0 || e[n] > e[n - 1];
        double sampling = 2.0 * std::numbers::pi * hbar0 / (std::sqrt(2.0 * std::max(e[n], 0.0)) * g.step);
        if (b.residuals[n] > tol || edge > policy.edge_weight_tolerance || !monotone || e[n] <= 0 ||
            sampling < policy.min_points_per_wavelength) {
            std::ostringstream msg;
            msg << "quartic basis truncated: level " << n << " unconverged (residual "
                << b.residuals[n] << " vs " << tol << ", edge weight " << edge
                << ", points per wavelength " << sampling << ")";
            throw TruncationError(n, msg.str());
        }
        b.wavefunctions.col(n) = v;
    }
    b.x_elements = position_matrix_elements(b);
    return b;
}

Eigen::MatrixXd position_matrix_elements(const OscillatorBasis& basis) {
    if (basis.wavefunctions.cols() == 0) return basis.x_elements;
    const Eigen::MatrixXd& psi = basis.wavefunctions;
    Eigen::VectorXd xs = basis.grid_points();
    Eigen::MatrixXd xpsi = xs.asDiagonal() * psi;
    Eigen::MatrixXd out = basis.grid.step * (psi.transpose() * xpsi);
    // exact zeros for same parity, symmetric by construction
    int size = basis.size();
    for (int n = 0; n < size; ++n)
        for (int m = n; m < size; ++m) {
            if ((n + m) % 2 == 0) {
                out(n, m) = out(m, n) = 0.0;
            } else {
                double s = 0.5 * (out(n, m) + out(m, n));
                out(n, m) = out(m, n) = s;
            }
        }
    return out;
}

Eigen::MatrixXd derivative_matrix_elements(const OscillatorBasis& basis) {
    if (basis.wavefunctions.cols() == 0)
        throw std::runtime_error("derivative_matrix_elements: basis has no wavefunctions");
    const Eigen::MatrixXd& psi = basis.wavefunctions;
    int m = basis.grid.points;
    int kd = basis.grid.stencil_half_width;
    const auto& w = k_first_derivative[kd - 1];
    Eigen::MatrixXd dpsi = Eigen::MatrixXd::Zero(m, psi.cols());
    for (int d = 1; d <= kd; ++d) {
        double cd = w[d] / basis.grid.step;
        dpsi.topRows(m - d) += cd * psi.bottomRows(m - d);
        dpsi.bottomRows(m - d) -= cd * psi.topRows(m - d);
    }
    return basis.grid.step * (psi.transpose() * dpsi);
}

Eigen::VectorXd position_squared_expectations(const OscillatorBasis& basis) {
    if (basis.wavefunctions.cols() == 0)
        throw std::runtime_error("position_squared_expectations: basis has no wavefunctions");
    Eigen::VectorXd xs = basis.grid_points();
    Eigen::VectorXd x2 = xs.array().square();
    Eigen::VectorXd out(basis.size());
    for (int n = 0; n < basis.size(); ++n)
        out[n] = basis.grid.step * (x2.array() * basis.wavefunctions.col(n).array().square()).sum();
    return out;
}

}  // namespace qad
