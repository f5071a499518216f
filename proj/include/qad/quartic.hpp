#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>
#include <vector>

// Quartic oscillator H0 = p^2/2 + x^4/4: classical constants and the
// one-dimensional quantum eigenproblem shared by every other module.

namespace qad {

/// Complete elliptic integral of the first kind K(k) (modulus convention),
/// evaluated with the arithmetic-geometric mean. Throws std::domain_error
/// outside 0 <= k < 1.
double complete_elliptic_k(double modulus);

struct QuarticConstants {
    double k_half = 0;  // K(1/sqrt(2))
    double A = 0;       // energy-action law E = A I^{4/3}
    double beta = 0;    // pi / (2 K(1/sqrt(2)))
};

QuarticConstants classical_constants();

struct ActionKinematics {
    double amplitude = 0;
    double frequency = 0;
};

/// Amplitude a(I) = (4A)^{1/4} I^{1/3} and frequency w(I) = (4A/3) I^{1/3}.
ActionKinematics action_kinematics(double action, const QuarticConstants& c);

/// Inverse of the frequency law: the action whose frequency is `omega`.
double action_for_frequency(double omega, const QuarticConstants& c);

/// E = A I^{4/3}.
double energy_of_action(double action, const QuarticConstants& c);

struct GridPolicy {
    double points_per_wavelength = 20.0;
    // classical turning point of the top level sits at this fraction of the half box
    double turning_point_fraction = 0.7;
    // finite-difference half width: 1..5 gives order 2..10
    int stencil_half_width = 4;
    // eigen-residual bound, in units of hbar0 * w_n at the level itself
    double residual_tolerance = 1e-9;
    // probability allowed in the outer 10% of the box
    double edge_weight_tolerance = 1e-10;
    // a level is rejected when its own wavelength is sampled more coarsely than this
    double min_points_per_wavelength = 8.0;
};

struct GridInfo {
    int points = 0;
    double step = 0;
    double half_width = 0;
    int stencil_half_width = 0;
};

class TruncationError : public std::runtime_error {
public:
    TruncationError(int first_bad_level, const std::string& what)
        : std::runtime_error(what), first_bad_level_(first_bad_level) {}
    int first_bad_level() const { return first_bad_level_; }

private:
    int first_bad_level_;
};

struct OscillatorBasis {
    double hbar0 = 0;
    int n_max = 0;  // levels n = 0..n_max
    GridInfo grid;
    std::vector<double> energies;
    // grid values psi_n(x_j), normalized with weight dx; empty when loaded from a cache
    Eigen::MatrixXd wavefunctions;
    Eigen::MatrixXd x_elements;
    std::vector<double> residuals;

    int size() const { return n_max + 1; }
    /// w_n = (E_{n+1} - E_{n-1}) / (2 hbar0)
    double local_frequency(int n) const;
    /// E''_n = E_{n+1} - 2 E_n + E_{n-1}
    double second_difference(int n) const;
    double x(int n, int m) const { return x_elements(n, m); }
    Eigen::VectorXd grid_points() const;
};

OscillatorBasis solve_quartic_eigen(double hbar0, int n_max, const GridPolicy& policy = {});

/// Symmetric table x_{n,n'} = <psi_n|x|psi_n'>.
Eigen::MatrixXd position_matrix_elements(const OscillatorBasis& basis);

/// Real antisymmetric table <psi_n|d/dx|psi_n'>; p_{n,n'} = -i hbar0 times this.
Eigen::MatrixXd derivative_matrix_elements(const OscillatorBasis& basis);

/// <psi_n|x^2|psi_n> evaluated directly on the grid.
Eigen::VectorXd position_squared_expectations(const OscillatorBasis& basis);

}  // namespace qad
