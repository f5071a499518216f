#pragma once

#include "qad/quartic.hpp"

#include <stdexcept>
#include <string>
#include <vector>

// Classical action-angle model of two coupled quartic oscillators driven by
// f(t) = f0 (cos W1 t + cos W2 t), in resonance variables (I1, theta1, I2, theta2).

namespace qad {

/// Commensurate two-frequency drive: W_i = 2 pi h_i / T with integer harmonics.
struct DriveParams {
    double f0 = 0;
    double mu = 0;
    double period = 150.0;
    int harmonic1 = 5;
    int harmonic2 = 6;

    double omega1() const;
    double omega2() const;
    double delta_omega() const;
    /// (W1 + W2) / 2
    double omega_mid() const;
    double force(double t) const;
    void validate() const;

    /// Snap two nominal frequencies onto the harmonics of `period`.
    /// Throws if either frequency is further than `tolerance` (relative) from a harmonic.
    static DriveParams from_frequencies(double f0, double mu, double omega1, double omega2, double period,
                                        double tolerance = 1e-3);
};

struct ClassicalState {
    double I1 = 0;
    double theta1 = 0;
    double I2 = 0;
    double theta2 = 0;
    double t = 0;
};

struct HamiltonianEval {
    double H = 0;
    double dI1 = 0;
    double dI2 = 0;
    double dtheta1 = 0;
    double dtheta2 = 0;
};

/// Energy and Hamilton's equations; throws std::domain_error unless I2 > |I1|.
HamiltonianEval hamiltonian_and_derivatives(const ClassicalState& s, const DriveParams& p, double t);

/// Initial I2 used throughout: the action with w = (W1+W2)/2, i.e. w^3 / (3 beta^4).
double default_I2(const DriveParams& p);

double wrap_angle(double a);

struct StepPolicy {
    double rtol = 1e-10;
    double atol = 1e-15;
    bool fixed_step = false;
    double fixed_dt = 0.5;
    int samples_per_period = 1;
    bool keep_samples = true;
    bool record_section = false;       // theta2 = 0 mod 2 pi crossings
    bool record_theta1_crossings = false;
    long max_steps = 2000000000L;
};

struct SectionPoint {
    double t = 0;
    double I1 = 0;
    double theta1 = 0;  // wrapped
    double I2 = 0;
};

struct Trajectory {
    double period = 0;
    double t0 = 0;
    std::vector<double> times;
    std::vector<ClassicalState> states;  // angles wrapped
    std::vector<double> energy;
    // time average of H over each drive period, exact up to integrator tolerance
    std::vector<double> period_means;
    std::vector<SectionPoint> section;
    std::vector<double> theta1_crossings;
    ClassicalState final_state;  // angles unwrapped
    long accepted_steps = 0;
    long rejected_steps = 0;

    long periods() const { return static_cast<long>(period_means.size()); }
    /// Means of H over consecutive blocks of `periods_per_block` periods.
    std::vector<double> block_means(long periods_per_block) const;
};

class ClassicalIntegrationError : public std::runtime_error {
public:
    ClassicalIntegrationError(const std::string& what, const ClassicalState& s)
        : std::runtime_error(what), state(s) {}
    ClassicalState state;
};

Trajectory integrate(const ClassicalState& s0, const DriveParams& p, double t_end, const StepPolicy& policy = {});

struct SectionSlice {
    double I2_center = 0;
    std::vector<SectionPoint> points;
};

/// Assign section points to the nearest I2 bin; points further than `max_distance`
/// from every bin are dropped (default keeps all).
std::vector<SectionSlice> poincare_section(const Trajectory& tr, const std::vector<double>& I2_bins,
                                           double max_distance = -1.0);

struct ResonanceWidths {
    double omega_tilde = 0;  // beta sqrt(mu)
    double delta_omega = 0;  // beta sqrt(2 mu)
    double delta_omega_drive = 0;  // beta sqrt(2 f0 / a)
    double lambda = 0;  // dW / (2 omega_tilde)
};

ResonanceWidths resonance_widths(const DriveParams& p, double a);

struct OverlapCheck {
    bool overlapped = false;
    double margin = 0;  // dW/(2 beta) - (sqrt(2 f0/a) + sqrt(mu))
};

OverlapCheck check_overlap(const DriveParams& p, double a);

class InsufficientData : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DiffusionEstimate {
    int exponent = 0;
    long blocks = 0;
    // variance rate of H: (3/2) mean (dH_bar)^2 / (10^n T)
    double D = 0;
    double stderr_D = 0;
    // the plain mean (dH_bar)^2 / (10^n T)
    double raw = 0;
};

DiffusionEstimate measure_diffusion(const Trajectory& tr, int n);
/// Same estimator on an explicit per-period series of mean energies.
DiffusionEstimate measure_diffusion(const std::vector<double>& period_means, double period, int n);

struct TheoreticalDiffusion {
    double w_s = 0;
    double D_I = 0;
};

TheoreticalDiffusion theoretical_diffusion(const DriveParams& p, double a, double nu, double T_a);

/// Mean interval between theta1 = 0 (mod 2 pi) crossings.
double separatrix_period(const Trajectory& tr);

enum class Verdict { diffusive, non_diffusive };
std::string to_string(Verdict v);
/// Diffusive when D2/D3 lies in [0.5, 2].
Verdict diffusion_verdict(const DiffusionEstimate& d2, const DiffusionEstimate& d3);

struct PhaseScanRow {
    double theta1 = 0;
    DiffusionEstimate d2, d3;
    Verdict verdict = Verdict::non_diffusive;
    double T_a = 0;
};

struct ScanOptions {
    long periods_d2 = 100000;  // D2 uses the first part of the run
    long periods_d3 = 300000;
    int threads = 1;
    StepPolicy step;
};

/// One trajectory per theta1 from I1 = theta2 = 0, I2 = default_I2.
std::vector<PhaseScanRow> scan_initial_phase(const DriveParams& p, const std::vector<double>& theta1_grid,
                                             const ScanOptions& opt);

/// Pendulum energy h = B I1^2/2 - V cos(theta1) of the averaged resonance Hamiltonian at I2.
double pendulum_energy(double I1, double theta1, double I2, double mu);
double pendulum_B(double I2);
double pendulum_V(double I2, double mu);

struct LayerScanPoint {
    double I1 = 0;
    double theta1 = 0;
    double h = 0;  // pendulum energy
    DiffusionEstimate d2, d3;
    bool chaotic = false;
};

struct LayerWidth {
    double V = 0;
    double I2 = 0;
    double w_inner = 0;  // V - lowest chaotic energy
    double w_outer = 0;  // highest chaotic energy - V
    double half_width() const { return 0.5 * (w_inner + w_outer); }
    std::vector<LayerScanPoint> points;
};

struct LayerScanOptions {
    int points_per_side = 10;
    double max_relative_offset = 0.2;  // scan h/V - 1 in (0, this]
    // chaotic when D2/D3 lies in [0.5, max_ratio]
    double max_ratio = 10.0;
    ScanOptions scan;
};

/// Scan initial I1 on both sides of the separatrix (theta1 = pi outside,
/// theta1 = 0 inside) and measure the energy band flagged chaotic.
LayerWidth measure_layer_width(const DriveParams& p, const LayerScanOptions& opt);

/// Frequency of theta1 oscillation for an undriven trajectory started at (I1, theta1).
double libration_frequency(const DriveParams& p, double I1, double theta1, double I2, long periods = 20);

}  // namespace qad
