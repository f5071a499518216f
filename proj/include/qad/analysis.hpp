#pragma once

#include "qad/classical.hpp"
#include "qad/floquet.hpp"
#include "qad/resonance.hpp"

#include <Eigen/Dense>

#include <string>
#include <vector>

// Statistics on propagated packets: moments, diffusion fits, saturation,
// time-averaged profiles and the classical/quantum comparison.

namespace qad {

struct LineFit {
    double slope = 0;
    double intercept = 0;
    double slope_err = 0;
    double intercept_err = 0;
    double correlation = 0;  // Pearson r, signed
    int points = 0;
};

/// Ordinary least squares y = intercept + slope x. Needs two distinct x values.
LineFit linear_fit(const std::vector<double>& x, const std::vector<double>& y);

struct Moments {
    double mean = 0;
    double variance = 0;
};

/// Moments of q under weights W (index 0 is q_min); W need not be normalized.
Moments packet_moments(const Eigen::VectorXd& W, int q_min);
Moments packet_moments(const Eigen::VectorXcd& C, const std::vector<int>& offset, const std::vector<int>& count,
                       int q_min);

struct MomentSeries {
    std::vector<long> N;
    std::vector<double> mean_q;
    std::vector<double> variance_q;
    std::vector<double> energy_variance;  // hbar0^2 w^2 Delta_q
};

MomentSeries moment_series(const PacketSeries& s, double hbar_omega);

struct QeScatterRow {
    int Q = 0;
    double quasienergy = 0;
    double mean_q = 0;
    double sigma_q = 0;
    int dominant_q = 0;
    int dominant_s = 0;
    double dominant_weight = 0;
    std::string state_class;  // class of the dominant stationary state, empty when unknown
};

/// One row per Floquet state. `classes` (optional, one per model state) tags rows.
std::vector<QeScatterRow> qe_scatter(const FloquetDecomposition& d, const FloquetModel& m,
                                     const std::vector<StateClass>* classes = nullptr);

struct FitPolicy {
    long N_min = 50;
    long N_max = 1000;
    double min_correlation = 0.9;
};

struct DiffusionFit {
    bool diffusive = false;
    double D = 0;         // (Delta H)^2 per unit time
    double stderr_D = 0;
    double correlation = 0;
    long N_min = 0;
    long N_max = 0;
    LineFit line;  // Delta_q against N
};

/// Linear fit of the energy variance against N T over [N_min, min(N_max, cap)].
/// cap_periods < 0 leaves N_max alone.
DiffusionFit fit_quantum_D(const MomentSeries& s, double hbar_omega, double period, const FitPolicy& p = {},
                           long cap_periods = -1);

struct SaturationPolicy {
    double slope_fraction = 0.1;
    long confirm_periods = 500;
    long slope_window = 250;   // periods per windowed slope
    long min_periods = 10000;
    FitPolicy initial;         // sets the reference slope
};

struct LocalizationReport {
    bool saturated = false;    // false: open growth within the series
    long t0_periods = 0;
    double t0 = 0;
    double initial_slope = 0;  // d Delta_q / dN
    double mean_variance = 0;  // Delta_q averaged over N > 2 t0 / T
    long plateau_samples = 0;
    double oscillation_periods = 0;  // 0 when no autocorrelation peak
    double oscillation_time = 0;
};

LocalizationReport detect_saturation(const MomentSeries& s, double period, const SaturationPolicy& p = {});

/// Largest autocorrelation peak after the first zero crossing, in samples; 0 if none.
double autocorrelation_period(const std::vector<double>& r);

struct ProfilePolicy {
    double core_fraction = 1e-2;   // tail starts below this fraction of the maximum
    double floor_factor = 10;      // and stays above this multiple of the leakage floor
    double absolute_floor = 1e-28;
    int min_points = 3;
};

struct TailFit {
    int points = 0;
    double length = 0;       // l from log W ~ -|q - q_peak| / l
    double correlation = 0;  // |r| of the log fit
};

struct ProfileFit {
    int q_min = 0;
    Eigen::VectorXd W;
    double total = 0;
    int q_peak = 0;
    double floor = 0;
    TailFit left, right;
    double l_s = 0;            // mean over fitted sides
    double correlation = 0;    // smallest over fitted sides
    bool valid = false;
};

/// Time average of W_q over samples with N in [N_from, N_to], then the two tail fits.
ProfileFit average_profile(const PacketSeries& s, long N_from, long N_to, const ProfilePolicy& p = {});
ProfileFit fit_profile(const Eigen::VectorXd& W, int q_min, double leakage_floor, const ProfilePolicy& p = {});

/// log(value) against 1 / sqrt(mu); needs at least four positive points.
LineFit scaling_fit(const std::vector<double>& mu, const std::vector<double>& value);

struct DPoint {
    double mu = 0;
    double D = 0;
    double err = 0;
};

struct ComparisonRow {
    double mu = 0;
    double inv_sqrt_mu = 0;
    double D_classical = 0;
    double err_classical = 0;
    double D_quantum = 0;
    double err_quantum = 0;
    double ratio = 0;
    double ratio_err = 0;
    bool weaker = false;  // 0 < D_q < D_cl
};

struct Comparison {
    std::vector<ComparisonRow> rows;
    bool all_weaker = false;
    LineFit classical_log;  // log D against 1/sqrt(mu), when >= 2 points
    LineFit quantum_log;
};

/// Rows for every mu present in both lists (relative match 1e-9).
Comparison compare_classical_quantum(const std::vector<DPoint>& classical, const std::vector<DPoint>& quantum);

}  // namespace qad
