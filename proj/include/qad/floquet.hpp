#pragma once

#include "qad/classical.hpp"
#include "qad/ode.hpp"
#include "qad/resonance.hpp"

#include <Eigen/Dense>

#include <complex>
#include <string>
#include <vector>

// One-period evolution of the driven system in the (q, s) basis under the
// resonance approximation, and its repeated application.

namespace qad {

using cplx = std::complex<double>;

struct FloquetOptions {
    int q_min = -32;
    int q_max = 32;
    int bandwidth = 0;       // groups kept on each side of a column's start group; 0 picks it
    int max_bandwidth = 12;
    double band_tolerance = 1e-16;  // occupancy allowed just outside the band
    int s_band = 0;          // 0: all states; otherwise keep this many per group
    double s_center = 0;     // E^M around which the reduced band is taken
    double rtol = 1e-10;
    double atol = 1e-12;
    bool fixed_step = false;
    double fixed_dt = 1.0;
    int threads = 1;
    double leakage_threshold = 1e-4;
    double time_offset = 0;  // drive evaluated at t + time_offset
};

/// Drive, energies and adjacent-group couplings restricted to the q-window.
struct FloquetModel {
    double hbar0 = 0;
    double period = 0;
    double f0 = 0;
    double omega_frame = 0;  // (W1 + W2) / 2
    int frame_harmonics = 0; // h1 + h2, so omega_frame T = pi (h1 + h2)
    double envelope_rate = 0;  // |W2 - W1| / 2
    double time_offset = 0;    // envelope cos(rate (t + offset)); a diagonal gauge absorbs the carrier shift
    int q_min = 0;
    std::vector<int> offset;  // first state of each group
    std::vector<int> count;
    std::vector<int> q_of;
    std::vector<int> s_of;
    Eigen::VectorXd energy;   // E_{q,s} relative to 2 E_{n0}
    Eigen::VectorXd frame_energy;  // E_{q,s} - hbar0 omega_frame q
    std::vector<Eigen::MatrixXd> up;  // x_{q,.;q+1,.} on the kept states

    int groups() const { return static_cast<int>(count.size()); }
    int q_max() const { return q_min + groups() - 1; }
    int dim() const { return static_cast<int>(energy.size()); }
    int group_index(int q) const { return q - q_min; }
    /// First state and number of states for groups [g_lo, g_hi] (group indices).
    std::pair<int, int> span(int g_lo, int g_hi) const;
};

FloquetModel make_floquet_model(const StationaryStates& states, const DipoleBlocks& blocks, const DriveParams& drive,
                                const FloquetOptions& opt);

/// States of group q kept by the reduced s-band (all when s_band == 0), in energy order.
std::vector<int> kept_columns(const GroupStates& g, int s_band, double s_center);

/// C(T) = diag(exp(-i E T / hbar0)) b(T), with b integrated over [0, T] from b(0) = C0.
/// C0 holds amplitudes over groups [g_lo, g_hi]; columns are propagated together.
Eigen::MatrixXcd propagate_one_period(const FloquetModel& m, int g_lo, int g_hi, const Eigen::MatrixXcd& C0,
                                      const Dop853Options& ode, long* steps = nullptr);

/// Reference integrator: the drive without the resonance approximation, all couplings in
/// `extra` (pairs of group indices with odd difference) plus the adjacent ones, lab frame.
struct FullCoupling {
    int g_from = 0;  // lower group index
    int g_to = 0;
    Eigen::MatrixXd x;
};
Eigen::MatrixXcd propagate_full_period(const FloquetModel& m, const std::vector<FullCoupling>& extra,
                                       const Eigen::MatrixXcd& C0, const Dop853Options& ode,
                                       const DriveParams& drive);

/// U stored by blocks U_{q, q0} for |q - q0| <= bandwidth.
struct BandedPropagator {
    int q_min = 0;
    int groups = 0;
    int bandwidth = 0;
    std::vector<int> offset, count;
    // block(g, d) = U_{g + d, g}, d in [-bandwidth, bandwidth]; empty when outside the window
    std::vector<Eigen::MatrixXcd> blocks;
    long ode_steps = 0;

    const Eigen::MatrixXcd& block(int g, int d) const { return blocks[static_cast<size_t>(g * (2 * bandwidth + 1) + d + bandwidth)]; }
    Eigen::MatrixXcd& block(int g, int d) { return blocks[static_cast<size_t>(g * (2 * bandwidth + 1) + d + bandwidth)]; }
    int dim() const { return offset.empty() ? 0 : offset.back() + count.back(); }

    Eigen::VectorXcd apply(const Eigen::VectorXcd& c) const;
    Eigen::MatrixXcd dense() const;
};

/// Smallest band whose first dropped group receives less than `band_tolerance` of any
/// column's weight, probed from the central group.
struct BandwidthProbe {
    int bandwidth = 0;
    std::vector<double> occupancy_by_distance;  // max over columns
    bool capped = false;
};
BandwidthProbe choose_bandwidth(const FloquetModel& m, const FloquetOptions& opt);

BandedPropagator build_evolution_matrix(const FloquetModel& m, const FloquetOptions& opt);

struct UnitarityReport {
    double interior_defect = 0;  // max |U^H U - 1| over columns whose band fits inside the window
    double boundary_defect = 0;  // same over the remaining columns
    double worst_column_norm_error = 0;
};

UnitarityReport unitarity_defect(const BandedPropagator& U);

class NonUnitarityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct FloquetDecomposition {
    double hbar0 = 0;
    double period = 0;
    Eigen::MatrixXcd U;
    Eigen::VectorXd quasienergy;   // in (-pi hbar0 / T, pi hbar0 / T]
    Eigen::VectorXcd eigenvalue;
    Eigen::MatrixXcd vectors;      // A^Q as columns, orthonormal
    double schur_offdiag = 0;      // largest strictly upper entry of the Schur factor
};

/// Eigendecomposition via the complex Schur form; for a unitary U the factor is diagonal.
FloquetDecomposition eigendecompose(const Eigen::MatrixXcd& U, double hbar0, double period);

/// Fold a quasienergy into the principal zone (-pi hbar0 / T, pi hbar0 / T].
double fold_quasienergy(double e, double hbar0, double period);

struct PacketSeries {
    int q_min = 0;
    std::vector<long> N;
    std::vector<double> mean_q;
    std::vector<double> variance_q;
    std::vector<double> norm;
    std::vector<double> edge_occupancy;   // weight in the two outermost groups
    std::vector<Eigen::VectorXd> occupancy;  // W_q per sample, when recorded
    Eigen::VectorXcd final_state;
    bool leakage_flag = false;
};

struct SeriesOptions {
    long stride = 1;
    bool record_occupancy = false;
    double leakage_threshold = 1e-4;
};

/// Group occupancies W_q = sum_s |C_{q,s}|^2.
Eigen::VectorXd group_occupancy(const std::vector<int>& offset, const std::vector<int>& count, const Eigen::VectorXcd& c);

/// Repeated application of the banded period map.
PacketSeries propagate_N(const BandedPropagator& U, const Eigen::VectorXcd& C0, long N, const SeriesOptions& opt = {});
/// Spectral propagation C(NT) = sum_Q A^Q <A^Q|C0> exp(-i eps_Q N T / hbar0).
PacketSeries propagate_N(const FloquetDecomposition& d, const std::vector<int>& offset, const std::vector<int>& count,
                         int q_min, const Eigen::VectorXcd& C0, long N, const SeriesOptions& opt = {});

/// Single-state initial vector on the model's state list.
Eigen::VectorXcd basis_state(const FloquetModel& m, int q, int s);

}  // namespace qad
