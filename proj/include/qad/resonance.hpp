#pragma once

#include "qad/quartic.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <stdexcept>
#include <string>
#include <vector>

// Stationary states near the coupling resonance w_x = w_y, in the (k, p) basis
// n = n0 + k, m = n0 + p - k. A group q collects the states whose weight sits at p ~ q.

namespace qad {

struct ResonanceIndex {
    int k = 0;
    int p = 0;
    int j2() const { return 2 * k - p; }  // twice the exchange coordinate k - p/2
};

/// Window centred on group q: p in [q - P_w, q + P_w] with the parity of q,
/// and for each p the mirror-symmetric range |2k - p| <= 2 K_w.
struct ResonanceWindow {
    int n0 = 446;
    int K_w = 60;
    int P_w = 8;
    int q = 0;

    int parity() const { return ((q % 2) + 2) % 2; }
    std::vector<ResonanceIndex> indices() const;
    int states_per_p(int p) const;
    /// Largest |k| and |p - k| reached, for the basis-size check.
    int reach() const;
    void validate(const OscillatorBasis& basis) const;
};

/// K_w = max(60, ceil(1.22 k_sep)) with k_sep = sqrt(2 V / E'') the separatrix half-width in k.
int auto_half_width(double V, double e2, int minimum = 60);

struct ReducedHamiltonian {
    ResonanceWindow window;
    std::vector<ResonanceIndex> index;
    Eigen::SparseMatrix<double> H;  // energies relative to 2 E_{n0}
    double mu = 0;
    double hbar0 = 0;
    double hbar_omega = 0;  // (E_{n0+1} - E_{n0-1}) / 2
    double e2 = 0;          // E_{n0+1} - 2 E_{n0} + E_{n0-1}
};

ReducedHamiltonian build_reduced_hamiltonian(const OscillatorBasis& basis, double mu, const ResonanceWindow& w);

/// All eigenvalues of the operator, ascending, via its exchange-symmetric blocks.
Eigen::VectorXd reduced_eigenvalues(const ReducedHamiltonian& h);

class LabelingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Energy order 0, 1, 2, ... -> s = 0, 1, -1, 2, -2, ...
int s_of_order(int order);
int order_of_s(int s);

/// Labelled eigenstates of one group, in energy order.
struct GroupStates {
    int q = 0;
    ResonanceWindow window;
    std::vector<ResonanceIndex> index;
    Eigen::VectorXd energies;  // E_{q,s}
    Eigen::VectorXd mathieu;   // E_{q,s} - hbar0 w q
    std::vector<int> s;
    std::vector<int> exchange;  // +1 / -1 under k <-> p - k
    Eigen::VectorXd mean_p;
    Eigen::VectorXd edge_weight;
    Eigen::MatrixXd vectors;  // column per state over `index`

    int size() const { return static_cast<int>(s.size()); }
    int column_of(int s_label) const;
    /// sum over p of |c_{k,p}|^2 as a function of 2k - p
    Eigen::VectorXd j_marginal(int column) const;
    /// sum over k of |c_{k,p}|^2 for p = q - P_w .. q + P_w
    Eigen::VectorXd p_marginal(int column) const;
};

/// Diagonalize and keep the states whose mean p rounds to the window's group.
GroupStates diagonalize_and_label(const ReducedHamiltonian& h);

struct SpectrumOptions {
    int n0 = 446;
    int K_w = 60;  // <= 0 selects auto_half_width
    int P_w = 8;
    int q_min = -1;
    int q_max = 1;
    int threads = 1;
};

struct StationaryStates {
    double hbar0 = 0;
    double mu = 0;
    int n0 = 0;
    double hbar_omega = 0;
    double omega = 0;
    double e2 = 0;
    std::vector<GroupStates> groups;  // q_min .. q_max

    int q_min() const { return groups.empty() ? 0 : groups.front().q; }
    int q_max() const { return groups.empty() ? -1 : groups.back().q; }
    const GroupStates& group(int q) const;
};

StationaryStates solve_resonance_spectrum(const OscillatorBasis& basis, double mu, const SpectrumOptions& opt);

/// Pendulum model of one group built from the basis elements at n0.
struct QuantumPendulum {
    double V = 0;            // 2 mu x_{n0,n0+1}^2
    double hbar_omega_t = 0; // sqrt(2 V E'')
    double separatrix = 0;   // estimated E^M of the separatrix for the group
};

QuantumPendulum quantum_pendulum(const OscillatorBasis& basis, const GroupStates& g, double mu, int n0);

/// Classical layer expressed relative to the classical separatrix energy V.
struct LayerBand {
    double V = 0;
    double w_inner = 0;
    double w_outer = 0;
    bool valid() const { return V > 0; }
};

enum class StateClass { below_separatrix, separatrix_layer, above_separatrix };
std::string to_string(StateClass c);

/// Classify by E^M against the quantum separatrix of the group, with the layer band
/// rescaled by V_quantum / V_classical. Throws std::invalid_argument without a band.
StateClass classify_state(double mathieu_energy, const QuantumPendulum& qp, const LayerBand& band);

struct SeparatrixCount {
    int q = 0;
    int M_s = 0;
    double theory = 0;  // sum over both sides of (w / (pi hbar w~)) (ln(32 V / w) + 1)
    std::vector<StateClass> classes;
};

SeparatrixCount count_separatrix_states(const OscillatorBasis& basis, const GroupStates& g, double mu, int n0,
                                        const LayerBand& band);

/// x_{q,s;q',s'} between groups of opposite parity (q' = q + 1 for the drive couplings),
/// rows over `lower` and columns over `upper`.
Eigen::MatrixXd dipole_block(const OscillatorBasis& basis, const GroupStates& lower, const GroupStates& upper);

struct DipoleBlocks {
    int q_min = 0;
    std::vector<Eigen::MatrixXd> up;  // up[i] = x_{q,.;q+1,.} with q = q_min + i
    const Eigen::MatrixXd& block(int q) const { return up.at(static_cast<size_t>(q - q_min)); }
};

DipoleBlocks dipole_blocks(const OscillatorBasis& basis, const StationaryStates& states, int threads = 1);

struct NonlinearityReport {
    double worst_ratio = 0;  // min over p != 0 of hbar0 w |p| / |E'' (k^2 - k p + p^2/2)|
    int worst_k = 0;
    int worst_p = 0;
    int valid_half_width = 0;  // largest |k - p/2| with ratio >= threshold everywhere
    double threshold = 10;
    bool warning = false;
};

NonlinearityReport small_nonlinearity_check(const OscillatorBasis& basis, const ResonanceWindow& w,
                                            double threshold = 10);

}  // namespace qad
