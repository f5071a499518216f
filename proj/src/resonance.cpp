#include "qad/resonance.hpp"
#include "qad/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <limits>
#include <numeric>
#include <sstream>

namespace qad {

namespace {

int floor_div2(int a) { return a >= 0 ? a / 2 : -((-a + 1) / 2); }

int nearest_same_parity(double x, int parity) {
    // nearest integer m with m = parity (mod 2)
    double shifted = (x - parity) / 2.0;
    return 2 * static_cast<int>(std::lround(shifted)) + parity;
}

}  // namespace

std::vector<ResonanceIndex> ResonanceWindow::indices() const {
    std::vector<ResonanceIndex> out;
    int par = parity();
    for (int p = q - P_w; p <= q + P_w; ++p) {
        if (((p % 2) + 2) % 2 != par) continue;
        // |2k - p| <= 2 K_w
        int k_lo = -floor_div2(2 * K_w - p);
        int k_hi = floor_div2(2 * K_w + p);
        for (int k = k_lo; k <= k_hi; ++k) out.push_back({k, p});
    }
    return out;
}

int ResonanceWindow::states_per_p(int p) const {
    return floor_div2(2 * K_w + p) + floor_div2(2 * K_w - p) + 1;
}

int ResonanceWindow::reach() const {
    int r = 0;
    for (const auto& i : indices()) r = std::max({r, std::abs(i.k), std::abs(i.p - i.k)});
    return r;
}

void ResonanceWindow::validate(const OscillatorBasis& basis) const {
    if (K_w <= 0) throw std::invalid_argument("resonance window: K_w must be positive");
    if (P_w < 0) throw std::invalid_argument("resonance window: P_w must be non-negative");
    int r = reach();
    if (n0 - r < 0 || n0 + r > basis.n_max - 1) {
        std::ostringstream msg;
        msg << "resonance window needs levels " << n0 - r << ".." << n0 + r << " but the basis holds 0.."
            << basis.n_max - 1 << " usable levels";
        throw std::invalid_argument(msg.str());
    }
}

int auto_half_width(double V, double e2, int minimum) {
    if (V <= 0 || e2 <= 0) return minimum;
    double k_sep = std::sqrt(2.0 * V / e2);
    return std::max(minimum, static_cast<int>(std::ceil(1.22 * k_sep)));
}

ReducedHamiltonian build_reduced_hamiltonian(const OscillatorBasis& basis, double mu, const ResonanceWindow& w) {
    if (mu < 0) throw std::invalid_argument("build_reduced_hamiltonian: mu must be >= 0");
    w.validate(basis);
    ReducedHamiltonian h;
    h.window = w;
    h.index = w.indices();
    h.mu = mu;
    h.hbar0 = basis.hbar0;
    h.hbar_omega = basis.local_frequency(w.n0) * basis.hbar0;
    h.e2 = basis.second_difference(w.n0);

    const int dim = static_cast<int>(h.index.size());
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<size_t>(dim) * 64);
    for (int a = 0; a < dim; ++a) {
        const auto& ia = h.index[a];
        double k = ia.k, p = ia.p;
        trip.emplace_back(a, a, h.hbar_omega * p + h.e2 * (k * k - p * k + 0.5 * p * p));
        if (mu == 0) continue;
        int n = w.n0 + ia.k, m = w.n0 + ia.p - ia.k;
        for (int b = 0; b < dim; ++b) {
            if (b == a) continue;
            const auto& ib = h.index[b];
            int n2 = w.n0 + ib.k, m2 = w.n0 + ib.p - ib.k;
            if (((n - n2) & 1) == 0 || ((m - m2) & 1) == 0) continue;
            double v = -mu * basis.x(n, n2) * basis.x(m, m2);
            if (v != 0) trip.emplace_back(a, b, v);
        }
    }
    h.H.resize(dim, dim);
    h.H.setFromTriplets(trip.begin(), trip.end());
    return h;
}

namespace {

struct SymmetricSplit {
    Eigen::SparseMatrix<double> S;  // columns: symmetric block first, then antisymmetric
    int n_sym = 0;
};

SymmetricSplit exchange_transform(const std::vector<ResonanceIndex>& index) {
    std::map<std::pair<int, int>, int> where;
    for (int a = 0; a < static_cast<int>(index.size()); ++a) where[{index[a].k, index[a].p}] = a;
    std::vector<std::pair<int, int>> sym, anti;
    for (int a = 0; a < static_cast<int>(index.size()); ++a) {
        const auto& i = index[a];
        int j2 = i.j2();
        if (j2 < 0) continue;
        if (j2 == 0) {
            sym.push_back({a, -1});
            continue;
        }
        auto it = where.find({i.p - i.k, i.p});
        if (it == where.end()) throw std::logic_error("exchange partner missing from window");
        sym.push_back({a, it->second});
        anti.push_back({a, it->second});
    }
    const int dim = static_cast<int>(index.size());
    SymmetricSplit out;
    out.n_sym = static_cast<int>(sym.size());
    std::vector<Eigen::Triplet<double>> trip;
    const double r = 1.0 / std::sqrt(2.0);
    int col = 0;
    for (auto [a, b] : sym) {
        if (b < 0) {
            trip.emplace_back(a, col, 1.0);
        } else {
            trip.emplace_back(a, col, r);
            trip.emplace_back(b, col, r);
        }
        ++col;
    }
    for (auto [a, b] : anti) {
        trip.emplace_back(a, col, r);
        trip.emplace_back(b, col, -r);
        ++col;
    }
    if (col != dim) throw std::logic_error("exchange transform is not square");
    out.S.resize(dim, dim);
    out.S.setFromTriplets(trip.begin(), trip.end());
    return out;
}

struct EigenPairs {
    Eigen::VectorXd values;
    Eigen::MatrixXd vectors;
    std::vector<int> exchange;
};

EigenPairs solve_blocks(const ReducedHamiltonian& h, bool with_vectors) {
    SymmetricSplit split = exchange_transform(h.index);
    const int dim = static_cast<int>(h.index.size());
    Eigen::MatrixXd Hd = Eigen::MatrixXd(h.H);
    Eigen::MatrixXd Ht = split.S.transpose() * (Hd * split.S);
    const int ns = split.n_sym, na = dim - ns;
    auto opts = with_vectors ? Eigen::ComputeEigenvectors : Eigen::EigenvaluesOnly;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_s, es_a;
    if (ns > 0) es_s.compute(Ht.topLeftCorner(ns, ns), opts);
    if (na > 0) es_a.compute(Ht.bottomRightCorner(na, na), opts);
    if ((ns > 0 && es_s.info() != Eigen::Success) || (na > 0 && es_a.info() != Eigen::Success))
        throw std::runtime_error("reduced Hamiltonian eigensolver failed");

    std::vector<std::pair<double, int>> order;  // (value, signed block column)
    for (int i = 0; i < ns; ++i) order.push_back({es_s.eigenvalues()(i), i});
    for (int i = 0; i < na; ++i) order.push_back({es_a.eigenvalues()(i), ns + i});
    // exact ties: antisymmetric member first
    std::stable_sort(order.begin(), order.end(), [ns](const auto& x, const auto& y) {
        if (x.first != y.first) return x.first < y.first;
        return (x.second >= ns) > (y.second >= ns);
    });

    EigenPairs out;
    out.values.resize(dim);
    out.exchange.resize(dim);
    if (with_vectors) out.vectors.resize(dim, dim);
    Eigen::MatrixXd block = Eigen::MatrixXd::Zero(dim, dim);
    if (with_vectors) {
        if (ns > 0) block.topLeftCorner(ns, ns) = es_s.eigenvectors();
        if (na > 0) block.bottomRightCorner(na, na) = es_a.eigenvectors();
    }
    std::vector<int> cols(dim);
    for (int i = 0; i < dim; ++i) {
        out.values(i) = order[i].first;
        out.exchange[i] = order[i].second < ns ? 1 : -1;
        cols[i] = order[i].second;
    }
    if (with_vectors) {
        Eigen::MatrixXd full = split.S * block;
        for (int i = 0; i < dim; ++i) out.vectors.col(i) = full.col(cols[i]);
    }
    return out;
}

}  // namespace

Eigen::VectorXd reduced_eigenvalues(const ReducedHamiltonian& h) { return solve_blocks(h, false).values; }

int s_of_order(int order) {
    if (order < 0) throw std::invalid_argument("s_of_order: negative order");
    if (order == 0) return 0;
    return (order % 2 == 1) ? (order + 1) / 2 : -(order / 2);
}

int order_of_s(int s) { return s > 0 ? 2 * s - 1 : -2 * s; }

int GroupStates::column_of(int s_label) const {
    int c = order_of_s(s_label);
    if (c >= size()) throw std::out_of_range("group " + std::to_string(q) + " has no state s=" + std::to_string(s_label));
    return c;
}

Eigen::VectorXd GroupStates::j_marginal(int column) const {
    int K = window.K_w;
    Eigen::VectorXd m = Eigen::VectorXd::Zero(4 * K + 1);  // index j2 + 2K
    for (int a = 0; a < static_cast<int>(index.size()); ++a)
        m(index[a].j2() + 2 * K) += vectors(a, column) * vectors(a, column);
    return m;
}

Eigen::VectorXd GroupStates::p_marginal(int column) const {
    int P = window.P_w;
    Eigen::VectorXd m = Eigen::VectorXd::Zero(2 * P + 1);
    for (int a = 0; a < static_cast<int>(index.size()); ++a)
        m(index[a].p - (q - P)) += vectors(a, column) * vectors(a, column);
    return m;
}

GroupStates diagonalize_and_label(const ReducedHamiltonian& h) {
    const auto& w = h.window;
    EigenPairs ep = solve_blocks(h, true);
    const int dim = static_cast<int>(h.index.size());
    Eigen::VectorXd p_of(dim);
    std::vector<char> edge(dim, 0);
    int p_lo = w.q, p_hi = w.q;
    for (const auto& i : h.index) {
        p_lo = std::min(p_lo, i.p);
        p_hi = std::max(p_hi, i.p);
    }
    for (int a = 0; a < dim; ++a) {
        p_of(a) = h.index[a].p;
        const auto& i = h.index[a];
        edge[a] = (std::abs(i.j2()) >= 2 * w.K_w - 1 || (i.p == p_lo && p_lo != w.q) || (i.p == p_hi && p_hi != w.q))
                      ? 1 : 0;
    }

    std::vector<int> keep;
    std::ostringstream bad;
    int n_bad = 0;
    for (int c = 0; c < dim; ++c) {
        double mp = ep.vectors.col(c).cwiseAbs2().dot(p_of);
        double frac = std::abs((mp - w.parity()) / 2.0 - std::floor((mp - w.parity()) / 2.0) - 0.5);
        if (frac < 0.1 && std::abs(mp - w.q) < 1.5) {
            bad << (n_bad ? ", " : "") << "E=" << ep.values(c) << " <p>=" << mp;
            ++n_bad;
            continue;
        }
        if (nearest_same_parity(mp, w.parity()) == w.q) keep.push_back(c);
    }
    if (n_bad > 0) throw LabelingError("group assignment ambiguous for " + std::to_string(n_bad) + " states: " + bad.str());
    int expected = w.states_per_p(w.q);
    if (static_cast<int>(keep.size()) != expected) {
        std::ostringstream msg;
        msg << "group " << w.q << " collected " << keep.size() << " states, expected " << expected;
        throw LabelingError(msg.str());
    }

    GroupStates g;
    g.q = w.q;
    g.window = w;
    g.index = h.index;
    const int ns = static_cast<int>(keep.size());
    g.energies.resize(ns);
    g.mathieu.resize(ns);
    g.mean_p.resize(ns);
    g.edge_weight.resize(ns);
    g.vectors.resize(dim, ns);
    g.s.resize(ns);
    g.exchange.resize(ns);
    for (int i = 0; i < ns; ++i) {
        int c = keep[i];
        g.energies(i) = ep.values(c);
        g.mathieu(i) = ep.values(c) - h.hbar_omega * w.q;
        g.vectors.col(i) = ep.vectors.col(c);
        // fix the overall sign: largest component positive
        Eigen::Index imax;
        g.vectors.col(i).cwiseAbs().maxCoeff(&imax);
        if (g.vectors(imax, i) < 0) g.vectors.col(i) *= -1.0;
        g.mean_p(i) = g.vectors.col(i).cwiseAbs2().dot(p_of);
        double e = 0;
        for (int a = 0; a < dim; ++a)
            if (edge[a]) e += g.vectors(a, i) * g.vectors(a, i);
        g.edge_weight(i) = e;
        g.s[i] = s_of_order(i);
        g.exchange[i] = ep.exchange[c];
    }
    return g;
}

const GroupStates& StationaryStates::group(int q) const {
    if (groups.empty() || q < q_min() || q > q_max())
        throw std::out_of_range("group " + std::to_string(q) + " outside the computed range");
    return groups[static_cast<size_t>(q - q_min())];
}

StationaryStates solve_resonance_spectrum(const OscillatorBasis& basis, double mu, const SpectrumOptions& opt) {
    if (opt.q_max < opt.q_min) throw std::invalid_argument("solve_resonance_spectrum: empty group range");
    StationaryStates st;
    st.hbar0 = basis.hbar0;
    st.mu = mu;
    st.n0 = opt.n0;
    st.omega = basis.local_frequency(opt.n0);
    st.hbar_omega = st.omega * basis.hbar0;
    st.e2 = basis.second_difference(opt.n0);
    int K = opt.K_w;
    if (K <= 0) {
        double x01 = basis.x(opt.n0, opt.n0 + 1);
        K = auto_half_width(2.0 * mu * x01 * x01, st.e2);
    }
    const int ng = opt.q_max - opt.q_min + 1;
    st.groups.resize(ng);
    parallel_for(ng, opt.threads, [&](int i) {
        ResonanceWindow w{opt.n0, K, opt.P_w, opt.q_min + i};
        st.groups[i] = diagonalize_and_label(build_reduced_hamiltonian(basis, mu, w));
    });
    return st;
}

QuantumPendulum quantum_pendulum(const OscillatorBasis& basis, const GroupStates& g, double mu, int n0) {
    QuantumPendulum qp;
    double x01 = basis.x(n0, n0 + 1);
    double e2 = basis.second_difference(n0);
    qp.V = 2.0 * mu * x01 * x01;
    qp.hbar_omega_t = std::sqrt(2.0 * qp.V * e2);
    // ground level of a pendulum sits at -V + hw~/2 - E''/16
    qp.separatrix = g.mathieu(0) + 2.0 * qp.V - 0.5 * qp.hbar_omega_t + e2 / 16.0;
    return qp;
}

std::string to_string(StateClass c) {
    switch (c) {
        case StateClass::below_separatrix: return "below_separatrix";
        case StateClass::separatrix_layer: return "separatrix_layer";
        case StateClass::above_separatrix: return "above_separatrix";
    }
    return "unknown";
}

StateClass classify_state(double mathieu_energy, const QuantumPendulum& qp, const LayerBand& band) {
    if (!band.valid())
        throw std::invalid_argument("classify_state: no layer width available; run the classical layer scan first");
    double scale = qp.V / band.V;
    double lo = qp.separatrix - band.w_inner * scale;
    double hi = qp.separatrix + band.w_outer * scale;
    if (mathieu_energy < lo) return StateClass::below_separatrix;
    if (mathieu_energy > hi) return StateClass::above_separatrix;
    return StateClass::separatrix_layer;
}

SeparatrixCount count_separatrix_states(const OscillatorBasis& basis, const GroupStates& g, double mu, int n0,
                                        const LayerBand& band) {
    SeparatrixCount out;
    out.q = g.q;
    if (mu == 0) {
        // no resonance: every state counts as outside a layer of zero width
        out.classes.assign(g.size(), StateClass::above_separatrix);
        return out;
    }
    QuantumPendulum qp = quantum_pendulum(basis, g, mu, n0);
    for (int i = 0; i < g.size(); ++i) {
        out.classes.push_back(classify_state(g.mathieu(i), qp, band));
        if (out.classes.back() == StateClass::separatrix_layer) ++out.M_s;
    }
    // near the separatrix each side holds (1 / (pi hw~)) ln(32 V / dE) levels per unit energy
    double scale = qp.V / band.V;
    for (double w : {band.w_inner * scale, band.w_outer * scale})
        if (w > 0) out.theory += w / (M_PI * qp.hbar_omega_t) * (std::log(32.0 * qp.V / w) + 1.0);
    return out;
}

Eigen::MatrixXd dipole_block(const OscillatorBasis& basis, const GroupStates& lower, const GroupStates& upper) {
    if (((upper.q - lower.q) % 2) == 0) throw std::invalid_argument("dipole_block: groups must differ by an odd number");
    const int n0 = lower.window.n0;
    if (upper.window.n0 != n0) throw std::invalid_argument("dipole_block: groups built around different n0");
    const int da = static_cast<int>(lower.index.size()), db = static_cast<int>(upper.index.size());
    // x acts on the first oscillator: <n,m|x|n',m'> = x_{n,n'} delta_{m,m'}
    std::map<int, std::vector<int>> by_m;
    for (int b = 0; b < db; ++b) by_m[upper.index[b].p - upper.index[b].k].push_back(b);
    Eigen::MatrixXd X = Eigen::MatrixXd::Zero(da, db);
    for (int a = 0; a < da; ++a) {
        int l = lower.index[a].p - lower.index[a].k;
        auto it = by_m.find(l);
        if (it == by_m.end()) continue;
        int n = n0 + lower.index[a].k;
        for (int b : it->second) X(a, b) = basis.x(n, n0 + upper.index[b].k);
    }
    return lower.vectors.transpose() * (X * upper.vectors);
}

DipoleBlocks dipole_blocks(const OscillatorBasis& basis, const StationaryStates& states, int threads) {
    DipoleBlocks out;
    out.q_min = states.q_min();
    int nb = static_cast<int>(states.groups.size()) - 1;
    if (nb < 1) return out;
    out.up.resize(nb);
    parallel_for(nb, threads, [&](int i) {
        out.up[i] = dipole_block(basis, states.groups[i], states.groups[i + 1]);
    });
    return out;
}

NonlinearityReport small_nonlinearity_check(const OscillatorBasis& basis, const ResonanceWindow& w, double threshold) {
    w.validate(basis);
    double hw = basis.local_frequency(w.n0) * basis.hbar0;
    double e2 = basis.second_difference(w.n0);
    NonlinearityReport r;
    r.threshold = threshold;
    r.worst_ratio = std::numeric_limits<double>::infinity();
    int bad_j2 = std::numeric_limits<int>::max();
    for (const auto& i : w.indices()) {
        if (i.p == 0) continue;
        double k = i.k, p = i.p;
        double rhs = std::abs(e2 * (k * k - k * p + 0.5 * p * p));
        double ratio = rhs > 0 ? hw * std::abs(p) / rhs : std::numeric_limits<double>::infinity();
        if (ratio < r.worst_ratio) {
            r.worst_ratio = ratio;
            r.worst_k = i.k;
            r.worst_p = i.p;
        }
        if (ratio < threshold) bad_j2 = std::min(bad_j2, std::abs(i.j2()));
    }
    r.warning = r.worst_ratio < threshold;
    r.valid_half_width = r.warning ? std::max(0, (bad_j2 - 1) / 2) : w.K_w;
    return r;
}

}  // namespace qad
