#include "qad/floquet.hpp"
#include "qad/parallel.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace qad {

std::pair<int, int> FloquetModel::span(int g_lo, int g_hi) const {
    int first = offset[g_lo];
    int last = offset[g_hi] + count[g_hi];
    return {first, last - first};
}

std::vector<int> kept_columns(const GroupStates& g, int s_band, double s_center) {
    std::vector<int> cols(g.size());
    std::iota(cols.begin(), cols.end(), 0);
    if (s_band <= 0 || s_band >= g.size()) return cols;
    std::stable_sort(cols.begin(), cols.end(), [&](int a, int b) {
        return std::abs(g.mathieu(a) - s_center) < std::abs(g.mathieu(b) - s_center);
    });
    cols.resize(s_band);
    std::sort(cols.begin(), cols.end());
    return cols;
}

FloquetModel make_floquet_model(const StationaryStates& states, const DipoleBlocks& blocks, const DriveParams& drive,
                                const FloquetOptions& opt) {
    drive.validate();
    if (opt.q_max < opt.q_min) throw std::invalid_argument("floquet window is empty");
    if (opt.q_min < states.q_min() || opt.q_max > states.q_max()) {
        std::ostringstream msg;
        msg << "floquet window q in [" << opt.q_min << ", " << opt.q_max << "] exceeds the stationary states ["
            << states.q_min() << ", " << states.q_max() << "]";
        throw std::invalid_argument(msg.str());
    }
    if (opt.q_max > opt.q_min && (blocks.q_min > opt.q_min || blocks.q_min + static_cast<int>(blocks.up.size()) < opt.q_max))
        throw std::invalid_argument("dipole blocks do not cover the floquet window");

    FloquetModel m;
    m.hbar0 = states.hbar0;
    m.period = drive.period;
    m.f0 = drive.f0;
    m.omega_frame = drive.omega_mid();
    m.frame_harmonics = drive.harmonic1 + drive.harmonic2;
    m.envelope_rate = 0.5 * std::abs(drive.delta_omega());
    m.time_offset = opt.time_offset;
    m.q_min = opt.q_min;
    const int G = opt.q_max - opt.q_min + 1;
    std::vector<std::vector<int>> keep(G);
    int total = 0;
    for (int g = 0; g < G; ++g) {
        const auto& gs = states.group(opt.q_min + g);
        keep[g] = kept_columns(gs, opt.s_band, opt.s_center);
        m.offset.push_back(total);
        m.count.push_back(static_cast<int>(keep[g].size()));
        total += m.count.back();
    }
    m.energy.resize(total);
    m.frame_energy.resize(total);
    for (int g = 0; g < G; ++g) {
        int q = opt.q_min + g;
        const auto& gs = states.group(q);
        for (int i = 0; i < m.count[g]; ++i) {
            int c = keep[g][i];
            int a = m.offset[g] + i;
            m.q_of.push_back(q);
            m.s_of.push_back(gs.s[c]);
            m.energy(a) = gs.energies(c);
            m.frame_energy(a) = gs.energies(c) - m.hbar0 * m.omega_frame * q;
        }
    }
    for (int g = 0; g + 1 < G; ++g) {
        const Eigen::MatrixXd& full = blocks.block(opt.q_min + g);
        Eigen::MatrixXd x(m.count[g], m.count[g + 1]);
        for (int i = 0; i < m.count[g]; ++i)
            for (int j = 0; j < m.count[g + 1]; ++j) x(i, j) = full(keep[g][i], keep[g + 1][j]);
        m.up.push_back(std::move(x));
    }
    return m;
}

namespace {

// R = X Z over groups [g_lo, g_hi], X real block-tridiagonal
Eigen::MatrixXcd apply_coupling(const FloquetModel& m, int g_lo, int g_hi, const Eigen::MatrixXcd& Z) {
    const int base = m.offset[g_lo];
    Eigen::MatrixXd Zr = Z.real(), Zi = Z.imag();
    Eigen::MatrixXd Rr = Eigen::MatrixXd::Zero(Z.rows(), Z.cols());
    Eigen::MatrixXd Ri = Eigen::MatrixXd::Zero(Z.rows(), Z.cols());
    for (int g = g_lo; g < g_hi; ++g) {
        const Eigen::MatrixXd& x = m.up[g];
        int a = m.offset[g] - base, na = m.count[g];
        int b = m.offset[g + 1] - base, nb = m.count[g + 1];
        Rr.middleRows(a, na).noalias() += x * Zr.middleRows(b, nb);
        Ri.middleRows(a, na).noalias() += x * Zi.middleRows(b, nb);
        Rr.middleRows(b, nb).noalias() += x.transpose() * Zr.middleRows(a, na);
        Ri.middleRows(b, nb).noalias() += x.transpose() * Zi.middleRows(a, na);
    }
    Eigen::MatrixXcd R(Z.rows(), Z.cols());
    R.real() = Rr;
    R.imag() = Ri;
    return R;
}

Eigen::VectorXcd phases(const Eigen::VectorXd& e, double t, double hbar0) {
    Eigen::VectorXcd p(e.size());
    for (Eigen::Index i = 0; i < e.size(); ++i) p(i) = std::polar(1.0, -e(i) * t / hbar0);
    return p;
}

// exp(-i E T / hbar0) with E = frame energy + hbar0 w_frame q, w_frame T = pi (h1 + h2)
Eigen::VectorXcd period_phases(const FloquetModel& m, int first, int n) {
    Eigen::VectorXcd p(n);
    for (int i = 0; i < n; ++i) {
        int a = first + i;
        double sign = ((static_cast<long>(m.q_of[a]) * m.frame_harmonics) % 2 == 0) ? 1.0 : -1.0;
        p(i) = sign * std::polar(1.0, -m.frame_energy(a) * m.period / m.hbar0);
    }
    return p;
}

Dop853Options checked(Dop853Options ode) {
    ode.dense_output = false;
    return ode;
}

}  // namespace

Eigen::MatrixXcd propagate_one_period(const FloquetModel& m, int g_lo, int g_hi, const Eigen::MatrixXcd& C0,
                                      const Dop853Options& ode, long* steps) {
    auto [first, n] = m.span(g_lo, g_hi);
    if (C0.rows() != n) throw std::invalid_argument("propagate_one_period: amplitude rows do not match the groups");
    const Eigen::VectorXd e = m.frame_energy.segment(first, n);
    const double half_dw = m.envelope_rate;
    const double scale = m.f0 / m.hbar0;
    Eigen::MatrixXcd bT;
    if (m.f0 == 0) {
        bT = C0;
    } else {
        auto rhs = [&](double t, const Eigen::MatrixXcd& b) -> Eigen::MatrixXcd {
            Eigen::VectorXcd p = phases(e, t, m.hbar0);
            Eigen::MatrixXcd Z = p.asDiagonal() * b;
            Eigen::MatrixXcd R = apply_coupling(m, g_lo, g_hi, Z);
            cplx g = cplx(0.0, scale * std::cos(half_dw * (t + m.time_offset)));
            return g * (p.conjugate().asDiagonal() * R);
        };
        Dop853Options o = checked(ode);
        Dop853<Eigen::MatrixXcd> solver(rhs, 0.0, C0, o);
        try {
            solver.advance(m.period);
        } catch (const IntegrationError& err) {
            std::ostringstream msg;
            msg << "one-period propagation failed at t=" << solver.time() << ": " << err.what();
            throw IntegrationError(msg.str());
        }
        if (steps) *steps += solver.accepted();
        bT = solver.state();
    }
    return period_phases(m, first, n).asDiagonal() * bT;
}

Eigen::MatrixXcd propagate_full_period(const FloquetModel& m, const std::vector<FullCoupling>& extra,
                                       const Eigen::MatrixXcd& C0, const Dop853Options& ode,
                                       const DriveParams& drive) {
    const int n = m.dim();
    if (C0.rows() != n) throw std::invalid_argument("propagate_full_period: amplitude rows do not match the model");
    // lab-frame energies: frame energy + hbar0 w_frame q
    Eigen::VectorXd E(n);
    for (int a = 0; a < n; ++a) E(a) = m.frame_energy(a) + m.hbar0 * m.omega_frame * m.q_of[a];
    Eigen::MatrixXd X = Eigen::MatrixXd::Zero(n, n);
    for (int g = 0; g + 1 < m.groups(); ++g)
        X.block(m.offset[g], m.offset[g + 1], m.count[g], m.count[g + 1]) = m.up[g];
    for (const auto& c : extra) {
        if (c.x.rows() != m.count[c.g_from] || c.x.cols() != m.count[c.g_to])
            throw std::invalid_argument("propagate_full_period: coupling block has the wrong shape");
        X.block(m.offset[c.g_from], m.offset[c.g_to], c.x.rows(), c.x.cols()) = c.x;
    }
    X = X.selfadjointView<Eigen::Upper>();
    const double inv = 1.0 / m.hbar0;
    auto rhs = [&](double t, const Eigen::MatrixXcd& c) -> Eigen::MatrixXcd {
        Eigen::VectorXcd p = phases(E, t, m.hbar0);
        Eigen::MatrixXcd Z = p.asDiagonal() * c;
        Eigen::MatrixXcd R(Z.rows(), Z.cols());
        R.real() = X * Z.real();
        R.imag() = X * Z.imag();
        return cplx(0.0, drive.force(t) * inv) * (p.conjugate().asDiagonal() * R);
    };
    Dop853<Eigen::MatrixXcd> solver(rhs, 0.0, C0, checked(ode));
    solver.advance(m.period);
    Eigen::VectorXcd pT(n);
    for (int a = 0; a < n; ++a) {
        double sign = ((static_cast<long>(m.q_of[a]) * m.frame_harmonics) % 2 == 0) ? 1.0 : -1.0;
        pT(a) = sign * std::polar(1.0, -m.frame_energy(a) * m.period / m.hbar0);
    }
    return pT.asDiagonal() * solver.state();
}

Eigen::VectorXcd BandedPropagator::apply(const Eigen::VectorXcd& c) const {
    Eigen::VectorXcd out = Eigen::VectorXcd::Zero(c.size());
    for (int g = 0; g < groups; ++g) {
        auto cg = c.segment(offset[g], count[g]);
        if (cg.squaredNorm() == 0) continue;
        for (int d = -bandwidth; d <= bandwidth; ++d) {
            int h = g + d;
            if (h < 0 || h >= groups) continue;
            out.segment(offset[h], count[h]).noalias() += block(g, d) * cg;
        }
    }
    return out;
}

Eigen::MatrixXcd BandedPropagator::dense() const {
    Eigen::MatrixXcd U = Eigen::MatrixXcd::Zero(dim(), dim());
    for (int g = 0; g < groups; ++g)
        for (int d = -bandwidth; d <= bandwidth; ++d) {
            int h = g + d;
            if (h < 0 || h >= groups) continue;
            U.block(offset[h], offset[g], count[h], count[g]) = block(g, d);
        }
    return U;
}

namespace {

Dop853Options ode_options(const FloquetOptions& opt) {
    Dop853Options ode;
    ode.rtol = opt.rtol;
    ode.atol = opt.atol;
    if (opt.fixed_step) {
        ode.fixed_step = true;
        ode.initial_step = opt.fixed_dt;
    }
    return ode;
}

}  // namespace

BandwidthProbe choose_bandwidth(const FloquetModel& m, const FloquetOptions& opt) {
    BandwidthProbe probe;
    const int G = m.groups();
    const int gc = G / 2;
    const int reach = std::min({opt.max_bandwidth + 1, gc, G - 1 - gc});
    if (reach < 1 || m.f0 == 0) {
        probe.bandwidth = std::max(1, std::min(opt.max_bandwidth, G - 1));
        return probe;
    }
    int lo = gc - reach, hi = gc + reach;
    auto [first, n] = m.span(lo, hi);
    Eigen::MatrixXcd C0 = Eigen::MatrixXcd::Zero(n, m.count[gc]);
    C0.middleRows(m.offset[gc] - first, m.count[gc]).setIdentity();
    Eigen::MatrixXcd CT = propagate_one_period(m, lo, hi, C0, ode_options(opt));
    probe.occupancy_by_distance.assign(reach + 1, 0.0);
    for (int g = lo; g <= hi; ++g) {
        int d = std::abs(g - gc);
        auto rows = CT.middleRows(m.offset[g] - first, m.count[g]);
        for (int c = 0; c < CT.cols(); ++c)
            probe.occupancy_by_distance[d] = std::max(probe.occupancy_by_distance[d], rows.col(c).squaredNorm());
    }
    probe.bandwidth = reach;
    probe.capped = true;
    for (int d = 1; d <= reach; ++d) {
        if (probe.occupancy_by_distance[d] < opt.band_tolerance) {
            probe.bandwidth = std::max(1, d - 1);
            probe.capped = false;
            break;
        }
    }
    probe.bandwidth = std::min(probe.bandwidth, opt.max_bandwidth);
    return probe;
}

BandedPropagator build_evolution_matrix(const FloquetModel& m, const FloquetOptions& opt) {
    if (opt.bandwidth < 0) throw std::invalid_argument("floquet bandwidth must be non-negative");
    BandedPropagator U;
    U.q_min = m.q_min;
    U.groups = m.groups();
    int band = opt.bandwidth > 0 ? opt.bandwidth : choose_bandwidth(m, opt).bandwidth;
    U.bandwidth = std::min(band, std::max(1, U.groups - 1));
    U.offset = m.offset;
    U.count = m.count;
    U.blocks.resize(static_cast<size_t>(U.groups) * (2 * U.bandwidth + 1));
    Dop853Options ode = ode_options(opt);
    std::vector<long> steps(U.groups, 0);
    parallel_for(U.groups, opt.threads, [&](int g0) {
        int lo = std::max(0, g0 - U.bandwidth), hi = std::min(U.groups - 1, g0 + U.bandwidth);
        auto [first, n] = m.span(lo, hi);
        Eigen::MatrixXcd C0 = Eigen::MatrixXcd::Zero(n, m.count[g0]);
        C0.middleRows(m.offset[g0] - first, m.count[g0]).setIdentity();
        Eigen::MatrixXcd CT = propagate_one_period(m, lo, hi, C0, ode, &steps[g0]);
        for (int h = lo; h <= hi; ++h) U.block(g0, h - g0) = CT.middleRows(m.offset[h] - first, m.count[h]);
    });
    for (long s : steps) U.ode_steps += s;
    return U;
}

UnitarityReport unitarity_defect(const BandedPropagator& U) {
    UnitarityReport r;
    const int B = U.bandwidth, G = U.groups;
    auto interior = [&](int g) { return g - B >= 0 && g + B <= G - 1; };
    for (int g0 = 0; g0 < G; ++g0) {
        for (int g1 = std::max(0, g0 - 2 * B); g1 <= std::min(G - 1, g0 + 2 * B); ++g1) {
            Eigen::MatrixXcd S = Eigen::MatrixXcd::Zero(U.count[g0], U.count[g1]);
            for (int h = 0; h < G; ++h) {
                int d0 = h - g0, d1 = h - g1;
                if (std::abs(d0) > B || std::abs(d1) > B) continue;
                S.noalias() += U.block(g0, d0).adjoint() * U.block(g1, d1);
            }
            if (g0 == g1) {
                for (int i = 0; i < S.rows(); ++i)
                    r.worst_column_norm_error = std::max(r.worst_column_norm_error, std::abs(std::sqrt(std::abs(S(i, i))) - 1.0));
                S -= Eigen::MatrixXcd::Identity(S.rows(), S.cols());
            }
            double d = S.size() ? S.cwiseAbs().maxCoeff() : 0.0;
            if (interior(g0) && interior(g1))
                r.interior_defect = std::max(r.interior_defect, d);
            else
                r.boundary_defect = std::max(r.boundary_defect, d);
        }
    }
    return r;
}

double fold_quasienergy(double e, double hbar0, double period) {
    double zone = 2.0 * M_PI * hbar0 / period;
    double f = e - zone * std::floor(e / zone + 0.5);
    if (f <= -0.5 * zone) f += zone;
    return f;
}

FloquetDecomposition eigendecompose(const Eigen::MatrixXcd& U, double hbar0, double period) {
    FloquetDecomposition d;
    d.hbar0 = hbar0;
    d.period = period;
    d.U = U;
    Eigen::ComplexSchur<Eigen::MatrixXcd> schur(U);
    if (schur.info() != Eigen::Success) throw std::runtime_error("eigendecompose: Schur factorization failed");
    const Eigen::MatrixXcd& T = schur.matrixT();
    const Eigen::Index n = U.rows();
    d.eigenvalue = T.diagonal();
    d.vectors = schur.matrixU();
    d.quasienergy.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double mod = std::abs(d.eigenvalue(i));
        if (mod < 1.0 - 1e-3 || mod > 1.0 + 1e-3) {
            std::ostringstream msg;
            msg << "eigendecompose: eigenvalue " << i << " has modulus " << mod;
            throw NonUnitarityError(msg.str());
        }
        d.quasienergy(i) = fold_quasienergy(-hbar0 / period * std::arg(d.eigenvalue(i)), hbar0, period);
        for (Eigen::Index j = i + 1; j < n; ++j) d.schur_offdiag = std::max(d.schur_offdiag, std::abs(T(i, j)));
    }
    return d;
}

Eigen::VectorXd group_occupancy(const std::vector<int>& offset, const std::vector<int>& count, const Eigen::VectorXcd& c) {
    Eigen::VectorXd w(offset.size());
    for (size_t g = 0; g < offset.size(); ++g) w(g) = c.segment(offset[g], count[g]).squaredNorm();
    return w;
}

namespace {

void record(PacketSeries& s, const std::vector<int>& offset, const std::vector<int>& count, const Eigen::VectorXcd& c,
            long N, const SeriesOptions& opt) {
    Eigen::VectorXd w = group_occupancy(offset, count, c);
    double norm = w.sum();
    double mean = 0, var = 0;
    for (Eigen::Index g = 0; g < w.size(); ++g) mean += (s.q_min + g) * w(g);
    mean /= norm;
    for (Eigen::Index g = 0; g < w.size(); ++g) var += (s.q_min + g - mean) * (s.q_min + g - mean) * w(g);
    var /= norm;
    double edge = w(0) + (w.size() > 1 ? w(w.size() - 1) : 0.0);
    s.N.push_back(N);
    s.mean_q.push_back(mean);
    s.variance_q.push_back(var);
    s.norm.push_back(norm);
    s.edge_occupancy.push_back(edge);
    if (opt.record_occupancy) s.occupancy.push_back(w);
}

}  // namespace

PacketSeries propagate_N(const BandedPropagator& U, const Eigen::VectorXcd& C0, long N, const SeriesOptions& opt) {
    if (N < 1) throw std::invalid_argument("propagate_N: N must be >= 1");
    if (C0.size() != U.dim()) throw std::invalid_argument("propagate_N: initial state has the wrong size");
    PacketSeries s;
    s.q_min = U.q_min;
    Eigen::VectorXcd c = C0;
    long stride = std::max(1L, opt.stride);
    record(s, U.offset, U.count, c, 0, opt);
    for (long k = 1; k <= N; ++k) {
        c = U.apply(c);
        if (k % stride == 0 || k == N) {
            record(s, U.offset, U.count, c, k, opt);
            if (k < N && s.edge_occupancy.back() > opt.leakage_threshold) s.leakage_flag = true;
        }
    }
    s.final_state = c;
    return s;
}

PacketSeries propagate_N(const FloquetDecomposition& d, const std::vector<int>& offset, const std::vector<int>& count,
                         int q_min, const Eigen::VectorXcd& C0, long N, const SeriesOptions& opt) {
    if (N < 1) throw std::invalid_argument("propagate_N: N must be >= 1");
    if (C0.size() != d.vectors.rows()) throw std::invalid_argument("propagate_N: initial state has the wrong size");
    PacketSeries s;
    s.q_min = q_min;
    const Eigen::VectorXcd a = d.vectors.adjoint() * C0;
    long stride = std::max(1L, opt.stride);
    Eigen::VectorXcd c = C0;
    record(s, offset, count, c, 0, opt);
    for (long k = 1; k <= N; ++k) {
        if (k % stride != 0 && k != N) continue;
        Eigen::VectorXcd ph(a.size());
        for (Eigen::Index i = 0; i < a.size(); ++i)
            ph(i) = a(i) * std::polar(1.0, -d.quasienergy(i) * static_cast<double>(k) * d.period / d.hbar0);
        c = d.vectors * ph;
        record(s, offset, count, c, k, opt);
        if (k < N && s.edge_occupancy.back() > opt.leakage_threshold) s.leakage_flag = true;
    }
    s.final_state = c;
    return s;
}

Eigen::VectorXcd basis_state(const FloquetModel& m, int q, int s) {
    for (int a = 0; a < m.dim(); ++a)
        if (m.q_of[a] == q && m.s_of[a] == s) {
            Eigen::VectorXcd c = Eigen::VectorXcd::Zero(m.dim());
            c(a) = 1.0;
            return c;
        }
    throw std::out_of_range("basis_state: (q=" + std::to_string(q) + ", s=" + std::to_string(s) + ") not in the model");
}

}  // namespace qad
