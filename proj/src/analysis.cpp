#include "qad/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace qad {

LineFit linear_fit(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw std::invalid_argument("linear_fit: x and y differ in length");
    const size_t n = x.size();
    if (n < 2) throw InsufficientData("linear_fit: need at least two points");
    double mx = 0, my = 0;
    for (size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0, sxy = 0, syy = 0;
    for (size_t i = 0; i < n; ++i) {
        double dx = x[i] - mx, dy = y[i] - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if (!(sxx > 0)) throw InsufficientData("linear_fit: all x values coincide");
    LineFit f;
    f.points = static_cast<int>(n);
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    f.correlation = syy > 0 ? sxy / std::sqrt(sxx * syy) : 0.0;
    if (n > 2) {
        double rss = std::max(0.0, syy - f.slope * sxy);
        double s2 = rss / static_cast<double>(n - 2);
        f.slope_err = std::sqrt(s2 / sxx);
        f.intercept_err = std::sqrt(s2 * (1.0 / n + mx * mx / sxx));
    }
    return f;
}

Moments packet_moments(const Eigen::VectorXd& W, int q_min) {
    double norm = W.sum();
    if (!(norm > 0)) throw std::invalid_argument("packet_moments: packet has zero norm");
    Moments m;
    for (Eigen::Index g = 0; g < W.size(); ++g) m.mean += (q_min + g) * W(g);
    m.mean /= norm;
    for (Eigen::Index g = 0; g < W.size(); ++g) {
        double d = q_min + g - m.mean;
        m.variance += d * d * W(g);
    }
    m.variance /= norm;
    return m;
}

Moments packet_moments(const Eigen::VectorXcd& C, const std::vector<int>& offset, const std::vector<int>& count,
                       int q_min) {
    return packet_moments(group_occupancy(offset, count, C), q_min);
}

MomentSeries moment_series(const PacketSeries& s, double hbar_omega) {
    MomentSeries m;
    m.N = s.N;
    m.mean_q = s.mean_q;
    m.variance_q = s.variance_q;
    for (double v : s.variance_q) m.energy_variance.push_back(hbar_omega * hbar_omega * v);
    return m;
}

std::vector<QeScatterRow> qe_scatter(const FloquetDecomposition& d, const FloquetModel& m,
                                     const std::vector<StateClass>* classes) {
    if (d.vectors.rows() != m.dim()) throw std::invalid_argument("qe_scatter: decomposition and model differ in size");
    if (classes && static_cast<int>(classes->size()) != m.dim())
        throw std::invalid_argument("qe_scatter: one class per model state expected");
    std::vector<QeScatterRow> rows;
    for (Eigen::Index Q = 0; Q < d.vectors.cols(); ++Q) {
        Eigen::VectorXcd a = d.vectors.col(Q);
        Moments mo = packet_moments(a, m.offset, m.count, m.q_min);
        QeScatterRow r;
        r.Q = static_cast<int>(Q);
        r.quasienergy = d.quasienergy(Q);
        r.mean_q = mo.mean;
        r.sigma_q = std::sqrt(std::max(0.0, mo.variance));
        Eigen::Index best;
        r.dominant_weight = a.cwiseAbs2().maxCoeff(&best);
        r.dominant_q = m.q_of[best];
        r.dominant_s = m.s_of[best];
        if (classes) r.state_class = to_string((*classes)[best]);
        rows.push_back(r);
    }
    return rows;
}

namespace {

struct Window {
    std::vector<double> x, y;
};

Window select(const MomentSeries& s, long lo, long hi) {
    Window w;
    for (size_t i = 0; i < s.N.size(); ++i)
        if (s.N[i] >= lo && s.N[i] <= hi) {
            w.x.push_back(static_cast<double>(s.N[i]));
            w.y.push_back(s.variance_q[i]);
        }
    return w;
}

}  // namespace

DiffusionFit fit_quantum_D(const MomentSeries& s, double hbar_omega, double period, const FitPolicy& p,
                           long cap_periods) {
    DiffusionFit f;
    f.N_min = p.N_min;
    f.N_max = cap_periods >= 0 ? std::min(p.N_max, cap_periods) : p.N_max;
    Window w = select(s, f.N_min, f.N_max);
    if (w.x.size() < 3) {
        std::ostringstream msg;
        msg << "fit_quantum_D: fewer than three samples in N in [" << f.N_min << ", " << f.N_max << "]";
        throw InsufficientData(msg.str());
    }
    f.line = linear_fit(w.x, w.y);
    f.correlation = f.line.correlation;
    f.diffusive = f.line.slope > 0 && f.correlation >= p.min_correlation;
    if (f.diffusive) {
        double scale = hbar_omega * hbar_omega / period;
        f.D = scale * f.line.slope;
        f.stderr_D = scale * f.line.slope_err;
    }
    return f;
}

double autocorrelation_period(const std::vector<double>& r) {
    const size_t n = r.size();
    if (n < 8) return 0;
    double mean = 0;
    for (double v : r) mean += v;
    mean /= n;
    std::vector<double> c(r.size());
    for (size_t i = 0; i < n; ++i) c[i] = r[i] - mean;
    double c0 = 0;
    for (double v : c) c0 += v * v;
    if (!(c0 > 0)) return 0;
    const size_t max_lag = n / 2;
    std::vector<double> ac(max_lag + 1, 0.0);
    for (size_t k = 0; k <= max_lag; ++k) {
        double acc = 0;
        for (size_t i = 0; i + k < n; ++i) acc += c[i] * c[i + k];
        ac[k] = acc / c0;
    }
    size_t k = 1;
    while (k <= max_lag && ac[k] >= 0) ++k;
    if (k > max_lag) return 0;
    size_t best = 0;
    double best_val = 0;
    for (; k < max_lag; ++k)
        if (ac[k] > best_val && ac[k] >= ac[k - 1] && ac[k] >= ac[k + 1]) {
            best_val = ac[k];
            best = k;
        }
    if (best == 0) return 0;
    // parabolic refinement
    double y0 = ac[best - 1], y1 = ac[best], y2 = ac[best + 1];
    double den = y0 - 2 * y1 + y2;
    double shift = den < 0 ? 0.5 * (y0 - y2) / den : 0.0;
    return static_cast<double>(best) + shift;
}

LocalizationReport detect_saturation(const MomentSeries& s, double period, const SaturationPolicy& p) {
    if (s.N.empty() || s.N.back() < p.min_periods) {
        std::ostringstream msg;
        msg << "detect_saturation: series reaches N=" << (s.N.empty() ? 0 : s.N.back()) << ", needs " << p.min_periods;
        throw InsufficientData(msg.str());
    }
    LocalizationReport r;
    const size_t n = s.N.size();
    Window init = select(s, p.initial.N_min, p.initial.N_max);
    bool growing = false;
    if (init.x.size() >= 3) {
        LineFit f = linear_fit(init.x, init.y);
        r.initial_slope = f.slope;
        growing = f.slope > 0 && f.correlation >= p.initial.min_correlation;
    }

    long t0 = 0;
    if (growing) {
        // prefix sums for O(1) windowed slopes
        std::vector<double> sx(n + 1, 0), sy(n + 1, 0), sxx(n + 1, 0), sxy(n + 1, 0);
        for (size_t i = 0; i < n; ++i) {
            double x = static_cast<double>(s.N[i]), y = s.variance_q[i];
            sx[i + 1] = sx[i] + x;
            sy[i + 1] = sy[i] + y;
            sxx[i + 1] = sxx[i] + x * x;
            sxy[i + 1] = sxy[i] + x * y;
        }
        const long end = s.N.back();
        // slope over samples with N in [N_i, N_i + window]
        std::vector<double> slope(n, 0.0);
        std::vector<char> ok(n, 0);
        size_t j = 0;
        for (size_t i = 0; i < n; ++i) {
            if (s.N[i] + p.slope_window > end) break;
            j = std::max(j, i);
            while (j + 1 < n && s.N[j + 1] <= s.N[i] + p.slope_window) ++j;
            double m = static_cast<double>(j - i + 1);
            if (m < 3) continue;
            double ax = sx[j + 1] - sx[i], ay = sy[j + 1] - sy[i];
            double axx = sxx[j + 1] - sxx[i], axy = sxy[j + 1] - sxy[i];
            double den = m * axx - ax * ax;
            if (!(den > 0)) continue;
            slope[i] = (m * axy - ax * ay) / den;
            ok[i] = 1;
        }
        const double limit = p.slope_fraction * r.initial_slope;
        bool found = false;
        for (size_t i = 0; i < n && !found; ++i) {
            if (!ok[i] || slope[i] >= limit) continue;
            if (s.N[i] + p.confirm_periods + p.slope_window > end) break;
            bool held = true;
            for (size_t k = i; k < n && s.N[k] <= s.N[i] + p.confirm_periods; ++k)
                if (!ok[k] || slope[k] >= limit) {
                    held = false;
                    break;
                }
            if (held) {
                found = true;
                t0 = s.N[i];
            }
        }
        r.saturated = found;
        if (!found) return r;
    } else {
        r.saturated = true;
    }
    r.t0_periods = t0;
    r.t0 = static_cast<double>(t0) * period;

    std::vector<double> plateau;
    std::vector<long> plateau_N;
    for (size_t i = 0; i < n; ++i)
        if (t0 == 0 || s.N[i] > 2 * t0) {
            plateau.push_back(s.variance_q[i]);
            plateau_N.push_back(s.N[i]);
        }
    if (plateau.empty())
        for (size_t i = 0; i < n; ++i)
            if (s.N[i] >= t0) {
                plateau.push_back(s.variance_q[i]);
                plateau_N.push_back(s.N[i]);
            }
    double sum = 0;
    for (double v : plateau) sum += v;
    r.mean_variance = sum / plateau.size();
    r.plateau_samples = static_cast<long>(plateau.size());
    if (plateau.size() >= 8) {
        double lag = autocorrelation_period(plateau);
        double spacing = static_cast<double>(plateau_N.back() - plateau_N.front()) / (plateau.size() - 1);
        r.oscillation_periods = lag * spacing;
        r.oscillation_time = r.oscillation_periods * period;
    }
    return r;
}

namespace {

TailFit fit_side(const Eigen::VectorXd& W, int peak, int dir, double hi, double lo, int min_points) {
    TailFit t;
    std::vector<double> d, y;
    for (int g = peak + dir; g >= 0 && g < W.size(); g += dir) {
        double w = W(g);
        if (w < lo) break;
        if (w > hi) continue;
        d.push_back(std::abs(g - peak));
        y.push_back(std::log(w));
    }
    t.points = static_cast<int>(d.size());
    if (t.points < std::max(2, min_points)) return t;
    LineFit f = linear_fit(d, y);
    if (f.slope < 0) {
        t.length = -1.0 / f.slope;
        t.correlation = std::abs(f.correlation);
    }
    return t;
}

}  // namespace

ProfileFit fit_profile(const Eigen::VectorXd& W, int q_min, double leakage_floor, const ProfilePolicy& p) {
    if (W.size() == 0) throw std::invalid_argument("fit_profile: empty profile");
    ProfileFit f;
    f.q_min = q_min;
    f.W = W;
    f.total = W.sum();
    Eigen::Index peak;
    double mx = W.maxCoeff(&peak);
    f.q_peak = q_min + static_cast<int>(peak);
    f.floor = std::max(leakage_floor, p.absolute_floor);
    double hi = p.core_fraction * mx, lo = p.floor_factor * f.floor;
    f.left = fit_side(W, static_cast<int>(peak), -1, hi, lo, p.min_points);
    f.right = fit_side(W, static_cast<int>(peak), +1, hi, lo, p.min_points);
    int sides = 0;
    f.correlation = 1.0;
    for (const TailFit* t : {&f.left, &f.right})
        if (t->length > 0) {
            f.l_s += t->length;
            f.correlation = std::min(f.correlation, t->correlation);
            ++sides;
        }
    if (sides > 0) {
        f.l_s /= sides;
        f.valid = true;
    } else {
        f.correlation = 0;
    }
    return f;
}

ProfileFit average_profile(const PacketSeries& s, long N_from, long N_to, const ProfilePolicy& p) {
    if (s.occupancy.size() != s.N.size())
        throw std::invalid_argument("average_profile: the series was recorded without group occupancies");
    Eigen::VectorXd W;
    long used = 0;
    for (size_t i = 0; i < s.N.size(); ++i) {
        if (s.N[i] < N_from || s.N[i] > N_to) continue;
        if (used == 0)
            W = s.occupancy[i];
        else
            W += s.occupancy[i];
        ++used;
    }
    if (used == 0) throw InsufficientData("average_profile: no samples in the averaging window");
    W /= static_cast<double>(used);
    double edge = std::max(W(0), W(W.size() - 1));
    return fit_profile(W, s.q_min, edge, p);
}

LineFit scaling_fit(const std::vector<double>& mu, const std::vector<double>& value) {
    if (mu.size() != value.size()) throw std::invalid_argument("scaling_fit: mu and value differ in length");
    if (mu.size() < 4) throw InsufficientData("scaling_fit: needs at least four mu points");
    std::vector<double> x, y;
    for (size_t i = 0; i < mu.size(); ++i) {
        if (!(mu[i] > 0) || !(value[i] > 0))
            throw std::invalid_argument("scaling_fit: mu and values must be positive");
        x.push_back(1.0 / std::sqrt(mu[i]));
        y.push_back(std::log(value[i]));
    }
    return linear_fit(x, y);
}

Comparison compare_classical_quantum(const std::vector<DPoint>& classical, const std::vector<DPoint>& quantum) {
    if (quantum.empty()) throw std::invalid_argument("compare_classical_quantum: no quantum diffusion coefficients");
    if (classical.empty()) throw std::invalid_argument("compare_classical_quantum: no classical diffusion coefficients");
    Comparison c;
    for (const auto& q : quantum) {
        auto it = std::find_if(classical.begin(), classical.end(),
                               [&](const DPoint& p) { return std::abs(p.mu - q.mu) <= 1e-9 * std::abs(q.mu); });
        if (it == classical.end()) continue;
        ComparisonRow r;
        r.mu = q.mu;
        r.inv_sqrt_mu = 1.0 / std::sqrt(q.mu);
        r.D_classical = it->D;
        r.err_classical = it->err;
        r.D_quantum = q.D;
        r.err_quantum = q.err;
        if (it->D != 0) {
            r.ratio = q.D / it->D;
            double a = q.D != 0 ? q.err / q.D : 0.0, b = it->err / it->D;
            r.ratio_err = std::abs(r.ratio) * std::sqrt(a * a + b * b);
        }
        r.weaker = q.D > 0 && q.D < it->D;
        c.rows.push_back(r);
    }
    if (c.rows.empty()) throw std::invalid_argument("compare_classical_quantum: the mu grids do not overlap");
    std::sort(c.rows.begin(), c.rows.end(), [](const auto& a, const auto& b) { return a.mu < b.mu; });
    c.all_weaker = std::all_of(c.rows.begin(), c.rows.end(), [](const auto& r) { return r.weaker; });
    std::vector<double> x, yc, yq, xq;
    for (const auto& r : c.rows) {
        if (r.D_classical > 0) {
            x.push_back(r.inv_sqrt_mu);
            yc.push_back(std::log(r.D_classical));
        }
        if (r.D_quantum > 0) {
            xq.push_back(r.inv_sqrt_mu);
            yq.push_back(std::log(r.D_quantum));
        }
    }
    if (x.size() >= 2) c.classical_log = linear_fit(x, yc);
    if (xq.size() >= 2) c.quantum_log = linear_fit(xq, yq);
    return c;
}

}  // namespace qad
