#include "qad/classical.hpp"

#include "qad/ode.hpp"
#include "qad/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace qad {

namespace {

constexpr double k_two_pi = 2.0 * std::numbers::pi;

using Vec5 = Eigen::Matrix<double, 5, 1>;

struct Coefficients {
    double A;
    double amp;  // (4A)^{1/4}
};

const Coefficients& coefficients() {
    static const Coefficients c = [] {
        QuarticConstants q = classical_constants();
        return Coefficients{q.A, std::pow(4.0 * q.A, 0.25)};
    }();
    return c;
}

// Returns false for states outside I2 > |I1|.
bool evaluate(double I1, double th1, double I2, double th2, const DriveParams& p, double t, HamiltonianEval& out) {
    double ix = I2 + I1, iy = I2 - I1;
    if (!(ix > 0.0) || !(iy > 0.0)) return false;
    const Coefficients& c = coefficients();
    double cx3 = std::cbrt(ix), cy3 = std::cbrt(iy);
    double ax = c.amp * cx3, ay = c.amp * cy3;
    // a'(I) = a / (3 I), w(I) = 4A/3 I^{1/3}
    double dax = ax / (3.0 * ix), day = ay / (3.0 * iy);
    double wx = 4.0 * c.A / 3.0 * cx3, wy = 4.0 * c.A / 3.0 * cy3;
    double Tx = 0.5 * (th1 + th2), Ty = 0.5 * (th2 - th1);
    double cx = std::cos(Tx), sx = std::sin(Tx), cy = std::cos(Ty), sy = std::sin(Ty);
    double f = p.force(t);
    double mu = p.mu;

    out.H = c.A * (ix * cx3 + iy * cy3) - mu * ax * ay * cx * cy - ax * cx * f;
    double h_ix = wx - mu * dax * ay * cx * cy - dax * cx * f;
    double h_iy = wy - mu * ax * day * cx * cy;
    double h_tx = mu * ax * ay * sx * cy + ax * sx * f;
    double h_ty = mu * ax * ay * cx * sy;
    out.dtheta1 = h_ix - h_iy;
    out.dtheta2 = h_ix + h_iy;
    out.dI1 = -0.5 * (h_tx - h_ty);
    out.dI2 = -0.5 * (h_tx + h_ty);
    return true;
}

Vec5 rhs(double t, const Vec5& y, const DriveParams& p) {
    HamiltonianEval e;
    Vec5 d;
    if (!evaluate(y[0], y[1], y[2], y[3], p, t, e)) {
        d.setConstant(std::numeric_limits<double>::quiet_NaN());
        return d;
    }
    d << e.dI1, e.dtheta1, e.dI2, e.dtheta2, e.H;
    return d;
}

ClassicalState to_state(const Vec5& y, double t, bool wrap) {
    ClassicalState s;
    s.I1 = y[0];
    s.theta1 = wrap ? wrap_angle(y[1]) : y[1];
    s.I2 = y[2];
    s.theta2 = wrap ? wrap_angle(y[3]) : y[3];
    s.t = t;
    return s;
}

// root of component `idx` of the dense output minus `target`, bracketed by the last step
template <class Solver>
double locate(const Solver& ode, int idx, double target) {
    double a = ode.previous_time(), b = ode.time();
    double fa = ode.previous_state()[idx] - target, fb = ode.state()[idx] - target;
    if (fa == 0) return a;
    if (fb == 0) return b;
    int side = 0;
    // Illinois variant of regula falsi
    for (int it = 0; it < 60; ++it) {
        double c = (a * fb - b * fa) / (fb - fa);
        double fc = ode.dense(c)[idx] - target;
        if (fc == 0 || std::abs(b - a) < 1e-13 * std::max(1.0, std::abs(b))) return c;
        if ((fc > 0) == (fb > 0)) {
            b = c;
            fb = fc;
            if (side == -1) fa *= 0.5;
            side = -1;
        } else {
            a = c;
            fa = fc;
            if (side == 1) fb *= 0.5;
            side = 1;
        }
        if (std::abs(fc) < 1e-15 * std::max(1.0, std::abs(target))) return c;
    }
    return 0.5 * (a + b);
}

}  // namespace

double DriveParams::omega1() const { return k_two_pi * harmonic1 / period; }
double DriveParams::omega2() const { return k_two_pi * harmonic2 / period; }
double DriveParams::delta_omega() const { return std::abs(omega1() - omega2()); }
double DriveParams::omega_mid() const { return 0.5 * (omega1() + omega2()); }
double DriveParams::force(double t) const { return f0 * (std::cos(omega1() * t) + std::cos(omega2() * t)); }

void DriveParams::validate() const {
    if (!(f0 >= 0)) throw std::invalid_argument("drive: f0 must be >= 0");
    if (!(mu >= 0)) throw std::invalid_argument("drive: mu must be >= 0");
    if (!(period > 0)) throw std::invalid_argument("drive: period must be positive");
    if (harmonic1 <= 0 || harmonic2 <= 0 || harmonic1 == harmonic2)
        throw std::invalid_argument("drive: harmonics must be distinct positive integers");
}

DriveParams DriveParams::from_frequencies(double f0, double mu, double omega1, double omega2, double period,
                                          double tolerance) {
    DriveParams p;
    p.f0 = f0;
    p.mu = mu;
    p.period = period;
    double h1 = omega1 * period / k_two_pi, h2 = omega2 * period / k_two_pi;
    p.harmonic1 = static_cast<int>(std::lround(h1));
    p.harmonic2 = static_cast<int>(std::lround(h2));
    if (p.harmonic1 <= 0 || std::abs(h1 / p.harmonic1 - 1.0) > tolerance || p.harmonic2 <= 0 ||
        std::abs(h2 / p.harmonic2 - 1.0) > tolerance) {
        std::ostringstream msg;
        msg << "drive: frequencies " << omega1 << ", " << omega2 << " are not commensurate with period "
            << period;
        throw std::invalid_argument(msg.str());
    }
    p.validate();
    return p;
}

HamiltonianEval hamiltonian_and_derivatives(const ClassicalState& s, const DriveParams& p, double t) {
    HamiltonianEval e;
    if (!evaluate(s.I1, s.theta1, s.I2, s.theta2, p, t, e))
        throw std::domain_error("hamiltonian: need I2 > |I1| (both oscillator actions positive)");
    return e;
}

double default_I2(const DriveParams& p) {
    double w = p.omega_mid();
    double b = classical_constants().beta;
    return w * w * w / (3.0 * b * b * b * b);
}

double wrap_angle(double a) {
    double r = std::remainder(a, k_two_pi);
    if (r <= -std::numbers::pi) r += k_two_pi;
    return r;
}

std::vector<double> Trajectory::block_means(long periods_per_block) const {
    std::vector<double> out;
    if (periods_per_block <= 0) return out;
    long blocks = periods() / periods_per_block;
    out.reserve(blocks);
    for (long b = 0; b < blocks; ++b) {
        double s = 0;
        for (long k = 0; k < periods_per_block; ++k) s += period_means[b * periods_per_block + k];
        out.push_back(s / periods_per_block);
    }
    return out;
}

Trajectory integrate(const ClassicalState& s0, const DriveParams& p, double t_end, const StepPolicy& policy) {
    p.validate();
    HamiltonianEval e0;
    if (!evaluate(s0.I1, s0.theta1, s0.I2, s0.theta2, p, s0.t, e0))
        throw std::domain_error("integrate: initial state needs I2 > |I1|");
    double T = p.period;
    double k0 = s0.t / T, k1 = t_end / T;
    if (std::abs(k0 - std::round(k0)) > 1e-9 || std::abs(k1 - std::round(k1)) > 1e-9)
        throw std::invalid_argument("integrate: start and end times must be multiples of the period");
    long first = std::lround(k0), last = std::lround(k1);
    if (last < first) throw std::invalid_argument("integrate: t_end before start");
    if (policy.samples_per_period < 1) throw std::invalid_argument("integrate: samples_per_period >= 1");

    Dop853Options opt;
    opt.rtol = policy.rtol;
    opt.atol = policy.atol;
    opt.fixed_step = policy.fixed_step;
    if (policy.fixed_step) opt.initial_step = policy.fixed_dt;
    opt.max_steps = policy.max_steps;
    opt.dense_output = policy.record_section || policy.record_theta1_crossings;

    Vec5 y0;
    y0 << s0.I1, s0.theta1, s0.I2, s0.theta2, 0.0;
    Dop853<Vec5> ode([&p](double t, const Vec5& y) { return rhs(t, y, p); }, first * T, y0, opt);

    Trajectory tr;
    tr.period = T;
    tr.t0 = first * T;
    long n_periods = last - first;
    tr.period_means.reserve(n_periods);
    auto sample = [&](const Vec5& y, double t) {
        if (!policy.keep_samples) return;
        HamiltonianEval e;
        evaluate(y[0], y[1], y[2], y[3], p, t, e);
        tr.times.push_back(t);
        tr.states.push_back(to_state(y, t, true));
        tr.energy.push_back(e.H);
    };
    sample(y0, first * T);

    auto observe = [&](const Dop853<Vec5>& s) {
        const Vec5& a = s.previous_state();
        const Vec5& b = s.state();
        if (policy.record_section) {
            double ka = std::floor(a[3] / k_two_pi), kb = std::floor(b[3] / k_two_pi);
            if (kb > ka) {
                double target = kb * k_two_pi;
                double tc = locate(s, 3, target);
                Vec5 yc = s.dense(tc);
                tr.section.push_back({tc, yc[0], wrap_angle(yc[1]), yc[2]});
            }
        }
        if (policy.record_theta1_crossings) {
            double ka = std::floor(a[1] / k_two_pi), kb = std::floor(b[1] / k_two_pi);
            if (ka != kb) tr.theta1_crossings.push_back(locate(s, 1, std::max(ka, kb) * k_two_pi));
        }
    };

    double q_prev = 0.0;
    try {
        for (long k = 0; k < n_periods; ++k) {
            double base = (first + k) * T;
            for (int j = 1; j <= policy.samples_per_period; ++j) {
                double ts = j == policy.samples_per_period ? base + T : base + T * j / policy.samples_per_period;
                ode.advance(ts, observe);
                sample(ode.state(), ts);
            }
            double q = ode.state()[4];
            tr.period_means.push_back((q - q_prev) / T);
            q_prev = q;
        }
    } catch (const IntegrationError& err) {
        ClassicalState at = to_state(ode.state(), ode.time(), false);
        std::ostringstream msg;
        msg << "classical integration failed: " << err.what() << " (I1=" << at.I1 << ", I2=" << at.I2
            << ", theta1=" << at.theta1 << ", theta2=" << at.theta2 << ")";
        throw ClassicalIntegrationError(msg.str(), at);
    }
    tr.final_state = to_state(ode.state(), ode.time(), false);
    tr.accepted_steps = ode.accepted();
    tr.rejected_steps = ode.rejected();
    return tr;
}

std::vector<SectionSlice> poincare_section(const Trajectory& tr, const std::vector<double>& I2_bins,
                                           double max_distance) {
    std::vector<SectionSlice> out;
    for (double c : I2_bins) out.push_back({c, {}});
    if (I2_bins.empty()) return out;
    for (const SectionPoint& pt : tr.section) {
        size_t best = 0;
        double dist = std::numeric_limits<double>::infinity();
        for (size_t i = 0; i < I2_bins.size(); ++i) {
            double d = std::abs(pt.I2 - I2_bins[i]);
            if (d < dist) {
                dist = d;
                best = i;
            }
        }
        if (max_distance < 0 || dist <= max_distance) out[best].points.push_back(pt);
    }
    return out;
}

ResonanceWidths resonance_widths(const DriveParams& p, double a) {
    if (!(p.mu > 0)) throw std::invalid_argument("resonance_widths: mu must be positive");
    if (!(a > 0)) throw std::invalid_argument("resonance_widths: amplitude must be positive");
    double beta = classical_constants().beta;
    ResonanceWidths w;
    w.omega_tilde = beta * std::sqrt(p.mu);
    w.delta_omega = beta * std::sqrt(2.0 * p.mu);
    w.delta_omega_drive = beta * std::sqrt(2.0 * p.f0 / a);
    w.lambda = p.delta_omega() / (2.0 * w.omega_tilde);
    return w;
}

OverlapCheck check_overlap(const DriveParams& p, double a) {
    if (!(a > 0)) throw std::invalid_argument("check_overlap: amplitude must be positive");
    double beta = classical_constants().beta;
    OverlapCheck c;
    c.margin = p.delta_omega() / (2.0 * beta) - (std::sqrt(2.0 * p.f0 / a) + std::sqrt(p.mu));
    c.overlapped = c.margin <= 0;
    return c;
}

DiffusionEstimate measure_diffusion(const std::vector<double>& period_means, double period, int n) {
    if (n < 0 || n > 9) throw std::invalid_argument("measure_diffusion: block exponent out of range");
    long len = 1;
    for (int i = 0; i < n; ++i) len *= 10;
    long blocks = static_cast<long>(period_means.size()) / len;
    if (blocks < 5) {
        std::ostringstream msg;
        msg << "measure_diffusion: " << blocks << " blocks of 10^" << n << " periods, need at least 5";
        throw InsufficientData(msg.str());
    }
    std::vector<double> means(blocks);
    for (long b = 0; b < blocks; ++b) {
        double s = 0;
        for (long k = 0; k < len; ++k) s += period_means[b * len + k];
        means[b] = s / len;
    }
    double span = len * period;
    std::vector<double> sq(blocks - 1);
    for (long b = 0; b + 1 < blocks; ++b) {
        double d = means[b + 1] - means[b];
        sq[b] = d * d / span;
    }
    double m = 0;
    for (double v : sq) m += v;
    m /= sq.size();
    double var = 0, cov = 0;
    for (size_t i = 0; i < sq.size(); ++i) {
        var += (sq[i] - m) * (sq[i] - m);
        if (i + 1 < sq.size()) cov += (sq[i] - m) * (sq[i + 1] - m);
    }
    size_t cnt = sq.size();
    double rho = var > 0 ? cov / var : 0.0;
    var = cnt > 1 ? var / (cnt - 1) : 0.0;
    // neighbouring differences share a block
    double inflate = 1.0 + 2.0 * std::max(0.0, rho);
    DiffusionEstimate d;
    d.exponent = n;
    d.blocks = blocks;
    d.raw = m;
    // adjacent block means of a random walk with variance rate D differ by (2/3) D L in variance
    d.D = 1.5 * m;
    d.stderr_D = 1.5 * std::sqrt(var * inflate / cnt);
    return d;
}

DiffusionEstimate measure_diffusion(const Trajectory& tr, int n) {
    return measure_diffusion(tr.period_means, tr.period, n);
}

TheoreticalDiffusion theoretical_diffusion(const DriveParams& p, double a, double nu, double T_a) {
    if (!(T_a > 0)) throw std::invalid_argument("theoretical_diffusion: T_a must be positive");
    ResonanceWidths w = resonance_widths(p, a);
    TheoreticalDiffusion d;
    double lam = w.lambda;
    d.w_s = 4.0 * std::numbers::pi * nu * lam * lam * std::exp(-std::numbers::pi * lam / 2.0);
    d.D_I = a * p.f0 / (T_a * w.omega_tilde) * d.w_s * d.w_s / (lam * lam * lam * lam);
    return d;
}

double separatrix_period(const Trajectory& tr) {
    const auto& c = tr.theta1_crossings;
    if (c.size() < 2) throw InsufficientData("separatrix_period: fewer than two theta1 crossings");
    return (c.back() - c.front()) / static_cast<double>(c.size() - 1);
}

std::string to_string(Verdict v) { return v == Verdict::diffusive ? "diffusive" : "non-diffusive"; }

Verdict diffusion_verdict(const DiffusionEstimate& d2, const DiffusionEstimate& d3) {
    if (!(d3.D > 0)) return Verdict::non_diffusive;
    double r = d2.D / d3.D;
    return (r >= 0.5 && r <= 2.0) ? Verdict::diffusive : Verdict::non_diffusive;
}

namespace {

struct RunResult {
    DiffusionEstimate d2, d3;
    double T_a = 0;
};

RunResult diffusion_run(const ClassicalState& s0, const DriveParams& p, const ScanOptions& opt) {
    StepPolicy step = opt.step;
    step.keep_samples = false;
    step.record_theta1_crossings = true;
    long total = std::max(opt.periods_d2, opt.periods_d3);
    Trajectory tr = integrate(s0, p, s0.t + total * p.period, step);
    RunResult r;
    std::vector<double> head(tr.period_means.begin(), tr.period_means.begin() + opt.periods_d2);
    std::vector<double> all(tr.period_means.begin(), tr.period_means.begin() + opt.periods_d3);
    r.d2 = measure_diffusion(head, p.period, 2);
    r.d3 = measure_diffusion(all, p.period, 3);
    if (tr.theta1_crossings.size() >= 2) r.T_a = separatrix_period(tr);
    return r;
}

}  // namespace

std::vector<PhaseScanRow> scan_initial_phase(const DriveParams& p, const std::vector<double>& theta1_grid,
                                             const ScanOptions& opt) {
    for (double th : theta1_grid)
        if (!(th > -std::numbers::pi - 1e-12 && th <= std::numbers::pi))
            throw std::invalid_argument("scan_initial_phase: theta1 outside (-pi, pi]");
    std::vector<PhaseScanRow> rows(theta1_grid.size());
    double I2 = default_I2(p);
    parallel_for(static_cast<int>(theta1_grid.size()), opt.threads, [&](int i) {
        ClassicalState s0;
        s0.theta1 = theta1_grid[i];
        s0.I2 = I2;
        RunResult r = diffusion_run(s0, p, opt);
        rows[i].theta1 = theta1_grid[i];
        rows[i].d2 = r.d2;
        rows[i].d3 = r.d3;
        rows[i].T_a = r.T_a;
        rows[i].verdict = diffusion_verdict(r.d2, r.d3);
    });
    return rows;
}

double pendulum_B(double I2) { return 8.0 / 9.0 * classical_constants().A * std::pow(I2, -2.0 / 3.0); }

double pendulum_V(double I2, double mu) {
    double a = action_kinematics(I2, classical_constants()).amplitude;
    return mu * a * a / 2.0;
}

double pendulum_energy(double I1, double theta1, double I2, double mu) {
    return pendulum_B(I2) * I1 * I1 / 2.0 - pendulum_V(I2, mu) * std::cos(theta1);
}

LayerWidth measure_layer_width(const DriveParams& p, const LayerScanOptions& opt) {
    if (!(p.mu > 0)) throw std::invalid_argument("measure_layer_width: mu must be positive");
    if (opt.points_per_side < 1) throw std::invalid_argument("measure_layer_width: need scan points");
    LayerWidth lw;
    lw.I2 = default_I2(p);
    lw.V = pendulum_V(lw.I2, p.mu);
    double B = pendulum_B(lw.I2);
    int n = opt.points_per_side;
    // inner side first (theta1 = 0, h < V), then outer (theta1 = pi, h > V), nearest the separatrix first
    for (int side = 0; side < 2; ++side)
        for (int j = 1; j <= n; ++j) {
            double delta = opt.max_relative_offset * j / n;
            LayerScanPoint pt;
            if (side == 0) {
                pt.theta1 = 0.0;
                pt.I1 = std::sqrt(2.0 * lw.V * (2.0 - delta) / B);
            } else {
                pt.theta1 = std::numbers::pi;
                pt.I1 = std::sqrt(2.0 * lw.V * delta / B);
            }
            pt.h = pendulum_energy(pt.I1, pt.theta1, lw.I2, p.mu);
            lw.points.push_back(pt);
        }
    parallel_for(static_cast<int>(lw.points.size()), opt.scan.threads, [&](int i) {
        LayerScanPoint& pt = lw.points[i];
        ClassicalState s0;
        s0.I1 = pt.I1;
        s0.theta1 = pt.theta1;
        s0.I2 = lw.I2;
        RunResult r = diffusion_run(s0, p, opt.scan);
        pt.d2 = r.d2;
        pt.d3 = r.d3;
        pt.chaotic = r.d3.D > 0 && r.d2.D / r.d3.D >= 0.5 && r.d2.D / r.d3.D <= opt.max_ratio;
    });
    // contiguous chaotic run starting next to the separatrix on each side
    for (int side = 0; side < 2; ++side) {
        double w = 0;
        for (int j = 0; j < n; ++j) {
            const LayerScanPoint& pt = lw.points[side * n + j];
            if (!pt.chaotic) break;
            w = std::abs(pt.h - lw.V);
        }
        (side == 0 ? lw.w_inner : lw.w_outer) = w;
    }
    return lw;
}

double libration_frequency(const DriveParams& p, double I1, double theta1, double I2, long periods) {
    DriveParams q = p;
    q.f0 = 0;
    ClassicalState s0;
    s0.I1 = I1;
    s0.theta1 = theta1;
    s0.I2 = I2;
    StepPolicy step;
    step.keep_samples = false;
    step.record_section = true;
    Trajectory tr = integrate(s0, q, periods * q.period, step);
    // zero crossings of I1 on the section: two per oscillation
    std::vector<double> zc;
    for (size_t i = 1; i < tr.section.size(); ++i) {
        const SectionPoint& a = tr.section[i - 1];
        const SectionPoint& b = tr.section[i];
        if ((a.I1 < 0) != (b.I1 < 0)) zc.push_back(a.t + (b.t - a.t) * a.I1 / (a.I1 - b.I1));
    }
    if (zc.size() < 3) throw InsufficientData("libration_frequency: too few oscillations");
    double half = (zc.back() - zc.front()) / static_cast<double>(zc.size() - 1);
    return std::numbers::pi / half;
}

}  // namespace qad
