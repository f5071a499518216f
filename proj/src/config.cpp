#include "qad/config.hpp"

#include <cmath>
#include <cstdlib>
#include <numbers>
#include <sstream>
#include <thread>

namespace qad {

json default_config() {
    return json::parse(R"({
  "physics": {
    "hbar0": 1.77321e-5,
    "mu": 1e-4,
    "f0": null,
    "f0_ratio": 0.01,
    "Omega1": 0.2094,
    "Omega2": 0.2513,
    "period": 150,
    "n0": 446,
    "allow_overlap": false
  },
  "basis": {
    "n_max": null,
    "points_per_wavelength": 20,
    "turning_point_fraction": 0.7,
    "stencil_half_width": 4,
    "residual_tolerance": 1e-9
  },
  "spectrum": {
    "K_w": 0,
    "P_w": 8,
    "q_min": -1,
    "q_max": 1,
    "dump_groups": [0]
  },
  "floquet": {
    "q_min": -16,
    "q_max": 16,
    "bandwidth": 0,
    "max_bandwidth": 12,
    "band_tolerance": 1e-16,
    "s_band": 0,
    "s_center": "initial",
    "rtol": 1e-10,
    "atol": 1e-12,
    "fixed_dt": 1.0,
    "leakage_threshold": 1e-4
  },
  "qe": {
    "q_min": -1,
    "q_max": 1,
    "s_band": 0
  },
  "evolve": {
    "N": 10000,
    "stride": 1,
    "occupancy_stride": 10,
    "initial": {"kind": "separatrix", "q": 0, "s": 0}
  },
  "analysis": {
    "fit": {"N_min": 50, "N_max": 1000, "min_correlation": 0.9},
    "saturation": {"slope_fraction": 0.1, "confirm_periods": 500, "slope_window": 250, "min_periods": 10000},
    "profile": {"core_fraction": 1e-2, "floor_factor": 10, "absolute_floor": 1e-28, "min_points": 3}
  },
  "classical": {
    "initial": {"I1": 0, "theta1": -3.141592653589793, "I2": null, "theta2": 0},
    "rtol": 1e-10,
    "atol": 1e-15,
    "fixed_dt": 0.5,
    "poincare": {"periods": 2000, "I2_factors": [0.95, 1, 1.05]},
    "scan": {"theta1": [-3.141592653589793, -2.748893571891069, -2.356194490192345, -1.963495408493620,
                         -1.570796326794897, -1.178097245096172, -0.785398163397448, -0.392699081698724,
                         0, 0.392699081698724, 0.785398163397448, 1.178097245096172, 1.570796326794897,
                         1.963495408493620, 2.356194490192345, 2.748893571891069],
             "periods_d2": 100000, "periods_d3": 300000},
    "diffusion": {"theta1": -3.141592653589793, "periods_d2": 100000, "periods_d3": 300000},
    "layer": {"points_per_side": 10, "max_relative_offset": 0.2, "max_ratio": 10.0, "periods_d2": 100000, "periods_d3": 300000},
    "nu": 1
  },
  "sweep": {
    "mu": [1e-4, 1.25e-4, 1.5e-4, 1.75e-4, 2e-4, 2.25e-4],
    "shuryak_mu": [3e-5, 1e-4, 1.25e-4, 1.5e-4, 2e-4],
    "qe_mu": [3e-5, 1e-4],
    "initial_mu": 1.25e-4,
    "profile_runs": [{"mu": 0, "f0": 1e-6}, {"mu": 0, "f0": 2e-6}, {"mu": 1e-4, "f0": 1e-6}, {"mu": 2e-4, "f0": 2e-6}]
  },
  "run": {
    "threads": 0,
    "seed": 0,
    "fixed_step": false
  }
})");
}

json preset_overrides(const std::string& name) {
    if (name.empty() || name == "paper") return json::object();
    if (name == "quick")
        return json::parse(R"({
  "floquet": {"q_min": -12, "q_max": 12, "s_band": 60},
  "qe": {"s_band": 40},
  "evolve": {"N": 2000, "occupancy_stride": 5},
  "analysis": {"saturation": {"min_periods": 2000}},
  "classical": {
    "poincare": {"periods": 500},
    "scan": {"periods_d2": 10000, "periods_d3": 30000},
    "diffusion": {"periods_d2": 20000, "periods_d3": 60000},
    "layer": {"points_per_side": 8, "periods_d2": 10000, "periods_d3": 30000}
  },
  "sweep": {"shuryak_mu": [3e-5, 1.5e-4]}
})");
    throw ConfigError("unknown preset '" + name + "' (expected quick or paper)");
}

void merge_config(json& base, const json& overlay, const std::string& where) {
    if (!overlay.is_object()) throw ConfigError("config" + (where.empty() ? "" : " at '" + where + "'") + " must be an object");
    for (auto it = overlay.begin(); it != overlay.end(); ++it) {
        std::string path = where.empty() ? it.key() : where + "." + it.key();
        if (!base.contains(it.key())) throw ConfigError("unknown config key '" + path + "'");
        json& slot = base[it.key()];
        if (slot.is_object() && it.value().is_object())
            merge_config(slot, it.value(), path);
        else
            slot = it.value();
    }
}

void apply_set(json& cfg, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
    std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::parse_error&) {
        value = text;
    }
    json overlay = value;
    std::vector<std::string> parts;
    std::stringstream ss(key);
    for (std::string part; std::getline(ss, part, '.');) parts.push_back(part);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) overlay = json{{*it, overlay}};
    merge_config(cfg, overlay);
}

namespace {

template <class T>
T get(const json& j, const char* key, const std::string& where) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config '" + where + "." + key + "' has the wrong type");
    }
}

StepPolicy step_from(const json& c, bool fixed) {
    StepPolicy s;
    s.rtol = get<double>(c, "rtol", "classical");
    s.atol = get<double>(c, "atol", "classical");
    s.fixed_dt = get<double>(c, "fixed_dt", "classical");
    s.fixed_step = fixed;
    return s;
}

ScanOptions scan_from(const json& j, const std::string& where, const StepPolicy& step, int threads) {
    ScanOptions o;
    o.periods_d2 = get<long>(j, "periods_d2", where);
    o.periods_d3 = get<long>(j, "periods_d3", where);
    o.step = step;
    o.threads = threads;
    return o;
}

}  // namespace

DriveParams RunConfig::drive_at(double mu_, double f0_) const {
    return DriveParams::from_frequencies(f0_, mu_, Omega1, Omega2, period);
}

RunConfig RunConfig::with_physics(double mu_, double f0_) const {
    json d = doc;
    d["physics"]["mu"] = mu_;
    if (f0_ < 0)
        d["physics"]["f0"] = nullptr;
    else
        d["physics"]["f0"] = f0_;
    RunConfig c = parse_config(d);
    c.threads = threads;
    c.floquet.threads = threads;
    c.scan.threads = c.diffusion.threads = c.layer.scan.threads = threads;
    return c;
}

RunConfig parse_config(const json& d) {
    RunConfig c;
    c.doc = d;
    const json& ph = d.at("physics");
    c.hbar0 = get<double>(ph, "hbar0", "physics");
    c.mu = get<double>(ph, "mu", "physics");
    c.f0_ratio = get<double>(ph, "f0_ratio", "physics");
    c.f0 = ph.at("f0").is_null() ? c.f0_ratio * c.mu : get<double>(ph, "f0", "physics");
    c.Omega1 = get<double>(ph, "Omega1", "physics");
    c.Omega2 = get<double>(ph, "Omega2", "physics");
    c.period = get<double>(ph, "period", "physics");
    c.n0 = get<int>(ph, "n0", "physics");
    c.allow_overlap = get<bool>(ph, "allow_overlap", "physics");

    const json& b = d.at("basis");
    c.n_max = b.at("n_max").is_null() ? c.n0 + 200 : get<int>(b, "n_max", "basis");
    c.grid.points_per_wavelength = get<double>(b, "points_per_wavelength", "basis");
    c.grid.turning_point_fraction = get<double>(b, "turning_point_fraction", "basis");
    c.grid.stencil_half_width = get<int>(b, "stencil_half_width", "basis");
    c.grid.residual_tolerance = get<double>(b, "residual_tolerance", "basis");

    const json& sp = d.at("spectrum");
    c.K_w = get<int>(sp, "K_w", "spectrum");
    c.P_w = get<int>(sp, "P_w", "spectrum");
    c.spectrum_q_min = get<int>(sp, "q_min", "spectrum");
    c.spectrum_q_max = get<int>(sp, "q_max", "spectrum");
    c.dump_groups = get<std::vector<int>>(sp, "dump_groups", "spectrum");

    const json& r = d.at("run");
    c.seed = get<unsigned long long>(r, "seed", "run");
    c.fixed_step = get<bool>(r, "fixed_step", "run");
    c.threads = get<int>(r, "threads", "run");
    if (c.threads <= 0) c.threads = resolve_threads(std::nullopt, nullptr, 0);

    const json& fl = d.at("floquet");
    c.floquet.q_min = get<int>(fl, "q_min", "floquet");
    c.floquet.q_max = get<int>(fl, "q_max", "floquet");
    c.floquet.bandwidth = get<int>(fl, "bandwidth", "floquet");
    c.floquet.max_bandwidth = get<int>(fl, "max_bandwidth", "floquet");
    c.floquet.band_tolerance = get<double>(fl, "band_tolerance", "floquet");
    c.floquet.s_band = get<int>(fl, "s_band", "floquet");
    c.floquet.rtol = get<double>(fl, "rtol", "floquet");
    c.floquet.atol = get<double>(fl, "atol", "floquet");
    c.floquet.fixed_dt = get<double>(fl, "fixed_dt", "floquet");
    c.floquet.leakage_threshold = get<double>(fl, "leakage_threshold", "floquet");
    c.floquet.fixed_step = c.fixed_step;
    c.floquet.threads = c.threads;
    const json& sc = fl.at("s_center");
    c.s_center = sc.is_number() ? format_number(sc.get<double>()) : get<std::string>(fl, "s_center", "floquet");

    const json& qe = d.at("qe");
    c.qe_q_min = get<int>(qe, "q_min", "qe");
    c.qe_q_max = get<int>(qe, "q_max", "qe");
    c.qe_s_band = get<int>(qe, "s_band", "qe");

    const json& ev = d.at("evolve");
    c.N = get<long>(ev, "N", "evolve");
    c.stride = get<long>(ev, "stride", "evolve");
    c.occupancy_stride = get<long>(ev, "occupancy_stride", "evolve");
    const json& in = ev.at("initial");
    c.initial.kind = get<std::string>(in, "kind", "evolve.initial");
    c.initial.q = get<int>(in, "q", "evolve.initial");
    c.initial.s = get<int>(in, "s", "evolve.initial");

    const json& an = d.at("analysis");
    const json& fit = an.at("fit");
    c.fit.N_min = get<long>(fit, "N_min", "analysis.fit");
    c.fit.N_max = get<long>(fit, "N_max", "analysis.fit");
    c.fit.min_correlation = get<double>(fit, "min_correlation", "analysis.fit");
    const json& sat = an.at("saturation");
    c.saturation.slope_fraction = get<double>(sat, "slope_fraction", "analysis.saturation");
    c.saturation.confirm_periods = get<long>(sat, "confirm_periods", "analysis.saturation");
    c.saturation.slope_window = get<long>(sat, "slope_window", "analysis.saturation");
    c.saturation.min_periods = get<long>(sat, "min_periods", "analysis.saturation");
    c.saturation.initial = c.fit;
    const json& pr = an.at("profile");
    c.profile.core_fraction = get<double>(pr, "core_fraction", "analysis.profile");
    c.profile.floor_factor = get<double>(pr, "floor_factor", "analysis.profile");
    c.profile.absolute_floor = get<double>(pr, "absolute_floor", "analysis.profile");
    c.profile.min_points = get<int>(pr, "min_points", "analysis.profile");

    const json& cl = d.at("classical");
    c.step = step_from(cl, c.fixed_step);
    const json& ci = cl.at("initial");
    c.classical_start.I1 = get<double>(ci, "I1", "classical.initial");
    c.classical_start.theta1 = get<double>(ci, "theta1", "classical.initial");
    c.classical_start.theta2 = get<double>(ci, "theta2", "classical.initial");
    c.classical_default_I2 = ci.at("I2").is_null();
    if (!c.classical_default_I2) c.classical_start.I2 = get<double>(ci, "I2", "classical.initial");
    c.poincare_periods = get<long>(cl.at("poincare"), "periods", "classical.poincare");
    c.poincare_I2_factors = get<std::vector<double>>(cl.at("poincare"), "I2_factors", "classical.poincare");
    c.scan_theta1 = get<std::vector<double>>(cl.at("scan"), "theta1", "classical.scan");
    c.scan = scan_from(cl.at("scan"), "classical.scan", c.step, c.threads);
    c.diffusion = scan_from(cl.at("diffusion"), "classical.diffusion", c.step, c.threads);
    c.diffusion_theta1 = get<double>(cl.at("diffusion"), "theta1", "classical.diffusion");
    const json& ly = cl.at("layer");
    c.layer.points_per_side = get<int>(ly, "points_per_side", "classical.layer");
    c.layer.max_relative_offset = get<double>(ly, "max_relative_offset", "classical.layer");
    c.layer.max_ratio = get<double>(ly, "max_ratio", "classical.layer");
    c.layer.scan = scan_from(ly, "classical.layer", c.step, c.threads);
    c.nu = get<double>(cl, "nu", "classical");

    const json& sw = d.at("sweep");
    c.sweep_mu = get<std::vector<double>>(sw, "mu", "sweep");
    c.shuryak_mu = get<std::vector<double>>(sw, "shuryak_mu", "sweep");
    c.qe_mu = get<std::vector<double>>(sw, "qe_mu", "sweep");
    c.initial_mu = get<double>(sw, "initial_mu", "sweep");
    for (const auto& run : sw.at("profile_runs")) c.profile_runs.push_back({get<double>(run, "mu", "sweep.profile_runs"),
                                                                             get<double>(run, "f0", "sweep.profile_runs")});
    return c;
}

int resolve_threads(std::optional<int> cli, const char* env, int configured) {
    if (cli && *cli > 0) return *cli;
    if (env && *env) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (end && *end == '\0' && v > 0) return static_cast<int>(v);
        throw ConfigError(std::string("QAD_THREADS must be a positive integer, got '") + env + "'");
    }
    if (configured > 0) return configured;
    unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

RunConfig load_config(const ConfigSources& src) {
    json doc = default_config();
    merge_config(doc, preset_overrides(src.preset));
    if (src.file) merge_config(doc, read_json(*src.file));
    for (const auto& s : src.sets) apply_set(doc, s);
    if (src.fixed_step) doc["run"]["fixed_step"] = true;
    int configured = doc["run"]["threads"].is_number_integer() ? doc["run"]["threads"].get<int>() : 0;
    int threads = resolve_threads(src.threads, std::getenv("QAD_THREADS"), configured);
    doc["run"]["threads"] = threads;
    return parse_config(doc);
}

std::string ValidationReport::format() const {
    std::ostringstream out;
    for (const auto& e : errors) out << "error: " << e << "\n";
    for (const auto& w : warnings) out << "warning: " << w << "\n";
    return out.str();
}

namespace {

void check_overlap_at(const RunConfig& c, double mu, double f0, const std::string& what, ValidationReport& r) {
    DriveParams p;
    try {
        p = c.drive_at(mu, f0);
    } catch (const std::exception&) {
        return;  // reported once by the drive check
    }
    if (p.f0 <= 0 && p.mu <= 0) return;
    double a = action_kinematics(default_I2(p), classical_constants()).amplitude;
    OverlapCheck oc = check_overlap(p, a);
    if (!oc.overlapped) return;
    std::ostringstream msg;
    msg << what << ": resonances overlap at mu=" << mu << ", f0=" << f0 << " (margin " << oc.margin
        << " <= 0: dW/(2 beta) = " << p.delta_omega() / (2.0 * classical_constants().beta)
        << " against sqrt(2 f0/a) + sqrt(mu) = " << std::sqrt(2.0 * f0 / a) + std::sqrt(mu)
        << "); set physics.allow_overlap=true to run anyway";
    if (c.allow_overlap)
        r.warnings.push_back(msg.str());
    else
        r.errors.push_back(msg.str());
}

void check_window(const RunConfig& c, const OscillatorBasis* basis, int q, double mu, const std::string& what,
                  ValidationReport& r) {
    int K = c.K_w;
    if (K <= 0) {
        if (!basis) return;
        double x01 = basis->x(c.n0, c.n0 + 1);
        K = auto_half_width(2.0 * mu * x01 * x01, basis->second_difference(c.n0));
    }
    ResonanceWindow w{c.n0, K, c.P_w, q};
    int reach = w.reach();
    int usable = c.n_max - 1;
    if (c.n0 - reach < 0 || c.n0 + reach > usable) {
        std::ostringstream msg;
        msg << what << ": window at q=" << q << " (K_w=" << K << ", P_w=" << c.P_w << ") needs levels "
            << c.n0 - reach << ".." << c.n0 + reach << " but basis.n_max=" << c.n_max << " leaves 0.." << usable;
        r.errors.push_back(msg.str());
    } else if (basis) {
        NonlinearityReport nl = small_nonlinearity_check(*basis, w);
        if (nl.warning) {
            std::ostringstream msg;
            msg << what << ": small-nonlinearity ratio " << nl.worst_ratio << " < " << nl.threshold << " at k="
                << nl.worst_k << ", p=" << nl.worst_p << " (reliable for |k - p/2| <= " << nl.valid_half_width << ")";
            r.warnings.push_back(msg.str());
        }
    }
}

}  // namespace

ValidationReport validate_config(const RunConfig& c, const OscillatorBasis* basis) {
    ValidationReport r;
    auto need = [&](bool ok, const std::string& msg) {
        if (!ok) r.errors.push_back(msg);
    };
    need(std::isfinite(c.hbar0) && c.hbar0 > 0, "physics.hbar0 must be positive, got " + format_number(c.hbar0));
    need(c.mu >= 0, "physics.mu must be >= 0, got " + format_number(c.mu));
    need(c.f0 >= 0, "physics.f0 must be >= 0, got " + format_number(c.f0));
    need(c.period > 0, "physics.period must be positive");
    need(c.n0 > 0, "physics.n0 must be positive");
    need(c.n_max > c.n0, "basis.n_max=" + std::to_string(c.n_max) + " must exceed physics.n0=" + std::to_string(c.n0));
    bool drive_ok = true;
    try {
        c.drive();
    } catch (const std::exception& e) {
        drive_ok = false;
        r.errors.push_back(std::string("physics: ") + e.what());
    }
    need(c.P_w >= 0, "spectrum.P_w must be >= 0");
    need(c.K_w >= 0, "spectrum.K_w must be >= 0 (0 picks it)");
    need(c.spectrum_q_min <= c.spectrum_q_max, "spectrum.q_min > spectrum.q_max");
    need(c.floquet.q_min <= c.floquet.q_max, "floquet.q_min > floquet.q_max");
    need(c.qe_q_min <= c.qe_q_max, "qe.q_min > qe.q_max");
    need(c.floquet.s_band >= 0 && c.qe_s_band >= 0, "s_band must be >= 0");
    need(c.floquet.bandwidth >= 0 && c.floquet.max_bandwidth >= 1, "floquet bandwidths must be non-negative");
    if (c.s_center != "initial" && c.s_center != "separatrix" && c.s_center != "bottom") {
        char* end = nullptr;
        std::strtod(c.s_center.c_str(), &end);
        need(end && *end == '\0' && !c.s_center.empty(),
             "floquet.s_center must be initial, separatrix, bottom or a number, got '" + c.s_center + "'");
    }
    need(c.N >= 1, "evolve.N must be >= 1");
    need(c.stride >= 1 && c.occupancy_stride >= 1, "evolve strides must be >= 1");
    const auto& k = c.initial.kind;
    need(k == "separatrix" || k == "center" || k == "above" || k == "state",
         "evolve.initial.kind must be separatrix, center, above or state, got '" + k + "'");
    need(c.initial.q >= c.floquet.q_min && c.initial.q <= c.floquet.q_max,
         "evolve.initial.q=" + std::to_string(c.initial.q) + " lies outside the floquet window");
    need(c.fit.N_min >= 0 && c.fit.N_min < c.fit.N_max, "analysis.fit needs 0 <= N_min < N_max");
    need(c.fit.min_correlation > 0 && c.fit.min_correlation <= 1, "analysis.fit.min_correlation must lie in (0, 1]");
    need(c.saturation.slope_fraction > 0 && c.saturation.slope_fraction < 1,
         "analysis.saturation.slope_fraction must lie in (0, 1)");
    need(c.saturation.confirm_periods > 0 && c.saturation.slope_window > 1, "analysis.saturation windows must be positive");
    need(c.profile.core_fraction > 0 && c.profile.core_fraction < 1, "analysis.profile.core_fraction must lie in (0, 1)");
    // the estimators need five blocks of 10^2 and 10^3 periods
    for (auto [o, where] : {std::pair{&c.diffusion, "classical.diffusion"}, std::pair{&c.scan, "classical.scan"},
                            std::pair{&c.layer.scan, "classical.layer"}})
        need(o->periods_d2 >= 500 && o->periods_d3 >= 5000 && o->periods_d3 >= o->periods_d2,
             std::string(where) + " needs periods_d2 >= 500, periods_d3 >= 5000 and periods_d3 >= periods_d2");
    need(c.layer.points_per_side >= 1, "classical.layer.points_per_side must be >= 1");
    need(c.layer.max_ratio >= 2.0, "classical.layer.max_ratio must be >= 2");
    for (double th : c.scan_theta1)
        need(th > -std::numbers::pi - 1e-12 && th <= std::numbers::pi, "classical.scan.theta1 entries must lie in (-pi, pi]");
    need(c.step.rtol > 0 && c.step.atol > 0 && c.step.fixed_dt > 0, "classical tolerances must be positive");
    need(c.floquet.rtol > 0 && c.floquet.atol > 0 && c.floquet.fixed_dt > 0, "floquet tolerances must be positive");
    for (double m : c.sweep_mu) need(m > 0, "sweep.mu entries must be positive");
    for (double m : c.shuryak_mu) need(m > 0, "sweep.shuryak_mu entries must be positive");
    for (double m : c.qe_mu) need(m >= 0, "sweep.qe_mu entries must be >= 0");
    need(c.initial_mu >= 0, "sweep.initial_mu must be >= 0");
    need(c.threads >= 1, "run.threads must be >= 1");

    if (drive_ok) {
        check_overlap_at(c, c.mu, c.f0, "physics", r);
        for (double m : c.sweep_mu) check_overlap_at(c, m, c.f0_ratio * m, "sweep.mu", r);
        for (const auto& pr : c.profile_runs) check_overlap_at(c, pr.mu, pr.f0, "sweep.profile_runs", r);
        for (double m : c.qe_mu) check_overlap_at(c, m, c.f0_ratio * m, "sweep.qe_mu", r);
        check_overlap_at(c, c.initial_mu, c.f0_ratio * c.initial_mu, "sweep.initial_mu", r);
    }
    if (c.n_max > c.n0 && c.P_w >= 0 && c.K_w >= 0) {
        double mu_hi = c.mu;
        for (double m : c.sweep_mu) mu_hi = std::max(mu_hi, m);
        for (const auto& pr : c.profile_runs) mu_hi = std::max(mu_hi, pr.mu);
        mu_hi = std::max(mu_hi, c.initial_mu);
        int q_lo = std::min({c.spectrum_q_min, c.floquet.q_min, c.qe_q_min});
        int q_hi = std::max({c.spectrum_q_max, c.floquet.q_max, c.qe_q_max});
        check_window(c, basis, q_lo, mu_hi, "resonance window", r);
        if (q_hi != q_lo) check_window(c, basis, q_hi, mu_hi, "resonance window", r);
    }
    return r;
}

}  // namespace qad
