#include "qad/runner.hpp"

#include "qad/parallel.hpp"

#include <openssl/opensslv.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#ifndef QAD_VERSION
#define QAD_VERSION "0.0.0"
#endif

namespace qad {

namespace {

constexpr int kCacheFormat = 1;

std::string short_hash(const std::string& h) { return h.substr(0, 16); }

json drive_json(const DriveParams& p) {
    return {{"f0", p.f0}, {"mu", p.mu}, {"period", p.period}, {"harmonic1", p.harmonic1}, {"harmonic2", p.harmonic2}};
}

json step_json(const StepPolicy& s) {
    return {{"rtol", s.rtol}, {"atol", s.atol}, {"fixed_step", s.fixed_step}, {"fixed_dt", s.fixed_dt}};
}

json scan_json(const ScanOptions& o) {
    return {{"periods_d2", o.periods_d2}, {"periods_d3", o.periods_d3}, {"step", step_json(o.step)}};
}

json estimate_json(const DiffusionEstimate& d) {
    return {{"exponent", d.exponent}, {"blocks", d.blocks}, {"D", d.D}, {"stderr_D", d.stderr_D}, {"raw", d.raw}};
}

DiffusionEstimate estimate_from(const json& j) {
    DiffusionEstimate d;
    d.exponent = j.at("exponent").get<int>();
    d.blocks = j.at("blocks").get<long>();
    d.D = j.at("D").get<double>();
    d.stderr_D = j.at("stderr_D").get<double>();
    d.raw = j.at("raw").get<double>();
    return d;
}

std::string label(double v) {
    std::ostringstream s;
    s.precision(4);
    s << v;
    return s.str();
}

template <class Fn>
double timed(Fn&& fn) {
    auto t0 = std::chrono::steady_clock::now();
    fn();
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

void RunContext::note(const std::string& line) const {
    if (log) *log << line << std::endl;
}

std::string content_hash(const json& key) { return sha256_hex(key.dump()); }

// ---------------------------------------------------------------- basis

json basis_key(const RunConfig& c) {
    return {{"kind", "basis"},
            {"format", kCacheFormat},
            {"hbar0", c.hbar0},
            {"n_max", c.n_max},
            {"grid",
             {{"points_per_wavelength", c.grid.points_per_wavelength},
              {"turning_point_fraction", c.grid.turning_point_fraction},
              {"stencil_half_width", c.grid.stencil_half_width},
              {"residual_tolerance", c.grid.residual_tolerance},
              {"edge_weight_tolerance", c.grid.edge_weight_tolerance},
              {"min_points_per_wavelength", c.grid.min_points_per_wavelength}}}};
}

OscillatorBasis load_or_solve_basis(const RunContext& ctx, CacheHit* hit) {
    json key = basis_key(ctx.cfg);
    std::string h = content_hash(key);
    fs::path file = ctx.cache_dir() / ("basis-" + short_hash(h) + ".bin");
    if (hit) *hit = {h, false};
    if (fs::exists(file)) {
        try {
            Blob b = read_blob(file);
            if (b.header.at("key").get<std::string>() != h) throw IoError("key mismatch");
            OscillatorBasis basis;
            basis.hbar0 = b.header.at("hbar0").get<double>();
            basis.n_max = b.header.at("n_max").get<int>();
            const json& g = b.header.at("grid");
            basis.grid.points = g.at("points").get<int>();
            basis.grid.step = g.at("step").get<double>();
            basis.grid.half_width = g.at("half_width").get<double>();
            basis.grid.stencil_half_width = g.at("stencil_half_width").get<int>();
            const size_t n = static_cast<size_t>(basis.n_max) + 1;
            if (b.payload.size() != 2 * n + n * n) throw IoError("size mismatch");
            basis.energies.assign(b.payload.begin(), b.payload.begin() + n);
            basis.residuals.assign(b.payload.begin() + n, b.payload.begin() + 2 * n);
            basis.x_elements = Eigen::Map<const Eigen::MatrixXd>(b.payload.data() + 2 * n, n, n);
            if (hit) hit->reused = true;
            ctx.note("basis: reused " + file.filename().string());
            return basis;
        } catch (const std::exception& e) {
            ctx.note(std::string("basis: cache entry unusable (") + e.what() + "), solving again");
        }
    }
    OscillatorBasis basis;
    double t = timed([&] { basis = solve_quartic_eigen(ctx.cfg.hbar0, ctx.cfg.n_max, ctx.cfg.grid); });
    ctx.note("basis: solved n_max=" + std::to_string(basis.n_max) + " in " + label(t) + " s");
    const size_t n = basis.energies.size();
    std::vector<double> payload;
    payload.reserve(2 * n + n * n);
    payload.insert(payload.end(), basis.energies.begin(), basis.energies.end());
    payload.insert(payload.end(), basis.residuals.begin(), basis.residuals.end());
    payload.insert(payload.end(), basis.x_elements.data(), basis.x_elements.data() + n * n);
    json header = {{"kind", "basis"},
                   {"key", h},
                   {"spec", key},
                   {"hbar0", basis.hbar0},
                   {"n_max", basis.n_max},
                   {"grid",
                    {{"points", basis.grid.points},
                     {"step", basis.grid.step},
                     {"half_width", basis.grid.half_width},
                     {"stencil_half_width", basis.grid.stencil_half_width}}}};
    write_blob(file, header, payload);
    return basis;
}

// ---------------------------------------------------------------- stationary states

namespace {

json states_key(const RunConfig& c, double mu, int q_min, int q_max) {
    return {{"kind", "states"}, {"format", kCacheFormat}, {"basis", content_hash(basis_key(c))}, {"mu", mu},
            {"n0", c.n0},       {"K_w", c.K_w},           {"P_w", c.P_w},                        {"q_min", q_min},
            {"q_max", q_max}};
}

}  // namespace

StationaryStates load_or_solve_states(const RunContext& ctx, const OscillatorBasis& basis, double mu, int q_min,
                                      int q_max, CacheHit* hit) {
    const RunConfig& c = ctx.cfg;
    json key = states_key(c, mu, q_min, q_max);
    std::string h = content_hash(key);
    fs::path file = ctx.cache_dir() / ("states-" + short_hash(h) + ".bin");
    if (hit) *hit = {h, false};
    if (fs::exists(file)) {
        try {
            Blob b = read_blob(file);
            if (b.header.at("key").get<std::string>() != h) throw IoError("key mismatch");
            StationaryStates st;
            st.hbar0 = b.header.at("hbar0").get<double>();
            st.mu = b.header.at("mu").get<double>();
            st.n0 = b.header.at("n0").get<int>();
            st.hbar_omega = b.header.at("hbar_omega").get<double>();
            st.omega = b.header.at("omega").get<double>();
            st.e2 = b.header.at("e2").get<double>();
            size_t pos = 0;
            auto take = [&](size_t n) {
                if (pos + n > b.payload.size()) throw IoError("truncated states payload");
                Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(b.payload.data() + pos, static_cast<Eigen::Index>(n));
                pos += n;
                return v;
            };
            for (const auto& gj : b.header.at("groups")) {
                GroupStates g;
                g.q = gj.at("q").get<int>();
                g.window = {gj.at("n0").get<int>(), gj.at("K_w").get<int>(), gj.at("P_w").get<int>(), g.q};
                g.index = g.window.indices();
                size_t rows = gj.at("rows").get<size_t>(), cols = gj.at("cols").get<size_t>();
                if (rows != g.index.size()) throw IoError("window size mismatch");
                g.energies = take(cols);
                g.mathieu = take(cols);
                Eigen::VectorXd s = take(cols), ex = take(cols);
                for (Eigen::Index i = 0; i < s.size(); ++i) {
                    g.s.push_back(static_cast<int>(std::lround(s(i))));
                    g.exchange.push_back(static_cast<int>(std::lround(ex(i))));
                }
                g.mean_p = take(cols);
                g.edge_weight = take(cols);
                Eigen::VectorXd v = take(rows * cols);
                g.vectors = Eigen::Map<const Eigen::MatrixXd>(v.data(), rows, cols);
                st.groups.push_back(std::move(g));
            }
            if (hit) hit->reused = true;
            ctx.note("spectrum: reused " + file.filename().string());
            return st;
        } catch (const std::exception& e) {
            ctx.note(std::string("spectrum: cache entry unusable (") + e.what() + "), solving again");
        }
    }
    SpectrumOptions so;
    so.n0 = c.n0;
    so.K_w = c.K_w;
    so.P_w = c.P_w;
    so.q_min = q_min;
    so.q_max = q_max;
    so.threads = c.threads;
    StationaryStates st;
    double t = timed([&] { st = solve_resonance_spectrum(basis, mu, so); });
    ctx.note("spectrum: mu=" + label(mu) + " q in [" + std::to_string(q_min) + ", " + std::to_string(q_max) +
             "] solved in " + label(t) + " s");
    json groups = json::array();
    std::vector<double> payload;
    for (const auto& g : st.groups) {
        groups.push_back({{"q", g.q}, {"n0", g.window.n0}, {"K_w", g.window.K_w}, {"P_w", g.window.P_w},
                          {"rows", g.vectors.rows()}, {"cols", g.vectors.cols()}});
        auto put = [&](const Eigen::VectorXd& v) { payload.insert(payload.end(), v.data(), v.data() + v.size()); };
        put(g.energies);
        put(g.mathieu);
        for (int s : g.s) payload.push_back(s);
        for (int e : g.exchange) payload.push_back(e);
        put(g.mean_p);
        put(g.edge_weight);
        payload.insert(payload.end(), g.vectors.data(), g.vectors.data() + g.vectors.size());
    }
    json header = {{"kind", "states"}, {"key", h},        {"spec", key},   {"hbar0", st.hbar0},
                   {"mu", st.mu},      {"n0", st.n0},     {"hbar_omega", st.hbar_omega},
                   {"omega", st.omega}, {"e2", st.e2},    {"groups", groups}};
    write_blob(file, header, payload);
    return st;
}

// ---------------------------------------------------------------- classical caches

LayerWidth load_or_measure_layer(const RunContext& ctx, const DriveParams& p, CacheHit* hit) {
    const LayerScanOptions& o = ctx.cfg.layer;
    json key = {{"kind", "layer"},
                {"format", kCacheFormat},
                {"drive", drive_json(p)},
                {"points_per_side", o.points_per_side},
                {"max_relative_offset", o.max_relative_offset},
                {"max_ratio", o.max_ratio},
                {"scan", scan_json(o.scan)}};
    std::string h = content_hash(key);
    fs::path file = ctx.cache_dir() / ("layer-" + short_hash(h) + ".json");
    if (hit) *hit = {h, false};
    if (fs::exists(file)) {
        try {
            json j = read_json(file);
            if (j.at("key").get<std::string>() != h) throw IoError("key mismatch");
            LayerWidth lw;
            lw.V = j.at("V").get<double>();
            lw.I2 = j.at("I2").get<double>();
            lw.w_inner = j.at("w_inner").get<double>();
            lw.w_outer = j.at("w_outer").get<double>();
            for (const auto& pj : j.at("points")) {
                LayerScanPoint pt;
                pt.I1 = pj.at("I1").get<double>();
                pt.theta1 = pj.at("theta1").get<double>();
                pt.h = pj.at("h").get<double>();
                pt.d2 = estimate_from(pj.at("d2"));
                pt.d3 = estimate_from(pj.at("d3"));
                pt.chaotic = pj.at("chaotic").get<bool>();
                lw.points.push_back(pt);
            }
            if (hit) hit->reused = true;
            return lw;
        } catch (const std::exception& e) {
            ctx.note(std::string("layer: cache entry unusable (") + e.what() + "), measuring again");
        }
    }
    LayerWidth lw;
    double t = timed([&] { lw = measure_layer_width(p, o); });
    ctx.note("layer: mu=" + label(p.mu) + " measured in " + label(t) + " s");
    json pts = json::array();
    for (const auto& pt : lw.points)
        pts.push_back({{"I1", pt.I1}, {"theta1", pt.theta1}, {"h", pt.h}, {"d2", estimate_json(pt.d2)},
                       {"d3", estimate_json(pt.d3)}, {"chaotic", pt.chaotic}});
    write_json(file, {{"key", h}, {"spec", key}, {"V", lw.V}, {"I2", lw.I2}, {"w_inner", lw.w_inner},
                      {"w_outer", lw.w_outer}, {"points", pts}});
    return lw;
}

ClassicalD load_or_measure_classical_D(const RunContext& ctx, const DriveParams& p, CacheHit* hit) {
    const RunConfig& c = ctx.cfg;
    json key = {{"kind", "classical_D"}, {"format", kCacheFormat}, {"drive", drive_json(p)},
                {"theta1", c.diffusion_theta1}, {"scan", scan_json(c.diffusion)}};
    std::string h = content_hash(key);
    fs::path file = ctx.cache_dir() / ("classicalD-" + short_hash(h) + ".json");
    if (hit) *hit = {h, false};
    ClassicalD out;
    out.mu = p.mu;
    out.f0 = p.f0;
    if (fs::exists(file)) {
        try {
            json j = read_json(file);
            if (j.at("key").get<std::string>() != h) throw IoError("key mismatch");
            out.d2 = estimate_from(j.at("d2"));
            out.d3 = estimate_from(j.at("d3"));
            out.T_a = j.at("T_a").get<double>();
            out.verdict = diffusion_verdict(out.d2, out.d3);
            if (hit) hit->reused = true;
            return out;
        } catch (const std::exception& e) {
            ctx.note(std::string("classical D: cache entry unusable (") + e.what() + "), measuring again");
        }
    }
    std::vector<PhaseScanRow> rows;
    double t = timed([&] { rows = scan_initial_phase(p, {c.diffusion_theta1}, c.diffusion); });
    ctx.note("classical D: mu=" + label(p.mu) + " measured in " + label(t) + " s");
    out.d2 = rows[0].d2;
    out.d3 = rows[0].d3;
    out.T_a = rows[0].T_a;
    out.verdict = rows[0].verdict;
    write_json(file, {{"key", h}, {"spec", key}, {"d2", estimate_json(out.d2)}, {"d3", estimate_json(out.d3)},
                      {"T_a", out.T_a}});
    return out;
}

// ---------------------------------------------------------------- initial state

InitialChoice choose_initial_state(const std::vector<double>& mathieu, const std::vector<int>& s, int q,
                                   double separatrix, double V, const InitialState& spec) {
    if (mathieu.empty() || mathieu.size() != s.size()) throw std::invalid_argument("choose_initial_state: no candidates");
    InitialChoice ch;
    ch.kind = spec.kind;
    ch.q = q;
    ch.separatrix = separatrix;
    auto pick = [&](auto&& better) {
        size_t best = 0;
        for (size_t i = 1; i < mathieu.size(); ++i)
            if (better(i, best)) best = i;
        ch.s = s[best];
        ch.mathieu = mathieu[best];
    };
    auto nearest = [&](double target) {
        pick([&](size_t i, size_t b) { return std::abs(mathieu[i] - target) < std::abs(mathieu[b] - target); });
    };
    if (spec.kind == "separatrix") {
        nearest(separatrix);
    } else if (spec.kind == "above") {
        nearest(separatrix + 0.5 * V);
    } else if (spec.kind == "center" || spec.kind == "state") {
        int want = spec.kind == "center" ? 0 : spec.s;
        auto it = std::find(s.begin(), s.end(), want);
        if (it == s.end())
            throw std::invalid_argument("initial state (q=" + std::to_string(q) + ", s=" + std::to_string(want) +
                                        ") is not among the kept states");
        ch.s = want;
        ch.mathieu = mathieu[static_cast<size_t>(it - s.begin())];
    } else {
        throw std::invalid_argument("unknown initial state kind '" + spec.kind + "'");
    }
    return ch;
}

InitialChoice choose_initial_state(const GroupStates& g, const QuantumPendulum& qp, const InitialState& spec) {
    std::vector<double> m(g.mathieu.data(), g.mathieu.data() + g.mathieu.size());
    return choose_initial_state(m, g.s, g.q, qp.separatrix, qp.V, spec);
}

InitialChoice artifact_start(const FloquetArtifact& f, const InitialState& spec) {
    const FloquetModel& m = f.model;
    if (spec.q < m.q_min || spec.q > m.q_max())
        throw std::invalid_argument("initial group q=" + std::to_string(spec.q) + " lies outside the floquet window");
    int g = m.group_index(spec.q);
    std::vector<double> mathieu;
    std::vector<int> s;
    for (int i = 0; i < m.count[g]; ++i) {
        int a = m.offset[g] + i;
        mathieu.push_back(m.energy(a) - f.hbar_omega * spec.q);
        s.push_back(m.s_of[a]);
    }
    return choose_initial_state(mathieu, s, spec.q, f.separatrix.at(g), f.V, spec);
}

// ---------------------------------------------------------------- floquet artifact

json floquet_key(const RunConfig& c) {
    const FloquetOptions& o = c.floquet;
    json key = {{"kind", "floquet"},
                {"format", kCacheFormat},
                {"basis", content_hash(basis_key(c))},
                {"drive", drive_json(c.drive())},
                {"n0", c.n0},
                {"K_w", c.K_w},
                {"P_w", c.P_w},
                {"q_min", o.q_min},
                {"q_max", o.q_max},
                {"bandwidth", o.bandwidth},
                {"max_bandwidth", o.max_bandwidth},
                {"band_tolerance", o.band_tolerance},
                {"s_band", o.s_band},
                {"rtol", o.rtol},
                {"atol", o.atol},
                {"fixed_step", o.fixed_step},
                {"fixed_dt", o.fixed_dt}};
    if (o.s_band > 0) {
        key["s_center"] = c.s_center;
        key["initial"] = {{"kind", c.initial.kind}, {"q", c.initial.q}, {"s", c.initial.s}};
    }
    return key;
}

void write_floquet_artifact(const fs::path& p, const FloquetArtifact& f) {
    const FloquetModel& m = f.model;
    const BandedPropagator& U = f.U;
    json header = {
        {"kind", "floquet"},
        {"key", f.key},
        {"window", {{"q_min", m.q_min}, {"q_max", m.q_max()}, {"n0", f.n0}, {"K_w", f.K_w}, {"P_w", f.P_w}}},
        {"bandwidth", U.bandwidth},
        {"probe", {{"bandwidth", f.probe.bandwidth}, {"capped", f.probe.capped},
                   {"occupancy_by_distance", f.probe.occupancy_by_distance}}},
        {"unitarity", {{"interior_defect", f.unitarity.interior_defect},
                       {"boundary_defect", f.unitarity.boundary_defect},
                       {"worst_column_norm_error", f.unitarity.worst_column_norm_error}}},
        {"ode_steps", U.ode_steps},
        {"mu", f.mu},
        {"s_center", f.s_center},
        {"hbar_omega", f.hbar_omega},
        {"V", f.V},
        {"separatrix", f.separatrix},
        {"model",
         {{"hbar0", m.hbar0},
          {"period", m.period},
          {"f0", m.f0},
          {"omega_frame", m.omega_frame},
          {"frame_harmonics", m.frame_harmonics},
          {"envelope_rate", m.envelope_rate},
          {"time_offset", m.time_offset},
          {"q_min", m.q_min},
          {"offset", m.offset},
          {"count", m.count},
          {"q_of", m.q_of},
          {"s_of", m.s_of}}}};
    std::vector<double> payload;
    payload.insert(payload.end(), m.energy.data(), m.energy.data() + m.energy.size());
    payload.insert(payload.end(), m.frame_energy.data(), m.frame_energy.data() + m.frame_energy.size());
    for (const auto& x : m.up) payload.insert(payload.end(), x.data(), x.data() + x.size());
    for (int g = 0; g < U.groups; ++g)
        for (int d = -U.bandwidth; d <= U.bandwidth; ++d) {
            if (g + d < 0 || g + d >= U.groups) continue;
            const Eigen::MatrixXcd& B = U.block(g, d);
            const double* raw = reinterpret_cast<const double*>(B.data());
            payload.insert(payload.end(), raw, raw + 2 * B.size());
        }
    write_blob(p, header, payload);
}

FloquetArtifact read_floquet_artifact(const fs::path& p) {
    Blob b = read_blob(p);
    const json& h = b.header;
    if (h.value("kind", "") != "floquet") throw IoError(p.string() + ": not a floquet artifact");
    FloquetArtifact f;
    f.key = h.at("key").get<std::string>();
    f.mu = h.at("mu").get<double>();
    f.s_center = h.at("s_center").get<double>();
    f.hbar_omega = h.at("hbar_omega").get<double>();
    f.V = h.at("V").get<double>();
    f.separatrix = h.at("separatrix").get<std::vector<double>>();
    f.n0 = h.at("window").at("n0").get<int>();
    f.K_w = h.at("window").at("K_w").get<int>();
    f.P_w = h.at("window").at("P_w").get<int>();
    f.probe.bandwidth = h.at("probe").at("bandwidth").get<int>();
    f.probe.capped = h.at("probe").at("capped").get<bool>();
    f.probe.occupancy_by_distance = h.at("probe").at("occupancy_by_distance").get<std::vector<double>>();
    f.unitarity.interior_defect = h.at("unitarity").at("interior_defect").get<double>();
    f.unitarity.boundary_defect = h.at("unitarity").at("boundary_defect").get<double>();
    f.unitarity.worst_column_norm_error = h.at("unitarity").at("worst_column_norm_error").get<double>();
    const json& mj = h.at("model");
    FloquetModel& m = f.model;
    m.hbar0 = mj.at("hbar0").get<double>();
    m.period = mj.at("period").get<double>();
    m.f0 = mj.at("f0").get<double>();
    m.omega_frame = mj.at("omega_frame").get<double>();
    m.frame_harmonics = mj.at("frame_harmonics").get<int>();
    m.envelope_rate = mj.at("envelope_rate").get<double>();
    m.time_offset = mj.at("time_offset").get<double>();
    m.q_min = mj.at("q_min").get<int>();
    m.offset = mj.at("offset").get<std::vector<int>>();
    m.count = mj.at("count").get<std::vector<int>>();
    m.q_of = mj.at("q_of").get<std::vector<int>>();
    m.s_of = mj.at("s_of").get<std::vector<int>>();
    size_t pos = 0;
    auto need = [&](size_t n) {
        if (pos + n > b.payload.size()) throw IoError(p.string() + ": truncated floquet payload");
    };
    const int dim = static_cast<int>(m.q_of.size());
    need(2 * static_cast<size_t>(dim));
    m.energy = Eigen::Map<const Eigen::VectorXd>(b.payload.data(), dim);
    m.frame_energy = Eigen::Map<const Eigen::VectorXd>(b.payload.data() + dim, dim);
    pos = 2 * static_cast<size_t>(dim);
    const int G = static_cast<int>(m.count.size());
    for (int g = 0; g + 1 < G; ++g) {
        size_t n = static_cast<size_t>(m.count[g]) * m.count[g + 1];
        need(n);
        m.up.push_back(Eigen::Map<const Eigen::MatrixXd>(b.payload.data() + pos, m.count[g], m.count[g + 1]));
        pos += n;
    }
    BandedPropagator& U = f.U;
    U.q_min = m.q_min;
    U.groups = G;
    U.bandwidth = h.at("bandwidth").get<int>();
    U.offset = m.offset;
    U.count = m.count;
    U.ode_steps = h.at("ode_steps").get<long>();
    U.blocks.resize(static_cast<size_t>(G) * (2 * U.bandwidth + 1));
    for (int g = 0; g < G; ++g)
        for (int d = -U.bandwidth; d <= U.bandwidth; ++d) {
            if (g + d < 0 || g + d >= G) continue;
            size_t n = static_cast<size_t>(m.count[g + d]) * m.count[g];
            need(2 * n);
            Eigen::MatrixXcd B(m.count[g + d], m.count[g]);
            std::copy(b.payload.data() + pos, b.payload.data() + pos + 2 * n, reinterpret_cast<double*>(B.data()));
            U.block(g, d) = std::move(B);
            pos += 2 * n;
        }
    if (pos != b.payload.size()) throw IoError(p.string() + ": trailing floquet payload");
    return f;
}

FloquetArtifact load_or_build_floquet(const RunContext& ctx, const OscillatorBasis& basis) {
    const RunConfig& c = ctx.cfg;
    json key = floquet_key(c);
    std::string h = content_hash(key);
    fs::path file = ctx.cache_dir() / ("floquet-" + short_hash(h) + ".bin");
    if (fs::exists(file)) {
        try {
            FloquetArtifact f = read_floquet_artifact(file);
            if (f.key != h) throw IoError("key mismatch");
            f.reused = true;
            ctx.note("floquet: reused " + file.filename().string());
            return f;
        } catch (const std::exception& e) {
            ctx.note(std::string("floquet: cache entry unusable (") + e.what() + "), building again");
        }
    }
    FloquetOptions fo = c.floquet;
    StationaryStates st = load_or_solve_states(ctx, basis, c.mu, fo.q_min, fo.q_max);
    DipoleBlocks blocks = dipole_blocks(basis, st, c.threads);
    FloquetArtifact f;
    f.key = h;
    f.mu = c.mu;
    f.n0 = c.n0;
    f.P_w = c.P_w;
    f.K_w = st.groups.front().window.K_w;
    f.hbar_omega = st.hbar_omega;
    for (const auto& g : st.groups) {
        QuantumPendulum qp = quantum_pendulum(basis, g, c.mu, c.n0);
        f.V = qp.V;
        f.separatrix.push_back(qp.separatrix);
    }
    const GroupStates& g0 = st.group(c.initial.q);
    QuantumPendulum qp0 = quantum_pendulum(basis, g0, c.mu, c.n0);
    if (c.s_center == "initial")
        f.s_center = choose_initial_state(g0, qp0, c.initial).mathieu;
    else if (c.s_center == "separatrix")
        f.s_center = qp0.separatrix;
    else if (c.s_center == "bottom")
        f.s_center = g0.mathieu(0);
    else
        f.s_center = std::stod(c.s_center);
    fo.s_center = f.s_center;
    DriveParams p = c.drive();
    f.model = make_floquet_model(st, blocks, p, fo);
    double t = timed([&] {
        if (fo.bandwidth == 0) {
            f.probe = choose_bandwidth(f.model, fo);
            fo.bandwidth = f.probe.bandwidth;
        } else {
            f.probe.bandwidth = fo.bandwidth;
        }
        f.U = build_evolution_matrix(f.model, fo);
    });
    f.unitarity = unitarity_defect(f.U);
    ctx.note("floquet: mu=" + label(c.mu) + " dim=" + std::to_string(f.model.dim()) + " B=" +
             std::to_string(f.U.bandwidth) + " built in " + label(t) + " s, interior defect " +
             label(f.unitarity.interior_defect));
    write_floquet_artifact(file, f);
    return f;
}

// ---------------------------------------------------------------- evolution and analysis

PacketSeries run_evolution(const RunConfig& c, const FloquetArtifact& f, InitialChoice* start) {
    InitialChoice ch = artifact_start(f, c.initial);
    if (start) *start = ch;
    SeriesOptions so;
    so.stride = c.stride;
    so.record_occupancy = true;
    so.leakage_threshold = c.floquet.leakage_threshold;
    return propagate_N(f.U, basis_state(f.model, ch.q, ch.s), c.N, so);
}

SeriesAnalysis analyze_series(const RunConfig& c, const MomentSeries& m, const PacketSeries* s, double hbar_omega) {
    SeriesAnalysis a;
    a.moments = m;
    try {
        a.localization = detect_saturation(m, c.period, c.saturation);
    } catch (const InsufficientData& e) {
        a.localization_note = e.what();
    }
    long cap = -1;
    if (a.localization && a.localization->saturated && a.localization->t0_periods > c.fit.N_min)
        cap = a.localization->t0_periods;
    try {
        a.fit = fit_quantum_D(m, hbar_omega, c.period, c.fit, cap);
    } catch (const InsufficientData& e) {
        a.fit = DiffusionFit{};
        a.fit.N_min = c.fit.N_min;
        a.fit.N_max = cap >= 0 ? std::min(c.fit.N_max, cap) : c.fit.N_max;
        if (a.localization_note.empty()) a.localization_note = e.what();
    }
    if (s && !s->occupancy.empty() && !s->N.empty()) a.profile = average_profile(*s, s->N.front(), s->N.back(), c.profile);
    return a;
}

// ---------------------------------------------------------------- series files

void write_series_csv(const fs::path& p, const MomentSeries& m, const PacketSeries& s) {
    CsvWriter w(p, {"N", "mean_q", "variance_q", "energy_variance", "norm", "edge_occupancy"});
    for (size_t i = 0; i < s.N.size(); ++i) {
        w << s.N[i] << s.mean_q[i] << s.variance_q[i] << m.energy_variance[i] << s.norm[i] << s.edge_occupancy[i];
        w.end_row();
    }
    w.close();
}

void write_occupancy_csv(const fs::path& p, const PacketSeries& s, long every) {
    CsvWriter w(p, {"N", "q", "W"});
    for (size_t i = 0; i < s.N.size() && i < s.occupancy.size(); ++i) {
        if (s.N[i] % every != 0) continue;
        const Eigen::VectorXd& W = s.occupancy[i];
        for (Eigen::Index g = 0; g < W.size(); ++g) {
            w << s.N[i] << static_cast<long>(s.q_min + g) << W(g);
            w.end_row();
        }
    }
    w.close();
}

MomentSeries read_series(const fs::path& dir) {
    fs::path p = dir / "series.csv";
    if (!fs::exists(p)) throw MissingArtifact(p, "evolve");
    CsvTable t = read_csv(p);
    MomentSeries m;
    for (double n : t.numbers("N")) m.N.push_back(std::lround(n));
    m.mean_q = t.numbers("mean_q");
    m.variance_q = t.numbers("variance_q");
    m.energy_variance = t.numbers("energy_variance");
    return m;
}

PacketSeries read_occupancy(const fs::path& dir) {
    fs::path p = dir / "occupancy.csv";
    if (!fs::exists(p)) throw MissingArtifact(p, "evolve");
    CsvTable t = read_csv(p);
    std::vector<double> N = t.numbers("N"), q = t.numbers("q"), W = t.numbers("W");
    PacketSeries s;
    if (N.empty()) return s;
    int q_min = static_cast<int>(*std::min_element(q.begin(), q.end()));
    int q_max = static_cast<int>(*std::max_element(q.begin(), q.end()));
    s.q_min = q_min;
    std::map<long, Eigen::VectorXd> by_N;
    for (size_t i = 0; i < N.size(); ++i) {
        auto& v = by_N[std::lround(N[i])];
        if (v.size() == 0) v = Eigen::VectorXd::Zero(q_max - q_min + 1);
        v(static_cast<int>(q[i]) - q_min) = W[i];
    }
    for (auto& [n, v] : by_N) {
        s.N.push_back(n);
        Moments mo = packet_moments(v, q_min);
        s.mean_q.push_back(mo.mean);
        s.variance_q.push_back(mo.variance);
        s.norm.push_back(v.sum());
        s.edge_occupancy.push_back(v(0) + (v.size() > 1 ? v(v.size() - 1) : 0.0));
        s.occupancy.push_back(v);
    }
    return s;
}

// ---------------------------------------------------------------- manifest

namespace {

json versions() {
    return {{"qad", QAD_VERSION},
            {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                          std::to_string(EIGEN_MINOR_VERSION)},
            {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
            {"openssl", OPENSSL_VERSION_TEXT},
            {"compiler", __VERSION__}};
}

}  // namespace

void write_manifest(const fs::path& dir, const Manifest& m) {
    fs::path p = dir / "manifest.json";
    json doc = json::object();
    if (fs::exists(p)) {
        try {
            doc = read_json(p);
        } catch (const IoError&) {
            doc = json::object();
        }
    }
    doc["tool"] = "qad";
    doc["versions"] = versions();
    doc["config"] = m.config;
    if (!doc.contains("steps") || !doc["steps"].is_object()) doc["steps"] = json::object();
    doc["steps"][m.subcommand] = {{"config_sha256", content_hash(m.config)},
                                  {"config", m.config},
                                  {"inputs", m.inputs},
                                  {"outputs", m.outputs},
                                  {"cache", m.cache},
                                  {"results", m.results},
                                  {"warnings", m.warnings},
                                  {"wall_seconds", m.wall_seconds}};
    doc["last_step"] = m.subcommand;
    write_json(p, doc);
}

RunConfig config_from_manifest(const fs::path& manifest_path) {
    json doc = read_json(manifest_path);
    if (!doc.contains("config")) throw IoError(manifest_path.string() + ": no config recorded");
    json full = default_config();
    merge_config(full, doc["config"]);
    return parse_config(full);
}

// ---------------------------------------------------------------- subcommands

namespace {

struct Step {
    const RunContext& ctx;
    Manifest man;

    Step(const RunContext& c, const std::string& name) : ctx(c) {
        man.subcommand = name;
        man.config = c.cfg.doc;
    }
    fs::path path(const std::string& rel) const { return ctx.out / rel; }
    void output(const std::string& rel) { man.outputs[rel] = sha256_file(path(rel)); }
    void input(const fs::path& p) {
        std::error_code ec;
        fs::path rel = fs::relative(p, ctx.out, ec);
        man.inputs[(ec ? p : rel).string()] = sha256_file(p);
    }
    void cached(const std::string& what, const CacheHit& h) {
        man.cache.push_back({{"artifact", what}, {"key", h.key}, {"reused", h.reused}});
    }
    void warn(const std::string& w) {
        man.warnings.push_back(w);
        ctx.note("warning: " + w);
    }
};

void check_valid(Step& st, const OscillatorBasis* basis) {
    ValidationReport r = validate_config(st.ctx.cfg, basis);
    if (!r.ok()) throw ValidationFailed(r);
    std::set<std::string> seen;
    for (const auto& w : st.man.warnings) seen.insert(w.get<std::string>());
    for (const auto& w : r.warnings)
        if (!seen.count(w)) st.warn(w);
}

OscillatorBasis step_basis(Step& st) {
    check_valid(st, nullptr);
    CacheHit hit;
    OscillatorBasis b = load_or_solve_basis(st.ctx, &hit);
    st.cached("basis", hit);
    check_valid(st, &b);
    return b;
}

void cmd_basis(Step& st) {
    const RunConfig& c = st.ctx.cfg;
    check_valid(st, nullptr);
    CacheHit hit;
    OscillatorBasis b = load_or_solve_basis(st.ctx, &hit);
    st.cached("basis", hit);
    check_valid(st, &b);
    {
        CsvWriter w(st.path("basis_levels.csv"), {"n", "E", "omega", "second_difference", "residual"});
        for (int n = 0; n <= b.n_max; ++n) {
            w << n << b.energies[n];
            if (n >= 1 && n < b.n_max)
                w << b.local_frequency(n) << b.second_difference(n);
            else
                w << "" << "";
            w << b.residuals[n];
            w.end_row();
        }
        w.close();
    }
    st.output("basis_levels.csv");
    {
        CsvWriter w(st.path("basis_x_band.csv"), {"n", "n2", "x"});
        for (int n = 0; n <= b.n_max; ++n)
            for (int d = 1; d <= 9 && n + d <= b.n_max; ++d) {
                w << n << n + d << b.x(n, n + d);
                w.end_row();
            }
        w.close();
    }
    st.output("basis_x_band.csv");
    write_json(st.path("basis.json"),
               {{"hbar0", b.hbar0},
                {"n_max", b.n_max},
                {"grid", {{"points", b.grid.points}, {"step", b.grid.step}, {"half_width", b.grid.half_width},
                          {"stencil_half_width", b.grid.stencil_half_width}}},
                {"content_hash", hit.key},
                {"x_band", 9}});
    st.output("basis.json");
    QuarticConstants k = classical_constants();
    double a = action_kinematics(default_I2(c.drive()), k).amplitude;
    double res = 0;
    for (double r : b.residuals) res = std::max(res, r);
    st.man.results = {{"omega_n0", b.local_frequency(c.n0)},
                      {"E_n0", b.energies[c.n0]},
                      {"second_difference_n0", b.second_difference(c.n0)},
                      {"max_residual", res},
                      {"beta", k.beta},
                      {"A", k.A},
                      {"K_half", k.k_half},
                      {"a", a}};
}

void cmd_spectrum(Step& st) {
    const RunConfig& c = st.ctx.cfg;
    OscillatorBasis b = step_basis(st);
    CacheHit hit;
    StationaryStates states = load_or_solve_states(st.ctx, b, c.mu, c.spectrum_q_min, c.spectrum_q_max, &hit);
    st.cached("states", hit);
    LayerBand band;
    LayerWidth lw;
    if (c.mu > 0) {
        CacheHit lh;
        lw = load_or_measure_layer(st.ctx, c.drive(), &lh);
        st.cached("layer", lh);
        band = {lw.V, lw.w_inner, lw.w_outer};
    }
    std::vector<SeparatrixCount> counts;
    for (const auto& g : states.groups) {
        SeparatrixCount sc;
        sc.q = g.q;
        if (c.mu == 0 || band.valid()) sc = count_separatrix_states(b, g, c.mu, c.n0, band);
        counts.push_back(sc);
    }
    {
        CsvWriter w(st.path("spectrum.csv"), {"q", "s", "E", "E_M", "e", "class", "exchange", "mean_p"});
        for (size_t gi = 0; gi < states.groups.size(); ++gi) {
            const auto& g = states.groups[gi];
            for (int i = 0; i < g.size(); ++i) {
                std::string cls = counts[gi].classes.empty() ? "" : to_string(counts[gi].classes[i]);
                w << g.q << g.s[i] << g.energies(i) << g.mathieu(i) << g.energies(i) / states.hbar_omega << cls
                  << g.exchange[i] << g.mean_p(i);
                w.end_row();
            }
        }
        w.close();
    }
    st.output("spectrum.csv");
    {
        CsvWriter w(st.path("eigenvectors.csv"), {"q", "s", "k", "p", "prob"});
        for (int q : c.dump_groups) {
            if (q < states.q_min() || q > states.q_max()) {
                st.warn("spectrum.dump_groups: q=" + std::to_string(q) + " outside the spectrum range");
                continue;
            }
            const auto& g = states.group(q);
            for (int i = 0; i < g.size(); ++i)
                for (size_t r = 0; r < g.index.size(); ++r) {
                    w << g.q << g.s[i] << g.index[r].k << g.index[r].p << g.vectors(static_cast<Eigen::Index>(r), i) *
                                                                           g.vectors(static_cast<Eigen::Index>(r), i);
                    w.end_row();
                }
        }
        w.close();
    }
    st.output("eigenvectors.csv");
    {
        DipoleBlocks blocks = dipole_blocks(b, states, c.threads);
        CsvWriter w(st.path("dipole.csv"), {"q", "s", "s2", "value"});
        for (int q = states.q_min(); q < states.q_max(); ++q) {
            const Eigen::MatrixXd& X = blocks.block(q);
            const auto& lo = states.group(q);
            const auto& hi = states.group(q + 1);
            for (Eigen::Index i = 0; i < X.rows(); ++i)
                for (Eigen::Index j = 0; j < X.cols(); ++j) {
                    w << q << lo.s[i] << hi.s[j] << X(i, j);
                    w.end_row();
                }
        }
        w.close();
    }
    st.output("dipole.csv");
    {
        CsvWriter w(st.path("separatrix.csv"),
                    {"q", "V", "hbar_omega_t", "separatrix", "w_inner", "w_outer", "M_s", "theory"});
        for (size_t gi = 0; gi < states.groups.size(); ++gi) {
            const auto& g = states.groups[gi];
            QuantumPendulum qp = quantum_pendulum(b, g, c.mu, c.n0);
            double scale = band.valid() ? qp.V / band.V : 0.0;
            w << g.q << qp.V << qp.hbar_omega_t << qp.separatrix << band.w_inner * scale << band.w_outer * scale
              << counts[gi].M_s << counts[gi].theory;
            w.end_row();
        }
        w.close();
    }
    st.output("separatrix.csv");
    const auto& g0 = states.groups[states.groups.size() / 2];
    double target = c.hbar0 * classical_constants().beta * std::sqrt(c.mu);
    NonlinearityReport nl = small_nonlinearity_check(b, g0.window);
    json shifts = json::array();
    for (size_t gi = 0; gi + 1 < states.groups.size(); ++gi)
        shifts.push_back((states.groups[gi + 1].energies(0) - states.groups[gi].energies(0)) / states.hbar_omega);
    st.man.results = {{"K_w", g0.window.K_w},
                      {"P_w", g0.window.P_w},
                      {"hbar_omega", states.hbar_omega},
                      {"second_difference", states.e2},
                      {"group_sizes", [&] {
                           json s = json::array();
                           for (const auto& g : states.groups) s.push_back(g.size());
                           return s;
                       }()},
                      {"lowest_spacing_over_hbar_beta_sqrt_mu",
                       target > 0 ? (g0.energies(1) - g0.energies(0)) / target : 0.0},
                      {"ground_shift_over_hbar_omega", shifts},
                      {"layer", {{"V", lw.V}, {"w_inner", lw.w_inner}, {"w_outer", lw.w_outer}}},
                      {"nonlinearity", {{"worst_ratio", nl.worst_ratio}, {"worst_k", nl.worst_k},
                                        {"worst_p", nl.worst_p}, {"valid_half_width", nl.valid_half_width},
                                        {"warning", nl.warning}}}};
}

void cmd_classical_poincare(Step& st) {
    const RunConfig& c = st.ctx.cfg;
    check_valid(st, nullptr);
    DriveParams p = c.drive();
    double I2_0 = default_I2(p);
    ClassicalState s0 = c.classical_start;
    if (c.classical_default_I2) s0.I2 = I2_0;
    StepPolicy step = c.step;
    step.samples_per_period = 1;
    step.keep_samples = true;
    Trajectory tr = integrate(s0, p, c.poincare_periods * p.period, step);
    {
        CsvWriter w(st.path("trajectory.csv"), {"t", "I1", "theta1", "I2", "theta2", "H"});
        for (size_t i = 0; i < tr.states.size(); ++i) {
            const auto& s = tr.states[i];
            w << tr.times[i] << s.I1 << s.theta1 << s.I2 << s.theta2 << tr.energy[i];
            w.end_row();
        }
        w.close();
    }
    st.output("trajectory.csv");
    const std::vector<double> starts = {-std::numbers::pi, -0.75 * std::numbers::pi, -0.5 * std::numbers::pi,
                                        -0.25 * std::numbers::pi};
    const int ns = static_cast<int>(c.poincare_I2_factors.size()), nt = static_cast<int>(starts.size());
    std::vector<std::vector<SectionPoint>> pts(static_cast<size_t>(ns * nt));
    parallel_for(ns * nt, c.threads, [&](int i) {
        ClassicalState s;
        s.I2 = I2_0 * c.poincare_I2_factors[i / nt];
        s.theta1 = starts[i % nt];
        StepPolicy sp = c.step;
        sp.keep_samples = false;
        sp.record_section = true;
        Trajectory t = integrate(s, p, c.poincare_periods * p.period, sp);
        pts[i] = t.section;
    });
    {
        CsvWriter w(st.path("poincare.csv"), {"slice", "I2_start", "start_theta1", "theta1", "I1", "I2"});
        for (int i = 0; i < ns * nt; ++i)
            for (const auto& sp : pts[i]) {
                w << i / nt << I2_0 * c.poincare_I2_factors[i / nt] << starts[i % nt] << sp.theta1 << sp.I1 << sp.I2;
                w.end_row();
            }
        w.close();
    }
    st.output("poincare.csv");
    ResonanceWidths rw = resonance_widths(p, action_kinematics(I2_0, classical_constants()).amplitude);
    st.man.results = {{"I2_default", I2_0},
                      {"omega_tilde", rw.omega_tilde},
                      {"delta_omega", rw.delta_omega},
                      {"delta_omega_drive", rw.delta_omega_drive},
                      {"lambda", rw.lambda},
                      {"accepted_steps", tr.accepted_steps}};
}

void cmd_classical_scan(Step& st) {
    const RunConfig& c = st.ctx.cfg;
    check_valid(st, nullptr);
    DriveParams p = c.drive();
    std::vector<PhaseScanRow> rows = scan_initial_phase(p, c.scan_theta1, c.scan);
    {
        CsvWriter w(st.path("scan.csv"), {"theta1", "D2", "D2_err", "D3", "D3_err", "ratio", "verdict", "T_a"});
        for (const auto& r : rows) {
            w << r.theta1 << r.d2.D << r.d2.stderr_D << r.d3.D << r.d3.stderr_D
              << (r.d3.D > 0 ? r.d2.D / r.d3.D : std::numeric_limits<double>::infinity()) << to_string(r.verdict)
              << r.T_a;
            w.end_row();
        }
        w.close();
    }
    st.output("scan.csv");
    double a = action_kinematics(default_I2(p), classical_constants()).amplitude;
    double T_a = 0;
    for (const auto& r : rows)
        if (std::abs(std::abs(r.theta1) - std::numbers::pi) < 1e-9) T_a = r.T_a;
    if (c.mu > 0) {
        ResonanceWidths rw = resonance_widths(p, a);
        TheoreticalDiffusion th{};
        if (T_a > 0) th = theoretical_diffusion(p, a, c.nu, T_a);
        CsvWriter w(st.path("scan_theory.csv"), {"mu", "f0", "lambda", "nu", "T_a", "w_s", "D_I"});
        w << c.mu << c.f0 << rw.lambda << c.nu << T_a << th.w_s << th.D_I;
        w.end_row();
        w.close();
        st.output("scan_theory.csv");

        CacheHit lh;
        LayerWidth lw = load_or_measure_layer(st.ctx, p, &lh);
        st.cached("layer", lh);
        CsvWriter lwr(st.path("layer.csv"), {"side", "h_over_V", "I1", "theta1", "D2", "D2_err", "D3", "D3_err", "chaotic"});
        for (const auto& pt : lw.points) {
            lwr << (pt.h < lw.V ? "inner" : "outer") << pt.h / lw.V << pt.I1 << pt.theta1 << pt.d2.D << pt.d2.stderr_D
                << pt.d3.D << pt.d3.stderr_D << (pt.chaotic ? 1 : 0);
            lwr.end_row();
        }
        lwr.close();
        st.output("layer.csv");
        st.man.results["layer"] = {{"V", lw.V}, {"I2", lw.I2}, {"w_inner", lw.w_inner}, {"w_outer", lw.w_outer}};
    }
    {
        CsvWriter w(st.path("classical_D.csv"),
                    {"mu", "inv_sqrt_mu", "f0", "D", "D_err", "D3", "D3_err", "verdict", "T_a"});
        for (double mu : c.sweep_mu) {
            CacheHit h;
            ClassicalD d = load_or_measure_classical_D(st.ctx, c.drive_at(mu, c.f0_ratio * mu), &h);
            st.cached("classical_D", h);
            w << mu << 1.0 / std::sqrt(mu) << d.f0 << d.d2.D << d.d2.stderr_D << d.d3.D << d.d3.stderr_D
              << to_string(d.verdict) << d.T_a;
            w.end_row();
        }
        w.close();
    }
    st.output("classical_D.csv");
    st.man.results["T_a"] = T_a;
}

void cmd_floquet_build(Step& st) {
    OscillatorBasis b = step_basis(st);
    FloquetArtifact f = load_or_build_floquet(st.ctx, b);
    st.man.cache.push_back({{"artifact", "floquet"}, {"key", f.key}, {"reused", f.reused}});
    write_floquet_artifact(st.path("U_blocks.bin"), f);
    st.output("U_blocks.bin");
    {
        CsvWriter w(st.path("bandwidth_probe.csv"), {"distance", "occupancy"});
        for (size_t d = 0; d < f.probe.occupancy_by_distance.size(); ++d) {
            w << static_cast<long>(d) << f.probe.occupancy_by_distance[d];
            w.end_row();
        }
        w.close();
    }
    st.output("bandwidth_probe.csv");
    if (f.probe.capped) st.warn("floquet bandwidth capped at " + std::to_string(f.probe.bandwidth));
    st.man.results = {{"dim", f.model.dim()},
                      {"groups", f.model.groups()},
                      {"bandwidth", f.U.bandwidth},
                      {"K_w", f.K_w},
                      {"s_center", f.s_center},
                      {"interior_defect", f.unitarity.interior_defect},
                      {"boundary_defect", f.unitarity.boundary_defect},
                      {"worst_column_norm_error", f.unitarity.worst_column_norm_error},
                      {"ode_steps", f.U.ode_steps}};
}

FloquetArtifact load_built_floquet(Step& st) {
    fs::path p = st.path("U_blocks.bin");
    if (!fs::exists(p)) throw MissingArtifact(p, "floquet-build");
    FloquetArtifact f = read_floquet_artifact(p);
    std::string want = content_hash(floquet_key(st.ctx.cfg));
    if (f.key != want)
        throw MissingArtifact(p.string() + " (built for a different configuration)", "floquet-build");
    st.input(p);
    return f;
}

void cmd_evolve(Step& st) {
    const RunConfig& c = st.ctx.cfg;
    check_valid(st, nullptr);
    FloquetArtifact f = load_built_floquet(st);
    InitialChoice start;
    PacketSeries s;
    double t = timed([&] { s = run_evolution(c, f, &start); });
    st.ctx.note("evolve: " + std::to_string(c.N) + " periods in " + label(t) + " s");
    MomentSeries m = moment_series(s, f.hbar_omega);
    write_series_csv(st.path("series.csv"), m, s);
    st.output("series.csv");
    write_occupancy_csv(st.path("occupancy.csv"), s, c.occupancy_stride);
    st.output("occupancy.csv");
    if (s.leakage_flag) st.warn("packet reached the window edge (edge occupancy above the leakage threshold)");
    write_json(st.path("evolve.json"), {{"mu", c.mu},
                                        {"f0", c.f0},
                                        {"period", c.period},
                                        {"hbar_omega", f.hbar_omega},
                                        {"start", {{"kind", start.kind}, {"q", start.q}, {"s", start.s},
                                                   {"mathieu", start.mathieu}, {"separatrix", start.separatrix}}},
                                        {"N", c.N},
                                        {"leakage_flag", s.leakage_flag},
                                        {"final_norm", s.norm.back()}});
    st.output("evolve.json");
    st.man.results = {{"start_q", start.q},         {"start_s", start.s},         {"final_norm", s.norm.back()},
                      {"final_variance", s.variance_q.back()}, {"leakage_flag", s.leakage_flag}};
}

void cmd_qe_stats(Step& st) {
    const RunConfig& c = st.ctx.cfg;
    OscillatorBasis b = step_basis(st);
    CacheHit hit;
    StationaryStates states = load_or_solve_states(st.ctx, b, c.mu, c.qe_q_min, c.qe_q_max, &hit);
    st.cached("states", hit);
    DipoleBlocks blocks = dipole_blocks(b, states, c.threads);
    FloquetOptions fo = c.floquet;
    fo.q_min = c.qe_q_min;
    fo.q_max = c.qe_q_max;
    fo.s_band = c.qe_s_band;
    int q0 = std::clamp(c.initial.q, c.qe_q_min, c.qe_q_max);
    const GroupStates& g0 = states.group(q0);
    QuantumPendulum qp = quantum_pendulum(b, g0, c.mu, c.n0);
    fo.s_center = c.s_center == "bottom" ? g0.mathieu(0) : qp.separatrix;
    FloquetModel m = make_floquet_model(states, blocks, c.drive(), fo);
    fo.bandwidth = std::max(1, m.groups() - 1);
    BandedPropagator U = build_evolution_matrix(m, fo);
    FloquetDecomposition d;
    try {
        d = eigendecompose(U.dense(), c.hbar0, c.period);
    } catch (const NonUnitarityError& e) {
        throw std::runtime_error(std::string("qe-stats: ") + e.what() +
                                 " (the small window leaks; widen qe.q_min/q_max or lower f0)");
    }
    std::vector<StateClass> classes;
    bool tagged = false;
    if (c.mu > 0) {
        CacheHit lh;
        LayerWidth lw = load_or_measure_layer(st.ctx, c.drive(), &lh);
        st.cached("layer", lh);
        LayerBand band{lw.V, lw.w_inner, lw.w_outer};
        std::map<int, SeparatrixCount> byq;
        for (const auto& g : states.groups) byq[g.q] = count_separatrix_states(b, g, c.mu, c.n0, band);
        for (int a = 0; a < m.dim(); ++a) {
            const GroupStates& g = states.group(m.q_of[a]);
            classes.push_back(byq[g.q].classes[g.column_of(m.s_of[a])]);
        }
        tagged = true;
    }
    std::vector<QeScatterRow> rows = qe_scatter(d, m, tagged ? &classes : nullptr);
    {
        CsvWriter w(st.path("quasienergies.csv"), {"Q", "quasienergy", "e", "mean_q", "sigma_q", "dominant_q",
                                                   "dominant_s", "dominant_weight", "class"});
        for (const auto& r : rows) {
            w << r.Q << r.quasienergy << r.quasienergy / states.hbar_omega << r.mean_q << r.sigma_q << r.dominant_q
              << r.dominant_s << r.dominant_weight << r.state_class;
            w.end_row();
        }
        w.close();
    }
    st.output("quasienergies.csv");
    double smax = 0;
    for (const auto& r : rows) smax = std::max(smax, r.sigma_q);
    st.man.results = {{"dim", m.dim()}, {"schur_offdiag", d.schur_offdiag}, {"max_sigma_q", smax},
                      {"s_center", fo.s_center}};
}

json fit_row(const std::string& q, double v, double err, double corr, double lo, double hi) {
    return {{"quantity", q}, {"value", v}, {"stderr", err}, {"correlation", corr}, {"window_min", lo}, {"window_max", hi}};
}

void cmd_analyze(Step& st) {
    const RunConfig& c = st.ctx.cfg;
    check_valid(st, nullptr);
    fs::path meta = st.path("evolve.json");
    if (!fs::exists(meta)) throw MissingArtifact(meta, "evolve");
    json ev = read_json(meta);
    st.input(meta);
    MomentSeries m = read_series(st.ctx.out);
    st.input(st.path("series.csv"));
    PacketSeries occ = read_occupancy(st.ctx.out);
    st.input(st.path("occupancy.csv"));
    double hw = ev.at("hbar_omega").get<double>();
    double mu = ev.at("mu").get<double>();
    SeriesAnalysis a = analyze_series(c, m, &occ, hw);
    if (!a.localization_note.empty()) st.warn(a.localization_note);
    std::vector<json> fits;
    fits.push_back(fit_row("D_quantum", a.fit.D, a.fit.stderr_D, a.fit.correlation, a.fit.N_min, a.fit.N_max));
    fits.push_back(fit_row("variance_slope", a.fit.line.slope, a.fit.line.slope_err, a.fit.correlation, a.fit.N_min,
                           a.fit.N_max));
    if (a.localization) {
        const auto& L = *a.localization;
        double N_end = m.N.empty() ? 0 : m.N.back();
        fits.push_back(fit_row("t0_periods", L.t0_periods, 0, 0, 0, N_end));
        fits.push_back(fit_row("mean_variance", L.mean_variance, 0, 0, 2.0 * L.t0_periods, N_end));
        fits.push_back(fit_row("oscillation_periods", L.oscillation_periods, 0, 0, 2.0 * L.t0_periods, N_end));
        fits.push_back(fit_row("initial_slope", L.initial_slope, 0, 0, c.fit.N_min, c.fit.N_max));
    }
    if (a.profile) {
        const auto& P = *a.profile;
        fits.push_back(fit_row("l_s", P.l_s, 0, P.correlation, occ.N.front(), occ.N.back()));
        fits.push_back(fit_row("l_left", P.left.length, 0, P.left.correlation, occ.N.front(), occ.N.back()));
        fits.push_back(fit_row("l_right", P.right.length, 0, P.right.correlation, occ.N.front(), occ.N.back()));
    }
    {
        CsvWriter w(st.path("fits.csv"), {"quantity", "value", "stderr", "correlation", "window_min", "window_max"});
        for (const auto& f : fits) {
            w << f["quantity"].get<std::string>() << f["value"].get<double>() << f["stderr"].get<double>()
              << f["correlation"].get<double>() << f["window_min"].get<double>() << f["window_max"].get<double>();
            w.end_row();
        }
        w.close();
    }
    st.output("fits.csv");
    {
        CsvWriter w(st.path("quantum_D.csv"), {"mu", "inv_sqrt_mu", "f0", "D", "D_err", "correlation", "diffusive",
                                               "N_min", "N_max"});
        w << mu << (mu > 0 ? 1.0 / std::sqrt(mu) : std::numeric_limits<double>::infinity()) << ev.at("f0").get<double>()
          << a.fit.D << a.fit.stderr_D << a.fit.correlation << (a.fit.diffusive ? 1 : 0) << a.fit.N_min << a.fit.N_max;
        w.end_row();
        w.close();
    }
    st.output("quantum_D.csv");
    {
        CsvWriter w(st.path("localization.csv"), {"mu", "inv_sqrt_mu", "saturated", "t0_periods", "mean_variance",
                                                  "oscillation_periods", "initial_slope"});
        if (a.localization) {
            const auto& L = *a.localization;
            w << mu << (mu > 0 ? 1.0 / std::sqrt(mu) : std::numeric_limits<double>::infinity())
              << (L.saturated ? 1 : 0) << L.t0_periods << L.mean_variance << L.oscillation_periods << L.initial_slope;
            w.end_row();
        }
        w.close();
    }
    st.output("localization.csv");
    if (a.profile) {
        CsvWriter w(st.path("profile.csv"), {"q", "W"});
        for (Eigen::Index i = 0; i < a.profile->W.size(); ++i) {
            w << static_cast<long>(a.profile->q_min + i) << a.profile->W(i);
            w.end_row();
        }
        w.close();
        st.output("profile.csv");
    }
    st.man.results = {{"diffusive", a.fit.diffusive}, {"D", a.fit.D}, {"correlation", a.fit.correlation}};
    if (a.localization) {
        st.man.results["saturated"] = a.localization->saturated;
        st.man.results["t0_periods"] = a.localization->t0_periods;
        st.man.results["mean_variance"] = a.localization->mean_variance;
    }
    if (a.profile) st.man.results["l_s"] = a.profile->l_s;
}

std::vector<DPoint> read_D_table(const fs::path& p, const std::string& producer, bool only_diffusive) {
    if (!fs::exists(p)) throw MissingArtifact(p, producer);
    CsvTable t = read_csv(p);
    std::vector<DPoint> out;
    for (size_t r = 0; r < t.rows.size(); ++r) {
        if (only_diffusive && t.number(r, "diffusive") == 0) continue;
        out.push_back({t.number(r, "mu"), t.number(r, "D"), t.number(r, "D_err")});
    }
    return out;
}

void write_scaling_row(CsvWriter& w, const std::string& series, const std::vector<double>& mu,
                       const std::vector<double>& v) {
    std::vector<double> m, y;
    for (size_t i = 0; i < mu.size(); ++i)
        if (mu[i] > 0 && v[i] > 0) {
            m.push_back(mu[i]);
            y.push_back(v[i]);
        }
    LineFit f;
    if (m.size() >= 4) {
        f = scaling_fit(m, y);
    } else if (m.size() >= 2) {
        std::vector<double> x, ly;
        for (size_t i = 0; i < m.size(); ++i) {
            x.push_back(1.0 / std::sqrt(m[i]));
            ly.push_back(std::log(y[i]));
        }
        f = linear_fit(x, ly);
    } else {
        f.points = static_cast<int>(m.size());
    }
    w << series << f.slope << f.slope_err << f.intercept << f.correlation << static_cast<long>(f.points);
    w.end_row();
}

void cmd_compare(Step& st) {
    check_valid(st, nullptr);
    fs::path cp = st.path("classical_D.csv"), qp = st.path("quantum_D.csv");
    std::vector<DPoint> cl = read_D_table(cp, "classical-scan", false);
    st.input(cp);
    if (!fs::exists(qp)) throw MissingArtifact(qp, "analyze");
    CsvTable qt = read_csv(qp);
    st.input(qp);
    std::vector<DPoint> qu;
    for (size_t r = 0; r < qt.rows.size(); ++r)
        qu.push_back({qt.number(r, "mu"), qt.number(r, "diffusive") != 0 ? qt.number(r, "D") : 0.0,
                      qt.number(r, "D_err")});
    Comparison cmp = compare_classical_quantum(cl, qu);
    {
        CsvWriter w(st.path("comparison.csv"), {"mu", "inv_sqrt_mu", "D_classical", "D_classical_err", "D_quantum",
                                                "D_quantum_err", "ratio", "ratio_err", "weaker"});
        for (const auto& r : cmp.rows) {
            w << r.mu << r.inv_sqrt_mu << r.D_classical << r.err_classical << r.D_quantum << r.err_quantum << r.ratio
              << r.ratio_err << (r.weaker ? 1 : 0);
            w.end_row();
        }
        w.close();
    }
    st.output("comparison.csv");
    {
        CsvWriter w(st.path("scaling.csv"), {"series", "slope", "slope_err", "intercept", "correlation", "points"});
        std::vector<double> mu, dc, dq;
        for (const auto& r : cmp.rows) {
            mu.push_back(r.mu);
            dc.push_back(r.D_classical);
            dq.push_back(r.D_quantum);
        }
        write_scaling_row(w, "log_D_classical", mu, dc);
        write_scaling_row(w, "log_D_quantum", mu, dq);
        fs::path lp = st.path("localization.csv");
        if (fs::exists(lp)) {
            CsvTable lt = read_csv(lp);
            st.input(lp);
            std::vector<double> lm, lv;
            for (size_t r = 0; r < lt.rows.size(); ++r)
                if (lt.number(r, "saturated") != 0) {
                    lm.push_back(lt.number(r, "mu"));
                    lv.push_back(lt.number(r, "mean_variance"));
                }
            write_scaling_row(w, "log_mean_variance", lm, lv);
        }
        w.close();
    }
    st.output("scaling.csv");
    st.man.results = {{"all_weaker", cmp.all_weaker}, {"rows", cmp.rows.size()}};
}

// ---------------------------------------------------------------- pipeline

void run_step(const std::string& name, const RunContext& ctx);

RunContext child(const RunContext& parent, const RunConfig& cfg, const fs::path& sub) {
    RunContext c;
    c.cfg = cfg;
    c.out = parent.out / sub;
    c.cache = parent.cache_dir();
    c.log = parent.log;
    fs::create_directories(c.out);
    return c;
}

std::string mu_dir(double mu) { return "mu_" + format_number(mu); }

void append_table(const fs::path& src, CsvWriter& w, const std::vector<std::string>& prefix,
                  size_t columns) {
    CsvTable t = read_csv(src);
    for (const auto& row : t.rows) {
        for (const auto& p : prefix) w << p;
        for (size_t i = 0; i < columns && i < row.size(); ++i) w << row[i];
        w.end_row();
    }
}

void cmd_pipeline(Step& st) {
    const RunContext& ctx = st.ctx;
    const RunConfig& c = ctx.cfg;
    check_valid(st, nullptr);
    for (const char* name : {"basis", "spectrum", "classical-poincare", "classical-scan"}) run_step(name, ctx);

    // quantum runs at the configured mu
    for (const char* name : {"floquet-build", "evolve", "qe-stats", "analyze"}) run_step(name, ctx);

    // separatrix-start sweep over mu
    {
        CsvWriter qd(st.path("quantum_D.csv.part2"), {"mu", "inv_sqrt_mu", "f0", "D", "D_err", "correlation",
                                                      "diffusive", "N_min", "N_max"});
        CsvWriter lz(st.path("localization.csv.part2"), {"mu", "inv_sqrt_mu", "saturated", "t0_periods",
                                                          "mean_variance", "oscillation_periods", "initial_slope"});
        for (double mu : c.sweep_mu) {
            RunContext sub = child(ctx, c.with_physics(mu), fs::path("sweep") / mu_dir(mu));
            for (const char* name : {"floquet-build", "evolve", "analyze"}) run_step(name, sub);
            append_table(sub.out / "quantum_D.csv", qd, {}, 9);
            append_table(sub.out / "localization.csv", lz, {}, 7);
        }
        qd.close();
        lz.close();
        fs::rename(st.path("quantum_D.csv.part2"), st.path("quantum_D.csv"));
        fs::rename(st.path("localization.csv.part2"), st.path("localization.csv"));
        st.output("quantum_D.csv");
        st.output("localization.csv");
    }

    // three initial states
    {
        RunConfig base = c.with_physics(c.initial_mu);
        CsvWriter w(st.path("initial_states.csv"), {"kind", "N", "mean_q", "variance_q"});
        for (const char* kind : {"center", "above", "separatrix"}) {
            RunConfig rc = base;
            rc.doc["evolve"]["initial"]["kind"] = kind;
            rc = parse_config(rc.doc);
            rc.threads = c.threads;
            rc.floquet.threads = c.threads;
            RunContext sub = child(ctx, rc, fs::path("initial") / kind);
            for (const char* name : {"floquet-build", "evolve"}) run_step(name, sub);
            MomentSeries m = read_series(sub.out);
            for (size_t i = 0; i < m.N.size(); ++i) {
                w << kind << m.N[i] << m.mean_q[i] << m.variance_q[i];
                w.end_row();
            }
        }
        w.close();
        st.output("initial_states.csv");
    }

    // quasienergy scatter at the listed mu
    {
        CsvWriter w(st.path("qe_scatter.csv"), {"mu", "Q", "quasienergy", "e", "mean_q", "sigma_q", "dominant_q",
                                                "dominant_s", "dominant_weight", "class"});
        for (double mu : c.qe_mu) {
            RunContext sub = child(ctx, c.with_physics(mu), fs::path("qe") / mu_dir(mu));
            run_step("qe-stats", sub);
            append_table(sub.out / "quasienergies.csv", w, {format_number(mu)}, 9);
        }
        w.close();
        st.output("qe_scatter.csv");
    }

    // time-averaged profiles
    {
        CsvWriter w(st.path("profiles.csv"), {"run", "mu", "f0", "q", "W"});
        CsvWriter fw(st.path("profile_fits.csv"), {"run", "mu", "f0", "l_s", "correlation", "l_left", "l_right",
                                                   "points_left", "points_right", "valid"});
        for (size_t i = 0; i < c.profile_runs.size(); ++i) {
            const auto& pr = c.profile_runs[i];
            RunContext sub = child(ctx, c.with_physics(pr.mu, pr.f0), fs::path("profiles") / ("run_" + std::to_string(i)));
            for (const char* name : {"floquet-build", "evolve", "analyze"}) run_step(name, sub);
            PacketSeries occ = read_occupancy(sub.out);
            ProfileFit pf = average_profile(occ, occ.N.front(), occ.N.back(), c.profile);
            for (Eigen::Index g = 0; g < pf.W.size(); ++g) {
                w << static_cast<long>(i) << pr.mu << pr.f0 << static_cast<long>(pf.q_min + g) << pf.W(g);
                w.end_row();
            }
            fw << static_cast<long>(i) << pr.mu << pr.f0 << pf.l_s << pf.correlation << pf.left.length
               << pf.right.length << pf.left.points << pf.right.points << (pf.valid ? 1 : 0);
            fw.end_row();
        }
        w.close();
        fw.close();
        st.output("profiles.csv");
        st.output("profile_fits.csv");
    }

    // Shuryak border
    {
        OscillatorBasis b = load_or_solve_basis(ctx);
        CsvWriter w(st.path("shuryak.csv"), {"mu", "inv_sqrt_mu", "V", "w_inner", "w_outer", "M_s", "theory"});
        for (double mu : c.shuryak_mu) {
            RunConfig rc = c.with_physics(mu);
            RunContext sub = child(ctx, rc, fs::path("shuryak") / mu_dir(mu));
            LayerWidth lw = load_or_measure_layer(sub, rc.drive());
            StationaryStates s = load_or_solve_states(sub, b, mu, 0, 0);
            SeparatrixCount sc = count_separatrix_states(b, s.group(0), mu, c.n0, {lw.V, lw.w_inner, lw.w_outer});
            w << mu << 1.0 / std::sqrt(mu) << lw.V << lw.w_inner << lw.w_outer << sc.M_s << sc.theory;
            w.end_row();
        }
        w.close();
        st.output("shuryak.csv");
    }

    run_step("compare", ctx);
    st.man.results = {{"sweep", c.sweep_mu}, {"profile_runs", c.profile_runs.size()}};
}

using Command = void (*)(Step&);

const std::vector<std::pair<std::string, Command>>& commands() {
    static const std::vector<std::pair<std::string, Command>> table = {
        {"basis", cmd_basis},
        {"spectrum", cmd_spectrum},
        {"classical-poincare", cmd_classical_poincare},
        {"classical-scan", cmd_classical_scan},
        {"floquet-build", cmd_floquet_build},
        {"evolve", cmd_evolve},
        {"qe-stats", cmd_qe_stats},
        {"analyze", cmd_analyze},
        {"compare", cmd_compare},
        {"pipeline", cmd_pipeline}};
    return table;
}

void run_step(const std::string& name, const RunContext& ctx) {
    Command fn = nullptr;
    for (const auto& [n, f] : commands())
        if (n == name) fn = f;
    if (!fn) throw std::invalid_argument("unknown subcommand '" + name + "'");
    fs::create_directories(ctx.out);
    Step st(ctx, name);
    ctx.note("== " + name + " -> " + ctx.out.string());
    st.man.wall_seconds = timed([&] { fn(st); });
    write_manifest(ctx.out, st.man);
}

}  // namespace

std::vector<std::string> subcommand_names() {
    std::vector<std::string> out;
    for (const auto& [n, f] : commands()) out.push_back(n);
    return out;
}

int run_subcommand(const std::string& name, const RunContext& ctx) {
    fs::create_directories(ctx.out);
    DirectoryLock lock(ctx.out);
    run_step(name, ctx);
    return 0;
}

}  // namespace qad
