// Acceptance suite: one PASS/FAIL line per criterion.
// QAD_ACCEPTANCE_DIR sets the work directory (cache and per-run outputs are reused between runs).

#include "qad/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <sstream>

using namespace qad;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int digits = 4) {
    std::ostringstream s;
    s.precision(digits);
    s << v;
    return s.str();
}

std::string join(const std::vector<std::string>& parts) {
    std::string out;
    for (size_t i = 0; i < parts.size(); ++i) out += (i ? "; " : "") + parts[i];
    return out;
}

constexpr double kHbar = 1.77321e-5;
constexpr int kN0 = 446;

// quick quantum window, classical runs at full length
RunConfig acceptance_config() {
    ConfigSources src;
    src.preset = "quick";
    src.sets = {"evolve.N=10000",
                "evolve.occupancy_stride=1",
                "analysis.saturation.min_periods=10000",
                "classical.scan.periods_d2=100000",
                "classical.scan.periods_d3=300000",
                "classical.diffusion.periods_d2=100000",
                "classical.diffusion.periods_d3=300000",
                "classical.layer.points_per_side=8",
                "classical.layer.periods_d2=100000",
                "classical.layer.periods_d3=300000"};
    return load_config(src);
}

struct Suite {
    RunContext ctx;
    OscillatorBasis basis;
    bool have_basis = false;

    const OscillatorBasis& paper_basis() {
        if (!have_basis) {
            basis = load_or_solve_basis(ctx);
            have_basis = true;
        }
        return basis;
    }

    RunContext at(double mu, double f0) const {
        RunContext c = ctx;
        c.cfg = ctx.cfg.with_physics(mu, f0);
        return c;
    }

    // separatrix-start runs, keyed by (mu, f0)
    std::map<std::pair<double, double>, SeriesAnalysis> runs;
    std::map<std::pair<double, double>, bool> leaked;

    const SeriesAnalysis& quantum_run(double mu, double f0) {
        auto key = std::make_pair(mu, f0);
        auto it = runs.find(key);
        if (it != runs.end()) return it->second;
        RunContext c = at(mu, f0);
        FloquetArtifact f = load_or_build_floquet(c, paper_basis());
        PacketSeries s = run_evolution(c.cfg, f);
        MomentSeries m = moment_series(s, f.hbar_omega);
        leaked[key] = s.leakage_flag;
        SeriesAnalysis a = analyze_series(c.cfg, m, &s, f.hbar_omega);
        c.note("run mu=" + fmt(mu) + " f0=" + fmt(f0) + ": D=" + fmt(a.fit.D) + " r=" + fmt(a.fit.correlation) +
               (a.localization ? " t0=" + std::to_string(a.localization->t0_periods) : " no saturation report"));
        return runs.emplace(key, std::move(a)).first->second;
    }
};

Outcome constants_chain(Suite&) {
    QuarticConstants k = classical_constants();
    double a = action_kinematics(action_for_frequency(0.23035, k), k).amplitude;
    bool ok = std::abs(k.beta - 0.8472) <= 5e-4 && std::abs(a - 0.2719) <= 5e-4;
    return {ok, "beta=" + fmt(k.beta, 6) + " (0.8472 +- 5e-4), a=" + fmt(a, 6) + " (0.2719 +- 5e-4)"};
}

Outcome basis_consistency(Suite& s) {
    const OscillatorBasis& b = s.paper_basis();
    QuarticConstants k = classical_constants();
    double w = b.local_frequency(kN0);
    double worst = 0;
    int worst_n = 0;
    for (int n = 10; n <= b.n_max; ++n) {
        double wkb = k.A * std::pow(kHbar * (n + 0.5), 4.0 / 3.0);
        double rel = std::abs(b.energies[n] / wkb - 1.0);
        if (rel > worst) {
            worst = rel;
            worst_n = n;
        }
    }
    bool ok = std::abs(w / 0.2304 - 1.0) <= 0.005 && worst <= 0.01;
    return {ok, "w_446=" + fmt(w, 6) + " (0.2304 +- 0.5%), worst WKB deviation " + fmt(worst, 3) + " at n=" +
                    std::to_string(worst_n) + " (<= 1% for n >= 10)"};
}

Outcome spectrum_structure(Suite& s) {
    const OscillatorBasis& b = s.paper_basis();
    RunContext c = s.at(1e-4, 1e-6);
    StationaryStates st = load_or_solve_states(c, b, 1e-4, -1, 2);
    double target = kHbar * classical_constants().beta * std::sqrt(1e-4);
    double worst_spacing = 0, worst_shift = 0;
    for (const auto& g : st.groups)
        worst_spacing = std::max(worst_spacing, std::abs((g.energies(1) - g.energies(0)) / target - 1.0));
    for (int q = -1; q < 2; ++q)
        for (int sl : {0, 1, -1, 2, -2, 3}) {
            double d = st.group(q + 1).energies(order_of_s(sl)) - st.group(q).energies(order_of_s(sl));
            worst_shift = std::max(worst_shift, std::abs(d / st.hbar_omega - 1.0));
        }
    bool ok = worst_shift <= 1e-3 && worst_spacing <= 0.05;
    return {ok, "group shift worst " + fmt(worst_shift, 3) + " of hbar0 w (<= 1e-3); lowest spacing worst " +
                    fmt(worst_spacing, 3) + " off hbar0 beta sqrt(mu) (<= 5%)"};
}

// product-basis brute force with the Taylor energies, built without the window code
Eigen::VectorXd dense_product_eigenvalues(const OscillatorBasis& b, double mu, int K, int q, int P) {
    const auto& E = b.energies;
    double hw = 0.5 * (E[kN0 + 1] - E[kN0 - 1]);
    double e2 = E[kN0 + 1] - 2 * E[kN0] + E[kN0 - 1];
    std::vector<std::pair<int, int>> nm;
    for (int n = kN0 - K - P; n <= kN0 + K + P; ++n)
        for (int m = kN0 - K - P; m <= kN0 + K + P; ++m) {
            int p = n + m - 2 * kN0;
            if (std::abs(p - q) > P || ((p - q) % 2) != 0 || std::abs(n - m) > 2 * K) continue;
            nm.push_back({n, m});
        }
    const int d = static_cast<int>(nm.size());
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(d, d);
    auto taylor = [&](int n) {
        double k = n - kN0;
        return hw * k + 0.5 * e2 * k * k;
    };
    for (int a = 0; a < d; ++a) {
        H(a, a) = taylor(nm[a].first) + taylor(nm[a].second);
        for (int c = 0; c < d; ++c)
            if (c != a) H(a, c) -= mu * b.x(nm[a].first, nm[c].first) * b.x(nm[a].second, nm[c].second);
    }
    return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(H, Eigen::EigenvaluesOnly).eigenvalues();
}

Outcome reduced_oracle(Suite& s) {
    const OscillatorBasis& b = s.paper_basis();
    double hw = 0.5 * (b.energies[kN0 + 1] - b.energies[kN0 - 1]);
    double worst = 0;
    int cases = 0, largest = 0;
    bool sizes_ok = true;
    for (double mu : {1e-4, 2e-4})
        for (int q : {0, 1, -3})
            for (auto [K, P] : std::vector<std::pair<int, int>>{{4, 8}, {3, 4}, {2, 2}, {4, 1}}) {
                ResonanceWindow w{kN0, K, P, q};
                Eigen::VectorXd ev = reduced_eigenvalues(build_reduced_hamiltonian(b, mu, w));
                Eigen::VectorXd ref = dense_product_eigenvalues(b, mu, K, q, P);
                if (ev.size() != ref.size() || ev.size() > 81) {
                    sizes_ok = false;
                    continue;
                }
                largest = std::max(largest, static_cast<int>(ev.size()));
                worst = std::max(worst, (ev - ref).cwiseAbs().maxCoeff() / hw);
                ++cases;
            }
    bool ok = sizes_ok && worst <= 1e-12;
    return {ok, std::to_string(cases) + " windows up to " + std::to_string(largest) +
                    " states, worst |sparse - dense| = " + fmt(worst, 3) + " hbar0 w (<= 1e-12)"};
}

Outcome unitarity_light_cone(Suite& s) {
    RunContext c = s.at(1e-4, 1e-6);
    FloquetArtifact f = load_or_build_floquet(c, s.paper_basis());
    bool unitary = f.unitarity.interior_defect <= 1e-6;

    InitialChoice start = artifact_start(f, c.cfg.initial);
    Eigen::VectorXcd c0 = basis_state(f.model, start.q, start.s);
    SeriesOptions so;
    so.record_occupancy = true;
    const long steps = 4;
    auto outside_weight = [&](const BandedPropagator& U, long reach_per_period) {
        PacketSeries ps = propagate_N(U, c0, steps, so);
        double outside = 0;
        bool inside_ok = true;
        for (size_t k = 0; k < ps.N.size(); ++k)
            for (int g = 0; g < U.groups; ++g) {
                int dq = std::abs(U.q_min + g - start.q);
                if (dq > reach_per_period * ps.N[k]) outside = std::max(outside, ps.occupancy[k](g));
                if (dq <= std::min<long>(ps.N[k], 2) && ps.N[k] > 0 && !(ps.occupancy[k](g) > 0)) inside_ok = false;
            }
        return std::make_pair(outside, inside_ok);
    };
    auto [prod_out, prod_in] = outside_weight(f.U, f.U.bandwidth);

    FloquetOptions fo = c.cfg.floquet;
    fo.s_center = f.s_center;
    fo.bandwidth = 1;
    BandedPropagator U1 = build_evolution_matrix(f.model, fo);
    auto [b1_out, b1_in] = outside_weight(U1, 1);

    bool ok = unitary && prod_out == 0.0 && b1_out == 0.0 && prod_in && b1_in;
    return {ok, "interior defect " + fmt(f.unitarity.interior_defect, 3) + " (<= 1e-6, B=" +
                    std::to_string(f.U.bandwidth) + "); weight beyond |q-q0| > B N: " + fmt(prod_out, 3) +
                    "; nearest-group map beyond |q-q0| > N: " + fmt(b1_out, 3) + " (both exactly 0)"};
}

Outcome rwa_oracle(Suite& s) {
    const OscillatorBasis& b = s.paper_basis();
    const int Q = 4;
    RunContext c = s.at(1e-4, 1e-6);
    StationaryStates st = load_or_solve_states(c, b, 1e-4, -Q, Q);
    DipoleBlocks bl = dipole_blocks(b, st, c.cfg.threads);
    std::vector<FullCoupling> extra;
    for (int q = -Q; q + 3 <= Q; ++q)
        extra.push_back({q + Q, q + 3 + Q, dipole_block(b, st.group(q), st.group(q + 3))});
    Dop853Options ode;
    ode.rtol = 1e-11;
    ode.atol = 1e-13;
    auto discrepancy = [&](double f0) {
        DriveParams d = c.cfg.drive_at(1e-4, f0);
        FloquetOptions fo;
        fo.q_min = -Q;
        fo.q_max = Q;
        FloquetModel m = make_floquet_model(st, bl, d, fo);
        std::vector<int> starts{0, 35, -35};
        Eigen::MatrixXcd C0 = Eigen::MatrixXcd::Zero(m.dim(), static_cast<Eigen::Index>(starts.size()));
        for (size_t i = 0; i < starts.size(); ++i) C0.col(static_cast<Eigen::Index>(i)) = basis_state(m, 0, starts[i]);
        Eigen::MatrixXcd rwa = propagate_one_period(m, 0, m.groups() - 1, C0, ode);
        Eigen::MatrixXcd full = propagate_full_period(m, extra, C0, ode, d);
        double worst = 0;
        for (Eigen::Index i = 0; i < C0.cols(); ++i) worst = std::max(worst, (rwa.col(i) - full.col(i)).norm());
        return worst;
    };
    double e1 = discrepancy(1e-6), e2 = discrepancy(5e-7);
    bool amplitude = e1 <= 1e-4, halves = e2 < e1;
    return {amplitude && halves, "one-period |RWA - full| = " + fmt(e1, 3) + " at f0=1e-6 (<= 1e-4: " +
                                     (amplitude ? "met" : "not met") + "), " + fmt(e2, 3) + " at f0=5e-7 (" +
                                     (halves ? "decreases" : "does not decrease") + ")"};
}

Outcome classical_verdicts(Suite& s) {
    RunContext c = s.at(2e-4, 2e-6);
    const double pi = std::numbers::pi;
    std::vector<double> diffusive{-pi, -pi / 2}, regular{-pi / 8, 0.0, pi / 8};
    std::vector<double> grid = diffusive;
    grid.insert(grid.end(), regular.begin(), regular.end());
    std::vector<PhaseScanRow> rows = scan_initial_phase(c.cfg.drive(), grid, c.cfg.scan);
    bool ok = true;
    std::vector<std::string> parts;
    for (const auto& r : rows) {
        double ratio = r.d3.D > 0 ? r.d2.D / r.d3.D : std::numeric_limits<double>::infinity();
        bool want_diffusive = std::abs(r.theta1) > pi / 4;
        bool good = want_diffusive ? (ratio >= 0.5 && ratio <= 2.0) : (ratio > 10 || r.verdict == Verdict::non_diffusive);
        ok = ok && good;
        parts.push_back("theta1=" + fmt(r.theta1, 3) + " D2/D3=" + fmt(ratio, 3) + (good ? "" : " (wrong)"));
    }
    return {ok, join(parts)};
}

const std::vector<double> kSweep{1e-4, 1.25e-4, 1.5e-4, 1.75e-4, 2e-4, 2.25e-4};

Outcome quantum_weaker(Suite& s) {
    bool ok = true;
    std::vector<std::string> parts;
    for (double mu : {1e-4, 1.25e-4, 1.75e-4, 2.25e-4}) {
        const SeriesAnalysis& a = s.quantum_run(mu, 0.01 * mu);
        RunContext c = s.at(mu, 0.01 * mu);
        ClassicalD cd = load_or_measure_classical_D(c, c.cfg.drive());
        bool good = a.fit.diffusive && a.fit.D > 0 && a.fit.D < cd.d2.D;
        ok = ok && good;
        parts.push_back("mu=" + fmt(mu, 3) + " D_q=" + fmt(a.fit.D, 3) + " (r=" + fmt(a.fit.correlation, 2) +
                        (a.fit.diffusive ? "" : ", not diffusive") + ") D_cl=" + fmt(cd.d2.D, 3));
    }
    return {ok, join(parts)};
}

Outcome localization(Suite& s) {
    bool times_ok = true;
    std::vector<double> mus, plateau;
    std::vector<std::string> parts;
    for (double mu : kSweep) {
        const SeriesAnalysis& a = s.quantum_run(mu, 0.01 * mu);
        if (!a.localization || !a.localization->saturated) {
            times_ok = false;
            parts.push_back("mu=" + fmt(mu, 3) + " no saturation" +
                            (a.localization_note.empty() ? "" : " (" + a.localization_note + ")"));
            continue;
        }
        const auto& L = *a.localization;
        bool in_range = L.t0_periods >= 1000.0 / 3.0 && L.t0_periods <= 3000;
        times_ok = times_ok && in_range;
        mus.push_back(mu);
        plateau.push_back(L.mean_variance);
        parts.push_back("mu=" + fmt(mu, 3) + " t0=" + std::to_string(L.t0_periods) + "T" +
                        (in_range ? "" : " (outside 333..3000 T)") + " mean Delta_q=" + fmt(L.mean_variance, 3) +
                        (s.leaked[{mu, 0.01 * mu}] ? " (edge leakage)" : ""));
    }
    bool scaling_ok = false;
    if (mus.size() >= 4) {
        LineFit f = scaling_fit(mus, plateau);
        scaling_ok = f.correlation <= -0.9;
        parts.push_back("log mean Delta_q vs 1/sqrt(mu): r=" + fmt(f.correlation, 3) + " over " +
                        std::to_string(f.points) + " points (<= -0.9)");
    } else {
        parts.push_back("fewer than 4 saturated points for the scaling fit");
    }
    return {times_ok && scaling_ok, join(parts)};
}

Outcome profiles(Suite& s) {
    const SeriesAnalysis& driven = s.quantum_run(1e-4, 1e-6);
    const SeriesAnalysis& free = s.quantum_run(0.0, 1e-6);
    if (!driven.profile || !free.profile) return {false, "profile missing"};
    const ProfileFit& p1 = *driven.profile;
    const ProfileFit& p0 = *free.profile;
    auto sides = [](const ProfileFit& p) {
        return "l_s=" + fmt(p.l_s, 4) + " (left r=" + fmt(p.left.correlation, 3) + ", right r=" +
               fmt(p.right.correlation, 3) + ")";
    };
    bool tails = p1.valid && p0.valid && p1.correlation >= 0.9 && p0.correlation >= 0.9;
    bool order = p1.l_s > p0.l_s;
    return {tails && order, "mu=1e-4: " + sides(p1) + "; mu=0: " + sides(p0) + "; need r >= 0.9 and " +
                                (order ? "l_s(1e-4) > l_s(0) holds" : "l_s(1e-4) > l_s(0) fails")};
}

Outcome shuryak(Suite& s) {
    const OscillatorBasis& b = s.paper_basis();
    bool ok = true;
    std::vector<std::string> parts;
    for (double mu : {3e-5, 1.5e-4, 2e-4}) {
        RunContext c = s.at(mu, 0.01 * mu);
        LayerWidth lw = load_or_measure_layer(c, c.cfg.drive());
        StationaryStates st = load_or_solve_states(c, b, mu, 0, 0);
        SeparatrixCount sc = count_separatrix_states(b, st.group(0), mu, kN0, {lw.V, lw.w_inner, lw.w_outer});
        bool good = mu > 1.25e-4 ? sc.M_s > 10 : sc.M_s <= 3;
        ok = ok && good;
        parts.push_back("mu=" + fmt(mu, 3) + " layer -" + fmt(lw.w_inner / lw.V, 3) + "V/+" + fmt(lw.w_outer / lw.V, 3) +
                        "V M_s=" + std::to_string(sc.M_s) + " (theory " + fmt(sc.theory, 3) + ", need " +
                        (mu > 1.25e-4 ? "> 10" : "<= 3") + ")");
    }
    return {ok, join(parts)};
}

}  // namespace

int main(int argc, char** argv) {
    const char* dir = std::getenv("QAD_ACCEPTANCE_DIR");
    std::vector<int> only;
    for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));

    Suite suite;
    try {
        suite.ctx.cfg = acceptance_config();
    } catch (const std::exception& e) {
        std::cerr << "acceptance: " << e.what() << "\n";
        return 2;
    }
    suite.ctx.out = dir ? fs::path(dir) : fs::path("acceptance_work");
    suite.ctx.log = &std::cerr;
    fs::create_directories(suite.ctx.out);
    DirectoryLock lock(suite.ctx.out);

    const std::vector<std::pair<std::string, std::function<Outcome(Suite&)>>> criteria = {
        {"constants chain", constants_chain},
        {"basis consistency", basis_consistency},
        {"spectrum structure", spectrum_structure},
        {"reduced-Hamiltonian oracle", reduced_oracle},
        {"Floquet unitarity and light cone", unitarity_light_cone},
        {"resonance-approximation oracle", rwa_oracle},
        {"classical diffusion verdicts", classical_verdicts},
        {"quantum weaker than classical", quantum_weaker},
        {"dynamical localization", localization},
        {"packet profiles", profiles},
        {"Shuryak border", shuryak}};

    int failed = 0;
    json summary = json::array();
    for (size_t i = 0; i < criteria.size(); ++i) {
        int id = static_cast<int>(i) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second(suite);
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (!o.pass) ++failed;
        std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << " [" << criteria[i].first << "] "
                  << o.detail << " (" << fmt(secs, 3) << " s)" << std::endl;
        summary.push_back({{"criterion", id}, {"name", criteria[i].first}, {"pass", o.pass}, {"detail", o.detail},
                           {"seconds", secs}});
    }
    write_json(suite.ctx.out / "acceptance.json", summary);
    std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << std::endl;
    return failed ? 1 : 0;
}
