#include "qad/runner.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

#ifndef QAD_VERSION
#define QAD_VERSION "0.0.0"
#endif

namespace {

struct Options {
    std::string config;
    std::string out = "qad_out";
    std::string cache;
    std::string preset = "paper";
    std::vector<std::string> sets;
    int threads = 0;
    bool fixed_step = false;
    bool quiet = false;
    bool check = false;
};

void add_common(CLI::App* sub, Options& o) {
    sub->add_option("--config", o.config, "JSON configuration file")->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "output directory")->capture_default_str();
    sub->add_option("--cache", o.cache, "cache directory (default <out>/cache)");
    sub->add_option("--preset", o.preset, "quick or paper")
        ->check(CLI::IsMember({"quick", "paper"}))
        ->capture_default_str();
    sub->add_option("--set", o.sets, "override one key, e.g. --set physics.mu=1.5e-4")->allow_extra_args(false);
    sub->add_option("--threads", o.threads, "worker threads (also QAD_THREADS)")->check(CLI::NonNegativeNumber);
    sub->add_flag("--fixed-step", o.fixed_step, "fixed-step integrators, bit-reproducible across thread counts");
    sub->add_flag("--quiet,-q", o.quiet, "no progress lines");
    sub->add_flag("--check", o.check, "validate the configuration and exit");
}

const char* summary(const std::string& name) {
    if (name == "basis") return "quartic oscillator levels and x matrix elements";
    if (name == "spectrum") return "stationary states near the coupling resonance";
    if (name == "classical-poincare") return "driven trajectory and Poincare section";
    if (name == "classical-scan") return "initial-phase scan, layer width and D over mu";
    if (name == "floquet-build") return "banded one-period propagator";
    if (name == "evolve") return "packet evolution from the configured start";
    if (name == "qe-stats") return "quasienergy scatter on a small window";
    if (name == "analyze") return "diffusion fit, saturation and profile";
    if (name == "compare") return "classical against quantum D";
    if (name == "pipeline") return "every step plus the sweeps";
    return "";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"qad: classical and quantum Arnol'd diffusion in coupled quartic oscillators"};
    app.set_version_flag("--version", QAD_VERSION);
    app.require_subcommand(1);
    Options opt;
    for (const auto& name : qad::subcommand_names()) add_common(app.add_subcommand(name, summary(name)), opt);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }
    std::string name = app.get_subcommands().front()->get_name();

    qad::RunContext ctx;
    try {
        qad::ConfigSources src;
        src.preset = opt.preset;
        if (!opt.config.empty()) src.file = opt.config;
        src.sets = opt.sets;
        if (opt.threads > 0) src.threads = opt.threads;
        src.fixed_step = opt.fixed_step;
        ctx.cfg = qad::load_config(src);
        ctx.out = opt.out;
        if (!opt.cache.empty()) ctx.cache = opt.cache;
        if (!opt.quiet) ctx.log = &std::cerr;
        if (opt.check) {
            qad::ValidationReport r = qad::validate_config(ctx.cfg);
            std::cout << (r.ok() ? "configuration ok\n" : "") << r.format();
            return r.ok() ? 0 : 2;
        }
        return qad::run_subcommand(name, ctx);
    } catch (const qad::ConfigError& e) {
        std::cerr << "qad: " << e.what() << "\n";
        return 2;
    } catch (const qad::ValidationFailed& e) {
        std::cerr << "qad: " << e.what() << "\n";
        return 2;
    } catch (const qad::MissingArtifact& e) {
        std::cerr << "qad: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "qad " << name << ": " << e.what() << "\n";
        return 1;
    }
}
