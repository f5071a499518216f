#pragma once

#include "qad/analysis.hpp"
#include "qad/classical.hpp"
#include "qad/floquet.hpp"
#include "qad/io.hpp"
#include "qad/quartic.hpp"
#include "qad/resonance.hpp"

#include <optional>
#include <string>
#include <vector>

// Run configuration: JSON document with defaults, presets and key=value overrides,
// plus the typed view the subcommands work from.

namespace qad {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Full default document. Every accepted key appears here.
json default_config();
/// Overrides applied on top of the defaults; "paper" is empty.
json preset_overrides(const std::string& name);

/// Recursive merge; keys absent from `base` are rejected with their dotted path.
void merge_config(json& base, const json& overlay, const std::string& where = "");
/// "a.b.c=V": V is parsed as JSON when it parses, else taken as a string.
void apply_set(json& cfg, const std::string& assignment);

struct InitialState {
    std::string kind = "separatrix";  // separatrix | center | above | state
    int q = 0;
    int s = 0;  // used when kind == "state"
};

struct ProfileRun {
    double mu = 0;
    double f0 = 0;
};

struct RunConfig {
    json doc;  // merged document, as written to manifests

    // physics
    double hbar0 = 1.77321e-5;
    double mu = 1e-4;
    double f0 = 1e-6;
    double f0_ratio = 0.01;
    double Omega1 = 0.2094;
    double Omega2 = 0.2513;
    double period = 150;
    int n0 = 446;
    bool allow_overlap = false;

    int n_max = 646;
    GridPolicy grid;

    int K_w = 0;
    int P_w = 8;
    int spectrum_q_min = -1;
    int spectrum_q_max = 1;
    std::vector<int> dump_groups;

    FloquetOptions floquet;
    std::string s_center = "initial";  // initial | separatrix | bottom | number as text

    int qe_q_min = -1;
    int qe_q_max = 1;
    int qe_s_band = 0;

    long N = 10000;
    long stride = 1;
    long occupancy_stride = 10;
    InitialState initial;

    FitPolicy fit;
    SaturationPolicy saturation;
    ProfilePolicy profile;

    ClassicalState classical_start;
    bool classical_default_I2 = true;
    StepPolicy step;
    long poincare_periods = 2000;
    std::vector<double> poincare_I2_factors;  // multiples of the default I2
    std::vector<double> scan_theta1;
    ScanOptions scan;
    ScanOptions diffusion;   // D_cl for the comparison
    double diffusion_theta1 = -3.141592653589793;
    LayerScanOptions layer;
    double nu = 1;

    std::vector<double> sweep_mu;
    std::vector<double> shuryak_mu;
    std::vector<double> qe_mu;
    double initial_mu = 1.25e-4;
    std::vector<ProfileRun> profile_runs;

    int threads = 1;
    unsigned long long seed = 0;
    bool fixed_step = false;

    DriveParams drive() const { return drive_at(mu, f0); }
    DriveParams drive_at(double mu_, double f0_) const;
    /// Copy with mu and f0 replaced (f0 < 0: f0_ratio * mu), document updated.
    RunConfig with_physics(double mu_, double f0_ = -1) const;
};

/// Defaults, then preset, then file, then --set overrides, then typed parse.
struct ConfigSources {
    std::string preset;
    std::optional<fs::path> file;
    std::vector<std::string> sets;
    std::optional<int> threads;  // --threads
    bool fixed_step = false;
};
RunConfig load_config(const ConfigSources& src);
RunConfig parse_config(const json& doc);

/// --threads, then QAD_THREADS, then run.threads, then the hardware.
int resolve_threads(std::optional<int> cli, const char* env, int configured);

struct ValidationReport {
    std::vector<std::string> errors;
    std::vector<std::string> warnings;
    bool ok() const { return errors.empty(); }
    std::string format() const;
};

/// All checks, collected. The basis (when given) enables the window and nonlinearity checks.
ValidationReport validate_config(const RunConfig& c, const OscillatorBasis* basis = nullptr);

}  // namespace qad
