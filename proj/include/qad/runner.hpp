#pragma once

#include "qad/analysis.hpp"
#include "qad/config.hpp"

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

// Subcommands, the content-hash cache and the per-directory manifest.

namespace qad {

/// Missing input produced by another subcommand.
class MissingArtifact : public std::runtime_error {
public:
    MissingArtifact(const fs::path& file, const std::string& producer)
        : std::runtime_error("missing " + file.string() + "; run `qad " + producer + "` first (same --out)"),
          file_(file), producer_(producer) {}
    const fs::path& file() const { return file_; }
    const std::string& producer() const { return producer_; }

private:
    fs::path file_;
    std::string producer_;
};

class ValidationFailed : public std::runtime_error {
public:
    explicit ValidationFailed(const ValidationReport& r)
        : std::runtime_error("invalid configuration:\n" + r.format()), report(r) {}
    ValidationReport report;
};

struct RunContext {
    RunConfig cfg;
    fs::path out;
    fs::path cache;  // shared cache directory; defaults to <out>/cache
    std::ostream* log = nullptr;

    fs::path cache_dir() const { return cache.empty() ? out / "cache" : cache; }
    void note(const std::string& line) const;
};

/// sha256 over the canonical dump of a JSON key.
std::string content_hash(const json& key);

// Cached building blocks. Each returns the artifact and records whether it came from the cache.

struct CacheHit {
    std::string key;
    bool reused = false;
};

OscillatorBasis load_or_solve_basis(const RunContext& ctx, CacheHit* hit = nullptr);
json basis_key(const RunConfig& c);

StationaryStates load_or_solve_states(const RunContext& ctx, const OscillatorBasis& basis, double mu, int q_min,
                                      int q_max, CacheHit* hit = nullptr);

LayerWidth load_or_measure_layer(const RunContext& ctx, const DriveParams& p, CacheHit* hit = nullptr);

struct InitialChoice {
    std::string kind;
    int q = 0;
    int s = 0;
    double mathieu = 0;     // E^M of the chosen state
    double separatrix = 0;  // estimated separatrix E^M of the group
};

/// separatrix: state nearest the separatrix estimate; center: s = 0 (bottom of the well);
/// above: nearest separatrix + V_q / 2; state: the given (q, s). Candidates are (E^M, s) pairs.
InitialChoice choose_initial_state(const std::vector<double>& mathieu, const std::vector<int>& s, int q,
                                   double separatrix, double V, const InitialState& spec);
InitialChoice choose_initial_state(const GroupStates& g, const QuantumPendulum& qp, const InitialState& spec);

struct FloquetArtifact {
    FloquetModel model;
    BandedPropagator U;
    BandwidthProbe probe;
    UnitarityReport unitarity;
    double mu = 0;
    double s_center = 0;
    int K_w = 0;
    int P_w = 0;
    int n0 = 0;
    double hbar_omega = 0;
    double V = 0;                   // quantum pendulum height
    std::vector<double> separatrix; // per group
    std::string key;
    bool reused = false;
};

/// The start state among the kept states of the artifact.
InitialChoice artifact_start(const FloquetArtifact& f, const InitialState& spec);

json floquet_key(const RunConfig& c);
void write_floquet_artifact(const fs::path& p, const FloquetArtifact& f);
FloquetArtifact read_floquet_artifact(const fs::path& p);

/// Spectrum over the floquet window, model, banded U. The U blocks go to cache/<key>.bin.
FloquetArtifact load_or_build_floquet(const RunContext& ctx, const OscillatorBasis& basis);

/// Repeated application of U from the chosen start, with occupancy every `occupancy_stride`.
PacketSeries run_evolution(const RunConfig& c, const FloquetArtifact& f, InitialChoice* start = nullptr);

struct SeriesAnalysis {
    MomentSeries moments;
    DiffusionFit fit;
    std::optional<LocalizationReport> localization;
    std::string localization_note;  // why it is absent
    std::optional<ProfileFit> profile;
};

/// Fit window capped at the detected saturation time, as configured.
SeriesAnalysis analyze_series(const RunConfig& c, const MomentSeries& m, const PacketSeries* s, double hbar_omega);

struct ClassicalD {
    double mu = 0;
    double f0 = 0;
    DiffusionEstimate d2, d3;
    Verdict verdict = Verdict::non_diffusive;
    double T_a = 0;
};
ClassicalD load_or_measure_classical_D(const RunContext& ctx, const DriveParams& p, CacheHit* hit = nullptr);

// File-level surfaces shared with the plotting scripts.

void write_series_csv(const fs::path& p, const MomentSeries& m, const PacketSeries& s);
void write_occupancy_csv(const fs::path& p, const PacketSeries& s, long every);
/// series.csv back into moments; occupancy.csv into a series holding only the sampled W_q.
MomentSeries read_series(const fs::path& dir);
PacketSeries read_occupancy(const fs::path& dir);

/// Manifest for one output directory.
struct Manifest {
    std::string subcommand;
    json config;
    json inputs = json::object();   // file -> sha256
    json outputs = json::object();  // file -> sha256
    json cache = json::array();
    json results = json::object();
    json warnings = json::array();
    double wall_seconds = 0;
};
void write_manifest(const fs::path& dir, const Manifest& m);
/// Rebuild the configuration recorded in a manifest.
RunConfig config_from_manifest(const fs::path& manifest_path);

std::vector<std::string> subcommand_names();

/// Run one subcommand into ctx.out under the directory lock; returns the exit status.
int run_subcommand(const std::string& name, const RunContext& ctx);

}  // namespace qad
