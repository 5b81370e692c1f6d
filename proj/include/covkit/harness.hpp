#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "covkit/core.hpp"

namespace covkit::harness {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitRuntime = 3;

/// Config and output schema version; bumped whenever a CSV header changes.
inline constexpr int kSchemaVersion = 1;

json load_json_file(const std::string& path);

struct ExperimentConfig {
  json task;
  json learner;
  json metrics;
  /// Dotted paths ("task.H", "learner.eta") with their values, sorted by path.
  std::vector<std::pair<std::string, std::vector<json>>> axes;
  std::vector<std::uint64_t> seeds;
  std::string output_dir;
  std::uint64_t root_seed = 0;

  static ExperimentConfig from_json(const json& j);
};

/// Runs every sweep point and seed; writes runs/<id>/timeseries.csv,
/// runs/<id>/summary.json and sweep.csv under output_dir.
void run_experiment(const ExperimentConfig& cfg);

/// Linear-interpolation quantile of an unsorted sample.
double quantile(std::vector<double> v, double q);

std::string timeseries_header(const std::vector<double>& Ns);
std::string sweep_header(const std::vector<std::string>& axis_names);
std::string fmt_num(double v);

struct GenDataOptions {
  json task;
  std::size_t n = 1000;
  std::uint64_t seed = 0;
  std::string out;
  bool emit_text = false;
};
void gen_data(const GenDataOptions& o);

struct EvalOptions {
  json task;
  std::string pi_d;  ///< empty: use the task's data policy
  std::string pi_hat;
  std::vector<double> Ns;
  std::string mode = "exact";
  std::size_t n_samples = 10000;
  std::uint64_t seed = 0;
  std::string out_prefix;
};
/// Writes <prefix>.csv (coverage curve) and <prefix>.json (metric report).
void eval_coverage(const EvalOptions& o);

struct TournamentOptions {
  std::vector<std::string> candidates;
  std::string dataset;
  double N = 16;
  double gamma = 0;
  std::string kind = "simple";  ///< simple | offset | ce
  std::string offset_mode = "auto";
  std::size_t m = 1000;
  std::uint64_t seed = 0;
  std::string out;
};
void tournament(const TournamentOptions& o);

struct BonOptions {
  json task;
  std::string policy;
  std::string comparator;  ///< empty: the task's data policy
  std::string reward = "task";  ///< task | adversarial
  std::vector<std::size_t> Ns;
  std::size_t trials = 10000;
  std::uint64_t seed = 0;
  std::string out;
};
void bon(const BonOptions& o);

/// Machine-readable error document.
json error_json(int code, const std::string& message);

}  // namespace covkit::harness
