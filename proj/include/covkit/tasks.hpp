#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "covkit/core.hpp"
#include "covkit/decoding.hpp"
#include "covkit/models.hpp"
#include "covkit/selection.hpp"

namespace covkit {

struct TaskInstance {
  PromptDist mu = PromptDist::single(Prompt{});
  std::shared_ptr<const Policy> piD;
  FeatureMapPtr featmap;
  std::optional<Vec> theta_star;
  /// Suggested starting parameter for learners, when the construction has one.
  std::optional<Vec> theta0;
  RewardFn reward;
  json metadata = json::object();

  int H() const { return piD->horizon(); }
  int V() const { return piD->vocab_size(); }
};

/// pi_D = Ber(p*) on a single prompt, H = 1. The feature map is the 1-d
/// table phi(y) = B (2y − 1).
TaskInstance bernoulli_task(double p_star, double B = 1.0);
/// Empirical frequency clamped to [0, 1/2].
std::shared_ptr<TabularModel> bernoulli_mle(const Dataset& data);

/// Prompts {0, 1} with mu(1) = 1/(2n); phi(0, .) = 0, phi(1, y_{1:h}) = y_h with
/// tokens 0/1 standing for −1/+1; theta* = sign.
TaskInstance heterogeneous_kl_instance(std::size_t n, int H, int sign = 1);

enum class SgdLowerVariant { LargeEta, SmallEta };

struct SgdLowerParams {
  SgdLowerVariant variant = SgdLowerVariant::SmallEta;
  int H = 8;
  double B = 16;
  double Bbar = 8;
  double N = 8;
  std::size_t n = 1000;        ///< sample budget entering mu(+)
  double eta = 0;              ///< large-eta variant only
  std::optional<double> mu_plus;  ///< overrides the mu(+) formula
};

/// Tokens 0, 1, 2 stand for a = −1, 0, +1.
TaskInstance sgd_lower_instance(const SgdLowerParams& p);
double sgd_lower_mu_plus(double B, int H, std::size_t n, double Bbar, double N);

struct SigmaStarParams {
  int H = 128;
  double B = 32;
  double N = 2;
  std::size_t n = 100;
  double c = 0.01;   ///< precondition log N <= c min{H, B^2}
  double c0 = 1.0;
  double c1 = 1.0;
  std::vector<int> signs;  ///< theta* = eps * signs; empty means all +1
};

/// Prompts + (id 0) and − (id 1); phi(+, y_{1:h}) = B y_h e_h, phi(−, .) = 0.
TaskInstance sigma_star_instance(const SigmaStarParams& p);

struct MisspecInstance {
  TaskInstance task;
  CandidateClass candidates;  ///< {pi_1, pi_2}
  double p = 0;               ///< mass of the rare prompt
};

/// Prompts + (id 0) and − (id 1), H = 1, V = 2.
MisspecInstance misspec_instance(double alpha, double M);

/// Random small linear instance: hash-seeded prefix-dependent features.
TaskInstance random_linear_instance(int d, int V, int H, double B, int n_prompts, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Layered-DAG graph search

struct LayeredDag {
  int L = 0;
  int m = 128;
  std::vector<std::vector<int>> layers;    ///< L + 2 layers, sorted ascending
  std::vector<std::vector<int>> passable;  ///< per layer, sorted ascending

  bool operator==(const LayeredDag&) const = default;
  std::size_t path_count() const;
  std::vector<int> all_nodes_sorted() const;
};

enum class GraphFamily { Teaser, Horizon };

struct GraphConfig {
  GraphFamily family = GraphFamily::Teaser;
  int L = 8;
  int nodes_per_layer = 4;
  int m = 128;
  std::vector<double> mixture;  ///< class weights; defaults per family when empty
};

GraphConfig graph_config_from_json(const json& j);

inline int graph_token_bar(int m) { return m + 1; }
inline int graph_token_slash(int m) { return m + 2; }
inline int graph_token_eq(int m) { return m + 3; }

struct PromptParseError : ValidationError {
  std::size_t position;
  PromptParseError(const std::string& msg, std::size_t pos)
      : ValidationError(msg + " at token " + std::to_string(pos)), position(pos) {}
};

std::vector<int> serialize_prompt(const LayeredDag& g);
LayeredDag parse_prompt(const std::vector<int>& tokens, int m);
std::string prompt_to_text(const std::vector<int>& tokens, int m);

/// Class implied by the prompt alone (1-based), following the generator's signatures.
int graph_class_of(const LayeredDag& g, const GraphConfig& cfg);
/// The data policy's node choice at a two-passable layer (1-based layer index i).
/// Returns −1 for the uniform class.
int graph_rule_choice(const LayeredDag& g, int class_id, GraphFamily family, int layer_index);

struct GraphSample {
  LayeredDag dag;
  int class_id;
  std::vector<int> prompt;
};

GraphSample gen_graph_instance(int class_id, const GraphConfig& cfg, Rng& rng);

/// Data policy over paths, derived from the prompt tokens alone.
class GraphDataPolicy final : public Policy {
 public:
  explicit GraphDataPolicy(GraphConfig cfg);
  int vocab_size() const override { return cfg_.m + 4; }
  int horizon() const override { return cfg_.L + 2; }
  void next_logdist(const Prompt& x, std::span<const int> prefix, std::vector<double>& out) const override;
  std::unique_ptr<Cursor> cursor(const Prompt& x) const override;
  const GraphConfig& config() const { return cfg_; }

 private:
  GraphConfig cfg_;
};

bool is_valid_path(const LayeredDag& g, std::span<const int> y);

TaskInstance graph_task(const GraphConfig& cfg);

/// Builds any task from {"name": ..., params...}.
TaskInstance make_task(const json& spec);

}  // namespace covkit
