#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace covkit {

using json = nlohmann::json;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kInf = std::numeric_limits<double>::infinity();
/// Conditional log-probabilities below this are treated as exact zeros.
inline constexpr double kLogFloor = -745.0;

inline double floor_log(double lp) { return lp < kLogFloor ? kNegInf : lp; }

/// Raised for contract violations that a caller could have checked up front.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Vocab {
  int size = 1;
  explicit Vocab(int v) : size(v) {
    if (v < 1) throw ValidationError("vocab size must be >= 1");
  }
};

/// A prompt is an integer id plus an optional token payload (graph tasks).
struct Prompt {
  std::int64_t id = 0;
  std::vector<int> tokens;

  bool operator==(const Prompt&) const = default;
};

json prompt_to_json(const Prompt& x);
Prompt prompt_from_json(const json& j);

struct Trajectory {
  Prompt x;
  std::vector<int> y;
};

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }
  /// Uniform on [0,1) with 53 random bits; portable across standard libraries.
  double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
  std::uint64_t below(std::uint64_t n);
  /// Inverse-CDF draw from unnormalized nonnegative weights.
  int categorical(std::span<const double> probs);
  /// Same, from log weights (−inf allowed).
  int categorical_log(std::span<const double> logp);
  bool bernoulli(double p) { return uniform01() < p; }
  double normal();

 private:
  std::mt19937_64 eng_;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a(const std::string& s);

/// Hierarchical seed derivation: every path maps to its own stream.
class SeedTree {
 public:
  explicit SeedTree(std::uint64_t root = 0) : root_(root), key_(splitmix64(root)) {}

  SeedTree derive(const std::string& label, std::uint64_t index) const;
  Rng rng() const { return Rng(splitmix64(key_ ^ 0x9e3779b97f4a7c15ULL)); }
  std::uint64_t root() const { return root_; }
  const std::vector<std::pair<std::string, std::uint64_t>>& path() const { return path_; }
  json provenance() const;

 private:
  std::uint64_t root_;
  std::uint64_t key_;
  std::vector<std::pair<std::string, std::uint64_t>> path_;
};

inline Rng derive_rng(const SeedTree& t, const std::string& label, std::uint64_t index) {
  return t.derive(label, index).rng();
}

/// Incremental view of a policy's conditionals along one rollout.
class Cursor {
 public:
  virtual ~Cursor() = default;
  /// Log conditional over V at the current prefix.
  virtual const std::vector<double>& logdist() const = 0;
  virtual std::unique_ptr<Cursor> advance(int token) const = 0;
  virtual std::size_t depth() const = 0;
};

class Policy {
 public:
  virtual ~Policy() = default;
  virtual int vocab_size() const = 0;
  virtual int horizon() const = 0;
  virtual void next_logdist(const Prompt& x, std::span<const int> prefix,
                            std::vector<double>& out) const = 0;

  std::vector<double> next_dist(const Prompt& x, std::span<const int> prefix) const;
  virtual std::unique_ptr<Cursor> cursor(const Prompt& x) const;
  virtual double logprob(const Prompt& x, std::span<const int> y) const;
  virtual std::vector<int> sample(const Prompt& x, Rng& rng) const;
  /// Log conditionals at prefixes y_{1:0}, ..., y_{1:H-1}.
  virtual std::vector<std::vector<double>> conditionals_along(const Prompt& x,
                                                              std::span<const int> y) const;
  /// When the conditional at x ignores prefix and position, returns it.
  virtual std::optional<std::vector<double>> iid_logdist(const Prompt&) const { return std::nullopt; }
};

/// Prompt distribution: finite support with weights, or a sampler, or both.
class PromptDist {
 public:
  static PromptDist finite(std::vector<Prompt> support, std::vector<double> weights);
  static PromptDist sampler(std::function<Prompt(Rng&)> f);
  static PromptDist single(Prompt x) { return finite({std::move(x)}, {1.0}); }

  bool is_finite() const { return !support_.empty(); }
  const std::vector<Prompt>& support() const { return support_; }
  const std::vector<double>& weights() const { return weights_; }
  Prompt sample(Rng& rng) const;

 private:
  std::vector<Prompt> support_;
  std::vector<double> weights_;
  std::function<Prompt(Rng&)> sampler_;
};

struct Dataset {
  std::vector<Trajectory> examples;
  int H = 0;
  int V = 0;
  json provenance = json::object();

  std::size_t size() const { return examples.size(); }
};

Dataset sample_dataset(const Policy& policy, const PromptDist& mu, std::size_t n, const SeedTree& seeds);
Trajectory sample_one(const Policy& policy, const PromptDist& mu, Rng& rng);

void write_dataset_jsonl(const Dataset& d, const std::string& path);
Dataset read_dataset_jsonl(const std::string& path);

/// Sum in fixed pairwise-tree order; bit-stable for a given input order.
double pairwise_sum(std::span<const double> v);

double logsumexp(std::span<const double> v);
void log_softmax_inplace(std::vector<double>& logits);

}  // namespace covkit
