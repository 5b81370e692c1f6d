#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "covkit/core.hpp"
#include "covkit/models.hpp"

namespace covkit {

/// Source of training examples; each call yields a fresh one or nothing.
class ExampleStream {
 public:
  virtual ~ExampleStream() = default;
  virtual std::optional<Trajectory> next() = 0;
};

/// Endless i.i.d. draws from mu x policy.
class SamplingStream final : public ExampleStream {
 public:
  SamplingStream(const Policy& p, PromptDist mu, Rng rng) : p_(p), mu_(std::move(mu)), rng_(std::move(rng)) {}
  std::optional<Trajectory> next() override { return sample_one(p_, mu_, rng_); }

 private:
  const Policy& p_;
  PromptDist mu_;
  Rng rng_;
};

/// Single pass over a fixed dataset.
class DatasetStream final : public ExampleStream {
 public:
  explicit DatasetStream(const Dataset& d) : d_(d) {}
  std::optional<Trajectory> next() override {
    if (i_ >= d_.examples.size()) return std::nullopt;
    return d_.examples[i_++];
  }

 private:
  const Dataset& d_;
  std::size_t i_ = 0;
};

struct TrainConfig {
  double eta = 0;
  std::size_t T = 0;
  std::size_t K = 1;
  double lambda = 0;
  double A = 0;
  /// Record every k-th iterate; 0 records only the start and the end.
  std::size_t checkpoint_every = 0;
  /// Record t = 0, 1, 2, 4, 8, ... in addition to the final iterate.
  bool geometric_checkpoints = false;

  void validate(bool needs_A = false) const;
};

struct RunRecord {
  std::vector<std::pair<std::size_t, Vec>> checkpoints;
  Vec final_theta;
  std::size_t n_samples = 0;
  double wall_seconds = 0;
  std::vector<std::string> flags;
  /// Distillation only: examples checked and the worst truncation-identity gap.
  std::size_t identity_checks = 0;
  double identity_max_gap = 0;

  json to_json() const;
  std::string checkpoints_jsonl() const;
};

struct MleResult {
  Vec theta;
  std::size_t iters = 0;
  bool converged = false;
  double grad_map_norm = 0;
};

MleResult mle_fit(const Dataset& data, const FeatureMap& fm, double tol = 1e-8, std::size_t max_iters = 100000,
                  std::optional<Vec> theta0 = std::nullopt);

/// Mean of per-example gradients, summed by halving so duplicated datasets
/// give bit-identical results.
Vec mean_gradient(const std::vector<Vec>& grads);

RunRecord sgd_vanilla(ExampleStream& stream, const FeatureMap& fm, const TrainConfig& cfg, const Vec& theta0);
RunRecord sgd_normalized(ExampleStream& stream, const FeatureMap& fm, const TrainConfig& cfg, const Vec& theta0);
RunRecord sgd_token(ExampleStream& stream, const FeatureMap& fm, const TrainConfig& cfg, const Vec& theta0);
RunRecord sgd_truncated_distill(ExampleStream& stream, const Policy& teacher, const FeatureMap& fm, const TrainConfig& cfg,
                                const Vec& theta0);

/// One normalized step: eta * g / (lambda + ||g||), zero when both vanish.
Vec normalized_step(const Vec& g, double eta, double lambda, bool* degenerate = nullptr);

/// Truncation weights: 1 while the running sum stays within A, a fraction at
/// the crossing step, 0 afterwards.
std::vector<double> truncation_weights(const std::vector<double>& eps, double A);

struct Schedule {
  double eta;
  double lambda;
};
/// lambda = log N / (16 eta), eta = min{1/(128 B), (log N / (sigma^2 T))^{1/4}}.
Schedule normalized_default_schedule(double N, double sigma_sq, std::size_t T, double B);
/// eta = min{1/((64 A + 2) B^2), (1/(T sigma^2 A))^{1/2}}.
double distill_default_eta(double A, double sigma_sq, std::size_t T, double B);

}  // namespace covkit
