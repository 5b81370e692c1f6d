#pragma once

#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "covkit/core.hpp"

namespace covkit {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

class FeatureMap {
 public:
  virtual ~FeatureMap() = default;
  virtual int dim() const = 0;
  virtual int vocab_size() const = 0;
  virtual double bound() const = 0;
  virtual std::string id() const = 0;
  virtual json params() const = 0;
  /// Row v holds phi(x, prefix∘v); out is resized to V x d.
  virtual void candidates(const Prompt& x, std::span<const int> prefix, Mat& out) const = 0;
  /// True when candidate features depend on (x, v) only.
  virtual bool token_iid() const { return false; }

  Vec phi(const Prompt& x, std::span<const int> prefix_with_token) const;
  json to_json() const { return {{"featmap_id", id()}, {"featmap_params", params()}}; }

  /// When enabled, every candidates() call in the linear model checks the norm bound.
  static void set_bound_checks(bool on);
  static bool bound_checks();
};

using FeatureMapPtr = std::shared_ptr<const FeatureMap>;

/// Features that depend on the prompt and the candidate token only.
class TokenTableFeatureMap final : public FeatureMap {
 public:
  TokenTableFeatureMap(int V, int d, double B, std::map<std::int64_t, Mat> tables, std::string tag = "token_table");
  int dim() const override { return d_; }
  int vocab_size() const override { return V_; }
  double bound() const override { return B_; }
  std::string id() const override { return tag_; }
  json params() const override;
  void candidates(const Prompt& x, std::span<const int> prefix, Mat& out) const override;
  bool token_iid() const override { return true; }
  const Mat& table(std::int64_t prompt_id) const;

 private:
  int V_, d_;
  double B_;
  std::map<std::int64_t, Mat> tables_;
  std::string tag_;
};

/// phi(x, y_{1:h}) = scale(x) * value(y_h) * e_h, with d = H.
class PositionalFeatureMap final : public FeatureMap {
 public:
  PositionalFeatureMap(int H, std::vector<double> values, std::map<std::int64_t, double> scales);
  int dim() const override { return H_; }
  int vocab_size() const override { return static_cast<int>(values_.size()); }
  double bound() const override { return B_; }
  std::string id() const override { return "positional"; }
  json params() const override;
  void candidates(const Prompt& x, std::span<const int> prefix, Mat& out) const override;

 private:
  int H_;
  std::vector<double> values_;
  std::map<std::int64_t, double> scales_;
  double B_;
};

/// Hash-seeded pseudo-random features depending on the full prefix; norms ≤ B.
class RandomFeatureMap final : public FeatureMap {
 public:
  RandomFeatureMap(int V, int d, double B, std::uint64_t seed);
  int dim() const override { return d_; }
  int vocab_size() const override { return V_; }
  double bound() const override { return B_; }
  std::string id() const override { return "random"; }
  json params() const override;
  void candidates(const Prompt& x, std::span<const int> prefix, Mat& out) const override;

 private:
  int V_, d_;
  double B_;
  std::uint64_t seed_;
};

FeatureMapPtr featmap_from_json(const json& j);

Vec project_unit_ball(const Vec& v);

class LinearARModel final : public Policy {
 public:
  LinearARModel(Vec theta, FeatureMapPtr fm, int H);

  int vocab_size() const override { return fm_->vocab_size(); }
  int horizon() const override { return H_; }
  void next_logdist(const Prompt& x, std::span<const int> prefix, std::vector<double>& out) const override;
  std::optional<std::vector<double>> iid_logdist(const Prompt& x) const override;

  const Vec& theta() const { return theta_; }
  const FeatureMapPtr& featmap() const { return fm_; }
  json to_json() const;

 private:
  Vec theta_;
  FeatureMapPtr fm_;
  int H_;
};

/// Log-softmax of the candidate logits Phi*theta.
void linear_logdist(const Mat& phi, const Vec& theta, std::vector<double>& out);
/// Gradient of log pi_theta(token | x, prefix): phi_token − E_{v∼pi_theta} phi_v.
Vec grad_token_logprob(const Vec& theta, const FeatureMap& fm, const Prompt& x, std::span<const int> prefix, int token);
Vec grad_logprob(const LinearARModel& m, const Prompt& x, std::span<const int> y);
Vec grad_logprob(const Vec& theta, const FeatureMap& fm, const Prompt& x, std::span<const int> y);
/// Same as grad_logprob and also returns log pi_theta(y|x).
Vec grad_and_logprob(const Vec& theta, const FeatureMap& fm, const Prompt& x, std::span<const int> y, double& logprob);

/// Explicit conditional tables keyed by (prompt id, prefix), with per-prompt
/// rows and a global default for anything not listed.
class TabularModel final : public Policy {
 public:
  TabularModel(int V, int H);

  void set_row(std::int64_t prompt_id, std::vector<int> prefix, std::vector<double> probs);
  void set_prompt_row(std::int64_t prompt_id, std::vector<double> probs);
  void set_default(std::vector<double> probs);
  /// Unseen prefixes get at least this mass per token (renormalized). Zero disables.
  void set_floor(double f) { floor_ = f; }

  int vocab_size() const override { return V_; }
  int horizon() const override { return H_; }
  void next_logdist(const Prompt& x, std::span<const int> prefix, std::vector<double>& out) const override;
  std::optional<std::vector<double>> iid_logdist(const Prompt& x) const override;

  json to_json() const;
  static TabularModel from_json(const json& j);
  /// Full conditional-table expansion of a policy over the given prompts.
  static TabularModel expand(const Policy& p, const std::vector<Prompt>& prompts);

 private:
  const std::vector<double>* lookup(const Prompt& x, std::span<const int> prefix) const;
  void check_row(const std::vector<double>& probs) const;

  int V_, H_;
  std::map<std::pair<std::int64_t, std::vector<int>>, std::vector<double>> rows_;
  std::map<std::int64_t, std::vector<double>> prompt_rows_;
  std::vector<double> default_;
  double floor_ = 0;
};

std::shared_ptr<Policy> policy_from_json(const json& j);

struct Estimate {
  double value = 0;
  double se = 0;
};

/// E_{pi_D}[sum_h ||phi − phi_bar||^2] under pi_{theta*}.
double sigma_star_sq_exact(const LinearARModel& piD, const PromptDist& mu);
Estimate sigma_star_sq_mc(const LinearARModel& piD, const PromptDist& mu, std::size_t n, const SeedTree& seeds);

}  // namespace covkit
