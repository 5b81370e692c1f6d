#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "covkit/core.hpp"
#include "covkit/models.hpp"

namespace covkit {

using RewardFn = std::function<int(const Prompt&, std::span<const int>)>;

/// Decoding with a token-level gradient step on each emitted token. The
/// parameter restarts from the base theta for every prompt.
class TTTPolicy final : public Policy {
 public:
  TTTPolicy(Vec base_theta, FeatureMapPtr fm, double eta, int H);

  int vocab_size() const override { return fm_->vocab_size(); }
  int horizon() const override { return H_; }
  void next_logdist(const Prompt& x, std::span<const int> prefix, std::vector<double>& out) const override;
  std::unique_ptr<Cursor> cursor(const Prompt& x) const override;

  /// Parameter after replaying the prefix from the base.
  Vec replay(const Prompt& x, std::span<const int> prefix) const;
  const Vec& base() const { return theta_; }
  double eta() const { return eta_; }

 private:
  Vec theta_;
  FeatureMapPtr fm_;
  double eta_;
  int H_;
};

/// N draws; the first one with maximal reward wins.
std::vector<int> best_of_n(const Policy& policy, const RewardFn& reward, const Prompt& x, std::size_t N, Rng& rng);

struct RegretEstimate {
  double estimate = 0;
  double half_width = 0;
  std::size_t trials = 0;
};

/// MC estimate of E_x[r(x, y_T) − r(x, y_BoN)], Hoeffding half-width for the
/// [−1, 1]-valued differences.
RegretEstimate bon_regret(const Policy& policy, const Policy& piT, const RewardFn& reward, const PromptDist& mu, std::size_t N,
                          std::size_t trials, const SeedTree& seeds, double delta = 0.05);

/// r(x, y) = 1 iff log pi_T(y|x) − log pi_hat(y|x) >= log(2N).
RewardFn adversarial_reward(std::shared_ptr<const Policy> piT, std::shared_ptr<const Policy> piHat, double N);

}  // namespace covkit
