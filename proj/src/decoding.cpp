#include "covkit/decoding.hpp"

#include <cmath>

#include "covkit/metrics.hpp"
#include "covkit/parallel.hpp"

namespace covkit {

TTTPolicy::TTTPolicy(Vec base_theta, FeatureMapPtr fm, double eta, int H)
    : theta_(std::move(base_theta)), fm_(std::move(fm)), eta_(eta), H_(H) {
  if (!fm_) throw ValidationError("TTT policy needs a feature map");
  if (theta_.size() != fm_->dim()) throw ValidationError("theta dimension does not match feature dimension");
  if (!(eta_ >= 0)) throw ValidationError("TTT step size must be >= 0");
}

namespace {

class TTTCursor final : public Cursor {
 public:
  TTTCursor(const FeatureMap& fm, const Prompt& x, Vec theta, std::vector<int> prefix, double eta)
      : fm_(fm), x_(x), theta_(std::move(theta)), prefix_(std::move(prefix)), eta_(eta) {
    fm_.candidates(x_, prefix_, phi_);
    linear_logdist(phi_, theta_, ld_);
  }

  const std::vector<double>& logdist() const override { return ld_; }
  std::size_t depth() const override { return prefix_.size(); }

  std::unique_ptr<Cursor> advance(int token) const override {
    Vec p(phi_.rows());
    for (Eigen::Index v = 0; v < phi_.rows(); ++v) p[v] = ld_[v] == kNegInf ? 0.0 : std::exp(ld_[v]);
    const Vec g = phi_.row(token).transpose() - phi_.transpose() * p;
    std::vector<int> next = prefix_;
    next.push_back(token);
    return std::make_unique<TTTCursor>(fm_, x_, project_unit_ball(theta_ + eta_ * g), std::move(next), eta_);
  }

  const Vec& theta() const { return theta_; }

 private:
  const FeatureMap& fm_;
  const Prompt& x_;
  Vec theta_;
  std::vector<int> prefix_;
  double eta_;
  Mat phi_;
  std::vector<double> ld_;
};

}  // namespace

std::unique_ptr<Cursor> TTTPolicy::cursor(const Prompt& x) const {
  return std::make_unique<TTTCursor>(*fm_, x, theta_, std::vector<int>{}, eta_);
}

Vec TTTPolicy::replay(const Prompt& x, std::span<const int> prefix) const {
  Vec th = theta_;
  for (std::size_t j = 0; j < prefix.size(); ++j)
    th = project_unit_ball(th + eta_ * grad_token_logprob(th, *fm_, x, prefix.first(j), prefix[j]));
  return th;
}

void TTTPolicy::next_logdist(const Prompt& x, std::span<const int> prefix, std::vector<double>& out) const {
  if (static_cast<int>(prefix.size()) >= H_) throw ValidationError("prefix length must be < H");
  Mat c;
  fm_->candidates(x, prefix, c);
  linear_logdist(c, replay(x, prefix), out);
}

std::vector<int> best_of_n(const Policy& policy, const RewardFn& reward, const Prompt& x, std::size_t N, Rng& rng) {
  if (N < 1) throw ValidationError("best_of_n needs N >= 1");
  std::vector<int> best;
  int best_r = -1;
  for (std::size_t i = 0; i < N; ++i) {
    auto y = policy.sample(x, rng);
    const int r = reward(x, y);
    if (r > best_r) {
      best_r = r;
      best = std::move(y);
    }
  }
  return best;
}

RegretEstimate bon_regret(const Policy& policy, const Policy& piT, const RewardFn& reward, const PromptDist& mu, std::size_t N,
                          std::size_t trials, const SeedTree& seeds, double delta) {
  if (trials < 100) throw ValidationError("bon_regret needs at least 100 trials");
  constexpr std::size_t chunk = 256;
  std::vector<double> diffs(trials);
  parallel_for((trials + chunk - 1) / chunk, [&](std::size_t ci) {
    Rng rng = seeds.derive("chunk", ci).rng();
    for (std::size_t i = ci * chunk; i < std::min(trials, (ci + 1) * chunk); ++i) {
      const Prompt x = mu.sample(rng);
      const auto yT = piT.sample(x, rng);
      const auto yB = best_of_n(policy, reward, x, N, rng);
      diffs[i] = static_cast<double>(reward(x, yT) - reward(x, yB));
    }
  });
  RegretEstimate r;
  r.trials = trials;
  r.estimate = pairwise_sum(diffs) / static_cast<double>(trials);
  r.half_width = std::sqrt(2.0 * std::log(2.0 / delta) / static_cast<double>(trials));
  return r;
}

RewardFn adversarial_reward(std::shared_ptr<const Policy> piT, std::shared_ptr<const Policy> piHat, double N) {
  if (!(N >= 1)) throw ValidationError("adversarial reward needs N >= 1");
  const double l2N = std::log(2.0 * N);
  return [piT = std::move(piT), piHat = std::move(piHat), l2N](const Prompt& x, std::span<const int> y) -> int {
    const double a = piT->logprob(x, y);
    if (a == kNegInf) return 0;
    const double b = piHat->logprob(x, y);
    return (b == kNegInf || ratio_event(a - b, l2N)) ? 1 : 0;
  };
}

}  // namespace covkit
