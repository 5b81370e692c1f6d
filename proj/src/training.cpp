#include "covkit/training.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>

#include "covkit/metrics.hpp"

namespace covkit {

void TrainConfig::validate(bool needs_A) const {
  if (!(eta > 0)) throw ValidationError("eta must be positive");
  if (T < 1) throw ValidationError("T must be positive");
  if (K < 1) throw ValidationError("K must be >= 1");
  if (!(lambda >= 0)) throw ValidationError("lambda must be >= 0");
  if (needs_A && !(A > 0)) throw ValidationError("A must be positive for distillation");
}

json RunRecord::to_json() const {
  json cps = json::array();
  for (const auto& [t, th] : checkpoints) cps.push_back(t);
  return {{"checkpoint_t", cps},
          {"final_theta", std::vector<double>(final_theta.data(), final_theta.data() + final_theta.size())},
          {"n_samples", n_samples},
          {"flags", flags},
          {"identity_checks", identity_checks},
          {"identity_max_gap", identity_max_gap}};
}

std::string RunRecord::checkpoints_jsonl() const {
  std::ostringstream os;
  for (const auto& [t, th] : checkpoints)
    os << json{{"t", t}, {"theta", std::vector<double>(th.data(), th.data() + th.size())}}.dump() << '\n';
  return os.str();
}

namespace {

Vec halving_sum(const std::vector<Vec>& g, std::size_t lo, std::size_t hi) {
  if (hi - lo == 1) return g[lo];
  const std::size_t mid = lo + (hi - lo) / 2;
  return halving_sum(g, lo, mid) + halving_sum(g, mid, hi);
}

class Recorder {
 public:
  Recorder(const TrainConfig& cfg, RunRecord& rec) : cfg_(cfg), rec_(rec), start_(std::chrono::steady_clock::now()) {}

  void maybe(std::size_t t, const Vec& theta) {
    bool take = t == 0 || t == cfg_.T;
    if (cfg_.checkpoint_every > 0 && t % cfg_.checkpoint_every == 0) take = true;
    if (cfg_.geometric_checkpoints && t > 0 && (t & (t - 1)) == 0) take = true;
    if (take && (rec_.checkpoints.empty() || rec_.checkpoints.back().first != t)) rec_.checkpoints.emplace_back(t, theta);
  }

  void finish(const Vec& theta) {
    rec_.final_theta = theta;
    rec_.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  const TrainConfig& cfg_;
  RunRecord& rec_;
  std::chrono::steady_clock::time_point start_;
};

Trajectory pull(ExampleStream& s) {
  auto t = s.next();
  if (!t) throw std::runtime_error("example stream exhausted before T steps");
  return std::move(*t);
}

void check_theta0(const Vec& theta0, const FeatureMap& fm) {
  if (theta0.size() != fm.dim()) throw ValidationError("theta0 dimension does not match the feature map");
  if (theta0.norm() > 1 + 1e-12) throw ValidationError("theta0 must lie in the unit ball");
}

}  // namespace

Vec mean_gradient(const std::vector<Vec>& grads) {
  if (grads.empty()) throw ValidationError("mean_gradient of an empty set");
  return halving_sum(grads, 0, grads.size()) / static_cast<double>(grads.size());
}

MleResult mle_fit(const Dataset& data, const FeatureMap& fm, double tol, std::size_t max_iters, std::optional<Vec> theta0) {
  if (data.examples.empty()) throw ValidationError("mle_fit needs a nonempty dataset");
  const int H = data.H > 0 ? data.H : static_cast<int>(data.examples[0].y.size());
  const double B = fm.bound();
  const double step = 1.0 / (2.0 * H * B * B);
  MleResult r;
  r.theta = theta0 ? *theta0 : Vec::Zero(fm.dim());
  std::vector<Vec> grads(data.size());
  for (r.iters = 0; r.iters < max_iters; ++r.iters) {
    for (std::size_t i = 0; i < data.size(); ++i) grads[i] = grad_logprob(r.theta, fm, data.examples[i].x, data.examples[i].y);
    const Vec g = mean_gradient(grads);
    const Vec next = project_unit_ball(r.theta + step * g);
    r.grad_map_norm = (next - r.theta).norm() / step;
    if (r.grad_map_norm <= tol) {
      r.converged = true;
      break;
    }
    r.theta = next;
  }
  return r;
}

RunRecord sgd_vanilla(ExampleStream& stream, const FeatureMap& fm, const TrainConfig& cfg, const Vec& theta0) {
  cfg.validate();
  check_theta0(theta0, fm);
  RunRecord rec;
  Recorder R(cfg, rec);
  Vec theta = theta0;
  R.maybe(0, theta);
  for (std::size_t t = 1; t <= cfg.T; ++t) {
    const Trajectory ex = pull(stream);
    theta = project_unit_ball(theta + cfg.eta * grad_logprob(theta, fm, ex.x, ex.y));
    ++rec.n_samples;
    R.maybe(t, theta);
  }
  R.finish(theta);
  return rec;
}

Vec normalized_step(const Vec& g, double eta, double lambda, bool* degenerate) {
  const double n = g.norm();
  if (lambda + n == 0) {
    if (degenerate) *degenerate = true;
    return Vec::Zero(g.size());
  }
  return eta * g / (lambda + n);
}

RunRecord sgd_normalized(ExampleStream& stream, const FeatureMap& fm, const TrainConfig& cfg, const Vec& theta0) {
  cfg.validate();
  check_theta0(theta0, fm);
  RunRecord rec;
  Recorder R(cfg, rec);
  Vec theta = theta0;
  R.maybe(0, theta);
  bool flagged = false;
  std::vector<Vec> grads(cfg.K);
  for (std::size_t t = 1; t <= cfg.T; ++t) {
    for (std::size_t k = 0; k < cfg.K; ++k) {
      const Trajectory ex = pull(stream);
      grads[k] = grad_logprob(theta, fm, ex.x, ex.y);
    }
    rec.n_samples += cfg.K;
    bool deg = false;
    theta = project_unit_ball(theta + normalized_step(mean_gradient(grads), cfg.eta, cfg.lambda, &deg));
    if (deg && !flagged) {
      rec.flags.push_back("zero_gradient_with_zero_lambda");
      flagged = true;
    }
    R.maybe(t, theta);
  }
  R.finish(theta);
  return rec;
}

RunRecord sgd_token(ExampleStream& stream, const FeatureMap& fm, const TrainConfig& cfg, const Vec& theta0) {
  cfg.validate();
  check_theta0(theta0, fm);
  RunRecord rec;
  Recorder R(cfg, rec);
  Vec theta = theta0;
  R.maybe(0, theta);
  for (std::size_t t = 1; t <= cfg.T; ++t) {
    const Trajectory ex = pull(stream);
    const std::span<const int> y(ex.y);
    for (std::size_t h = 0; h < y.size(); ++h)
      theta = project_unit_ball(theta + cfg.eta * grad_token_logprob(theta, fm, ex.x, y.first(h), y[h]));
    ++rec.n_samples;
    R.maybe(t, theta);
  }
  R.finish(theta);
  return rec;
}

std::vector<double> truncation_weights(const std::vector<double>& eps, double A) {
  std::vector<double> a(eps.size());
  double before = 0;
  for (std::size_t h = 0; h < eps.size(); ++h) {
    const double after = before + eps[h];
    if (after <= A) a[h] = 1.0;
    else if (before > A) a[h] = 0.0;
    else a[h] = (A - before) / eps[h];
    before = after;
  }
  return a;
}

RunRecord sgd_truncated_distill(ExampleStream& stream, const Policy& teacher, const FeatureMap& fm, const TrainConfig& cfg,
                                const Vec& theta0) {
  cfg.validate(true);
  check_theta0(theta0, fm);
  RunRecord rec;
  Recorder R(cfg, rec);
  Vec theta = theta0;
  R.maybe(0, theta);
  Mat c;
  std::vector<double> ld;
  for (std::size_t t = 1; t <= cfg.T; ++t) {
    const Trajectory ex = pull(stream);
    const std::span<const int> y(ex.y);
    const auto tconds = teacher.conditionals_along(ex.x, y);
    std::vector<double> eps(y.size());
    std::vector<Vec> step_grads(y.size());
    for (std::size_t h = 0; h < y.size(); ++h) {
      if (tconds[h].at(static_cast<std::size_t>(y[h])) == kNegInf)
        throw std::runtime_error("teacher assigns zero mass to an observed token");
      fm.candidates(ex.x, y.first(h), c);
      linear_logdist(c, theta, ld);
      eps[h] = kl_logdist(tconds[h], ld);
      step_grads[h] = grad_token_logprob(theta, fm, ex.x, y.first(h), y[h]);
    }
    const auto alpha = truncation_weights(eps, cfg.A);
    double lhs = 0, total = 0;
    Vec g = Vec::Zero(theta.size());
    for (std::size_t h = 0; h < y.size(); ++h) {
      if (alpha[h] > 0) {
        lhs += alpha[h] * eps[h];
        g += alpha[h] * step_grads[h];
      }
      total += eps[h];
    }
    const double rhs = std::min(cfg.A, total);
    const double gap = std::abs(lhs - rhs);
    ++rec.identity_checks;
    rec.identity_max_gap = std::max(rec.identity_max_gap, gap);
    if (gap > 1e-9 * std::max(1.0, rhs)) throw std::logic_error("truncation identity violated");
    theta = project_unit_ball(theta + cfg.eta * g);
    ++rec.n_samples;
    R.maybe(t, theta);
  }
  R.finish(theta);
  return rec;
}

Schedule normalized_default_schedule(double N, double sigma_sq, std::size_t T, double B) {
  if (!(N > 1) || T < 1 || !(B > 0)) throw ValidationError("schedule needs N > 1, T >= 1, B > 0");
  const double lN = std::log(N);
  double eta = 1.0 / (128.0 * B);
  if (sigma_sq > 0) eta = std::min(eta, std::pow(lN / (sigma_sq * static_cast<double>(T)), 0.25));
  return {eta, lN / (16.0 * eta)};
}

double distill_default_eta(double A, double sigma_sq, std::size_t T, double B) {
  if (!(A > 0) || T < 1 || !(B > 0)) throw ValidationError("schedule needs A > 0, T >= 1, B > 0");
  double eta = 1.0 / ((64.0 * A + 2.0) * B * B);
  if (sigma_sq > 0) eta = std::min(eta, std::sqrt(1.0 / (static_cast<double>(T) * sigma_sq * A)));
  return eta;
}

}  // namespace covkit
