#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "covkit/metrics.hpp"
#include "covkit/tasks.hpp"
#include "covkit/training.hpp"
#include "test_util.hpp"

using namespace covkit;
using namespace covkit::testing;

namespace {

/// Replays one trajectory forever.
class RepeatStream final : public ExampleStream {
 public:
  explicit RepeatStream(Trajectory t) : t_(std::move(t)) {}
  std::optional<Trajectory> next() override { return t_; }

 private:
  Trajectory t_;
};

std::shared_ptr<TokenTableFeatureMap> saturated_map() {
  Mat tab(2, 1);
  tab << 800, -800;
  return std::make_shared<TokenTableFeatureMap>(2, 1, 800.0, std::map<std::int64_t, Mat>{{0, tab}});
}

bool all_in_ball(const RunRecord& r) {
  for (const auto& [t, th] : r.checkpoints)
    if (th.norm() > 1 + 1e-12) return false;
  return r.final_theta.norm() <= 1 + 1e-12;
}

}  // namespace

TEST_CASE("mle_fit: all-ones Bernoulli data saturates at the boundary") {
  const double B = 2.0;
  auto task = bernoulli_task(0.3, B);
  Dataset d;
  d.H = 1;
  d.V = 2;
  for (int i = 0; i < 10; ++i) d.examples.push_back(Trajectory{Prompt{0, {}}, {1}});
  auto r = mle_fit(d, *task.featmap, 1e-10, 200000);
  CHECK(r.converged);
  CHECK(r.theta[0] == doctest::Approx(1.0).epsilon(1e-9));
  LinearARModel m(r.theta, task.featmap, 1);
  CHECK(m.next_dist(Prompt{0, {}}, {})[1] == doctest::Approx(std::exp(B) / (std::exp(B) + std::exp(-B))).epsilon(1e-9));
  // Grid search over [−1, 1] as an independent oracle for the maximizer.
  double best = -1, best_ll = kNegInf;
  for (int k = 0; k <= 2000; ++k) {
    const double th = -1 + k / 1000.0;
    const double ll = std::log(std::exp(B * th) / (std::exp(B * th) + std::exp(-B * th)));
    if (ll > best_ll) {
      best_ll = ll;
      best = th;
    }
  }
  CHECK(std::abs(best - r.theta[0]) <= 1e-3);
}

TEST_CASE("mle_fit: consistent for theta* = 0 at large n") {
  auto fm = std::make_shared<RandomFeatureMap>(2, 2, 1.0, 5);
  LinearARModel truth(Vec::Zero(2), fm, 2);
  auto d = sample_dataset(truth, one_prompt(), 10000, SeedTree(3));
  auto r = mle_fit(d, *fm, 1e-6, 300);
  CHECK(r.theta.norm() <= 0.1);
}

TEST_CASE("mle_fit: duplicated dataset gives a bit-identical estimate") {
  auto fm = std::make_shared<RandomFeatureMap>(3, 2, 1.0, 9);
  Vec th(2);
  th << 0.4, -0.3;
  LinearARModel truth(th, fm, 2);
  auto d = sample_dataset(truth, one_prompt(), 64, SeedTree(4));
  Dataset dd = d;
  dd.examples.insert(dd.examples.end(), d.examples.begin(), d.examples.end());
  auto a = mle_fit(d, *fm, 1e-9, 5000), b = mle_fit(dd, *fm, 1e-9, 5000);
  CHECK((a.theta.array() == b.theta.array()).all());
  CHECK(a.iters == b.iters);
}

TEST_CASE("sgd_vanilla: zero-gradient stream keeps theta constant") {
  auto fm = saturated_map();
  Vec th(1);
  th << 1;
  TrainConfig cfg;
  cfg.eta = 0.1;
  cfg.T = 50;
  cfg.checkpoint_every = 5;
  RepeatStream s(Trajectory{Prompt{0, {}}, {0, 0, 0}});
  auto r = sgd_vanilla(s, *fm, cfg, th);
  for (const auto& [t, v] : r.checkpoints) CHECK(v[0] == 1.0);
  CHECK(r.n_samples == 50);
}

TEST_CASE("learners keep iterates in the unit ball and are deterministic") {
  auto fm = std::make_shared<RandomFeatureMap>(3, 3, 2.0, 17);
  Vec th(3);
  th << 0.5, 0.2, -0.6;
  LinearARModel truth(project_unit_ball(th), fm, 3);
  TrainConfig cfg;
  cfg.eta = 0.5;
  cfg.T = 200;
  cfg.K = 2;
  cfg.lambda = 0.1;
  cfg.A = 1.0;
  cfg.checkpoint_every = 1;
  auto run = [&](int which) {
    SamplingStream s(truth, one_prompt(), Rng(42));
    switch (which) {
      case 0: return sgd_vanilla(s, *fm, cfg, Vec::Zero(3));
      case 1: return sgd_normalized(s, *fm, cfg, Vec::Zero(3));
      case 2: return sgd_token(s, *fm, cfg, Vec::Zero(3));
      default: return sgd_truncated_distill(s, truth, *fm, cfg, Vec::Zero(3));
    }
  };
  for (int w = 0; w < 4; ++w) {
    auto a = run(w), b = run(w);
    CHECK(all_in_ball(a));
    CHECK(a.checkpoints_jsonl() == b.checkpoints_jsonl());
  }
}

TEST_CASE("checkpoint schedules") {
  auto fm = saturated_map();
  TrainConfig cfg;
  cfg.eta = 0.1;
  cfg.T = 20;
  cfg.geometric_checkpoints = true;
  RepeatStream s(Trajectory{Prompt{0, {}}, {0}});
  auto r = sgd_vanilla(s, *fm, cfg, Vec::Zero(1));
  std::vector<std::size_t> ts;
  for (const auto& c : r.checkpoints) ts.push_back(c.first);
  CHECK(ts == std::vector<std::size_t>{0, 1, 2, 4, 8, 16, 20});
}

TEST_CASE("normalized_step properties") {
  Vec z = Vec::Zero(3);
  bool deg = false;
  CHECK(normalized_step(z, 0.3, 0.0, &deg).norm() == 0.0);
  CHECK(deg);
  CHECK(normalized_step(z, 0.3, 1.0).norm() == 0.0);
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    Vec g(3);
    for (int k = 0; k < 3; ++k) g[k] = rng.normal() * 5;
    CHECK(normalized_step(g, 0.3, 0.0).norm() == doctest::Approx(0.3).epsilon(1e-14));
    const double lam = rng.uniform01();
    const double n = normalized_step(g, 0.3, lam).norm();
    CHECK(n <= 0.3 * g.norm() / (lam + g.norm()) + 1e-15);
    CHECK(n < 0.3);
  }
}

TEST_CASE("sgd_normalized flags zero gradients with zero lambda") {
  auto fm = saturated_map();
  Vec th(1);
  th << 1;
  TrainConfig cfg;
  cfg.eta = 0.1;
  cfg.T = 5;
  RepeatStream s(Trajectory{Prompt{0, {}}, {0, 0}});
  auto r = sgd_normalized(s, *fm, cfg, th);
  CHECK(r.final_theta[0] == 1.0);
  REQUIRE(r.flags.size() == 1);
  CHECK(r.flags[0] == "zero_gradient_with_zero_lambda");
}

TEST_CASE("sgd_token: equals sgd_vanilla at H = 1") {
  auto fm = std::make_shared<RandomFeatureMap>(3, 2, 1.5, 3);
  LinearARModel truth(Vec::Zero(2), fm, 1);
  TrainConfig cfg;
  cfg.eta = 0.2;
  cfg.T = 100;
  cfg.checkpoint_every = 1;
  SamplingStream a(truth, one_prompt(), Rng(5)), b(truth, one_prompt(), Rng(5));
  CHECK(sgd_token(a, *fm, cfg, Vec::Zero(2)).checkpoints_jsonl() == sgd_vanilla(b, *fm, cfg, Vec::Zero(2)).checkpoints_jsonl());
}

TEST_CASE("sgd_token: deterministic-path stream keeps theta constant and steps stay small") {
  auto fm = saturated_map();
  Vec th(1);
  th << 1;
  TrainConfig cfg;
  cfg.eta = 0.05;
  cfg.T = 10;
  RepeatStream s(Trajectory{Prompt{0, {}}, {0, 0, 0, 0}});
  CHECK(sgd_token(s, *fm, cfg, th).final_theta[0] == 1.0);

  auto rf = std::make_shared<RandomFeatureMap>(3, 2, 1.5, 8);
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    Vec t(2);
    t << rng.uniform01() - 0.5, rng.uniform01() - 0.5;
    const int tok = static_cast<int>(rng.below(3));
    std::vector<int> pre{static_cast<int>(rng.below(3))};
    CHECK((0.05 * grad_token_logprob(t, *rf, Prompt{0, {}}, pre, tok)).norm() <= 2 * 0.05 * 1.5 + 1e-15);
  }
}

TEST_CASE("truncation_weights: three-case formula") {
  auto a = truncation_weights({0.6, 0.6, 0.6}, 1.0);
  CHECK(a[0] == 1.0);
  CHECK(a[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(a[2] == 0.0);
  auto b = truncation_weights({0.1, 0.2, 0.3}, 1.0);
  for (double v : b) CHECK(v == 1.0);
}

TEST_CASE("truncation identity on random inputs") {
  Rng rng(7);
  for (int i = 0; i < 10000; ++i) {
    std::vector<double> e(1 + rng.below(8));
    double total = 0;
    for (auto& v : e) total += (v = rng.uniform01() * (rng.bernoulli(0.2) ? 0.0 : 1.0));
    const double A = 0.05 + 2 * rng.uniform01();
    auto a = truncation_weights(e, A);
    double lhs = 0;
    for (std::size_t h = 0; h < e.size(); ++h) lhs += a[h] * e[h];
    CHECK(std::abs(lhs - std::min(A, total)) <= 1e-12);
  }
}

TEST_CASE("distillation: small prefix KL means the vanilla step") {
  auto fm = std::make_shared<RandomFeatureMap>(3, 2, 1.0, 12);
  Vec th(2);
  th << 0.2, 0.1;
  LinearARModel teacher(th, fm, 3);
  TrainConfig cfg;
  cfg.eta = 0.1;
  cfg.T = 30;
  cfg.A = 1e6;
  cfg.checkpoint_every = 1;
  SamplingStream a(teacher, one_prompt(), Rng(9)), b(teacher, one_prompt(), Rng(9));
  auto d = sgd_truncated_distill(a, teacher, *fm, cfg, Vec::Zero(2));
  auto v = sgd_vanilla(b, *fm, cfg, Vec::Zero(2));
  REQUIRE(d.checkpoints.size() == v.checkpoints.size());
  for (std::size_t i = 0; i < d.checkpoints.size(); ++i)
    CHECK((d.checkpoints[i].second - v.checkpoints[i].second).norm() <= 1e-12);
  CHECK(d.identity_checks == 30);
}

TEST_CASE("distillation rejects a teacher with zero mass on observed tokens") {
  auto fm = std::make_shared<RandomFeatureMap>(2, 1, 1.0, 12);
  auto teacher = bern(0.0, 2);
  TrainConfig cfg;
  cfg.eta = 0.1;
  cfg.T = 1;
  cfg.A = 1;
  RepeatStream s(Trajectory{Prompt{0, {}}, {1, 1}});
  CHECK_THROWS(sgd_truncated_distill(s, *teacher, *fm, cfg, Vec::Zero(1)));
}

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c.eta = 1;
  c.T = 1;
  CHECK_NOTHROW(c.validate());
  CHECK_THROWS_AS(c.validate(true), ValidationError);
}

TEST_CASE("default schedules") {
  auto s = normalized_default_schedule(8.0, 0.0, 1000, 2.0);
  CHECK(s.eta == doctest::Approx(1.0 / 256).epsilon(1e-15));
  CHECK(s.lambda == doctest::Approx(std::log(8.0) / (16 * s.eta)).epsilon(1e-15));
  CHECK(distill_default_eta(1.0, 0.0, 100, 1.0) == doctest::Approx(1.0 / 66).epsilon(1e-15));
}
