#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "covkit/metrics.hpp"
#include "covkit/tasks.hpp"
#include "test_util.hpp"

using namespace covkit;
using namespace covkit::testing;

TEST_CASE("bernoulli task: all-zero MLE frequency and missing mass") {
  auto t = bernoulli_task(0.02);
  CHECK(std::pow(0.98, 25) == doctest::Approx(0.6035).epsilon(1e-4));
  int zero = 0;
  for (int r = 0; r < 2000; ++r) {
    auto d = sample_dataset(*t.piD, t.mu, 25, SeedTree(static_cast<std::uint64_t>(r)));
    auto m = bernoulli_mle(d);
    if (m->next_dist(Prompt{0, {}}, {})[1] == 0.0) {
      ++zero;
      for (double v : coverage_exact(*t.piD, *m, t.mu, {2, 16, 1024}).values) CHECK(v == doctest::Approx(0.02).epsilon(1e-14));
    } else if (m->next_dist(Prompt{0, {}}, {})[1] >= 0.01) {
      CHECK(coverage_exact(*t.piD, *m, t.mu, {2}).values[0] == 0.0);
    }
  }
  CHECK(std::abs(zero / 2000.0 - std::pow(0.98, 25)) <= 0.04);
  CHECK_THROWS_AS(bernoulli_task(0.5), ValidationError);
  CHECK_THROWS_AS(bernoulli_task(0.0), ValidationError);
}

TEST_CASE("heterogeneous KL instance") {
  auto t = heterogeneous_kl_instance(10, 3, 1);
  auto neg = heterogeneous_kl_instance(10, 3, -1);
  for (const auto& y : all_responses(2, 3)) {
    CHECK(t.piD->logprob(Prompt{0, {}}, y) == doctest::Approx(-3 * std::log(2.0)).epsilon(1e-14));
    CHECK(neg.piD->logprob(Prompt{0, {}}, y) == doctest::Approx(-3 * std::log(2.0)).epsilon(1e-14));
  }
  const double q = std::exp(1.0) / (std::exp(1.0) + std::exp(-1.0));
  CHECK(t.piD->next_dist(Prompt{1, {}}, std::vector<int>{0, 1})[1] == doctest::Approx(q).epsilon(1e-14));
  LinearARModel zero(Vec::Zero(1), t.featmap, 3);
  const double kl_tok = q * std::log(2 * q) + (1 - q) * std::log(2 * (1 - q));
  CHECK(seq_kl_exact(*t.piD, zero, PromptDist::single(Prompt{1, {}})) == doctest::Approx(3 * kl_tok).epsilon(1e-12));
  CHECK(t.mu.weights()[1] == doctest::Approx(1.0 / 20).epsilon(1e-15));
}

TEST_CASE("sgd_lower variant 1 geometry and variance") {
  SgdLowerParams p;
  p.variant = SgdLowerVariant::LargeEta;
  p.H = 8;
  p.B = 64;
  p.N = 8;
  p.eta = 0.05;  // eta H B = 25.6
  auto t = sgd_lower_instance(p);
  const double eb = p.eta * p.H * p.B;
  auto& tab = dynamic_cast<const TokenTableFeatureMap&>(*t.featmap).table(0);
  Vec v0 = tab.row(1).transpose() / p.B;
  for (int a : {0, 2}) {
    Vec va = tab.row(a).transpose() / p.B;
    CHECK((va + eb * (v0 - va)).norm() == doctest::Approx(eb - 1).epsilon(1e-9));
    CHECK(va.norm() == doctest::Approx(1.0).epsilon(1e-12));
  }
  const auto& lm = dynamic_cast<const LinearARModel&>(*t.piD);
  CHECK(sigma_star_sq_exact(lm, t.mu) <= 1.0);
  p.eta = 0.01;
  CHECK_THROWS_WITH_AS(sgd_lower_instance(p), doctest::Contains("eta >= 8/(H B)"), ValidationError);
}

TEST_CASE("sgd_lower variant 2 prompt mass formula") {
  const double got = sgd_lower_mu_plus(16, 16, 1000, 8, std::exp(4.0));
  CHECK(got == doctest::Approx(256.0 / (512 * std::exp(1.0) * 1e3 * 64 * 4)).epsilon(1e-14));
  SgdLowerParams p;
  p.H = 32;
  p.B = 1024;
  p.Bbar = 16;
  p.N = 8;
  p.n = 4000;
  p.mu_plus = 0.005;
  auto t = sgd_lower_instance(p);
  CHECK(t.mu.weights()[0] == doctest::Approx(0.005));
  CHECK(t.theta0->norm() <= 1.0);
  p.H = 1;
  p.B = 16;
  p.Bbar = 32;
  CHECK_THROWS_AS(sgd_lower_instance(p), ValidationError);
}

TEST_CASE("sigma_star instance") {
  SigmaStarParams p;
  p.H = 128;
  p.B = 32;
  p.N = 2;
  p.n = 100;
  auto t = sigma_star_instance(p);
  const auto& lm = dynamic_cast<const LinearARModel&>(*t.piD);
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    Vec th(128);
    for (int k = 0; k < 128; ++k) th[k] = rng.normal() * 0.1;
    th = project_unit_ball(th);
    LinearARModel m(th, t.featmap, 128);
    std::vector<int> pre;
    for (int k = 0; k < static_cast<int>(rng.below(128)); ++k) pre.push_back(static_cast<int>(rng.below(2)));
    auto dm = m.next_dist(Prompt{1, {}}, pre);
    CHECK(dm[1] == doctest::Approx(0.5).epsilon(1e-14));
    auto dp = m.next_dist(Prompt{0, {}}, pre);
    const double z = p.B * th[static_cast<long>(pre.size())];
    CHECK(dp[1] == doctest::Approx(std::exp(z) / (1 + std::exp(z))).epsilon(1e-12));
  }
  LinearARModel zero(Vec::Zero(128), t.featmap, 128);
  CHECK(zero.next_dist(Prompt{0, {}}, {})[1] == doctest::Approx(0.5));
  CHECK(lm.theta().norm() <= 1.0);
  p.N = std::exp(20.0);
  CHECK_THROWS_AS(sigma_star_instance(p), ValidationError);
}

TEST_CASE("misspecification instance") {
  auto mi = misspec_instance(1.0, std::exp(3.0));
  CHECK(mi.p == doctest::Approx(1.0 / 96).epsilon(1e-14));
  for (double N : {3.0, 8.0, 100.0}) CHECK(coverage_exact(*mi.task.piD, *mi.candidates[0], mi.task.mu, {N}).values[0] == 0.0);
  const double M = std::exp(3.0);
  CHECK(coverage_exact(*mi.task.piD, *mi.candidates[1], mi.task.mu, {M}).values[0] >= mi.p * 0.5 - 1e-15);
  CHECK_THROWS_AS(misspec_instance(2.0, 10.0), ValidationError);
  CHECK_THROWS_AS(misspec_instance(1.0, 2.0), ValidationError);
}

TEST_CASE("make_task rejects unknown names and parameters") {
  CHECK_THROWS_AS(make_task(json{{"name", "nope"}}), ValidationError);
  CHECK_THROWS_AS(make_task(json{{"name", "bernoulli"}, {"p_star", 0.1}, {"typo", 1}}), ValidationError);
  CHECK(make_task(json{{"name", "bernoulli"}, {"p_star", 0.1}}).H() == 1);
}

// ---------------------------------------------------------------------------
// Graph tasks

namespace {

int parity(int v) { return v & 1; }

GraphConfig teaser() { return GraphConfig{}; }

GraphConfig horizon(int L) {
  GraphConfig c;
  c.family = GraphFamily::Horizon;
  c.L = L;
  return c;
}

Prompt as_prompt(const GraphSample& s) { return Prompt{0, s.prompt}; }

/// Enumerates every path through the layers that pi_D gives positive mass.
std::vector<std::pair<std::vector<int>, double>> support(const GraphDataPolicy& p, const Prompt& x, const LayeredDag& g) {
  std::vector<std::pair<std::vector<int>, double>> out;
  std::vector<std::vector<int>> frontier{{}};
  for (const auto& P : g.passable) {
    std::vector<std::vector<int>> next;
    for (const auto& pre : frontier)
      for (int v : P) {
        auto q = pre;
        q.push_back(v);
        next.push_back(q);
      }
    frontier = std::move(next);
  }
  for (const auto& y : frontier) {
    const double lp = p.logprob(x, y);
    if (lp > kNegInf) out.emplace_back(y, lp);
  }
  return out;
}

}  // namespace

TEST_CASE("graph: teaser classes have four valid paths and the stated rules") {
  auto cfg = teaser();
  GraphDataPolicy piD(cfg);
  Rng rng(5);
  for (int cls : {1, 2, 3}) {
    for (int i = 0; i < 50; ++i) {
      auto s = gen_graph_instance(cls, cfg, rng);
      CHECK(s.dag.path_count() == 4);
      CHECK(graph_class_of(s.dag, cfg) == cls);
      auto sup = support(piD, as_prompt(s), s.dag);
      if (cls == 3) {
        CHECK(sup.size() == 4);
        for (const auto& [y, lp] : sup) CHECK(lp == doctest::Approx(-2 * std::log(2.0)).epsilon(1e-14));
      } else {
        REQUIRE(sup.size() == 1);
        CHECK(sup[0].second == 0.0);
        for (int layer = 2; layer <= cfg.L + 1; ++layer) {
          const auto& P = s.dag.passable[static_cast<std::size_t>(layer - 1)];
          if (P.size() != 2) continue;
          CHECK(parity(P[0]) != parity(P[1]));
          const int chosen = sup[0].first[static_cast<std::size_t>(layer - 1)];
          CHECK(parity(chosen) == (cls == 1 ? parity(layer) : 1 - parity(layer)));
        }
      }
    }
  }
}

TEST_CASE("graph: horizon classes") {
  for (int L : {8, 16}) {
    auto cfg = horizon(L);
    GraphDataPolicy piD(cfg);
    Rng rng(static_cast<std::uint64_t>(L));
    for (int i = 0; i < 20; ++i) {
      auto s1 = gen_graph_instance(1, cfg, rng);
      CHECK(s1.dag.path_count() == 1);
      CHECK(support(piD, as_prompt(s1), s1.dag).size() == 1);
      auto s3 = gen_graph_instance(3, cfg, rng);
      CHECK(s3.dag.path_count() == 16);
      auto sup3 = support(piD, as_prompt(s3), s3.dag);
      CHECK(sup3.size() == 16);
      for (const auto& [y, lp] : sup3) CHECK(lp == doctest::Approx(-4 * std::log(2.0)).epsilon(1e-14));
      auto s2 = gen_graph_instance(2, cfg, rng);
      CHECK(s2.dag.path_count() == (std::size_t{1} << (L / 2)));
      CHECK(support(piD, as_prompt(s2), s2.dag).size() == 1);
    }
  }
}

TEST_CASE("graph: XOR rule flips when one single-passable node changes parity") {
  auto cfg = horizon(8);
  Rng rng(33);
  for (int i = 0; i < 30; ++i) {
    auto s = gen_graph_instance(2, cfg, rng);
    const auto& g = s.dag;
    std::vector<int> before;
    for (int layer = 2; layer <= cfg.L + 1; ++layer)
      if (g.passable[static_cast<std::size_t>(layer - 1)].size() == 2) before.push_back(graph_rule_choice(g, 2, cfg.family, layer));
    for (int layer = 2; layer <= cfg.L + 1; ++layer) {
      const auto li = static_cast<std::size_t>(layer - 1);
      if (g.passable[li].size() != 1) continue;
      // Swap the passable node for an unused id of opposite parity.
      auto used = g.all_nodes_sorted();
      int repl = -1;
      for (int c = 1; c <= cfg.m && repl < 0; ++c)
        if (parity(c) != parity(g.passable[li][0]) && !std::binary_search(used.begin(), used.end(), c)) repl = c;
      LayeredDag h = g;
      auto& lay = h.layers[li];
      *std::find(lay.begin(), lay.end(), g.passable[li][0]) = repl;
      std::sort(lay.begin(), lay.end());
      h.passable[li] = {repl};
      std::size_t k = 0;
      for (int l2 = 2; l2 <= cfg.L + 1; ++l2)
        if (h.passable[static_cast<std::size_t>(l2 - 1)].size() == 2) CHECK(graph_rule_choice(h, 2, cfg.family, l2) != before[k++]);
    }
  }
}

TEST_CASE("graph: sampled responses are valid paths") {
  for (auto cfg : {teaser(), horizon(8)}) {
    auto t = graph_task(cfg);
    Rng rng(4);
    for (int i = 0; i < 200; ++i) {
      auto tr = sample_one(*t.piD, t.mu, rng);
      auto g = parse_prompt(tr.x.tokens, cfg.m);
      CHECK(is_valid_path(g, tr.y));
      CHECK(t.reward(tr.x, tr.y) == 1);
    }
  }
}

TEST_CASE("graph: serialize/parse round trip") {
  Rng rng(8);
  for (int i = 0; i < 1000; ++i) {
    const auto cfg = i % 2 ? teaser() : horizon(8);
    auto s = gen_graph_instance(1 + static_cast<int>(rng.below(3)), cfg, rng);
    auto back = parse_prompt(s.prompt, cfg.m);
    CHECK(back == s.dag);
    CHECK(serialize_prompt(back) == s.prompt);
  }
}

TEST_CASE("graph: special tokens and text form") {
  auto cfg = teaser();
  Rng rng(1);
  auto s = gen_graph_instance(1, cfg, rng);
  CHECK(s.prompt.back() == cfg.m + 3);
  CHECK(std::count(s.prompt.begin(), s.prompt.end(), cfg.m + 2) == 1);
  const auto text = prompt_to_text(s.prompt, cfg.m);
  CHECK(text.find(" | ") != std::string::npos);
  CHECK(text.substr(text.size() - 1) == "=");
  const std::string tail = " / " + std::to_string(s.dag.layers.front()[0]) + " " + std::to_string(s.dag.layers.back()[0]) + " =";
  CHECK(text.substr(text.size() - tail.size()) == tail);
}

TEST_CASE("graph: malformed prompts are rejected with a position") {
  const int m = 128;
  CHECK_THROWS_AS(parse_prompt({m + 2, 10, 45, m + 3}, m), PromptParseError);
  CHECK_THROWS_AS(parse_prompt({}, m), PromptParseError);
  try {
    parse_prompt({10, 23, m + 3}, m);
    FAIL("expected a parse error");
  } catch (const PromptParseError& e) {
    CHECK(e.position == 2);
  }
  Rng rng(2);
  auto s = gen_graph_instance(1, teaser(), rng);
  auto bad = s.prompt;
  bad[1] = bad[0];
  CHECK_THROWS_AS(parse_prompt(bad, m), PromptParseError);
}

TEST_CASE("graph: m too small is rejected") {
  GraphConfig c;
  c.m = 20;
  Rng rng(1);
  CHECK_THROWS_AS(gen_graph_instance(1, c, rng), ValidationError);
}

TEST_CASE("graph: off-support prefixes get a uniform conditional") {
  auto cfg = teaser();
  GraphDataPolicy piD(cfg);
  Rng rng(3);
  auto s = gen_graph_instance(1, cfg, rng);
  const int wrong = s.dag.layers[0][0] == 1 ? 2 : 1;
  auto d = piD.next_dist(as_prompt(s), std::vector<int>{wrong});
  const double u = 1.0 / (cfg.m + 4);
  double sum = 0;
  for (double v : d) sum += v;
  CHECK(sum == doctest::Approx(1.0));
  CHECK(d[0] == doctest::Approx(u));
}
