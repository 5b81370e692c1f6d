#include "covkit/core.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace covkit {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

SeedTree SeedTree::derive(const std::string& label, std::uint64_t index) const {
  SeedTree child = *this;
  child.key_ = splitmix64(splitmix64(key_ ^ fnv1a(label)) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
  child.path_.emplace_back(label, index);
  return child;
}

json SeedTree::provenance() const {
  json p = json::array();
  for (const auto& [l, i] : path_) p.push_back({l, i});
  return {{"root", root_}, {"path", p}};
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw ValidationError("Rng::below(0)");
  // Rejection keeps the draw exactly uniform.
  std::uint64_t lim = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  for (;;) {
    std::uint64_t r = eng_();
    if (r < lim) return r % n;
  }
}

int Rng::categorical(std::span<const double> probs) {
  double total = 0;
  for (double p : probs) total += p;
  if (!(total > 0) || !std::isfinite(total)) throw std::runtime_error("categorical: invalid weights");
  double u = uniform01() * total;
  double acc = 0;
  int last = -1;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0) continue;
    acc += probs[i];
    last = static_cast<int>(i);
    if (u < acc) return last;
  }
  return last;
}

int Rng::categorical_log(std::span<const double> logp) {
  double m = kNegInf;
  for (double v : logp) m = std::max(m, v);
  if (m == kNegInf) throw std::runtime_error("categorical_log: all weights are zero");
  std::vector<double> w(logp.size());
  for (std::size_t i = 0; i < logp.size(); ++i) w[i] = logp[i] == kNegInf ? 0.0 : std::exp(logp[i] - m);
  return categorical(w);
}

double Rng::normal() {
  double u1 = uniform01();
  double u2 = uniform01();
  if (u1 <= 0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

json prompt_to_json(const Prompt& x) {
  if (x.tokens.empty()) return x.id;
  return {{"id", x.id}, {"tokens", x.tokens}};
}

Prompt prompt_from_json(const json& j) {
  Prompt x;
  if (j.is_number_integer()) {
    x.id = j.get<std::int64_t>();
  } else if (j.is_object()) {
    x.id = j.value("id", std::int64_t{0});
    if (j.contains("tokens")) x.tokens = j.at("tokens").get<std::vector<int>>();
  } else if (j.is_array()) {
    x.tokens = j.get<std::vector<int>>();
  } else {
    throw ValidationError("prompt must be an integer, array or object");
  }
  return x;
}

namespace {

class GenericCursor final : public Cursor {
 public:
  GenericCursor(const Policy& p, const Prompt& x, std::vector<int> prefix)
      : p_(p), x_(x), prefix_(std::move(prefix)) {
    p_.next_logdist(x_, prefix_, ld_);
  }
  const std::vector<double>& logdist() const override { return ld_; }
  std::unique_ptr<Cursor> advance(int token) const override {
    std::vector<int> next = prefix_;
    next.push_back(token);
    return std::make_unique<GenericCursor>(p_, x_, std::move(next));
  }
  std::size_t depth() const override { return prefix_.size(); }

 private:
  const Policy& p_;
  const Prompt& x_;
  std::vector<int> prefix_;
  std::vector<double> ld_;
};

}  // namespace

std::vector<double> Policy::next_dist(const Prompt& x, std::span<const int> prefix) const {
  std::vector<double> ld;
  next_logdist(x, prefix, ld);
  for (double& v : ld) v = v == kNegInf ? 0.0 : std::exp(v);
  return ld;
}

std::unique_ptr<Cursor> Policy::cursor(const Prompt& x) const {
  return std::make_unique<GenericCursor>(*this, x, std::vector<int>{});
}

double Policy::logprob(const Prompt& x, std::span<const int> y) const {
  double lp = 0;
  auto c = cursor(x);
  for (std::size_t h = 0; h < y.size(); ++h) {
    lp += c->logdist().at(static_cast<std::size_t>(y[h]));
    if (lp == kNegInf) return kNegInf;
    if (h + 1 < y.size()) c = c->advance(y[h]);
  }
  return lp;
}

std::vector<int> Policy::sample(const Prompt& x, Rng& rng) const {
  const int H = horizon();
  std::vector<int> y;
  y.reserve(static_cast<std::size_t>(H));
  auto c = cursor(x);
  for (int h = 0; h < H; ++h) {
    int t = rng.categorical_log(c->logdist());
    y.push_back(t);
    if (h + 1 < H) c = c->advance(t);
  }
  return y;
}

std::vector<std::vector<double>> Policy::conditionals_along(const Prompt& x, std::span<const int> y) const {
  std::vector<std::vector<double>> out;
  out.reserve(y.size());
  auto c = cursor(x);
  for (std::size_t h = 0; h < y.size(); ++h) {
    out.push_back(c->logdist());
    if (h + 1 < y.size()) c = c->advance(y[h]);
  }
  return out;
}

PromptDist PromptDist::finite(std::vector<Prompt> support, std::vector<double> weights) {
  if (support.empty() || support.size() != weights.size())
    throw ValidationError("finite prompt distribution needs matching nonempty support and weights");
  double tot = 0;
  for (double w : weights) {
    if (!(w >= 0)) throw ValidationError("prompt weights must be nonnegative");
    tot += w;
  }
  if (!(tot > 0)) throw ValidationError("prompt weights sum to zero");
  for (double& w : weights) w /= tot;
  PromptDist d;
  d.support_ = std::move(support);
  d.weights_ = std::move(weights);
  return d;
}

PromptDist PromptDist::sampler(std::function<Prompt(Rng&)> f) {
  PromptDist d;
  d.sampler_ = std::move(f);
  return d;
}

Prompt PromptDist::sample(Rng& rng) const {
  if (sampler_) return sampler_(rng);
  if (support_.size() == 1) return support_[0];
  return support_[static_cast<std::size_t>(rng.categorical(weights_))];
}

Trajectory sample_one(const Policy& policy, const PromptDist& mu, Rng& rng) {
  Trajectory t;
  t.x = mu.sample(rng);
  t.y = policy.sample(t.x, rng);
  return t;
}

Dataset sample_dataset(const Policy& policy, const PromptDist& mu, std::size_t n, const SeedTree& seeds) {
  if (n < 1) throw ValidationError("sample_dataset: n must be >= 1");
  Dataset d;
  d.H = policy.horizon();
  d.V = policy.vocab_size();
  d.provenance = seeds.provenance();
  d.provenance["n"] = n;
  Rng rng = seeds.rng();
  d.examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) d.examples.push_back(sample_one(policy, mu, rng));
  return d;
}

void write_dataset_jsonl(const Dataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  for (const auto& t : d.examples) out << json{{"x", prompt_to_json(t.x)}, {"y", t.y}}.dump() << '\n';
  std::ofstream side(path + ".meta.json");
  side << json{{"H", d.H}, {"V", d.V}, {"n", d.size()}, {"seed", d.provenance}}.dump(2) << '\n';
}

Dataset read_dataset_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open dataset " + path);
  Dataset d;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    Trajectory t;
    t.x = prompt_from_json(j.at("x"));
    t.y = j.at("y").get<std::vector<int>>();
    d.examples.push_back(std::move(t));
  }
  std::ifstream side(path + ".meta.json");
  if (side) {
    json m = json::parse(side);
    d.H = m.value("H", 0);
    d.V = m.value("V", 0);
    d.provenance = m.value("seed", json::object());
  }
  if (d.examples.empty()) throw ValidationError("dataset " + path + " is empty");
  if (d.H == 0) d.H = static_cast<int>(d.examples[0].y.size());
  for (const auto& t : d.examples) {
    if (static_cast<int>(t.y.size()) != d.H) throw ValidationError("dataset has inconsistent horizons");
    for (int v : t.y)
      if (v < 0 || (d.V > 0 && v >= d.V)) throw ValidationError("dataset token out of vocabulary");
  }
  if (d.V == 0) {
    for (const auto& t : d.examples)
      for (int v : t.y) d.V = std::max(d.V, v + 1);
  }
  return d;
}

double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0;
    for (double x : v) s += x;
    return s;
  }
  std::size_t half = v.size() / 2;
  return pairwise_sum(v.subspan(0, half)) + pairwise_sum(v.subspan(half));
}

double logsumexp(std::span<const double> v) {
  double m = kNegInf;
  for (double x : v) m = std::max(m, x);
  if (m == kNegInf) return kNegInf;
  if (m == kInf) return kInf;
  double s = 0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

void log_softmax_inplace(std::vector<double>& logits) {
  double z = logsumexp(logits);
  for (double& v : logits) v = floor_log(v - z);
}

}  // namespace covkit
