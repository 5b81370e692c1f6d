#include "covkit/models.hpp"

#include <atomic>
#include <cmath>
#include <functional>

#include "covkit/parallel.hpp"

namespace covkit {

namespace {
std::atomic<bool> g_bound_checks{false};

void check_bound(const Mat& out, double B) {
  for (Eigen::Index v = 0; v < out.rows(); ++v)
    if (out.row(v).norm() > B * (1 + 1e-12))
      throw std::logic_error("feature norm exceeds declared bound");
}
}  // namespace

void FeatureMap::set_bound_checks(bool on) { g_bound_checks = on; }
bool FeatureMap::bound_checks() { return g_bound_checks; }

Vec FeatureMap::phi(const Prompt& x, std::span<const int> prefix_with_token) const {
  if (prefix_with_token.empty()) throw ValidationError("phi needs at least one token");
  Mat c;
  candidates(x, prefix_with_token.first(prefix_with_token.size() - 1), c);
  return c.row(prefix_with_token.back()).transpose();
}

TokenTableFeatureMap::TokenTableFeatureMap(int V, int d, double B, std::map<std::int64_t, Mat> tables, std::string tag)
    : V_(V), d_(d), B_(B), tables_(std::move(tables)), tag_(std::move(tag)) {
  for (const auto& [k, m] : tables_) {
    if (m.rows() != V_ || m.cols() != d_) throw ValidationError("token table has wrong shape");
    check_bound(m, B_);
  }
}

const Mat& TokenTableFeatureMap::table(std::int64_t prompt_id) const {
  auto it = tables_.find(prompt_id);
  if (it == tables_.end()) throw ValidationError("no feature table for prompt " + std::to_string(prompt_id));
  return it->second;
}

void TokenTableFeatureMap::candidates(const Prompt& x, std::span<const int>, Mat& out) const { out = table(x.id); }

json TokenTableFeatureMap::params() const {
  json t = json::object();
  for (const auto& [k, m] : tables_) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      std::vector<double> row(m.cols());
      for (Eigen::Index c = 0; c < m.cols(); ++c) row[c] = m(r, c);
      rows.push_back(row);
    }
    t[std::to_string(k)] = rows;
  }
  return {{"V", V_}, {"d", d_}, {"B", B_}, {"tables", t}};
}

PositionalFeatureMap::PositionalFeatureMap(int H, std::vector<double> values, std::map<std::int64_t, double> scales)
    : H_(H), values_(std::move(values)), scales_(std::move(scales)), B_(0) {
  if (H_ < 1 || values_.empty()) throw ValidationError("positional feature map needs H >= 1 and values");
  double vmax = 0, smax = 0;
  for (double v : values_) vmax = std::max(vmax, std::abs(v));
  for (const auto& [k, s] : scales_) smax = std::max(smax, std::abs(s));
  B_ = vmax * smax;
}

void PositionalFeatureMap::candidates(const Prompt& x, std::span<const int> prefix, Mat& out) const {
  if (static_cast<int>(prefix.size()) >= H_) throw ValidationError("prefix longer than horizon");
  out.setZero(static_cast<Eigen::Index>(values_.size()), H_);
  auto it = scales_.find(x.id);
  double s = it == scales_.end() ? 0.0 : it->second;
  for (std::size_t v = 0; v < values_.size(); ++v) out(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(prefix.size())) = s * values_[v];
}

json PositionalFeatureMap::params() const {
  json s = json::object();
  for (const auto& [k, v] : scales_) s[std::to_string(k)] = v;
  return {{"H", H_}, {"values", values_}, {"scales", s}};
}

RandomFeatureMap::RandomFeatureMap(int V, int d, double B, std::uint64_t seed) : V_(V), d_(d), B_(B), seed_(seed) {
  if (V < 1 || d < 1 || !(B > 0)) throw ValidationError("random feature map needs V, d >= 1 and B > 0");
}

void RandomFeatureMap::candidates(const Prompt& x, std::span<const int> prefix, Mat& out) const {
  std::uint64_t h = splitmix64(seed_ ^ splitmix64(static_cast<std::uint64_t>(x.id)));
  for (int t : prefix) h = splitmix64(h ^ (static_cast<std::uint64_t>(t) + 0x51ed27ULL));
  h = splitmix64(h ^ prefix.size());
  out.resize(V_, d_);
  for (int v = 0; v < V_; ++v) {
    // A splitmix counter stream is much cheaper to set up than a full engine.
    std::uint64_t state = splitmix64(h + static_cast<std::uint64_t>(v));
    auto u01 = [&state] {
      state = splitmix64(state);
      return (static_cast<double>(state >> 11) + 0.5) * 0x1.0p-53;
    };
    Vec g(d_);
    for (int k = 0; k < d_; ++k) g[k] = std::sqrt(-2 * std::log(u01())) * std::cos(2 * M_PI * u01());
    double n = g.norm();
    double radius = B_ * u01();
    out.row(v) = (n > 0 ? g / n * radius : g).transpose();
  }
}

json RandomFeatureMap::params() const { return {{"V", V_}, {"d", d_}, {"B", B_}, {"seed", seed_}}; }

FeatureMapPtr featmap_from_json(const json& j) {
  const std::string id = j.at("featmap_id").get<std::string>();
  const json& p = j.at("featmap_params");
  if (id == "random")
    return std::make_shared<RandomFeatureMap>(p.at("V").get<int>(), p.at("d").get<int>(), p.at("B").get<double>(),
                                              p.at("seed").get<std::uint64_t>());
  if (id == "positional") {
    std::map<std::int64_t, double> s;
    for (auto it = p.at("scales").begin(); it != p.at("scales").end(); ++it) s[std::stoll(it.key())] = it.value().get<double>();
    return std::make_shared<PositionalFeatureMap>(p.at("H").get<int>(), p.at("values").get<std::vector<double>>(), s);
  }
  // Every other id is a token-table map carrying its own tag.
  int V = p.at("V").get<int>(), d = p.at("d").get<int>();
  std::map<std::int64_t, Mat> tables;
  for (auto it = p.at("tables").begin(); it != p.at("tables").end(); ++it) {
    Mat m(V, d);
    auto rows = it.value().get<std::vector<std::vector<double>>>();
    if (static_cast<int>(rows.size()) != V) throw ValidationError("feature table row count mismatch");
    for (int r = 0; r < V; ++r) {
      if (static_cast<int>(rows[r].size()) != d) throw ValidationError("feature table column count mismatch");
      for (int c = 0; c < d; ++c) m(r, c) = rows[r][c];
    }
    tables[std::stoll(it.key())] = m;
  }
  return std::make_shared<TokenTableFeatureMap>(V, d, p.at("B").get<double>(), std::move(tables), id);
}

Vec project_unit_ball(const Vec& v) {
  double n = v.norm();
  if (n <= 1.0) return v;
  return v / n;
}

void linear_logdist(const Mat& phi, const Vec& theta, std::vector<double>& out) {
  if (phi.cols() != theta.size()) throw ValidationError("theta dimension does not match feature dimension");
  Vec logits = phi * theta;
  out.assign(logits.data(), logits.data() + logits.size());
  log_softmax_inplace(out);
}

LinearARModel::LinearARModel(Vec theta, FeatureMapPtr fm, int H) : theta_(std::move(theta)), fm_(std::move(fm)), H_(H) {
  if (!fm_) throw ValidationError("linear model needs a feature map");
  if (theta_.size() != fm_->dim()) throw ValidationError("theta dimension does not match feature dimension");
  if (H_ < 1) throw ValidationError("horizon must be >= 1");
}

void LinearARModel::next_logdist(const Prompt& x, std::span<const int> prefix, std::vector<double>& out) const {
  if (static_cast<int>(prefix.size()) >= H_) throw ValidationError("prefix length must be < H");
  Mat c;
  fm_->candidates(x, prefix, c);
  if (FeatureMap::bound_checks()) check_bound(c, fm_->bound());
  linear_logdist(c, theta_, out);
}

std::optional<std::vector<double>> LinearARModel::iid_logdist(const Prompt& x) const {
  if (!fm_->token_iid()) return std::nullopt;
  std::vector<double> out;
  next_logdist(x, {}, out);
  return out;
}

json LinearARModel::to_json() const {
  json j = fm_->to_json();
  j["kind"] = "linear";
  j["theta"] = std::vector<double>(theta_.data(), theta_.data() + theta_.size());
  j["H"] = H_;
  return j;
}

namespace {

/// Accumulates phi(token) − E phi at one step; returns log pi(token).
double accumulate_step(const Mat& c, const Vec& theta, int token, Vec& g) {
  std::vector<double> ld;
  linear_logdist(c, theta, ld);
  Vec p(c.rows());
  for (Eigen::Index v = 0; v < c.rows(); ++v) p[v] = ld[v] == kNegInf ? 0.0 : std::exp(ld[v]);
  g += c.row(token).transpose() - c.transpose() * p;
  return ld.at(static_cast<std::size_t>(token));
}

}  // namespace

Vec grad_token_logprob(const Vec& theta, const FeatureMap& fm, const Prompt& x, std::span<const int> prefix, int token) {
  Mat c;
  fm.candidates(x, prefix, c);
  Vec g = Vec::Zero(theta.size());
  accumulate_step(c, theta, token, g);
  return g;
}

Vec grad_and_logprob(const Vec& theta, const FeatureMap& fm, const Prompt& x, std::span<const int> y, double& logprob) {
  Vec g = Vec::Zero(theta.size());
  Mat c;
  logprob = 0;
  for (std::size_t h = 0; h < y.size(); ++h) {
    fm.candidates(x, y.first(h), c);
    logprob += accumulate_step(c, theta, y[h], g);
  }
  return g;
}

Vec grad_logprob(const Vec& theta, const FeatureMap& fm, const Prompt& x, std::span<const int> y) {
  double lp;
  return grad_and_logprob(theta, fm, x, y, lp);
}

Vec grad_logprob(const LinearARModel& m, const Prompt& x, std::span<const int> y) {
  if (static_cast<int>(y.size()) != m.horizon()) throw ValidationError("trajectory length must equal H");
  return grad_logprob(m.theta(), *m.featmap(), x, y);
}

TabularModel::TabularModel(int V, int H) : V_(V), H_(H), default_(static_cast<std::size_t>(V), 1.0 / V) {
  if (V < 1 || H < 1) throw ValidationError("tabular model needs V, H >= 1");
}

void TabularModel::check_row(const std::vector<double>& probs) const {
  if (static_cast<int>(probs.size()) != V_) throw ValidationError("tabular row has wrong length");
  double s = 0;
  for (double p : probs) {
    if (!(p >= 0)) throw ValidationError("tabular row has a negative entry");
    s += p;
  }
  if (std::abs(s - 1) > 1e-9) throw ValidationError("tabular row does not sum to 1");
}

void TabularModel::set_row(std::int64_t prompt_id, std::vector<int> prefix, std::vector<double> probs) {
  check_row(probs);
  if (static_cast<int>(prefix.size()) >= H_) throw ValidationError("tabular prefix must be shorter than H");
  rows_[{prompt_id, std::move(prefix)}] = std::move(probs);
}

void TabularModel::set_prompt_row(std::int64_t prompt_id, std::vector<double> probs) {
  check_row(probs);
  prompt_rows_[prompt_id] = std::move(probs);
}

void TabularModel::set_default(std::vector<double> probs) {
  check_row(probs);
  default_ = std::move(probs);
}

const std::vector<double>* TabularModel::lookup(const Prompt& x, std::span<const int> prefix) const {
  if (!rows_.empty()) {
    auto it = rows_.find({x.id, std::vector<int>(prefix.begin(), prefix.end())});
    if (it != rows_.end()) return &it->second;
  }
  auto pit = prompt_rows_.find(x.id);
  if (pit != prompt_rows_.end()) return &pit->second;
  return nullptr;
}

void TabularModel::next_logdist(const Prompt& x, std::span<const int> prefix, std::vector<double>& out) const {
  if (static_cast<int>(prefix.size()) >= H_) throw ValidationError("prefix length must be < H");
  const std::vector<double>* row = lookup(x, prefix);
  std::vector<double> p = row ? *row : default_;
  if (!row && floor_ > 0) {
    double s = 0;
    for (double& v : p) s += (v = std::max(v, floor_));
    for (double& v : p) v /= s;
  }
  out.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = p[i] > 0 ? floor_log(std::log(p[i])) : kNegInf;
}

std::optional<std::vector<double>> TabularModel::iid_logdist(const Prompt& x) const {
  for (const auto& [k, v] : rows_)
    if (k.first == x.id) return std::nullopt;
  std::vector<double> out;
  next_logdist(x, {}, out);
  return out;
}

json TabularModel::to_json() const {
  json rows = json::array();
  for (const auto& [k, p] : rows_) rows.push_back({{"x", k.first}, {"prefix", k.second}, {"p", p}});
  json prow = json::array();
  for (const auto& [k, p] : prompt_rows_) prow.push_back({{"x", k}, {"p", p}});
  return {{"kind", "tabular"}, {"V", V_}, {"H", H_}, {"rows", rows}, {"prompt_rows", prow}, {"default", default_}, {"floor", floor_}};
}

TabularModel TabularModel::from_json(const json& j) {
  TabularModel m(j.at("V").get<int>(), j.at("H").get<int>());
  if (j.contains("default")) m.set_default(j.at("default").get<std::vector<double>>());
  m.set_floor(j.value("floor", 0.0));
  if (j.contains("prompt_rows"))
    for (const auto& r : j.at("prompt_rows")) m.set_prompt_row(r.at("x").get<std::int64_t>(), r.at("p").get<std::vector<double>>());
  if (j.contains("rows"))
    for (const auto& r : j.at("rows"))
      m.set_row(r.at("x").get<std::int64_t>(), r.at("prefix").get<std::vector<int>>(), r.at("p").get<std::vector<double>>());
  return m;
}

TabularModel TabularModel::expand(const Policy& p, const std::vector<Prompt>& prompts) {
  TabularModel m(p.vocab_size(), p.horizon());
  const int V = p.vocab_size(), H = p.horizon();
  if (std::pow(static_cast<double>(V), H - 1) > 1e6) throw ValidationError("expansion budget exceeded");
  for (const auto& x : prompts) {
    std::vector<int> prefix;
    std::function<void()> rec = [&] {
      std::vector<double> probs = p.next_dist(x, prefix);
      double s = 0;
      for (double v : probs) s += v;
      for (double& v : probs) v /= s;
      m.rows_[{x.id, prefix}] = probs;
      if (static_cast<int>(prefix.size()) + 1 >= H) return;
      for (int v = 0; v < V; ++v) {
        prefix.push_back(v);
        rec();
        prefix.pop_back();
      }
    };
    rec();
  }
  return m;
}

std::shared_ptr<Policy> policy_from_json(const json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "linear") {
    auto fm = featmap_from_json(j);
    auto th = j.at("theta").get<std::vector<double>>();
    Vec theta = Eigen::Map<Vec>(th.data(), static_cast<Eigen::Index>(th.size()));
    return std::make_shared<LinearARModel>(theta, fm, j.at("H").get<int>());
  }
  if (kind == "tabular") return std::make_shared<TabularModel>(TabularModel::from_json(j));
  throw ValidationError("unknown model kind '" + kind + "'");
}

namespace {

double step_variance(const Mat& c, const Vec& theta) {
  std::vector<double> ld;
  linear_logdist(c, theta, ld);
  Vec p(c.rows());
  for (Eigen::Index v = 0; v < c.rows(); ++v) p[v] = ld[v] == kNegInf ? 0.0 : std::exp(ld[v]);
  Vec mean = c.transpose() * p;
  double var = 0;
  for (Eigen::Index v = 0; v < c.rows(); ++v) var += p[v] * (c.row(v).transpose() - mean).squaredNorm();
  return var;
}

}  // namespace

double sigma_star_sq_exact(const LinearARModel& piD, const PromptDist& mu) {
  if (!mu.is_finite()) throw ValidationError("exact sigma_star needs a finite prompt support");
  const auto& fm = *piD.featmap();
  const int V = piD.vocab_size(), H = piD.horizon();
  double total = 0;
  for (std::size_t i = 0; i < mu.support().size(); ++i) {
    const Prompt& x = mu.support()[i];
    Mat c;
    double sx = 0;
    if (fm.token_iid()) {
      fm.candidates(x, {}, c);
      sx = H * step_variance(c, piD.theta());
    } else {
      if (H * std::log(static_cast<double>(V)) > std::log(1e6) + 1e-9)
        throw ValidationError("enumeration budget exceeded (V^H > 1e6); use the Monte Carlo mode");
      std::vector<int> prefix;
      std::function<void(double)> rec = [&](double logw) {
        fm.candidates(x, prefix, c);
        sx += std::exp(logw) * step_variance(c, piD.theta());
        if (static_cast<int>(prefix.size()) + 1 >= H) return;
        std::vector<double> ld;
        linear_logdist(c, piD.theta(), ld);
        for (int v = 0; v < V; ++v) {
          if (ld[v] == kNegInf) continue;
          prefix.push_back(v);
          rec(logw + ld[v]);
          prefix.pop_back();
        }
      };
      rec(0.0);
    }
    total += mu.weights()[i] * sx;
  }
  return total;
}

Estimate sigma_star_sq_mc(const LinearARModel& piD, const PromptDist& mu, std::size_t n, const SeedTree& seeds) {
  if (n < 2) throw ValidationError("Monte Carlo sigma_star needs n >= 2");
  const std::size_t chunk = 256;
  const std::size_t nchunks = (n + chunk - 1) / chunk;
  std::vector<double> vals(n);
  const auto& fm = *piD.featmap();
  parallel_for(nchunks, [&](std::size_t ci) {
    Rng rng = seeds.derive("chunk", ci).rng();
    Mat c;
    for (std::size_t i = ci * chunk; i < std::min(n, (ci + 1) * chunk); ++i) {
      Trajectory t = sample_one(piD, mu, rng);
      double s = 0;
      for (std::size_t h = 0; h < t.y.size(); ++h) {
        fm.candidates(t.x, std::span<const int>(t.y).first(h), c);
        s += step_variance(c, piD.theta());
      }
      vals[i] = s;
    }
  });
  double mean = pairwise_sum(vals) / static_cast<double>(n);
  std::vector<double> sq(n);
  for (std::size_t i = 0; i < n; ++i) sq[i] = (vals[i] - mean) * (vals[i] - mean);
  double var = pairwise_sum(sq) / static_cast<double>(n - 1);
  return {mean, std::sqrt(var / static_cast<double>(n))};
}

}  // namespace covkit
