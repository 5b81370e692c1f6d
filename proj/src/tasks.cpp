#include "covkit/tasks.hpp"

#include <cmath>
#include <sstream>

namespace covkit {

namespace {

Prompt pid(std::int64_t id) { return Prompt{id, {}}; }

Mat rows(std::initializer_list<std::initializer_list<double>> r) {
  Mat m(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(r.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& row : r) {
    Eigen::Index j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

}  // namespace

TaskInstance bernoulli_task(double p_star, double B) {
  if (!(p_star > 0 && p_star < 0.5)) throw ValidationError("bernoulli_task needs 0 < p* < 1/2");
  auto piD = std::make_shared<TabularModel>(2, 1);
  piD->set_prompt_row(0, {1 - p_star, p_star});
  TaskInstance t;
  t.mu = PromptDist::single(pid(0));
  t.piD = piD;
  t.featmap = std::make_shared<TokenTableFeatureMap>(2, 1, B, std::map<std::int64_t, Mat>{{0, rows({{-B}, {B}})}}, "bernoulli");
  t.metadata = {{"name", "bernoulli"}, {"H", 1}, {"V", 2}, {"p_star", p_star}, {"B", B}};
  return t;
}

std::shared_ptr<TabularModel> bernoulli_mle(const Dataset& data) {
  if (data.examples.empty()) throw ValidationError("bernoulli_mle needs data");
  std::size_t ones = 0;
  for (const auto& t : data.examples) ones += t.y.at(0) == 1 ? 1 : 0;
  double p = std::min(0.5, static_cast<double>(ones) / static_cast<double>(data.size()));
  auto m = std::make_shared<TabularModel>(2, 1);
  m->set_prompt_row(0, {1 - p, p});
  return m;
}

TaskInstance heterogeneous_kl_instance(std::size_t n, int H, int sign) {
  if (n < 1 || H < 1) throw ValidationError("heterogeneous_kl_instance needs n, H >= 1");
  if (sign != 1 && sign != -1) throw ValidationError("theta* sign must be +1 or -1");
  auto fm = std::make_shared<TokenTableFeatureMap>(
      2, 1, 1.0, std::map<std::int64_t, Mat>{{0, rows({{0.0}, {0.0}})}, {1, rows({{-1.0}, {1.0}})}}, "heterogeneous_kl");
  Vec th(1);
  th[0] = sign;
  TaskInstance t;
  const double m1 = 1.0 / (2.0 * static_cast<double>(n));
  t.mu = PromptDist::finite({pid(0), pid(1)}, {1 - m1, m1});
  t.piD = std::make_shared<LinearARModel>(th, fm, H);
  t.featmap = fm;
  t.theta_star = th;
  t.metadata = {{"name", "heterogeneous_kl"}, {"H", H}, {"V", 2}, {"n", n}, {"sign", sign}};
  return t;
}

double sgd_lower_mu_plus(double B, int H, std::size_t n, double Bbar, double N) {
  return std::min(1.0, B * H / (512.0 * std::exp(1.0) * static_cast<double>(n) * Bbar * Bbar * std::log(N)));
}

TaskInstance sgd_lower_instance(const SgdLowerParams& p) {
  if (p.H < 1) throw ValidationError("sgd_lower_instance: H >= 1 required");
  if (!(p.N > 1)) throw ValidationError("sgd_lower_instance: N > 1 required");
  const double lN = std::log(p.N);
  if (!(lN <= p.H * p.B / 8)) throw ValidationError("sgd_lower_instance: violated log N <= H B / 8");
  TaskInstance t;
  if (p.variant == SgdLowerVariant::LargeEta) {
    if (!(p.eta >= 8.0 / (p.H * p.B))) throw ValidationError("sgd_lower_instance: violated eta >= 8/(H B)");
    const double eb = p.eta * p.H * p.B;
    const double a = eb / (2 * (eb - 1));
    const double s = std::sqrt(1 - a * a);
    auto fm = std::make_shared<TokenTableFeatureMap>(
        3, 2, p.B, std::map<std::int64_t, Mat>{{0, p.B * rows({{a, -s}, {1, 0}, {a, s}})}}, "sgd_lower_large_eta");
    Vec ts(2), t0(2);
    ts << 1, 0;
    t0 << a, s;
    t.mu = PromptDist::single(pid(0));
    t.piD = std::make_shared<LinearARModel>(ts, fm, p.H);
    t.featmap = fm;
    t.theta_star = ts;
    t.theta0 = t0;
    t.metadata = {{"name", "sgd_lower"}, {"variant", "large_eta"}, {"H", p.H}, {"V", 3}, {"B", p.B},
                  {"eta", p.eta}, {"eta_bar", eb}, {"alpha", a}, {"N", p.N}};
    return t;
  }
  if (!(p.B >= p.Bbar && p.Bbar >= 1)) throw ValidationError("sgd_lower_instance: violated B >= Bbar >= 1");
  const double r = std::log(p.H / (4 * lN)) / p.Bbar;
  if (!(r <= 0.5)) throw ValidationError("sgd_lower_instance: violated r <= 1/2 (e^{r Bbar} = H/(4 log N))");
  const double mp = p.mu_plus ? *p.mu_plus : sgd_lower_mu_plus(p.B, p.H, p.n, p.Bbar, p.N);
  if (!(mp > 0 && mp <= 1)) throw ValidationError("sgd_lower_instance: mu(+) must lie in (0, 1]");
  const double b = p.Bbar;
  auto fm = std::make_shared<TokenTableFeatureMap>(
      3, 2, p.B,
      std::map<std::int64_t, Mat>{{0, rows({{-b, 0}, {0, 0}, {b, 0}})}, {1, rows({{0, -b}, {0, 0}, {0, b}})}},
      "sgd_lower_small_eta");
  Vec ts(2), t0(2);
  ts << 0.5, 0.5;
  t0 << r - 1 / b, 0.25;
  t.mu = mp >= 1 ? PromptDist::single(pid(0)) : PromptDist::finite({pid(0), pid(1)}, {mp, 1 - mp});
  t.piD = std::make_shared<LinearARModel>(ts, fm, p.H);
  t.featmap = fm;
  t.theta_star = ts;
  t.theta0 = t0;
  t.metadata = {{"name", "sgd_lower"}, {"variant", "small_eta"}, {"H", p.H}, {"V", 3}, {"B", p.B}, {"Bbar", p.Bbar},
                {"N", p.N}, {"n", p.n}, {"mu_plus", mp}, {"r", r}};
  return t;
}

TaskInstance sigma_star_instance(const SigmaStarParams& p) {
  if (p.H < 1 || !(p.B > 0) || !(p.N > 1) || p.n < 1) throw ValidationError("sigma_star_instance: bad parameters");
  const double lN = std::log(p.N);
  if (!(lN <= p.c * std::min<double>(p.H, p.B * p.B)))
    throw ValidationError("sigma_star_instance: violated log N <= c min{H, B^2} with c = " + fmt(p.c));
  const double eps = std::sqrt(4 * lN / (p.c1 * p.H * p.B * p.B));
  const double mp = std::min(1.0, p.c0 / (static_cast<double>(p.n) * p.B * p.B * eps * eps));
  Vec ts(p.H);
  for (int h = 0; h < p.H; ++h) {
    int s = p.signs.empty() ? 1 : p.signs.at(static_cast<std::size_t>(h));
    if (s != 1 && s != -1) throw ValidationError("sigma_star_instance: signs must be +1 or -1");
    ts[h] = eps * s;
  }
  auto fm = std::make_shared<PositionalFeatureMap>(p.H, std::vector<double>{0.0, p.B}, std::map<std::int64_t, double>{{0, 1.0}, {1, 0.0}});
  TaskInstance t;
  t.mu = mp >= 1 ? PromptDist::single(pid(0)) : PromptDist::finite({pid(0), pid(1)}, {mp, 1 - mp});
  t.piD = std::make_shared<LinearARModel>(ts, fm, p.H);
  t.featmap = fm;
  t.theta_star = ts;
  t.metadata = {{"name", "sigma_star"}, {"H", p.H}, {"V", 2}, {"B", p.B}, {"N", p.N}, {"n", p.n},
                {"eps", eps}, {"mu_plus", mp}, {"c0", p.c0}, {"c1", p.c1}};
  return t;
}

MisspecInstance misspec_instance(double alpha, double M) {
  if (!(alpha > 0 && alpha <= 1)) throw ValidationError("misspec_instance: alpha must lie in (0, 1]");
  if (!(M > std::exp(alpha))) throw ValidationError("misspec_instance: M must exceed e^alpha");
  const double p = alpha / (32 * std::log(M));
  auto piD = std::make_shared<TabularModel>(2, 1);
  piD->set_prompt_row(0, {0.5, 0.5});
  piD->set_prompt_row(1, {0.5, 0.5});
  auto pi1 = std::make_shared<TabularModel>(2, 1);
  const double q1 = 1 / (2 * std::exp(alpha));
  pi1->set_prompt_row(0, {1 - q1, q1});
  pi1->set_prompt_row(1, {0.5, 0.5});
  auto pi2 = std::make_shared<TabularModel>(2, 1);
  const double q2 = 1 / (2 * M);
  pi2->set_prompt_row(0, {0.5, 0.5});
  pi2->set_prompt_row(1, {1 - q2, q2});
  // Sup log-ratio between pi_1 and pi_D, in both directions.
  double worst = 0;
  for (std::int64_t x : {0, 1}) {
    auto a = pi1->next_dist(pid(x), {});
    auto b = piD->next_dist(pid(x), {});
    for (int v = 0; v < 2; ++v) worst = std::max(worst, std::abs(std::log(a[v]) - std::log(b[v])));
  }
  if (worst > alpha + 1e-12) throw std::logic_error("misspec_instance: pi_1 log-ratio exceeds alpha");
  MisspecInstance out;
  out.p = p;
  out.task.mu = PromptDist::finite({pid(0), pid(1)}, {1 - p, p});
  out.task.piD = piD;
  out.task.metadata = {{"name", "misspec"}, {"H", 1}, {"V", 2}, {"alpha", alpha}, {"M", M}, {"p", p}};
  out.candidates = {pi1, pi2};
  return out;
}

TaskInstance random_linear_instance(int d, int V, int H, double B, int n_prompts, std::uint64_t seed) {
  if (d < 1 || V < 1 || H < 1 || n_prompts < 1) throw ValidationError("random_linear_instance: bad sizes");
  auto fm = std::make_shared<RandomFeatureMap>(V, d, B, seed);
  Rng rng(splitmix64(seed ^ 0xabcdefULL));
  Vec th(d);
  for (int k = 0; k < d; ++k) th[k] = rng.normal();
  th *= rng.uniform01() / std::max(th.norm(), 1e-300);
  std::vector<Prompt> xs;
  std::vector<double> w;
  for (int i = 0; i < n_prompts; ++i) {
    xs.push_back(pid(i));
    w.push_back(0.5 + rng.uniform01());
  }
  TaskInstance t;
  t.mu = PromptDist::finite(xs, w);
  t.piD = std::make_shared<LinearARModel>(th, fm, H);
  t.featmap = fm;
  t.theta_star = th;
  t.metadata = {{"name", "random_linear"}, {"d", d}, {"V", V}, {"H", H}, {"B", B}, {"n_prompts", n_prompts}, {"seed", seed}};
  return t;
}

namespace {

template <typename T>
T get_or(const json& j, const char* k, T def) {
  return j.contains(k) ? j.at(k).get<T>() : def;
}

void reject_unknown(const json& spec, std::initializer_list<const char*> allowed) {
  for (auto it = spec.begin(); it != spec.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw ValidationError("unknown task parameter '" + it.key() + "'");
  }
}

}  // namespace

TaskInstance make_task(const json& spec) {
  if (!spec.is_object() || !spec.contains("name")) throw ValidationError("task spec needs a name");
  const std::string name = spec.at("name").get<std::string>();
  if (name == "bernoulli") {
    reject_unknown(spec, {"name", "p_star", "B"});
    return bernoulli_task(spec.at("p_star").get<double>(), get_or(spec, "B", 1.0));
  }
  if (name == "heterogeneous_kl") {
    reject_unknown(spec, {"name", "n", "H", "sign"});
    return heterogeneous_kl_instance(spec.at("n").get<std::size_t>(), spec.at("H").get<int>(), get_or(spec, "sign", 1));
  }
  if (name == "sgd_lower") {
    reject_unknown(spec, {"name", "variant", "H", "B", "Bbar", "N", "n", "eta", "mu_plus"});
    SgdLowerParams p;
    const std::string v = get_or<std::string>(spec, "variant", "small_eta");
    if (v == "small_eta") p.variant = SgdLowerVariant::SmallEta;
    else if (v == "large_eta") p.variant = SgdLowerVariant::LargeEta;
    else throw ValidationError("unknown sgd_lower variant '" + v + "'");
    p.H = spec.at("H").get<int>();
    p.B = get_or(spec, "B", p.B);
    p.Bbar = get_or(spec, "Bbar", p.Bbar);
    p.N = get_or(spec, "N", p.N);
    p.n = get_or(spec, "n", p.n);
    p.eta = get_or(spec, "eta", 0.0);
    if (spec.contains("mu_plus")) p.mu_plus = spec.at("mu_plus").get<double>();
    return sgd_lower_instance(p);
  }
  if (name == "sigma_star") {
    reject_unknown(spec, {"name", "H", "B", "N", "n", "c", "c0", "c1", "signs"});
    SigmaStarParams p;
    p.H = spec.at("H").get<int>();
    p.B = get_or(spec, "B", p.B);
    p.N = get_or(spec, "N", p.N);
    p.n = get_or(spec, "n", p.n);
    p.c = get_or(spec, "c", p.c);
    p.c0 = get_or(spec, "c0", p.c0);
    p.c1 = get_or(spec, "c1", p.c1);
    p.signs = get_or(spec, "signs", std::vector<int>{});
    return sigma_star_instance(p);
  }
  if (name == "misspec") {
    reject_unknown(spec, {"name", "alpha", "M"});
    return misspec_instance(get_or(spec, "alpha", 1.0), get_or(spec, "M", std::exp(3.0))).task;
  }
  if (name == "random_linear") {
    reject_unknown(spec, {"name", "d", "V", "H", "B", "n_prompts", "seed"});
    return random_linear_instance(spec.at("d").get<int>(), spec.at("V").get<int>(), spec.at("H").get<int>(),
                                  get_or(spec, "B", 1.0), get_or(spec, "n_prompts", 2), get_or<std::uint64_t>(spec, "seed", 0));
  }
  if (name == "graph") {
    json g = spec;
    g.erase("name");
    return graph_task(graph_config_from_json(g));
  }
  throw ValidationError("unknown task '" + name + "'");
}

}  // namespace covkit
