#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "covkit/tasks.hpp"

namespace covkit {

std::size_t LayeredDag::path_count() const {
  std::size_t c = 1;
  for (const auto& p : passable) c *= std::max<std::size_t>(1, p.size());
  return c;
}

std::vector<int> LayeredDag::all_nodes_sorted() const {
  std::vector<int> out;
  for (const auto& l : layers) out.insert(out.end(), l.begin(), l.end());
  std::sort(out.begin(), out.end());
  return out;
}

GraphConfig graph_config_from_json(const json& j) {
  GraphConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k == "family") {
      const auto f = it->get<std::string>();
      if (f == "teaser") c.family = GraphFamily::Teaser;
      else if (f == "horizon") c.family = GraphFamily::Horizon;
      else throw ValidationError("unknown graph family '" + f + "'");
    } else if (k == "L") {
      c.L = it->get<int>();
    } else if (k == "nodes_per_layer") {
      c.nodes_per_layer = it->get<int>();
    } else if (k == "m") {
      c.m = it->get<int>();
    } else if (k == "mixture") {
      c.mixture = it->get<std::vector<double>>();
    } else {
      throw ValidationError("unknown graph parameter '" + k + "'");
    }
  }
  return c;
}

namespace {

int parity(int v) { return v & 1; }

std::vector<double> default_mixture(const GraphConfig& cfg) {
  if (!cfg.mixture.empty()) return cfg.mixture;
  if (cfg.family == GraphFamily::Teaser) return {0.9, 0.1};
  return {0.94, 0.05, 0.01};
}

void check_config(const GraphConfig& cfg) {
  if (cfg.L < 1) throw ValidationError("graph: L must be >= 1");
  if (cfg.nodes_per_layer < 2) throw ValidationError("graph: nodes_per_layer must be >= 2");
  const long need = 2L + static_cast<long>(cfg.L) * cfg.nodes_per_layer;
  if (cfg.m < need)
    throw ValidationError("graph: m = " + std::to_string(cfg.m) + " too small for " + std::to_string(need) +
                          " disjoint nodes");
  if (cfg.family == GraphFamily::Teaser && cfg.L < 2) throw ValidationError("graph: teaser family needs L >= 2");
  if (cfg.family == GraphFamily::Horizon) {
    if (cfg.L % 2 != 0) throw ValidationError("graph: horizon family needs even L");
    if (cfg.L < 4) throw ValidationError("graph: horizon family needs L >= 4");
  }
  const auto mix = default_mixture(cfg);
  const std::size_t K = 3;
  if (mix.empty() || mix.size() > K) throw ValidationError("graph: mixture must have 1 to 3 weights");
  double s = 0;
  for (double w : mix) {
    if (!(w >= 0)) throw ValidationError("graph: mixture weights must be >= 0");
    s += w;
  }
  if (!(s > 0)) throw ValidationError("graph: mixture weights sum to zero");
}

/// Parity signatures over the smallest half of sorted node ids and over the rest.
std::pair<int, int> signatures(const LayeredDag& g) {
  const auto nodes = g.all_nodes_sorted();
  const std::size_t half = nodes.size() / 2;
  int s1 = 0, s2 = 0;
  for (std::size_t k = 0; k < nodes.size(); ++k) (k < half ? s1 : s2) ^= parity(nodes[k]);
  return {s1, s2};
}

int two_passable_count(const LayeredDag& g) {
  int c = 0;
  for (std::size_t i = 1; i + 1 < g.passable.size(); ++i) c += g.passable[i].size() == 2 ? 1 : 0;
  return c;
}

int two_passable_for(int class_id, const GraphConfig& cfg) {
  if (cfg.family == GraphFamily::Teaser) return 2;
  if (class_id == 1) return 0;
  if (class_id == 2) return cfg.L / 2;
  return 4;
}

}  // namespace

int graph_class_of(const LayeredDag& g, const GraphConfig& cfg) {
  const auto [s1, s2] = signatures(g);
  if (cfg.family == GraphFamily::Teaser) {
    if (s2 == 1) return 3;
    return s1 == 1 ? 1 : 2;
  }
  const int k = two_passable_count(g);
  if (k == 0) return 1;
  if (cfg.L / 2 == 4) return s1 == 1 ? 2 : 3;
  return k == 4 ? 3 : 2;
}

namespace {

bool signature_ok(const LayeredDag& g, int class_id, const GraphConfig& cfg) { return graph_class_of(g, cfg) == class_id; }

}  // namespace

int graph_rule_choice(const LayeredDag& g, int class_id, GraphFamily family, int layer_index) {
  const auto& P = g.passable.at(static_cast<std::size_t>(layer_index - 1));
  if (P.size() == 1) return P[0];
  if (P.size() != 2) throw ValidationError("graph: rule applies to layers with one or two passable nodes");
  int want;
  if (family == GraphFamily::Teaser) {
    if (class_id == 3) return -1;
    want = class_id == 1 ? parity(layer_index) : 1 ^ parity(layer_index);
  } else {
    if (class_id == 3) return -1;
    if (class_id != 2) throw ValidationError("graph: horizon class 1 has no two-passable layers");
    int x = 0;
    for (int i = 2; i <= g.L + 1; ++i)
      for (int u : g.passable[static_cast<std::size_t>(i - 1)]) x ^= parity(u);
    want = parity(layer_index) ^ x;
  }
  for (int v : P)
    if (parity(v) == want) return v;
  throw ValidationError("graph: two-passable layer lacks a node of the required parity");
}

GraphSample gen_graph_instance(int class_id, const GraphConfig& cfg, Rng& rng) {
  check_config(cfg);
  if (class_id < 1 || class_id > 3) throw ValidationError("graph: class id must be 1, 2 or 3");
  const int L = cfg.L, w = cfg.nodes_per_layer;
  const int n_nodes = 2 + L * w;
  const int k2 = two_passable_for(class_id, cfg);
  if (k2 > L) throw ValidationError("graph: more two-passable layers requested than exist");
  std::vector<int> universe(static_cast<std::size_t>(cfg.m));
  std::iota(universe.begin(), universe.end(), 1);
  for (int attempt = 0; attempt < 100000; ++attempt) {
    // Partial Fisher-Yates: the first n_nodes entries are a draw without replacement.
    for (int k = 0; k < n_nodes; ++k) {
      const auto j = static_cast<std::size_t>(k) + rng.below(static_cast<std::uint64_t>(cfg.m - k));
      std::swap(universe[static_cast<std::size_t>(k)], universe[j]);
    }
    LayeredDag g;
    g.L = L;
    g.m = cfg.m;
    g.layers.resize(static_cast<std::size_t>(L + 2));
    g.passable.resize(static_cast<std::size_t>(L + 2));
    g.layers[0] = {universe[0]};
    g.layers[static_cast<std::size_t>(L + 1)] = {universe[1]};
    for (int i = 0; i < L; ++i) {
      auto& layer = g.layers[static_cast<std::size_t>(i + 1)];
      layer.assign(universe.begin() + 2 + i * w, universe.begin() + 2 + (i + 1) * w);
    }
    // Pick which intermediate layers get two passable nodes.
    std::vector<int> idx(static_cast<std::size_t>(L));
    std::iota(idx.begin(), idx.end(), 2);
    for (int k = 0; k < k2; ++k) {
      const auto j = static_cast<std::size_t>(k) + rng.below(static_cast<std::uint64_t>(L - k));
      std::swap(idx[static_cast<std::size_t>(k)], idx[j]);
    }
    std::vector<bool> two(static_cast<std::size_t>(L + 3), false);
    for (int k = 0; k < k2; ++k) two[static_cast<std::size_t>(idx[static_cast<std::size_t>(k)])] = true;

    bool ok = true;
    g.passable[0] = g.layers[0];
    for (int i = 2; i <= L + 1 && ok; ++i) {
      const auto& layer = g.layers[static_cast<std::size_t>(i - 1)];
      auto& P = g.passable[static_cast<std::size_t>(i - 1)];
      if (two[static_cast<std::size_t>(i)]) {
        std::vector<int> ev, od;
        for (int v : layer) (parity(v) ? od : ev).push_back(v);
        if (ev.empty() || od.empty()) {
          ok = false;
          break;
        }
        P = {ev[rng.below(ev.size())], od[rng.below(od.size())]};
      } else {
        P = {layer[rng.below(layer.size())]};
      }
    }
    if (!ok) continue;
    g.passable[static_cast<std::size_t>(L + 1)] = g.layers[static_cast<std::size_t>(L + 1)];
    for (auto& l : g.layers) std::sort(l.begin(), l.end());
    for (auto& p : g.passable) std::sort(p.begin(), p.end());
    if (!signature_ok(g, class_id, cfg)) continue;
    GraphSample s;
    s.prompt = serialize_prompt(g);
    s.dag = std::move(g);
    s.class_id = class_id;
    return s;
  }
  throw std::runtime_error("graph: rejection sampling did not find an instance");
}

std::vector<int> serialize_prompt(const LayeredDag& g) {
  if (g.layers.size() < 2) throw ValidationError("graph: need at least source and target layers");
  const int bar = graph_token_bar(g.m);
  std::vector<int> out;
  bool first = true;
  for (std::size_t i = 0; i + 1 < g.layers.size(); ++i)
    for (int u : g.passable[i])
      for (int v : g.layers[i + 1]) {
        if (!first) out.push_back(bar);
        first = false;
        out.push_back(u);
        out.push_back(v);
      }
  out.push_back(graph_token_slash(g.m));
  out.push_back(g.layers.front().at(0));
  out.push_back(g.layers.back().at(0));
  out.push_back(graph_token_eq(g.m));
  return out;
}

LayeredDag parse_prompt(const std::vector<int>& tokens, int m) {
  const int bar = graph_token_bar(m), slash = graph_token_slash(m), eq = graph_token_eq(m);
  auto is_node = [m](int t) { return t >= 1 && t <= m; };
  std::vector<std::pair<int, int>> edges;
  std::size_t pos = 0;
  const std::size_t n = tokens.size();
  while (true) {
    if (pos + 1 >= n || !is_node(tokens[pos])) throw PromptParseError("graph prompt: expected edge source node", pos);
    if (!is_node(tokens[pos + 1])) throw PromptParseError("graph prompt: expected edge target node", pos + 1);
    edges.emplace_back(tokens[pos], tokens[pos + 1]);
    pos += 2;
    if (pos >= n) throw PromptParseError("graph prompt: truncated after edge", pos);
    if (tokens[pos] == bar) {
      ++pos;
      continue;
    }
    if (tokens[pos] == slash) {
      ++pos;
      break;
    }
    throw PromptParseError("graph prompt: expected '|' or '/'", pos);
  }
  if (pos + 3 != n) throw PromptParseError("graph prompt: expected 's t =' after '/'", std::min(pos, n));
  if (!is_node(tokens[pos])) throw PromptParseError("graph prompt: bad source node", pos);
  if (!is_node(tokens[pos + 1])) throw PromptParseError("graph prompt: bad target node", pos + 1);
  if (tokens[pos + 2] != eq) throw PromptParseError("graph prompt: expected '='", pos + 2);
  const int s = tokens[pos], t = tokens[pos + 1];

  // Rebuild layers from out-neighbourhoods, starting at the source.
  LayeredDag g;
  g.m = m;
  g.layers.push_back({s});
  g.passable.push_back({s});
  std::vector<char> seen(static_cast<std::size_t>(m + 1), 0);
  seen[static_cast<std::size_t>(s)] = 1;
  while (true) {
    std::vector<int> next;
    for (const auto& [u, v] : edges)
      if (std::binary_search(g.passable.back().begin(), g.passable.back().end(), u)) next.push_back(v);
    std::sort(next.begin(), next.end());
    next.erase(std::unique(next.begin(), next.end()), next.end());
    if (next.empty()) throw PromptParseError("graph prompt: target unreachable", pos + 1);
    for (int v : next) {
      if (seen[static_cast<std::size_t>(v)]) throw PromptParseError("graph prompt: edges are not layered", 0);
      seen[static_cast<std::size_t>(v)] = 1;
    }
    g.layers.push_back(next);
    if (next.size() == 1 && next[0] == t) {
      g.passable.push_back({t});
      break;
    }
    std::vector<int> pass;
    for (int v : next)
      for (const auto& e : edges)
        if (e.first == v) {
          pass.push_back(v);
          break;
        }
    if (pass.empty()) throw PromptParseError("graph prompt: dead end before target", pos + 1);
    g.passable.push_back(pass);
  }
  g.L = static_cast<int>(g.layers.size()) - 2;
  if (g.L < 1) throw PromptParseError("graph prompt: no intermediate layers", pos);
  // The canonical serialization must reproduce the input exactly.
  const auto re = serialize_prompt(g);
  for (std::size_t k = 0; k < std::max(re.size(), n); ++k)
    if (k >= re.size() || k >= n || re[k] != tokens[k]) throw PromptParseError("graph prompt: non-canonical edge list", k);
  return g;
}

std::string prompt_to_text(const std::vector<int>& tokens, int m) {
  std::ostringstream os;
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    if (k) os << ' ';
    const int t = tokens[k];
    if (t == graph_token_bar(m)) os << '|';
    else if (t == graph_token_slash(m)) os << '/';
    else if (t == graph_token_eq(m)) os << '=';
    else os << t;
  }
  return os.str();
}

bool is_valid_path(const LayeredDag& g, std::span<const int> y) {
  if (y.size() != g.layers.size()) return false;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const auto& P = g.passable[i];
    if (!std::binary_search(P.begin(), P.end(), y[i])) return false;
  }
  return true;
}

namespace {

struct ParsedGraph {
  LayeredDag g;
  int class_id;
};

std::shared_ptr<const ParsedGraph> parse_for_policy(const Prompt& x, const GraphConfig& cfg) {
  auto p = std::make_shared<ParsedGraph>();
  p->g = parse_prompt(x.tokens, cfg.m);
  if (p->g.L != cfg.L) throw ValidationError("graph prompt has " + std::to_string(p->g.L) + " intermediate layers, expected " + std::to_string(cfg.L));
  p->class_id = graph_class_of(p->g, cfg);
  return p;
}

/// Conditional over the next node given a prefix; uniform over V off support.
void graph_conditional(const ParsedGraph& pg, GraphFamily fam, std::span<const int> prefix, int V, std::vector<double>& out) {
  out.assign(static_cast<std::size_t>(V), kNegInf);
  const auto& g = pg.g;
  const std::size_t j = prefix.size();
  bool on = true;
  for (std::size_t k = 0; k < j && on; ++k) {
    const int layer = static_cast<int>(k) + 1;
    const auto& P = g.passable[k];
    if (!std::binary_search(P.begin(), P.end(), prefix[k])) on = false;
    else if (P.size() == 2) {
      const int c = graph_rule_choice(g, pg.class_id, fam, layer);
      if (c >= 0 && c != prefix[k]) on = false;
    }
  }
  if (!on) {
    std::fill(out.begin(), out.end(), -std::log(static_cast<double>(V)));
    return;
  }
  const int layer = static_cast<int>(j) + 1;
  const auto& P = g.passable[j];
  if (P.size() == 1) {
    out[static_cast<std::size_t>(P[0])] = 0.0;
    return;
  }
  const int c = graph_rule_choice(g, pg.class_id, fam, layer);
  if (c >= 0) {
    out[static_cast<std::size_t>(c)] = 0.0;
  } else {
    for (int v : P) out[static_cast<std::size_t>(v)] = -std::log(static_cast<double>(P.size()));
  }
}

class GraphCursor final : public Cursor {
 public:
  GraphCursor(std::shared_ptr<const ParsedGraph> pg, GraphFamily fam, int V, std::vector<int> prefix)
      : pg_(std::move(pg)), fam_(fam), V_(V), prefix_(std::move(prefix)) {
    graph_conditional(*pg_, fam_, prefix_, V_, ld_);
  }
  const std::vector<double>& logdist() const override { return ld_; }
  std::size_t depth() const override { return prefix_.size(); }
  std::unique_ptr<Cursor> advance(int token) const override {
    auto p = prefix_;
    p.push_back(token);
    return std::make_unique<GraphCursor>(pg_, fam_, V_, std::move(p));
  }

 private:
  std::shared_ptr<const ParsedGraph> pg_;
  GraphFamily fam_;
  int V_;
  std::vector<int> prefix_;
  std::vector<double> ld_;
};

}  // namespace

GraphDataPolicy::GraphDataPolicy(GraphConfig cfg) : cfg_(std::move(cfg)) { check_config(cfg_); }

void GraphDataPolicy::next_logdist(const Prompt& x, std::span<const int> prefix, std::vector<double>& out) const {
  if (static_cast<int>(prefix.size()) >= horizon()) throw ValidationError("prefix length must be < H");
  graph_conditional(*parse_for_policy(x, cfg_), cfg_.family, prefix, vocab_size(), out);
}

std::unique_ptr<Cursor> GraphDataPolicy::cursor(const Prompt& x) const {
  return std::make_unique<GraphCursor>(parse_for_policy(x, cfg_), cfg_.family, vocab_size(), std::vector<int>{});
}

TaskInstance graph_task(const GraphConfig& cfg) {
  check_config(cfg);
  auto piD = std::make_shared<GraphDataPolicy>(cfg);
  const auto mix = default_mixture(cfg);
  TaskInstance t;
  t.mu = PromptDist::sampler([cfg, mix](Rng& rng) {
    const int c = rng.categorical(mix) + 1;
    auto s = gen_graph_instance(c, cfg, rng);
    Prompt x;
    x.tokens = std::move(s.prompt);
    std::string key;
    for (int tok : x.tokens) key += std::to_string(tok) + ",";
    x.id = static_cast<std::int64_t>(fnv1a(key) >> 1);
    return x;
  });
  t.piD = piD;
  t.reward = [piD](const Prompt& x, std::span<const int> y) -> int { return piD->logprob(x, y) > kNegInf ? 1 : 0; };
  t.metadata = {{"name", "graph"},
                {"family", cfg.family == GraphFamily::Teaser ? "teaser" : "horizon"},
                {"L", cfg.L},
                {"H", cfg.L + 2},
                {"V", cfg.m + 4},
                {"m", cfg.m},
                {"nodes_per_layer", cfg.nodes_per_layer},
                {"mixture", mix}};
  return t;
}

}  // namespace covkit
