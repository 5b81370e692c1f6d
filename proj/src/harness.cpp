#include "covkit/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "covkit/decoding.hpp"
#include "covkit/metrics.hpp"
#include "covkit/parallel.hpp"
#include "covkit/selection.hpp"
#include "covkit/tasks.hpp"
#include "covkit/training.hpp"

namespace fs = std::filesystem;

namespace covkit::harness {

namespace {

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ValidationError("unknown key '" + it.key() + "' in " + where);
}

template <class T>
T get_or(const json& j, const char* k, T dflt) {
  return j.contains(k) ? j.at(k).get<T>() : dflt;
}

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + p.string() + " for writing");
  f << s;
  if (!f) throw std::runtime_error("write failed for " + p.string());
}

std::string axis_value_text(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

const std::set<std::string> kLearners{"sgd_vanilla", "sgd_normalized", "sgd_token", "sgd_distill", "mle"};

struct LearnerSpec {
  std::string name;
  TrainConfig train;
  std::string theta0 = "task";
  json theta0_values;
  std::string decode = "plain";
  double ttt_eta = 0;
  std::string iterate = "last";
  std::size_t mle_n = 0;
  std::size_t mle_max_iters = 100000;
};

LearnerSpec parse_learner(const json& j) {
  reject_unknown(j, {"name", "eta", "T", "K", "lambda", "A", "theta0", "decode", "ttt_eta", "iterate", "n", "max_iters"},
                 "learner");
  LearnerSpec s;
  if (!j.contains("name")) throw ValidationError("learner needs a name");
  s.name = j.at("name").get<std::string>();
  if (!kLearners.count(s.name)) throw ValidationError("unknown learner '" + s.name + "'");
  s.train.eta = get_or(j, "eta", 0.0);
  s.train.T = get_or<std::size_t>(j, "T", 0);
  s.train.K = get_or<std::size_t>(j, "K", 1);
  s.train.lambda = get_or(j, "lambda", 0.0);
  s.train.A = get_or(j, "A", 0.0);
  if (j.contains("theta0")) {
    const auto& t = j.at("theta0");
    if (t.is_array()) {
      s.theta0 = "values";
      s.theta0_values = t;
    } else {
      s.theta0 = t.get<std::string>();
      if (s.theta0 != "zero" && s.theta0 != "task") throw ValidationError("theta0 must be \"zero\", \"task\" or an array");
    }
  }
  s.decode = get_or<std::string>(j, "decode", "plain");
  if (s.decode != "plain" && s.decode != "ttt") throw ValidationError("decode must be \"plain\" or \"ttt\"");
  s.ttt_eta = get_or(j, "ttt_eta", s.train.eta);
  if (s.decode == "ttt" && !(s.ttt_eta >= 0)) throw ValidationError("ttt_eta must be >= 0");
  s.iterate = get_or<std::string>(j, "iterate", "last");
  if (s.iterate != "last" && s.iterate != "average") throw ValidationError("iterate must be \"last\" or \"average\"");
  if (s.name == "mle") {
    s.mle_n = get_or<std::size_t>(j, "n", 0);
    s.mle_max_iters = get_or<std::size_t>(j, "max_iters", s.mle_max_iters);
    if (s.mle_n == 0) throw ValidationError("mle learner needs n >= 1");
  } else {
    s.train.validate(s.name == "sgd_distill");
  }
  return s;
}

struct MetricSpec {
  std::vector<double> Ns;
  std::string mode = "exact";
  std::size_t n_samples = 10000;
  std::string checkpoints = "geometric";
  std::size_t every = 0;
};

MetricSpec parse_metrics(const json& j) {
  reject_unknown(j, {"N_grid", "mode", "n_samples", "checkpoints"}, "metrics");
  MetricSpec m;
  m.Ns = j.contains("N_grid") ? j.at("N_grid").get<std::vector<double>>() : default_N_grid();
  if (m.Ns.empty()) throw ValidationError("metrics.N_grid must be nonempty");
  for (double N : m.Ns)
    if (!(N >= 1)) throw ValidationError("metrics.N_grid entries must be >= 1");
  m.mode = get_or<std::string>(j, "mode", "exact");
  if (m.mode != "exact" && m.mode != "mc") throw ValidationError("metrics.mode must be \"exact\" or \"mc\"");
  m.n_samples = get_or<std::size_t>(j, "n_samples", 10000);
  if (m.mode == "mc" && m.n_samples == 0) throw ValidationError("metrics.n_samples must be positive");
  if (j.contains("checkpoints")) {
    const auto& c = j.at("checkpoints");
    if (c.is_number_integer()) {
      m.checkpoints = "every";
      m.every = c.get<std::size_t>();
      if (m.every == 0) throw ValidationError("metrics.checkpoints interval must be positive");
    } else {
      m.checkpoints = c.get<std::string>();
      if (m.checkpoints != "geometric" && m.checkpoints != "final")
        throw ValidationError("metrics.checkpoints must be \"geometric\", \"final\" or an integer");
    }
  }
  return m;
}

struct Point {
  json task, learner, metrics;
  std::vector<json> values;
};

Point resolve_point(const ExperimentConfig& cfg, std::size_t idx) {
  Point p{cfg.task, cfg.learner, cfg.metrics, {}};
  // Mixed radix over the axes, first axis slowest.
  std::size_t rem = idx;
  std::vector<std::size_t> digits(cfg.axes.size());
  for (std::size_t a = cfg.axes.size(); a-- > 0;) {
    digits[a] = rem % cfg.axes[a].second.size();
    rem /= cfg.axes[a].second.size();
  }
  for (std::size_t a = 0; a < cfg.axes.size(); ++a) {
    const auto& [path, vals] = cfg.axes[a];
    const json& v = vals[digits[a]];
    p.values.push_back(v);
    const auto dot = path.find('.');
    const std::string head = path.substr(0, dot), key = path.substr(dot + 1);
    if (head == "task") p.task[key] = v;
    else if (head == "learner") p.learner[key] = v;
    else p.metrics[key] = v;
  }
  return p;
}

std::size_t point_count(const ExperimentConfig& cfg) {
  std::size_t n = 1;
  for (const auto& a : cfg.axes) n *= a.second.size();
  return n;
}

std::string run_id(std::size_t point, std::uint64_t seed) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "p%04zu_s%llu", point, static_cast<unsigned long long>(seed));
  return buf;
}

Vec initial_theta(const LearnerSpec& s, const TaskInstance& task) {
  const auto d = task.featmap->dim();
  if (s.theta0 == "zero") return Vec::Zero(d);
  if (s.theta0 == "task") return task.theta0 ? *task.theta0 : Vec::Zero(d);
  const auto v = s.theta0_values.get<std::vector<double>>();
  if (static_cast<long>(v.size()) != d) throw ValidationError("learner.theta0 has the wrong dimension");
  return Eigen::Map<const Vec>(v.data(), d);
}

struct RunRow {
  std::size_t t;
  std::size_t n_samples;
  double seq_kl;
  std::vector<double> pcov;
};

struct RunOutput {
  std::vector<RunRow> rows;
};

/// Checkpoints to report, with the averaged iterate when requested.
std::vector<std::pair<std::size_t, Vec>> report_points(const RunRecord& rec, const LearnerSpec& ls, const MetricSpec& ms,
                                                        std::size_t T) {
  auto wanted = [&](std::size_t t) {
    if (t == 0 || t == T) return true;
    if (ms.checkpoints == "final") return false;
    if (ms.checkpoints == "every") return t % ms.every == 0;
    return (t & (t - 1)) == 0;
  };
  std::vector<std::pair<std::size_t, Vec>> out;
  if (ls.iterate == "last") {
    for (const auto& [t, th] : rec.checkpoints)
      if (wanted(t)) out.emplace_back(t, th);
    return out;
  }
  // Average of theta_1..theta_t; t = 0 reports the start.
  Vec sum;
  for (const auto& [t, th] : rec.checkpoints) {
    if (t == 0) {
      sum = Vec::Zero(th.size());
      if (wanted(0)) out.emplace_back(0, th);
      continue;
    }
    sum += th;
    if (wanted(t)) out.emplace_back(t, sum / static_cast<double>(t));
  }
  return out;
}

RunOutput execute_run(const Point& p, std::uint64_t seed, const SeedTree& seeds, const fs::path& dir) {
  const LearnerSpec ls = parse_learner(p.learner);
  const MetricSpec ms = parse_metrics(p.metrics);
  const TaskInstance task = make_task(p.task);
  if (!task.featmap) throw ValidationError("learner '" + ls.name + "' needs a task with a feature map");
  const int H = task.H();
  const Vec theta0 = initial_theta(ls, task);

  RunRecord rec;
  std::size_t T = ls.train.T;
  if (ls.name == "mle") {
    const Dataset data = sample_dataset(*task.piD, task.mu, ls.mle_n, seeds.derive("data", 0));
    const MleResult r = mle_fit(data, *task.featmap, 1e-8, ls.mle_max_iters, theta0);
    T = 1;
    rec.checkpoints = {{0, theta0}, {1, r.theta}};
    rec.final_theta = r.theta;
    rec.n_samples = ls.mle_n;
    if (!r.converged) rec.flags.push_back("mle_not_converged");
  } else {
    TrainConfig tc = ls.train;
    tc.geometric_checkpoints = true;
    tc.checkpoint_every = ls.iterate == "average" ? 1 : ms.every;
    SamplingStream stream(*task.piD, task.mu, seeds.derive("data", 0).rng());
    if (ls.name == "sgd_vanilla") rec = sgd_vanilla(stream, *task.featmap, tc, theta0);
    else if (ls.name == "sgd_normalized") rec = sgd_normalized(stream, *task.featmap, tc, theta0);
    else if (ls.name == "sgd_token") rec = sgd_token(stream, *task.featmap, tc, theta0);
    else rec = sgd_truncated_distill(stream, *task.piD, *task.featmap, tc, theta0);
  }

  const auto pts = report_points(rec, ls, ms, T);
  RunOutput out;
  out.rows.resize(pts.size());
  std::vector<double> Ns = ms.Ns;
  for (std::size_t ci = 0; ci < pts.size(); ++ci) {
    const auto& [t, th] = pts[ci];
    std::shared_ptr<const Policy> pol;
    if (ls.decode == "ttt") pol = std::make_shared<TTTPolicy>(th, task.featmap, ls.ttt_eta, H);
    else pol = std::make_shared<LinearARModel>(th, task.featmap, H);
    RunRow& row = out.rows[ci];
    row.t = t;
    row.n_samples = T ? (t * rec.n_samples) / T : 0;
    if (ms.mode == "exact") {
      const RatioLaw law = ratio_law_exact(*task.piD, *pol, task.mu);
      row.seq_kl = law.kl();
      for (double N : Ns) row.pcov.push_back(law.pcov(N));
    } else {
      const auto c = coverage_mc(*task.piD, *pol, task.mu, Ns, ms.n_samples, seeds.derive("coverage", ci));
      row.pcov = c.values;
      row.seq_kl = seq_kl_mc(*task.piD, *pol, task.mu, ms.n_samples, seeds.derive("kl", ci)).value;
    }
  }

  std::ostringstream ts;
  ts << timeseries_header(Ns) << '\n';
  for (const auto& r : out.rows) {
    ts << r.t << ',' << r.n_samples << ',' << fmt_num(r.seq_kl);
    for (double v : r.pcov) ts << ',' << fmt_num(v);
    ts << '\n';
  }
  write_text(dir / "timeseries.csv", ts.str());
  if (!rec.checkpoints.empty() && ls.iterate == "last") write_text(dir / "checkpoints.jsonl", rec.checkpoints_jsonl());

  json summary = {{"schema_version", kSchemaVersion},
                  {"seed", seed},
                  {"task", p.task},
                  {"learner", p.learner},
                  {"metrics", p.metrics},
                  {"seed_path", seeds.provenance()},
                  {"record", rec.to_json()}};
  if (!out.rows.empty()) {
    const auto& last = out.rows.back();
    json fin = {{"t", last.t}, {"seq_kl", fmt_num(last.seq_kl)}};
    json pc = json::object();
    for (std::size_t k = 0; k < Ns.size(); ++k) pc[fmt_num(Ns[k])] = last.pcov[k];
    fin["pcov"] = pc;
    summary["final"] = fin;
  }
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  return out;
}

}  // namespace

json load_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open " + path);
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw ValidationError("invalid JSON in " + path + ": " + e.what());
  }
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  reject_unknown(j, {"version", "task", "learner", "metrics", "sweep", "output_dir", "seed"}, "config");
  if (!j.contains("version")) throw ValidationError("config needs a \"version\" field");
  if (j.at("version") != kSchemaVersion) throw ValidationError("unsupported config version " + j.at("version").dump());
  for (const char* k : {"task", "learner", "sweep", "output_dir"})
    if (!j.contains(k)) throw ValidationError(std::string("config is missing \"") + k + "\"");
  ExperimentConfig c;
  c.task = j.at("task");
  c.learner = j.at("learner");
  c.metrics = j.contains("metrics") ? j.at("metrics") : json::object();
  c.output_dir = j.at("output_dir").get<std::string>();
  c.root_seed = get_or<std::uint64_t>(j, "seed", 0);
  if (!c.task.is_object() || !c.task.contains("name")) throw ValidationError("task spec needs a name");
  const json& sw = j.at("sweep");
  if (!sw.is_object()) throw ValidationError("sweep must be a JSON object");
  if (!sw.contains("seeds")) throw ValidationError("sweep needs a \"seeds\" axis");
  for (auto it = sw.begin(); it != sw.end(); ++it) {
    const std::string& key = it.key();
    if (!it->is_array()) throw ValidationError("sweep axis '" + key + "' must be a list");
    if (it->empty()) throw ValidationError("sweep axis '" + key + "' is empty");
    if (key == "seeds") {
      c.seeds = it->get<std::vector<std::uint64_t>>();
      if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size())
        throw ValidationError("sweep seeds must be distinct");
      continue;
    }
    const auto dot = key.find('.');
    const std::string head = key.substr(0, dot);
    if (dot == std::string::npos || dot + 1 >= key.size() || (head != "task" && head != "learner" && head != "metrics"))
      throw ValidationError("sweep axis '" + key + "' must be task.<key>, learner.<key> or metrics.<key>");
    c.axes.emplace_back(key, it->get<std::vector<json>>());
  }
  // Every point must validate before any run starts.
  for (std::size_t p = 0; p < point_count(c); ++p) {
    const Point pt = resolve_point(c, p);
    parse_learner(pt.learner);
    parse_metrics(pt.metrics);
    const TaskInstance t = make_task(pt.task);
    if (!t.featmap) throw ValidationError("task '" + pt.task.at("name").get<std::string>() + "' has no feature map to train on");
  }
  return c;
}

std::string fmt_num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string timeseries_header(const std::vector<double>& Ns) {
  std::string h = "t,n_samples,seq_kl";
  for (double N : Ns) h += ",pcov_" + fmt_num(N);
  return h;
}

std::string sweep_header(const std::vector<std::string>& axis_names) {
  std::string h = "point";
  for (const auto& a : axis_names) h += "," + a;
  h += ",t,metric,median,q1_16,q15_16,n_seeds";
  return h;
}

double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw ValidationError("quantile of an empty sample");
  if (!(q >= 0 && q <= 1)) throw ValidationError("quantile level must lie in [0, 1]");
  std::vector<double> s;
  for (double x : v)
    if (!std::isnan(x)) s.push_back(x);
  if (s.empty()) return std::nan("");
  std::sort(s.begin(), s.end());
  const double pos = q * static_cast<double>(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0 || s[lo] == s[hi]) return s[lo];
  return s[lo] + frac * (s[hi] - s[lo]);
}

void run_experiment(const ExperimentConfig& cfg) {
  const fs::path root(cfg.output_dir);
  const std::size_t P = point_count(cfg), S = cfg.seeds.size();
  std::vector<Point> points;
  for (std::size_t p = 0; p < P; ++p) points.push_back(resolve_point(cfg, p));
  std::vector<RunOutput> outs(P * S);
  const SeedTree base(cfg.root_seed);
  parallel_for(P * S, [&](std::size_t job) {
    const std::size_t p = job / S, s = job % S;
    const SeedTree seeds = base.derive("point", p).derive("seed", cfg.seeds[s]);
    outs[job] = execute_run(points[p], cfg.seeds[s], seeds, root / "runs" / run_id(p, cfg.seeds[s]));
  });

  std::vector<std::string> axis_names;
  for (const auto& a : cfg.axes) axis_names.push_back(a.first);
  std::ostringstream sw;
  sw << sweep_header(axis_names) << '\n';
  for (std::size_t p = 0; p < P; ++p) {
    const auto Ns = parse_metrics(points[p].metrics).Ns;
    const auto& ref = outs[p * S].rows;
    std::string prefix = std::to_string(p);
    for (const auto& v : points[p].values) prefix += "," + axis_value_text(v);
    for (std::size_t r = 0; r < ref.size(); ++r) {
      auto emit = [&](const std::string& metric, auto get) {
        std::vector<double> vals;
        for (std::size_t s = 0; s < S; ++s) vals.push_back(get(outs[p * S + s].rows.at(r)));
        sw << prefix << ',' << ref[r].t << ',' << metric << ',' << fmt_num(quantile(vals, 0.5)) << ','
           << fmt_num(quantile(vals, 1.0 / 16)) << ',' << fmt_num(quantile(vals, 15.0 / 16)) << ',' << S << '\n';
      };
      emit("seq_kl", [](const RunRow& row) { return row.seq_kl; });
      for (std::size_t k = 0; k < Ns.size(); ++k) emit("pcov_" + fmt_num(Ns[k]), [k](const RunRow& row) { return row.pcov[k]; });
    }
  }
  write_text(root / "sweep.csv", sw.str());
  json manifest = {{"schema_version", kSchemaVersion},
                   {"sweep_header", sweep_header(axis_names)},
                   {"points", P},
                   {"seeds", cfg.seeds},
                   {"root_seed", cfg.root_seed}};
  json runs = json::array();
  for (std::size_t p = 0; p < P; ++p)
    for (auto s : cfg.seeds) runs.push_back(run_id(p, s));
  manifest["runs"] = runs;
  write_text(root / "manifest.json", manifest.dump(2) + "\n");
}

void gen_data(const GenDataOptions& o) {
  if (o.out.empty()) throw ValidationError("gen-data needs an output path");
  if (o.n == 0) throw ValidationError("gen-data needs n >= 1");
  const TaskInstance task = make_task(o.task);
  Dataset d = sample_dataset(*task.piD, task.mu, o.n, SeedTree(o.seed));
  d.provenance["task"] = o.task;
  d.provenance["seed"] = o.seed;
  write_dataset_jsonl(d, o.out);
  if (o.emit_text) {
    if (!task.metadata.contains("m")) throw ValidationError("--emit-text needs a graph task");
    const int m = task.metadata.at("m").get<int>();
    std::ostringstream os;
    for (const auto& ex : d.examples) {
      os << prompt_to_text(ex.x.tokens, m) << " =>";
      for (int tok : ex.y) os << ' ' << tok;
      os << '\n';
    }
    write_text(o.out + ".txt", os.str());
  }
}

void eval_coverage(const EvalOptions& o) {
  if (o.pi_hat.empty()) throw ValidationError("eval-coverage needs --pi-hat");
  if (o.out_prefix.empty()) throw ValidationError("eval-coverage needs an output prefix");
  const TaskInstance task = make_task(o.task);
  std::shared_ptr<const Policy> piD = o.pi_d.empty() ? task.piD : policy_from_json(load_json_file(o.pi_d));
  std::shared_ptr<const Policy> piHat = policy_from_json(load_json_file(o.pi_hat));
  if (piD->vocab_size() != piHat->vocab_size() || piD->horizon() != piHat->horizon())
    throw ValidationError("policies disagree on vocabulary size or horizon");
  const std::vector<double> Ns = o.Ns.empty() ? default_N_grid() : o.Ns;
  MetricReport rep;
  if (o.mode == "exact") {
    rep.coverage = coverage_exact(*piD, *piHat, task.mu, Ns);
    rep.seq_kl = seq_kl_exact(*piD, *piHat, task.mu);
    rep.seq_ce = seq_ce_exact(*piD, *piHat, task.mu);
    rep.hellinger_sq = hellinger_sq_exact(*piD, *piHat, task.mu);
  } else if (o.mode == "mc") {
    const SeedTree seeds(o.seed);
    rep.coverage = coverage_mc(*piD, *piHat, task.mu, Ns, o.n_samples, seeds.derive("coverage", 0));
    rep.seq_kl = seq_kl_mc(*piD, *piHat, task.mu, o.n_samples, seeds.derive("kl", 0)).value;
  } else {
    throw ValidationError("mode must be \"exact\" or \"mc\"");
  }
  write_text(o.out_prefix + ".csv", rep.coverage->to_csv());
  write_text(o.out_prefix + ".json", rep.to_json().dump(2) + "\n");
}

void tournament(const TournamentOptions& o) {
  if (o.candidates.empty()) throw ValidationError("tournament needs at least one candidate");
  if (o.out.empty()) throw ValidationError("tournament needs an output path");
  CandidateClass cands;
  for (const auto& f : o.candidates) cands.push_back(policy_from_json(load_json_file(f)));
  const Dataset data = read_dataset_jsonl(o.dataset);
  if (data.examples.empty()) throw ValidationError("tournament needs a nonempty dataset");
  json out = {{"kind", o.kind}, {"N", o.N}, {"candidates", o.candidates}};
  if (o.kind == "ce") {
    out["selected"] = select_ce(cands, data);
  } else if (o.kind == "simple") {
    out["report"] = simple_tournament(cands, data, o.N).to_json();
    out["selected"] = out["report"]["selected"];
  } else if (o.kind == "offset") {
    OffsetMode mode;
    if (o.offset_mode == "exact") mode.kind = OffsetMode::Exact;
    else if (o.offset_mode == "mc") mode.kind = OffsetMode::MC;
    else if (o.offset_mode != "auto") throw ValidationError("offset mode must be auto, exact or mc");
    mode.m = o.m;
    mode.seed = o.seed;
    out["gamma"] = o.gamma;
    out["report"] = offset_tournament(cands, data, o.N, o.gamma, mode).to_json();
    out["selected"] = out["report"]["selected"];
  } else {
    throw ValidationError("tournament kind must be simple, offset or ce");
  }
  write_text(o.out, out.dump(2) + "\n");
}

void bon(const BonOptions& o) {
  if (o.policy.empty()) throw ValidationError("bon needs --policy");
  if (o.out.empty()) throw ValidationError("bon needs an output path");
  if (o.Ns.empty()) throw ValidationError("bon needs a nonempty N list");
  const TaskInstance task = make_task(o.task);
  std::shared_ptr<const Policy> pol = policy_from_json(load_json_file(o.policy));
  std::shared_ptr<const Policy> piT = o.comparator.empty() ? task.piD : policy_from_json(load_json_file(o.comparator));
  if (o.reward == "task" && !task.reward) throw ValidationError("task has no reward; use --reward support or adversarial");
  if (o.reward != "task" && o.reward != "support" && o.reward != "adversarial")
    throw ValidationError("reward must be task, support or adversarial");
  const SeedTree seeds(o.seed);
  std::ostringstream os;
  os << "N,regret,half_width,pcov_ref\n";
  for (std::size_t i = 0; i < o.Ns.size(); ++i) {
    const std::size_t N = o.Ns[i];
    if (N == 0) throw ValidationError("bon N must be >= 1");
    RewardFn r;
    if (o.reward == "task") r = task.reward;
    else if (o.reward == "support") r = [piT](const Prompt& x, std::span<const int> y) { return piT->logprob(x, y) > kNegInf ? 1 : 0; };
    else r = adversarial_reward(piT, pol, static_cast<double>(N));
    const auto e = bon_regret(*pol, *piT, r, task.mu, N, o.trials, seeds.derive("N", i));
    double pc;
    try {
      pc = coverage_exact(*piT, *pol, task.mu, {static_cast<double>(N)}).values[0];
    } catch (const std::exception&) {
      pc = coverage_mc(*piT, *pol, task.mu, {static_cast<double>(N)}, 10000, seeds.derive("pcov", i)).values[0];
    }
    os << N << ',' << fmt_num(e.estimate) << ',' << fmt_num(e.half_width) << ',' << fmt_num(pc) << '\n';
  }
  write_text(o.out, os.str());
}

json error_json(int code, const std::string& message) {
  return {{"error", {{"kind", code == kExitValidation ? "validation" : "runtime"}, {"code", code}, {"message", message}}}};
}

}  // namespace covkit::harness
