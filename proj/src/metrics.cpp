#include "covkit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "covkit/parallel.hpp"

namespace covkit {

double kl_logdist(std::span<const double> lp, std::span<const double> lq) {
  double s = 0;
  for (std::size_t v = 0; v < lp.size(); ++v) {
    if (lp[v] == kNegInf) continue;
    if (lq[v] == kNegInf) return kInf;
    s += std::exp(lp[v]) * (lp[v] - lq[v]);
  }
  return std::max(0.0, s);
}

double ce_logdist(std::span<const double> lp, std::span<const double> lq) {
  double s = 0;
  for (std::size_t v = 0; v < lp.size(); ++v) {
    if (lp[v] == kNegInf) continue;
    if (lq[v] == kNegInf) return kInf;
    s -= std::exp(lp[v]) * lq[v];
  }
  return s;
}

double hellinger_logdist(std::span<const double> lp, std::span<const double> lq) {
  double bc = 0;
  for (std::size_t v = 0; v < lp.size(); ++v)
    if (lp[v] != kNegInf && lq[v] != kNegInf) bc += std::exp(0.5 * (lp[v] + lq[v]));
  return std::clamp(1.0 - bc, 0.0, 1.0);
}

namespace {

void enumerate_type_classes(int H, const std::vector<double>& lp, const std::vector<std::vector<double>>& lqs,
                            const std::function<void(const PathInfo&)>& f, std::size_t budget) {
  std::vector<std::size_t> supp;
  for (std::size_t v = 0; v < lp.size(); ++v)
    if (lp[v] != kNegInf) supp.push_back(v);
  const int k = static_cast<int>(supp.size());
  if (k == 0) return;
  double log_count = std::lgamma(H + k) - std::lgamma(H + 1.0) - std::lgamma(static_cast<double>(k));
  if (log_count > std::log(static_cast<double>(budget)))
    throw EnumerationBudgetError("type-class enumeration budget exceeded; use the Monte Carlo mode");
  double step_kl = 0, step_hel = 0;
  if (!lqs.empty()) {
    step_kl = H * kl_logdist(lp, lqs[0]);
    step_hel = H * hellinger_logdist(lp, lqs[0]);
  }
  const double lgH = std::lgamma(H + 1.0);
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  std::vector<double> lpo(lqs.size());
  std::function<void(int, int)> rec = [&](int idx, int left) {
    if (idx == k - 1) {
      counts[static_cast<std::size_t>(idx)] = left;
      double lcount = lgH, lseq = 0;
      std::fill(lpo.begin(), lpo.end(), 0.0);
      for (int i = 0; i < k; ++i) {
        const int c = counts[static_cast<std::size_t>(i)];
        if (c == 0) continue;
        const std::size_t v = supp[static_cast<std::size_t>(i)];
        lcount -= std::lgamma(c + 1.0);
        lseq += c * lp[v];
        for (std::size_t j = 0; j < lqs.size(); ++j)
          lpo[j] = (lpo[j] == kNegInf || lqs[j][v] == kNegInf) ? kNegInf : lpo[j] + c * lqs[j][v];
      }
      f(PathInfo{lcount + lseq, lseq, lpo.data(), step_kl, step_hel, nullptr});
      return;
    }
    for (int c = 0; c <= left; ++c) {
      counts[static_cast<std::size_t>(idx)] = c;
      rec(idx + 1, left - c);
    }
  };
  rec(0, H);
}

}  // namespace

void for_each_path(const Prompt& x, const Policy& ref, std::span<const Policy* const> others,
                   const std::function<void(const PathInfo&)>& f, std::size_t budget) {
  const int H = ref.horizon();
  if (auto ref_iid = ref.iid_logdist(x)) {
    std::vector<std::vector<double>> lqs;
    bool all = true;
    for (const Policy* o : others) {
      auto q = o->iid_logdist(x);
      if (!q) {
        all = false;
        break;
      }
      lqs.push_back(std::move(*q));
    }
    if (all) {
      enumerate_type_classes(H, *ref_iid, lqs, f, budget);
      return;
    }
  }
  const std::size_t K = others.size();
  std::vector<int> y;
  std::vector<double> lpo(K, 0.0);
  std::size_t visited = 0;
  std::function<void(const Cursor&, const std::vector<std::unique_ptr<Cursor>>&, double, double, double)> rec =
      [&](const Cursor& rc, const std::vector<std::unique_ptr<Cursor>>& oc, double lref, double skl, double shel) {
        const std::vector<double> lp = rc.logdist();
        double kl_here = 0, hel_here = 0;
        if (K > 0) {
          kl_here = kl_logdist(lp, oc[0]->logdist());
          hel_here = hellinger_logdist(lp, oc[0]->logdist());
        }
        const bool last = static_cast<int>(y.size()) + 1 == H;
        for (std::size_t v = 0; v < lp.size(); ++v) {
          if (lp[v] == kNegInf) continue;
          const std::vector<double> saved = lpo;
          for (std::size_t j = 0; j < K; ++j) {
            const double q = oc[j]->logdist()[v];
            lpo[j] = (lpo[j] == kNegInf || q == kNegInf) ? kNegInf : lpo[j] + q;
          }
          y.push_back(static_cast<int>(v));
          if (last) {
            if (++visited > budget) throw EnumerationBudgetError("enumeration budget exceeded; use the Monte Carlo mode");
            f(PathInfo{lref + lp[v], lref + lp[v], lpo.data(), skl + kl_here, shel + hel_here, &y});
          } else {
            auto nrc = rc.advance(static_cast<int>(v));
            std::vector<std::unique_ptr<Cursor>> noc;
            noc.reserve(K);
            for (std::size_t j = 0; j < K; ++j) noc.push_back(oc[j]->advance(static_cast<int>(v)));
            rec(*nrc, noc, lref + lp[v], skl + kl_here, shel + hel_here);
          }
          y.pop_back();
          lpo = saved;
        }
      };
  auto rc = ref.cursor(x);
  std::vector<std::unique_ptr<Cursor>> oc;
  for (const Policy* o : others) oc.push_back(o->cursor(x));
  rec(*rc, oc, 0.0, 0.0, 0.0);
}

namespace {

struct PairVisit {
  double mass;  ///< mu(x) times the reference mass of the path or class
  double lp, lq;
  double skl, shel;
};

void visit_pair(const Policy& piD, const Policy& piHat, const PromptDist& mu, const std::function<void(const PairVisit&)>& g) {
  if (!mu.is_finite()) throw ValidationError("exact metrics need a finite prompt support");
  const Policy* others[1] = {&piHat};
  for (std::size_t i = 0; i < mu.support().size(); ++i) {
    const double w = mu.weights()[i];
    if (w <= 0) continue;
    for_each_path(mu.support()[i], piD, others, [&](const PathInfo& p) {
      g({w * std::exp(p.log_mass), p.lp_ref, p.lp_others[0], p.step_kl, p.step_hel});
    });
  }
}

double log_ratio(double lp, double lq) { return lq == kNegInf ? kInf : lp - lq; }

}  // namespace

std::vector<double> default_N_grid() {
  std::vector<double> g;
  for (int k = 1; k <= 16; ++k) g.push_back(std::ldexp(1.0, k));
  return g;
}

std::string CoverageCurve::to_csv() const {
  std::ostringstream os;
  os << "N,log2N,pcov,half_width,n_samples\n";
  char buf[256];
  for (std::size_t i = 0; i < Ns.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%zu\n", Ns[i], std::log2(Ns[i]), values[i], half_widths[i], n_samples);
    os << buf;
  }
  return os.str();
}

json CoverageCurve::to_json() const {
  return {{"N", Ns}, {"pcov", values}, {"half_width", half_widths}, {"n_samples", n_samples}};
}

double RatioLaw::pcov(double N) const {
  const double lN = std::log(N);
  std::vector<double> parts;
  for (const auto& [r, m] : atoms)
    if (ratio_event(r, lN)) parts.push_back(m);
  return std::clamp(pairwise_sum(parts), 0.0, 1.0);
}

double RatioLaw::kl() const {
  std::vector<double> parts;
  for (const auto& [r, m] : atoms) {
    if (m <= 0) continue;
    if (r == kInf) return kInf;
    parts.push_back(m * r);
  }
  return std::max(0.0, pairwise_sum(parts));
}

double RatioLaw::log_wmax() const {
  double w = kNegInf;
  for (const auto& [r, m] : atoms)
    if (m > 0) w = std::max(w, r);
  return w;
}

RatioLaw ratio_law_exact(const Policy& piD, const Policy& piHat, const PromptDist& mu) {
  RatioLaw law;
  visit_pair(piD, piHat, mu, [&](const PairVisit& v) { law.atoms.emplace_back(log_ratio(v.lp, v.lq), v.mass); });
  std::stable_sort(law.atoms.begin(), law.atoms.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  return law;
}

CoverageCurve coverage_exact(const Policy& piD, const Policy& piHat, const PromptDist& mu, const std::vector<double>& Ns) {
  for (double N : Ns)
    if (!(N >= 1)) throw ValidationError("coverage thresholds must be >= 1");
  RatioLaw law = ratio_law_exact(piD, piHat, mu);
  CoverageCurve c;
  c.Ns = Ns;
  std::sort(c.Ns.begin(), c.Ns.end());
  // Suffix sums over the sorted atoms give the tail mass at every threshold.
  std::vector<double> tail(law.atoms.size() + 1, 0.0);
  for (std::size_t i = law.atoms.size(); i-- > 0;) tail[i] = tail[i + 1] + law.atoms[i].second;
  for (double N : c.Ns) {
    const double lN = std::log(N) - kTieTol;
    auto it = std::lower_bound(law.atoms.begin(), law.atoms.end(), lN, [](const auto& a, double t) { return a.first < t; });
    c.values.push_back(std::clamp(tail[static_cast<std::size_t>(it - law.atoms.begin())], 0.0, 1.0));
    c.half_widths.push_back(0.0);
  }
  // Suffix sums are nonincreasing in the threshold, but clamp against rounding.
  for (std::size_t i = 1; i < c.values.size(); ++i) c.values[i] = std::min(c.values[i], c.values[i - 1]);
  return c;
}

double hoeffding_half_width(std::size_t n, double delta) {
  return std::sqrt(std::log(2.0 / delta) / (2.0 * static_cast<double>(n)));
}

double wilson_half_width(double phat, std::size_t n, double delta) {
  // Two-sided normal quantile by bisection on erfc.
  double lo = 0, hi = 10;
  for (int i = 0; i < 200; ++i) {
    double mid = 0.5 * (lo + hi);
    if (std::erfc(mid / std::sqrt(2.0)) > delta) lo = mid;
    else hi = mid;
  }
  const double z = 0.5 * (lo + hi), nn = static_cast<double>(n);
  return z / (1 + z * z / nn) * std::sqrt(phat * (1 - phat) / nn + z * z / (4 * nn * nn));
}

namespace {

constexpr std::size_t kChunk = 256;

/// Draws n trajectories from mu x piD in fixed chunks and maps each to a value.
std::vector<double> mc_map(const Policy& piD, const PromptDist& mu, std::size_t n, const SeedTree& seeds,
                           const std::function<double(const Trajectory&)>& fn) {
  std::vector<double> vals(n);
  const std::size_t nchunks = (n + kChunk - 1) / kChunk;
  parallel_for(nchunks, [&](std::size_t ci) {
    Rng rng = seeds.derive("chunk", ci).rng();
    for (std::size_t i = ci * kChunk; i < std::min(n, (ci + 1) * kChunk); ++i) vals[i] = fn(sample_one(piD, mu, rng));
  });
  return vals;
}

Estimate mean_se(const std::vector<double>& vals) {
  const double n = static_cast<double>(vals.size());
  const double mean = pairwise_sum(vals) / n;
  if (!std::isfinite(mean)) return {mean, kInf};
  std::vector<double> sq(vals.size());
  for (std::size_t i = 0; i < vals.size(); ++i) sq[i] = (vals[i] - mean) * (vals[i] - mean);
  const double var = vals.size() > 1 ? pairwise_sum(sq) / (n - 1) : 0.0;
  return {mean, std::sqrt(var / n)};
}

}  // namespace

CoverageCurve coverage_mc(const Policy& piD, const Policy& piHat, const PromptDist& mu, const std::vector<double>& Ns,
                          std::size_t n_samples, const SeedTree& seeds, const McOptions& opt) {
  if (n_samples < 2) throw ValidationError("coverage_mc needs n_samples >= 2");
  std::vector<double> lr = mc_map(piD, mu, n_samples, seeds, [&](const Trajectory& t) {
    return log_ratio(piD.logprob(t.x, t.y), piHat.logprob(t.x, t.y));
  });
  CoverageCurve c;
  c.Ns = Ns;
  std::sort(c.Ns.begin(), c.Ns.end());
  c.n_samples = n_samples;
  for (double N : c.Ns) {
    const double lN = std::log(N);
    std::size_t cnt = 0;
    for (double r : lr) cnt += ratio_event(r, lN) ? 1 : 0;
    const double p = static_cast<double>(cnt) / static_cast<double>(n_samples);
    c.values.push_back(p);
    c.half_widths.push_back(opt.wilson ? wilson_half_width(p, n_samples, opt.delta) : hoeffding_half_width(n_samples, opt.delta));
  }
  return c;
}

double seq_kl_exact(const Policy& piD, const Policy& piHat, const PromptDist& mu) {
  return ratio_law_exact(piD, piHat, mu).kl();
}

double seq_ce_exact(const Policy& piD, const Policy& piHat, const PromptDist& mu) {
  std::vector<double> parts;
  bool inf = false;
  visit_pair(piD, piHat, mu, [&](const PairVisit& v) {
    if (v.lq == kNegInf) inf = true;
    else parts.push_back(-v.mass * v.lq);
  });
  return inf ? kInf : pairwise_sum(parts);
}

double entropy_exact(const Policy& piD, const PromptDist& mu) {
  std::vector<double> parts;
  visit_pair(piD, piD, mu, [&](const PairVisit& v) { parts.push_back(-v.mass * v.lp); });
  return pairwise_sum(parts);
}

Estimate seq_kl_mc(const Policy& piD, const Policy& piHat, const PromptDist& mu, std::size_t n, const SeedTree& seeds) {
  if (n < 2) throw ValidationError("Monte Carlo estimators need n >= 2");
  return mean_se(mc_map(piD, mu, n, seeds, [&](const Trajectory& t) {
    auto a = piD.conditionals_along(t.x, t.y);
    auto b = piHat.conditionals_along(t.x, t.y);
    double s = 0;
    for (std::size_t h = 0; h < a.size(); ++h) s += kl_logdist(a[h], b[h]);
    return s;
  }));
}

Estimate seq_ce_mc(const Policy& piD, const Policy& piHat, const PromptDist& mu, std::size_t n, const SeedTree& seeds) {
  if (n < 2) throw ValidationError("Monte Carlo estimators need n >= 2");
  return mean_se(mc_map(piD, mu, n, seeds, [&](const Trajectory& t) {
    auto a = piD.conditionals_along(t.x, t.y);
    auto b = piHat.conditionals_along(t.x, t.y);
    double s = 0;
    for (std::size_t h = 0; h < a.size(); ++h) s += ce_logdist(a[h], b[h]);
    return s;
  }));
}

double hellinger_sq_exact(const Policy& piD, const Policy& piHat, const PromptDist& mu) {
  std::vector<double> bc;
  visit_pair(piD, piHat, mu, [&](const PairVisit& v) {
    if (v.lq != kNegInf) bc.push_back(v.mass * std::exp(0.5 * (v.lq - v.lp)));
  });
  return std::clamp(1.0 - pairwise_sum(bc), 0.0, 1.0);
}

double stopped_kl_exact(const Policy& piD, const Policy& piHat, const PromptDist& mu, double N) {
  if (!(N > 1)) throw ValidationError("stopped KL needs N > 1");
  const double lN = std::log(N);
  std::vector<double> parts;
  visit_pair(piD, piHat, mu, [&](const PairVisit& v) { parts.push_back(v.mass * std::min(lN, v.skl)); });
  return pairwise_sum(parts);
}

Estimate stopped_kl_mc(const Policy& piD, const Policy& piHat, const PromptDist& mu, double N, std::size_t n,
                       const SeedTree& seeds) {
  if (!(N > 1)) throw ValidationError("stopped KL needs N > 1");
  if (n < 2) throw ValidationError("Monte Carlo estimators need n >= 2");
  const double lN = std::log(N);
  return mean_se(mc_map(piD, mu, n, seeds, [&](const Trajectory& t) {
    auto a = piD.conditionals_along(t.x, t.y);
    auto b = piHat.conditionals_along(t.x, t.y);
    double s = 0;
    for (std::size_t h = 0; h < a.size() && s < lN; ++h) s += kl_logdist(a[h], b[h]);
    return std::min(lN, s);
  }));
}

double step_hellinger_tail_exact(const Policy& piD, const Policy& piHat, const PromptDist& mu, double t) {
  std::vector<double> parts;
  visit_pair(piD, piHat, mu, [&](const PairVisit& v) {
    if (v.shel >= t) parts.push_back(v.mass);
  });
  return std::clamp(pairwise_sum(parts), 0.0, 1.0);
}

double kl_to_cov_bound(double kl, double N) {
  if (!(N > 1)) throw ValidationError("kl_to_cov_bound needs N > 1");
  return kl / (std::log(N) - 1 + 1 / N);
}

double kl_to_cov_bound_basic(double kl, double N) {
  if (!(N > std::exp(1.0))) throw ValidationError("kl_to_cov_bound_basic needs N > e");
  return kl / (std::log(N) - 1);
}

double hellinger_to_cov_bound(double hel_sq, double N) {
  if (!(N > 1)) throw ValidationError("hellinger_to_cov_bound needs N > 1");
  const double s = std::sqrt(N) - 1;
  return 2 * N / (s * s) * hel_sq;
}

double stopped_kl_to_cov_bound(double stopped_kl, double N) {
  if (!(N > std::exp(1.0))) throw ValidationError("stopped_kl_to_cov_bound needs N > e");
  return 2 / (std::log(N) - 1) * stopped_kl;
}

double coverage_to_kl_bound(const RatioLaw& law) {
  const double lw = law.log_wmax();
  if (lw == kInf) return kInf;
  if (!(lw > 0)) return 0.0;
  // Pcov_N log N is maximized on each constant piece at its right end, which
  // is an atom of the log-ratio law.
  double C = 0, tail = 0;
  for (std::size_t i = law.atoms.size(); i-- > 0;) {
    tail += law.atoms[i].second;
    const double r = law.atoms[i].first;
    if (r > 0) C = std::max(C, r * tail);
  }
  if (C <= 0) return 0.0;
  return C * (1 + std::log(lw / C));
}

double pcov_lower_from_step_hellinger(const Policy& piD, const Policy& piHat, const PromptDist& mu, double N, double delta) {
  return step_hellinger_tail_exact(piD, piHat, mu, std::log(N / delta)) - delta;
}

double empirical_pairwise_cov(const Policy& piPrime, const Policy& pi, const Dataset& data, double N) {
  if (data.examples.empty()) throw ValidationError("pairwise coverage needs a nonempty dataset");
  const double lN = std::log(N);
  std::size_t cnt = 0;
  for (const auto& t : data.examples) {
    const double a = piPrime.logprob(t.x, t.y), b = pi.logprob(t.x, t.y);
    if (a == kNegInf) continue;
    if (ratio_event(log_ratio(a, b), lN)) ++cnt;
  }
  return static_cast<double>(cnt) / static_cast<double>(data.size());
}

double onpolicy_cov_exact(const Policy& piBar, const Policy& piPrime, const Policy& pi, const std::vector<Prompt>& prompts,
                          double N) {
  if (prompts.empty()) throw ValidationError("on-policy coverage needs prompts");
  const double lN = std::log(N);
  const Policy* others[2] = {&piPrime, &pi};
  std::vector<double> per;
  for (const auto& x : prompts) {
    std::vector<double> parts;
    for_each_path(x, piBar, others, [&](const PathInfo& p) {
      const double a = p.lp_others[0], b = p.lp_others[1];
      if (a == kNegInf) return;
      if (ratio_event(log_ratio(a, b), lN)) parts.push_back(std::exp(p.log_mass));
    });
    per.push_back(pairwise_sum(parts));
  }
  return pairwise_sum(per) / static_cast<double>(prompts.size());
}

double onpolicy_cov_mc(const Policy& piBar, const Policy& piPrime, const Policy& pi, const std::vector<Prompt>& prompts,
                       double N, std::size_t m, const SeedTree& seeds) {
  if (m < 1) throw ValidationError("on-policy Monte Carlo needs m >= 1");
  if (prompts.empty()) throw ValidationError("on-policy coverage needs prompts");
  const double lN = std::log(N);
  std::vector<double> per(prompts.size());
  parallel_for(prompts.size(), [&](std::size_t i) {
    Rng rng = seeds.derive("prompt", i).rng();
    std::size_t cnt = 0;
    for (std::size_t k = 0; k < m; ++k) {
      auto y = piBar.sample(prompts[i], rng);
      const double a = piPrime.logprob(prompts[i], y);
      if (a == kNegInf) continue;
      if (ratio_event(log_ratio(a, pi.logprob(prompts[i], y)), lN)) ++cnt;
    }
    per[i] = static_cast<double>(cnt) / static_cast<double>(m);
  });
  return pairwise_sum(per) / static_cast<double>(prompts.size());
}

json MetricReport::to_json() const {
  json j = json::object();
  auto put = [&](const char* k, const std::optional<double>& v) {
    if (!v) return;
    if (std::isfinite(*v)) j[k] = *v;
    else j[k] = *v > 0 ? "inf" : "-inf";
  };
  put("seq_kl", seq_kl);
  put("seq_ce", seq_ce);
  put("hellinger_sq", hellinger_sq);
  put("stopped_kl", stopped_kl);
  put("stopped_kl_N", stopped_kl_N);
  put("sigma_star_sq", sigma_star_sq);
  if (coverage) j["coverage"] = coverage->to_json();
  return j;
}

}  // namespace covkit
