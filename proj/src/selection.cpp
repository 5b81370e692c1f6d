#include "covkit/selection.hpp"

#include <cmath>
#include <map>

#include "covkit/metrics.hpp"
#include "covkit/parallel.hpp"

namespace covkit {

json SelectionReport::to_json() const {
  return {{"selected", selected},
          {"pairwise", pairwise},
          {"offset", offset},
          {"scores", scores},
          {"precondition_warning", precondition_warning}};
}

namespace {

void check_inputs(const CandidateClass& cands, const Dataset& data) {
  if (cands.empty()) throw ValidationError("candidate class is empty");
  if (data.examples.empty()) throw ValidationError("selection needs a nonempty dataset");
  for (const auto& c : cands)
    if (c->vocab_size() != cands[0]->vocab_size() || c->horizon() != cands[0]->horizon())
      throw ValidationError("candidates must share vocabulary and horizon");
}

/// logp[k][i] = log pi_k(y_i | x_i).
std::vector<std::vector<double>> logprob_matrix(const CandidateClass& cands, const Dataset& data) {
  const std::size_t K = cands.size(), n = data.size();
  std::vector<std::vector<double>> L(K, std::vector<double>(n));
  parallel_for(K * n, [&](std::size_t cell) {
    const std::size_t k = cell / n, i = cell % n;
    L[k][i] = cands[k]->logprob(data.examples[i].x, data.examples[i].y);
  });
  return L;
}

std::vector<std::vector<double>> pairwise_from(const std::vector<std::vector<double>>& L, double N) {
  const std::size_t K = L.size(), n = L[0].size();
  const double lN = std::log(N);
  std::vector<std::vector<double>> P(K, std::vector<double>(K, 0.0));
  for (std::size_t a = 0; a < K; ++a)
    for (std::size_t b = 0; b < K; ++b) {
      std::size_t cnt = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (L[a][i] == kNegInf) continue;
        const double r = L[b][i] == kNegInf ? kInf : L[a][i] - L[b][i];
        if (ratio_event(r, lN)) ++cnt;
      }
      P[a][b] = static_cast<double>(cnt) / static_cast<double>(n);
    }
  return P;
}

std::size_t argmin_lowest(const std::vector<double>& s) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < s.size(); ++i)
    if (s[i] < s[best]) best = i;
  return best;
}

}  // namespace

std::size_t select_ce(const CandidateClass& cands, const Dataset& data) {
  check_inputs(cands, data);
  auto L = logprob_matrix(cands, data);
  std::size_t best = 0;
  double best_ll = kNegInf;
  bool have = false;
  for (std::size_t k = 0; k < cands.size(); ++k) {
    const double ll = pairwise_sum(L[k]);
    if (!have || ll > best_ll) {
      best = k;
      best_ll = ll;
      have = true;
    }
  }
  return best;
}

SelectionReport simple_tournament(const CandidateClass& cands, const Dataset& data, double N) {
  check_inputs(cands, data);
  if (!(N >= 1)) throw ValidationError("tournament needs N >= 1");
  SelectionReport r;
  r.pairwise = pairwise_from(logprob_matrix(cands, data), N);
  const std::size_t K = cands.size();
  r.scores.assign(K, 0.0);
  for (std::size_t b = 0; b < K; ++b) {
    double worst = r.pairwise[0][b];
    for (std::size_t a = 1; a < K; ++a) worst = std::max(worst, r.pairwise[a][b]);
    r.scores[b] = worst;
  }
  r.selected = argmin_lowest(r.scores);
  return r;
}

SelectionReport offset_tournament(const CandidateClass& cands, const Dataset& data, double N, double gamma,
                                  const OffsetMode& mode) {
  check_inputs(cands, data);
  if (!(N >= 1)) throw ValidationError("tournament needs N >= 1");
  if (!(gamma >= 0)) throw ValidationError("gamma must be >= 0");
  SelectionReport r;
  r.precondition_warning = N < 8 * gamma * gamma;
  r.pairwise = pairwise_from(logprob_matrix(cands, data), N);
  const std::size_t K = cands.size();

  // Distinct prompts with multiplicities, in first-seen order.
  std::vector<Prompt> prompts;
  std::vector<double> counts;
  std::map<std::pair<std::int64_t, std::vector<int>>, std::size_t> idx;
  for (const auto& t : data.examples) {
    auto key = std::make_pair(t.x.id, t.x.tokens);
    auto it = idx.find(key);
    if (it == idx.end()) {
      idx.emplace(key, prompts.size());
      prompts.push_back(t.x);
      counts.push_back(1.0);
    } else {
      counts[it->second] += 1.0;
    }
  }
  const double V = cands[0]->vocab_size(), H = cands[0]->horizon();
  bool exact = mode.kind == OffsetMode::Exact;
  if (mode.kind == OffsetMode::Auto) exact = H * std::log(V) <= std::log(1e4) + 1e-9;

  r.offset.assign(K, std::vector<double>(K, 0.0));
  const SeedTree seeds(mode.seed);
  for (std::size_t b = 0; b < K; ++b)
    for (std::size_t a = 0; a < K; ++a) {
      if (a == b) continue;
      std::vector<double> parts(prompts.size());
      for (std::size_t p = 0; p < prompts.size(); ++p) {
        const std::vector<Prompt> one{prompts[p]};
        const double v = exact ? onpolicy_cov_exact(*cands[b], *cands[a], *cands[b], one, N)
                               : onpolicy_cov_mc(*cands[b], *cands[a], *cands[b], one, N, mode.m,
                                                 seeds.derive("pair", a * K + b).derive("prompt", p));
        parts[p] = counts[p] * v;
      }
      r.offset[a][b] = pairwise_sum(parts) / static_cast<double>(data.size());
    }
  r.scores.assign(K, 0.0);
  for (std::size_t b = 0; b < K; ++b) {
    double worst = kNegInf;
    for (std::size_t a = 0; a < K; ++a) worst = std::max(worst, r.pairwise[a][b] - 2 * gamma * r.offset[a][b]);
    r.scores[b] = worst;
  }
  r.selected = argmin_lowest(r.scores);
  return r;
}

SelectionReport offset_tournament_power(const CandidateClass& cands, const Dataset& data, double N, double a,
                                        const OffsetMode& mode) {
  return offset_tournament(cands, data, N, std::pow(N, a), mode);
}

}  // namespace covkit
