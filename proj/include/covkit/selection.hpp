#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "covkit/core.hpp"

namespace covkit {

using CandidateClass = std::vector<std::shared_ptr<const Policy>>;

struct SelectionReport {
  std::size_t selected = 0;
  /// pairwise[i][j] = empirical coverage of candidate i against candidate j.
  std::vector<std::vector<double>> pairwise;
  /// offset[i][j] = on-policy term for (pi' = i, pi = j); empty for the simple tournament.
  std::vector<std::vector<double>> offset;
  std::vector<double> scores;
  bool precondition_warning = false;

  json to_json() const;
};

std::size_t select_ce(const CandidateClass& cands, const Dataset& data);
SelectionReport simple_tournament(const CandidateClass& cands, const Dataset& data, double N);

struct OffsetMode {
  enum Kind { Auto, Exact, MC } kind = Auto;
  std::size_t m = 1000;
  std::uint64_t seed = 0;
};

/// argmin_pi max_{pi'} { Cov_N(pi'||pi) − 2 gamma Cov^pi_N(pi'||pi) }.
SelectionReport offset_tournament(const CandidateClass& cands, const Dataset& data, double N, double gamma,
                                  const OffsetMode& mode = {});
/// Convenience parameterization gamma = N^a.
SelectionReport offset_tournament_power(const CandidateClass& cands, const Dataset& data, double N, double a,
                                        const OffsetMode& mode = {});

}  // namespace covkit
