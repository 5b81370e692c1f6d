#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "covkit/core.hpp"
#include "covkit/models.hpp"

namespace covkit {

/// Log-ratio comparisons accept values this close below log N as ties.
inline constexpr double kTieTol = 1e-10;
inline bool ratio_event(double log_ratio, double logN) { return log_ratio >= logN - kTieTol; }

/// Default enumeration budget: number of support paths visited per prompt.
inline constexpr std::size_t kEnumBudget = 1'000'000;

struct EnumerationBudgetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// One enumerated response (or one multinomial type class of responses).
struct PathInfo {
  double log_mass;          ///< log reference mass of this path, or of the whole type class
  double lp_ref;            ///< per-sequence log-prob under the reference
  const double* lp_others;  ///< sequence log-probs under the other policies
  double step_kl;           ///< sum_h KL(ref_h || others[0]_h)
  double step_hel;          ///< sum_h H^2(ref_h, others[0]_h)
  const std::vector<int>* y;  ///< null for type classes
};

/// Visits every response with positive reference probability at prompt x.
/// Uses multinomial type classes when all policies are i.i.d. across positions.
void for_each_path(const Prompt& x, const Policy& ref, std::span<const Policy* const> others,
                   const std::function<void(const PathInfo&)>& f, std::size_t budget = kEnumBudget);

struct CoverageCurve {
  std::vector<double> Ns;
  std::vector<double> values;
  std::vector<double> half_widths;
  std::size_t n_samples = 0;

  std::string to_csv() const;
  json to_json() const;
};

std::vector<double> default_N_grid();

/// Law of log(pi_D/pi_hat) under mu x pi_D; atoms sorted by log-ratio.
struct RatioLaw {
  std::vector<std::pair<double, double>> atoms;  ///< (log ratio, mass); +inf allowed

  double pcov(double N) const;
  double kl() const;
  double log_wmax() const;
};

RatioLaw ratio_law_exact(const Policy& piD, const Policy& piHat, const PromptDist& mu);

CoverageCurve coverage_exact(const Policy& piD, const Policy& piHat, const PromptDist& mu, const std::vector<double>& Ns);

struct McOptions {
  double delta = 0.05;
  bool wilson = false;
};

CoverageCurve coverage_mc(const Policy& piD, const Policy& piHat, const PromptDist& mu, const std::vector<double>& Ns,
                          std::size_t n_samples, const SeedTree& seeds, const McOptions& opt = {});

double hoeffding_half_width(std::size_t n, double delta = 0.05);
double wilson_half_width(double phat, std::size_t n, double delta = 0.05);

double seq_kl_exact(const Policy& piD, const Policy& piHat, const PromptDist& mu);
double seq_ce_exact(const Policy& piD, const Policy& piHat, const PromptDist& mu);
double entropy_exact(const Policy& piD, const PromptDist& mu);
/// Chain-rule estimators with exact per-step divergences along pi_D samples.
Estimate seq_kl_mc(const Policy& piD, const Policy& piHat, const PromptDist& mu, std::size_t n, const SeedTree& seeds);
Estimate seq_ce_mc(const Policy& piD, const Policy& piHat, const PromptDist& mu, std::size_t n, const SeedTree& seeds);

double hellinger_sq_exact(const Policy& piD, const Policy& piHat, const PromptDist& mu);

double stopped_kl_exact(const Policy& piD, const Policy& piHat, const PromptDist& mu, double N);
Estimate stopped_kl_mc(const Policy& piD, const Policy& piHat, const PromptDist& mu, double N, std::size_t n,
                       const SeedTree& seeds);

/// P_{pi_D}(sum_h H^2_step >= t) for a threshold t.
double step_hellinger_tail_exact(const Policy& piD, const Policy& piHat, const PromptDist& mu, double t);

/// Per-step divergences between two log conditionals.
double kl_logdist(std::span<const double> lp, std::span<const double> lq);
double ce_logdist(std::span<const double> lp, std::span<const double> lq);
double hellinger_logdist(std::span<const double> lp, std::span<const double> lq);

double kl_to_cov_bound(double kl, double N);
/// The looser log(N/e) denominator form.
double kl_to_cov_bound_basic(double kl, double N);
double hellinger_to_cov_bound(double hel_sq, double N);
double stopped_kl_to_cov_bound(double stopped_kl, double N);
/// C(1 + log(log W_max / C)) with C = sup_N Pcov_N log N on the exact law.
double coverage_to_kl_bound(const RatioLaw& law);
/// Lower bound P(sum_h H^2_step >= log(N/delta)) − delta.
double pcov_lower_from_step_hellinger(const Policy& piD, const Policy& piHat, const PromptDist& mu, double N, double delta);

double empirical_pairwise_cov(const Policy& piPrime, const Policy& pi, const Dataset& data, double N);

double onpolicy_cov_exact(const Policy& piBar, const Policy& piPrime, const Policy& pi, const std::vector<Prompt>& prompts,
                          double N);
double onpolicy_cov_mc(const Policy& piBar, const Policy& piPrime, const Policy& pi, const std::vector<Prompt>& prompts,
                       double N, std::size_t m, const SeedTree& seeds);

struct MetricReport {
  std::optional<double> seq_kl, seq_ce, hellinger_sq, stopped_kl, stopped_kl_N, sigma_star_sq;
  std::optional<CoverageCurve> coverage;

  json to_json() const;
};

}  // namespace covkit
