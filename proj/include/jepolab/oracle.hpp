#pragma once

#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "jepolab/estimators.hpp"
#include "jepolab/gradient.hpp"
#include "jepolab/policy.hpp"

namespace jepolab {
namespace oracle {

// Operations that promise exactness throw instead of silently sampling when
// their enumeration would exceed the cap.
struct EnumerationBudget {
  double max_sequences = 200000;
};

struct BudgetExceeded : std::runtime_error {
  explicit BudgetExceeded(const std::string& what) : std::runtime_error(what) {}
};

// Exact tuple enumeration is additionally capped at n <= 3 over spaces of at
// most this many sequences; the tuple space grows as |space|^n.
inline constexpr int kMaxExactTupleN = 3;
inline constexpr std::size_t kMaxExactTupleSpace = 200;

struct EnumeratedCot {
  std::vector<Token> tokens;
  double logp = 0.0;
  ContextCode end_window = 0;
  bool format_valid = false;
};

std::vector<EnumeratedCot> enumerate_cots(const PolicyParams& params, int prompt,
                                          const EnumerationBudget& budget = {});

// Full (chain, answer) pairs as Generations with cached log-probs.
std::vector<Generation> enumerate_generations(const PolicyParams& params, int prompt,
                                              const EnumerationBudget& budget = {});

// log sum_c pi(c|x) pi(a*|x,c), stabilized.
double marginal_loglik(const PolicyParams& params, int prompt, std::span<const Token> a_star,
                       const EnumerationBudget& budget = {});

// sum_c pi(c|x) log pi(a*|x,c); -infinity (the IEEE value, never a sentinel)
// when some chain in the support gives the target zero mass.
double jensen_bound_exact(const PolicyParams& params, int prompt, std::span<const Token> a_star,
                          const EnumerationBudget& budget = {});

enum class MultiSampleMode { exact, monte_carlo };

struct BoundEstimate {
  double value = 0.0;
  double std_error = 0.0;  // 0 in exact mode
  bool exact = true;
};

// n-sample bound E log((1/n) sum_i pi(a*|x,c_i)); exact mode enumerates all
// n-tuples with product weights, monte_carlo averages over `trials` draws.
BoundEstimate multi_sample_bound(const PolicyParams& params, int prompt,
                                 std::span<const Token> a_star, int n, MultiSampleMode mode,
                                 int trials = 10000, std::uint64_t seed = 0,
                                 const EnumerationBudget& budget = {});

struct PosteriorTable {
  std::vector<std::vector<Token>> cots;
  std::vector<double> prob;       // normalized; aligned with cots
  std::vector<double> prior_prob; // pi(c|x), same order

  double prob_of(std::span<const Token> cot) const;
};

PosteriorTable posterior_exact(const PolicyParams& params, int prompt,
                               std::span<const Token> a_star,
                               const EnumerationBudget& budget = {});

// KL(prior over chains || posterior), computed from the two tables.
double kl_prior_posterior(const PolicyParams& params, int prompt, std::span<const Token> a_star,
                          const EnumerationBudget& budget = {});

using BatchEstimator = std::function<GradientVector(const SampleBatch&)>;

enum class TupleScope {
  cot_only,         // tuples of chains; answers in the batch are placeholders
  full_generation,  // tuples of (chain, answer) pairs
};

// Exact E[estimator(batch)] over all n-tuples of generations with product
// weights. Deterministic.
GradientVector expected_gradient(const BatchEstimator& estimator, const PolicyParams& params,
                                 int prompt, std::span<const Token> a_star, int n,
                                 TupleScope scope, const EnumerationBudget& budget = {});

// Exact E over answer tuples a_i ~ pi(.|x,c_i) for fixed chains.
GradientVector expected_gradient_answers_given_cots(
    const BatchEstimator& estimator, const PolicyParams& params, int prompt,
    std::span<const Token> a_star, const std::vector<std::vector<Token>>& cots,
    const EnumerationBudget& budget = {});

struct VarianceReport {
  double trace = 0.0;  // sum of per-coordinate variances
  std::vector<double> per_coordinate;
  int trials = 0;
  double ci_lo = 0.0;  // bootstrap 99% interval for the trace
  double ci_hi = 0.0;
};

VarianceReport estimator_variance(const BatchEstimator& estimator, const PolicyParams& params,
                                  int prompt, std::span<const Token> a_star, int n, int trials,
                                  std::uint64_t seed, int bootstrap_resamples = 1000);

struct VarianceComparison {
  VarianceReport first;
  VarianceReport second;
  double delta_trace = 0.0;  // first - second on the shared batches
  double delta_q01 = 0.0;    // 1% bootstrap quantile of the delta
};

// Paired comparison on shared sampled batches; delta_q01 > 0 supports
// "second has lower variance than first" at 99% confidence.
VarianceComparison compare_estimator_variance(const BatchEstimator& first,
                                              const BatchEstimator& second,
                                              const PolicyParams& params, int prompt,
                                              std::span<const Token> a_star, int n, int trials,
                                              std::uint64_t seed, int bootstrap_resamples = 1000);

// ELBO value sum_c q(c) [log pi(a*|x,c) - log q(c) + log pi(c|x)] for an
// explicit inference distribution over the enumerated chain space.
double elbo_value_exact(const PolicyParams& theta, int prompt, std::span<const Token> a_star,
                        const std::vector<std::vector<Token>>& q_support,
                        std::span<const double> q_prob, const EnumerationBudget& budget = {});

// Exact grad KL(pi_theta || pi_ref) by full-space enumeration.
GradientVector exact_kl_gradient(const PolicyParams& params, const ReferencePolicy& ref,
                                 int prompt, const EnumerationBudget& budget = {});

// Central finite differences of a scalar function of the parameters.
std::vector<double> finite_difference_gradient(
    const std::function<double(const PolicyParams&)>& f, const PolicyParams& at,
    double step = 1e-5);

// Exact P(match(a, a*)) under the policy, enumerating chains and answers.
double expected_match_rate(const PolicyParams& params, int prompt,
                           const std::function<bool(std::span<const Token>)>& accept,
                           const EnumerationBudget& budget = {});

}  // namespace oracle
}  // namespace jepolab
