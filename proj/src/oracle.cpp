#include "jepolab/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "jepolab/math.hpp"
#include "jepolab/rng.hpp"

namespace jepolab {
namespace oracle {

namespace {

void require_within(double count, const EnumerationBudget& budget, const char* what) {
  if (count > budget.max_sequences)
    throw BudgetExceeded(std::string(what) + ": enumeration of " + std::to_string(count) +
                         " sequences exceeds the budget of " +
                         std::to_string(budget.max_sequences));
}

void require_tuple_feasible(std::size_t space, int n, const EnumerationBudget& budget,
                            const char* what) {
  if (n > kMaxExactTupleN)
    throw BudgetExceeded(std::string(what) + ": exact tuple enumeration is limited to n <= " +
                         std::to_string(kMaxExactTupleN));
  if (space > kMaxExactTupleSpace)
    throw BudgetExceeded(std::string(what) + ": exact tuple enumeration is limited to spaces of " +
                         std::to_string(kMaxExactTupleSpace) + " sequences, got " +
                         std::to_string(space));
  require_within(std::pow(static_cast<double>(space), n), budget, what);
}

// Memoized log pi(a*|x, .) keyed by the window the chain leaves behind.
class AnswerLogp {
 public:
  AnswerLogp(const PolicyParams& params, int prompt, std::span<const Token> a_star)
      : params_(params), prompt_(prompt), a_star_(a_star.begin(), a_star.end()) {}

  double at(const EnumeratedCot& cot) {
    auto it = cache_.find(cot.end_window);
    if (it != cache_.end()) return it->second;
    double lp = logprob_answer(params_, prompt_, cot.tokens, a_star_);
    cache_.emplace(cot.end_window, lp);
    return lp;
  }

 private:
  const PolicyParams& params_;
  int prompt_;
  std::vector<Token> a_star_;
  std::map<ContextCode, double> cache_;
};

}  // namespace

std::vector<EnumeratedCot> enumerate_cots(const PolicyParams& params, int prompt,
                                          const EnumerationBudget& budget) {
  validate_prompt(params.shape(), prompt);
  require_within(params.shape().cot_space_size(), budget, "enumerate_cots");
  std::vector<EnumeratedCot> out;
  for (auto& tokens : enumerate_cot_sequences(params.shape())) {
    EnumeratedCot e;
    e.logp = logprob_cot(params, prompt, tokens);
    e.end_window = context_after_cot(params, prompt, tokens);
    e.format_valid = cot_format_valid(params.shape(), tokens);
    e.tokens = std::move(tokens);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<Generation> enumerate_generations(const PolicyParams& params, int prompt,
                                              const EnumerationBudget& budget) {
  const PolicyShape& shape = params.shape();
  require_within(shape.cot_space_size() * shape.answer_space_size(), budget,
                 "enumerate_generations");
  std::vector<EnumeratedCot> cots = enumerate_cots(params, prompt, budget);
  std::vector<std::vector<Token>> answers = enumerate_answer_sequences(shape);
  // answer log-probs depend on the chain only through its end window
  std::map<ContextCode, std::vector<double>> answer_logp;
  std::vector<Generation> out;
  out.reserve(cots.size() * answers.size());
  for (const EnumeratedCot& c : cots) {
    auto [it, inserted] = answer_logp.try_emplace(c.end_window);
    if (inserted) {
      it->second.reserve(answers.size());
      for (const auto& a : answers)
        it->second.push_back(logprob_answer(params, prompt, c.tokens, a));
    }
    for (std::size_t j = 0; j < answers.size(); ++j) {
      Generation g;
      g.prompt = prompt;
      g.cot = c.tokens;
      g.answer = answers[j];
      g.format_valid = c.format_valid;
      g.logp_cot = c.logp;
      g.logp_answer = it->second[j];
      out.push_back(std::move(g));
    }
  }
  return out;
}

double marginal_loglik(const PolicyParams& params, int prompt, std::span<const Token> a_star,
                       const EnumerationBudget& budget) {
  std::vector<EnumeratedCot> cots = enumerate_cots(params, prompt, budget);
  AnswerLogp answer(params, prompt, a_star);
  std::vector<double> terms;
  terms.reserve(cots.size());
  for (const EnumeratedCot& c : cots) terms.push_back(c.logp + answer.at(c));
  return log_sum_exp(terms);
}

double jensen_bound_exact(const PolicyParams& params, int prompt, std::span<const Token> a_star,
                          const EnumerationBudget& budget) {
  std::vector<EnumeratedCot> cots = enumerate_cots(params, prompt, budget);
  AnswerLogp answer(params, prompt, a_star);
  double bound = 0.0;
  for (const EnumeratedCot& c : cots) {
    double lp = answer.at(c);
    if (lp == kNegInf) return kNegInf;
    bound += std::exp(c.logp) * lp;
  }
  return bound;
}

BoundEstimate multi_sample_bound(const PolicyParams& params, int prompt,
                                 std::span<const Token> a_star, int n, MultiSampleMode mode,
                                 int trials, std::uint64_t seed, const EnumerationBudget& budget) {
  if (n < 1) throw std::invalid_argument("multi_sample_bound: n must be >= 1");
  if (mode == MultiSampleMode::exact) {
    std::vector<EnumeratedCot> cots = enumerate_cots(params, prompt, budget);
    require_tuple_feasible(cots.size(), n, budget, "multi_sample_bound");
    AnswerLogp answer(params, prompt, a_star);
    std::vector<double> logp_ans(cots.size());
    for (std::size_t i = 0; i < cots.size(); ++i) logp_ans[i] = answer.at(cots[i]);

    double value = 0.0;
    std::vector<std::size_t> idx(static_cast<std::size_t>(n), 0);
    std::vector<double> tuple_lp(static_cast<std::size_t>(n));
    while (true) {
      double weight_lp = 0.0;
      for (int i = 0; i < n; ++i) {
        weight_lp += cots[idx[static_cast<std::size_t>(i)]].logp;
        tuple_lp[static_cast<std::size_t>(i)] = logp_ans[idx[static_cast<std::size_t>(i)]];
      }
      value += std::exp(weight_lp) * log_mean_exp(tuple_lp);
      int d = n - 1;
      while (d >= 0 && ++idx[static_cast<std::size_t>(d)] == cots.size()) {
        idx[static_cast<std::size_t>(d)] = 0;
        --d;
      }
      if (d < 0) break;
    }
    return {value, 0.0, true};
  }

  Rng rng = Rng::derive(seed, 0x6d7362, static_cast<std::uint64_t>(n));
  std::vector<double> draws(static_cast<std::size_t>(trials));
  std::vector<double> lps(static_cast<std::size_t>(n));
  for (double& draw : draws) {
    for (int i = 0; i < n; ++i) {
      Generation g = sample_generation(params, prompt, rng);
      lps[static_cast<std::size_t>(i)] = logprob_answer(params, prompt, g.cot, a_star);
    }
    draw = log_mean_exp(lps);
  }
  double value = mean(draws);
  double se = sample_std(draws) / std::sqrt(static_cast<double>(draws.size()));
  return {value, se, false};
}

double PosteriorTable::prob_of(std::span<const Token> cot) const {
  for (std::size_t i = 0; i < cots.size(); ++i)
    if (cots[i].size() == cot.size() && std::equal(cot.begin(), cot.end(), cots[i].begin()))
      return prob[i];
  throw std::invalid_argument("PosteriorTable: chain not in support");
}

PosteriorTable posterior_exact(const PolicyParams& params, int prompt,
                               std::span<const Token> a_star, const EnumerationBudget& budget) {
  std::vector<EnumeratedCot> cots = enumerate_cots(params, prompt, budget);
  AnswerLogp answer(params, prompt, a_star);
  PosteriorTable table;
  std::vector<double> joint_lp;
  joint_lp.reserve(cots.size());
  for (const EnumeratedCot& c : cots) {
    table.cots.push_back(c.tokens);
    table.prior_prob.push_back(std::exp(c.logp));
    joint_lp.push_back(c.logp + answer.at(c));
  }
  double lse = log_sum_exp(joint_lp);
  if (lse == kNegInf) throw std::invalid_argument("posterior_exact: zero marginal likelihood");
  for (double lp : joint_lp) table.prob.push_back(std::exp(lp - lse));
  return table;
}

double kl_prior_posterior(const PolicyParams& params, int prompt, std::span<const Token> a_star,
                          const EnumerationBudget& budget) {
  PosteriorTable table = posterior_exact(params, prompt, a_star, budget);
  double kl = 0.0;
  for (std::size_t i = 0; i < table.prob.size(); ++i)
    kl += table.prior_prob[i] * (std::log(table.prior_prob[i]) - std::log(table.prob[i]));
  return kl;
}

namespace {

// Iterates every n-tuple over `items`, weighting the estimator output by the
// product of the item probabilities. Generic over how a batch is built.
GradientVector expectation_over_tuples(
    const BatchEstimator& estimator, std::size_t dim, std::size_t space, int n,
    const std::function<double(std::size_t)>& item_logp,
    const std::function<SampleBatch(const std::vector<std::size_t>&)>& build_batch) {
  GradientVector expected(dim);
  std::vector<std::size_t> idx(static_cast<std::size_t>(n), 0);
  while (true) {
    double weight_lp = 0.0;
    for (std::size_t i : idx) weight_lp += item_logp(i);
    GradientVector g = estimator(build_batch(idx));
    vec_axpy(std::exp(weight_lp), g.total, expected.total);
    int d = n - 1;
    while (d >= 0 && ++idx[static_cast<std::size_t>(d)] == space) {
      idx[static_cast<std::size_t>(d)] = 0;
      --d;
    }
    if (d < 0) break;
  }
  return expected;
}

}  // namespace

GradientVector expected_gradient(const BatchEstimator& estimator, const PolicyParams& params,
                                 int prompt, std::span<const Token> a_star, int n,
                                 TupleScope scope, const EnumerationBudget& budget) {
  if (n < 1) throw std::invalid_argument("expected_gradient: n must be >= 1");
  std::vector<Token> target(a_star.begin(), a_star.end());

  if (scope == TupleScope::cot_only) {
    std::vector<EnumeratedCot> cots = enumerate_cots(params, prompt, budget);
    require_tuple_feasible(cots.size(), n, budget, "expected_gradient");
    AnswerLogp answer(params, prompt, a_star);
    std::vector<double> logp_ans(cots.size());
    for (std::size_t i = 0; i < cots.size(); ++i) logp_ans[i] = answer.at(cots[i]);
    // placeholder answers; estimators under this scope only read the chains
    std::vector<Token> stub_answer{params.shape().vocab.eoa};
    auto build = [&](const std::vector<std::size_t>& idx) {
      SampleBatch batch;
      batch.prompt = prompt;
      batch.a_star = target;
      for (std::size_t i : idx) {
        Generation g;
        g.prompt = prompt;
        g.cot = cots[i].tokens;
        g.answer = stub_answer;
        g.format_valid = cots[i].format_valid;
        g.logp_cot = cots[i].logp;
        g.logp_answer = logprob_answer(params, prompt, g.cot, g.answer);
        batch.generations.push_back(std::move(g));
        batch.logp_astar.push_back(logp_ans[i]);
      }
      return batch;
    };
    return expectation_over_tuples(
        estimator, params.dim(), cots.size(), n,
        [&](std::size_t i) { return cots[i].logp; }, build);
  }

  std::vector<Generation> gens = enumerate_generations(params, prompt, budget);
  require_tuple_feasible(gens.size(), n, budget, "expected_gradient");
  std::vector<double> astar_logp(gens.size());
  for (std::size_t i = 0; i < gens.size(); ++i)
    astar_logp[i] = logprob_answer(params, prompt, gens[i].cot, target);
  auto build = [&](const std::vector<std::size_t>& idx) {
    SampleBatch batch;
    batch.prompt = prompt;
    batch.a_star = target;
    for (std::size_t i : idx) {
      batch.generations.push_back(gens[i]);
      batch.logp_astar.push_back(astar_logp[i]);
    }
    return batch;
  };
  return expectation_over_tuples(
      estimator, params.dim(), gens.size(), n,
      [&](std::size_t i) { return gens[i].logp_cot + gens[i].logp_answer; }, build);
}

GradientVector expected_gradient_answers_given_cots(
    const BatchEstimator& estimator, const PolicyParams& params, int prompt,
    std::span<const Token> a_star, const std::vector<std::vector<Token>>& cots,
    const EnumerationBudget& budget) {
  int n = static_cast<int>(cots.size());
  if (n < 1) throw std::invalid_argument("expected_gradient_answers_given_cots: empty chains");
  std::vector<std::vector<Token>> answers = enumerate_answer_sequences(params.shape());
  require_tuple_feasible(answers.size(), n, budget, "expected_gradient_answers_given_cots");
  std::vector<Token> target(a_star.begin(), a_star.end());

  std::vector<double> cot_logp(cots.size());
  std::vector<double> astar_logp(cots.size());
  std::vector<std::vector<double>> answer_logp(cots.size());
  for (std::size_t i = 0; i < cots.size(); ++i) {
    cot_logp[i] = logprob_cot(params, prompt, cots[i]);
    astar_logp[i] = logprob_answer(params, prompt, cots[i], target);
    answer_logp[i].reserve(answers.size());
    for (const auto& a : answers)
      answer_logp[i].push_back(logprob_answer(params, prompt, cots[i], a));
  }

  GradientVector expected(params.dim());
  std::vector<std::size_t> idx(static_cast<std::size_t>(n), 0);
  while (true) {
    double weight_lp = 0.0;
    SampleBatch batch;
    batch.prompt = prompt;
    batch.a_star = target;
    for (int i = 0; i < n; ++i) {
      std::size_t a = idx[static_cast<std::size_t>(i)];
      weight_lp += answer_logp[static_cast<std::size_t>(i)][a];
      Generation g;
      g.prompt = prompt;
      g.cot = cots[static_cast<std::size_t>(i)];
      g.answer = answers[a];
      g.format_valid = cot_format_valid(params.shape(), g.cot);
      g.logp_cot = cot_logp[static_cast<std::size_t>(i)];
      g.logp_answer = answer_logp[static_cast<std::size_t>(i)][a];
      batch.generations.push_back(std::move(g));
      batch.logp_astar.push_back(astar_logp[static_cast<std::size_t>(i)]);
    }
    GradientVector g = estimator(batch);
    vec_axpy(std::exp(weight_lp), g.total, expected.total);
    int d = n - 1;
    while (d >= 0 && ++idx[static_cast<std::size_t>(d)] == answers.size()) {
      idx[static_cast<std::size_t>(d)] = 0;
      --d;
    }
    if (d < 0) break;
  }
  return expected;
}

namespace {

SampleBatch sample_batch_from_policy(const PolicyParams& params, int prompt,
                                     std::span<const Token> a_star, int n, Rng& rng) {
  std::vector<Generation> gens;
  gens.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) gens.push_back(sample_generation(params, prompt, rng));
  return make_sample_batch(params, prompt, std::vector<Token>(a_star.begin(), a_star.end()),
                           std::move(gens));
}

// Per-coordinate sample variances (divisor T-1) and their sum.
VarianceReport variance_from_samples(const std::vector<std::vector<double>>& samples) {
  VarianceReport report;
  report.trials = static_cast<int>(samples.size());
  std::size_t dim = samples.front().size();
  std::vector<double> mean_vec(dim, 0.0), sq(dim, 0.0);
  for (const auto& g : samples)
    for (std::size_t j = 0; j < dim; ++j) mean_vec[j] += g[j];
  for (double& m : mean_vec) m /= static_cast<double>(samples.size());
  for (const auto& g : samples)
    for (std::size_t j = 0; j < dim; ++j) sq[j] += (g[j] - mean_vec[j]) * (g[j] - mean_vec[j]);
  report.per_coordinate.resize(dim);
  for (std::size_t j = 0; j < dim; ++j) {
    report.per_coordinate[j] = sq[j] / static_cast<double>(samples.size() - 1);
    report.trace += report.per_coordinate[j];
  }
  return report;
}

double trace_of_resample(const std::vector<std::vector<double>>& samples,
                         const std::vector<std::size_t>& picks) {
  std::size_t dim = samples.front().size();
  std::vector<double> s1(dim, 0.0), s2(dim, 0.0);
  for (std::size_t i : picks)
    for (std::size_t j = 0; j < dim; ++j) {
      s1[j] += samples[i][j];
      s2[j] += samples[i][j] * samples[i][j];
    }
  double t = static_cast<double>(picks.size());
  double trace = 0.0;
  for (std::size_t j = 0; j < dim; ++j) {
    double m = s1[j] / t;
    trace += (s2[j] - t * m * m) / (t - 1.0);
  }
  return trace;
}

}  // namespace

VarianceReport estimator_variance(const BatchEstimator& estimator, const PolicyParams& params,
                                  int prompt, std::span<const Token> a_star, int n, int trials,
                                  std::uint64_t seed, int bootstrap_resamples) {
  if (trials < 1000) throw std::invalid_argument("estimator_variance: needs at least 1000 trials");
  std::vector<std::vector<double>> samples;
  samples.reserve(static_cast<std::size_t>(trials));
  for (int t = 0; t < trials; ++t) {
    Rng rng = Rng::derive(seed, 0x766172, static_cast<std::uint64_t>(t));
    samples.push_back(estimator(sample_batch_from_policy(params, prompt, a_star, n, rng)).total);
  }
  VarianceReport report = variance_from_samples(samples);

  Rng boot = Rng::derive(seed, 0x626f6f74);
  std::vector<double> traces(static_cast<std::size_t>(bootstrap_resamples));
  std::vector<std::size_t> picks(samples.size());
  for (double& tr : traces) {
    for (std::size_t& p : picks) p = boot.below(samples.size());
    tr = trace_of_resample(samples, picks);
  }
  std::sort(traces.begin(), traces.end());
  auto quantile = [&](double q) {
    std::size_t i = static_cast<std::size_t>(q * (traces.size() - 1));
    return traces[i];
  };
  report.ci_lo = quantile(0.005);
  report.ci_hi = quantile(0.995);
  return report;
}

VarianceComparison compare_estimator_variance(const BatchEstimator& first,
                                              const BatchEstimator& second,
                                              const PolicyParams& params, int prompt,
                                              std::span<const Token> a_star, int n, int trials,
                                              std::uint64_t seed, int bootstrap_resamples) {
  if (trials < 1000)
    throw std::invalid_argument("compare_estimator_variance: needs at least 1000 trials");
  std::vector<std::vector<double>> a, b;
  a.reserve(static_cast<std::size_t>(trials));
  b.reserve(static_cast<std::size_t>(trials));
  for (int t = 0; t < trials; ++t) {
    Rng rng = Rng::derive(seed, 0x766172, static_cast<std::uint64_t>(t));
    SampleBatch batch = sample_batch_from_policy(params, prompt, a_star, n, rng);
    a.push_back(first(batch).total);
    b.push_back(second(batch).total);
  }
  VarianceComparison cmp;
  cmp.first = variance_from_samples(a);
  cmp.second = variance_from_samples(b);
  cmp.delta_trace = cmp.first.trace - cmp.second.trace;

  Rng boot = Rng::derive(seed, 0x626f6f74);
  std::vector<double> deltas(static_cast<std::size_t>(bootstrap_resamples));
  std::vector<std::size_t> picks(a.size());
  for (double& d : deltas) {
    for (std::size_t& p : picks) p = boot.below(a.size());
    d = trace_of_resample(a, picks) - trace_of_resample(b, picks);
  }
  std::sort(deltas.begin(), deltas.end());
  cmp.delta_q01 = deltas[static_cast<std::size_t>(0.01 * (deltas.size() - 1))];
  return cmp;
}

double elbo_value_exact(const PolicyParams& theta, int prompt, std::span<const Token> a_star,
                        const std::vector<std::vector<Token>>& q_support,
                        std::span<const double> q_prob, const EnumerationBudget& budget) {
  require_within(static_cast<double>(q_support.size()), budget, "elbo_value_exact");
  if (q_support.size() != q_prob.size())
    throw std::invalid_argument("elbo_value_exact: support/probability size mismatch");
  double value = 0.0;
  for (std::size_t i = 0; i < q_support.size(); ++i) {
    double q = q_prob[i];
    if (q == 0.0) continue;
    double lp_astar = logprob_answer(theta, prompt, q_support[i], a_star);
    double lp_prior = logprob_cot(theta, prompt, q_support[i]);
    value += q * (lp_astar - (std::log(q) - lp_prior));
  }
  return value;
}

GradientVector exact_kl_gradient(const PolicyParams& params, const ReferencePolicy& ref,
                                 int prompt, const EnumerationBudget& budget) {
  std::vector<Generation> gens = enumerate_generations(params, prompt, budget);
  GradientVector g(params.dim());
  for (const Generation& y : gens) {
    double lp = y.logp_cot + y.logp_answer;
    double lp_ref = logprob_cot(ref.params(), prompt, y.cot) +
                    logprob_answer(ref.params(), prompt, y.cot, y.answer);
    double weight = std::exp(lp) * (lp - lp_ref);
    if (weight == 0.0) continue;
    accumulate_grad_logprob_cot(params, prompt, y.cot, weight, g.total);
    accumulate_grad_logprob_answer(params, prompt, y.cot, y.answer, weight, g.total);
  }
  return g;
}

std::vector<double> finite_difference_gradient(
    const std::function<double(const PolicyParams&)>& f, const PolicyParams& at, double step) {
  std::vector<double> grad(at.dim());
  PolicyParams work = at;
  for (std::size_t i = 0; i < at.dim(); ++i) {
    double original = work.values()[i];
    work.values()[i] = original + step;
    double hi = f(work);
    work.values()[i] = original - step;
    double lo = f(work);
    work.values()[i] = original;
    grad[i] = (hi - lo) / (2.0 * step);
  }
  return grad;
}

double expected_match_rate(const PolicyParams& params, int prompt,
                           const std::function<bool(std::span<const Token>)>& accept,
                           const EnumerationBudget& budget) {
  std::vector<EnumeratedCot> cots = enumerate_cots(params, prompt, budget);
  std::vector<std::vector<Token>> answers = enumerate_answer_sequences(params.shape());
  require_within(params.shape().cot_space_size() * params.shape().answer_space_size(), budget,
                 "expected_match_rate");
  std::map<ContextCode, double> per_window;
  double rate = 0.0;
  for (const EnumeratedCot& c : cots) {
    auto it = per_window.find(c.end_window);
    if (it == per_window.end()) {
      double mass = 0.0;
      for (const auto& a : answers)
        if (accept(a)) mass += std::exp(logprob_answer(params, prompt, c.tokens, a));
      it = per_window.emplace(c.end_window, mass).first;
    }
    rate += std::exp(c.logp) * it->second;
  }
  return rate;
}

}  // namespace oracle
}  // namespace jepolab
