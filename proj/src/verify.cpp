#include "jepolab/verify.hpp"

#include <chrono>
#include <cmath>
#include <functional>

#include "jepolab/estimators.hpp"
#include "jepolab/math.hpp"
#include "jepolab/oracle.hpp"
#include "jepolab/policy.hpp"
#include "jepolab/rng.hpp"
#include "jepolab/trainer.hpp"

namespace jepolab {

using oracle::BatchEstimator;
using oracle::EnumerationBudget;

namespace {

PolicyShape small_shape() {
  return PolicyShape{Vocab::make(2), 2, 2, 2, 1};
}

std::vector<Token> random_target(const PolicyShape& shape, Rng& rng) {
  int body = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(shape.max_ans_len - 1)));
  std::vector<Token> a;
  for (int i = 0; i < body; ++i)
    a.push_back(static_cast<Token>(rng.below(static_cast<std::uint64_t>(shape.vocab.size))));
  a.push_back(shape.vocab.eoa);
  return a;
}

struct Instance {
  PolicyParams params;
  std::vector<Token> a_star;
};

Instance make_instance(std::uint64_t seed) {
  PolicyShape shape = small_shape();
  Rng rng = Rng::derive(seed, 0x696e7374);
  return {PolicyParams::random(shape, seed * 977 + 13, 1.0), random_target(shape, rng)};
}

class Suite {
 public:
  Suite(VerifyScope scope, FaultInjection fault, std::uint64_t seed)
      : scope_(scope), fault_(fault), seed_(seed) {}

  VerifyReport run();

 private:
  int reps(int fast, int full) const { return scope_ == VerifyScope::fast ? fast : full; }

  void record(const std::string& name, bool pass, double measured, double tolerance,
              const std::string& detail = "") {
    report_.checks.push_back({name, pass, false, measured, tolerance, detail});
  }
  void record_worst(const std::string& name, double worst, double tolerance,
                    const std::string& detail = "") {
    record(name, worst <= tolerance, worst, tolerance, detail);
  }

  BatchEstimator jepo_single_est(const PolicyParams& params, bool loo) const {
    FaultInjection fault = fault_;
    return [&params, loo, fault](const SampleBatch& b) {
      GradientVector g = jepo_grad_single(b, params, loo);
      if (fault == FaultInjection::jepo_single_drop_supervised) {
        const std::vector<double>* sup = g.part("supervised");
        for (std::size_t i = 0; i < g.total.size(); ++i) g.total[i] -= (*sup)[i];
      }
      return g;
    };
  }
  BatchEstimator var_reduced_est(const PolicyParams& params, bool loo) const {
    FaultInjection fault = fault_;
    return [&params, loo, fault](const SampleBatch& b) {
      GradientVector g = var_reduced_pg(b, params, loo);
      if (fault == FaultInjection::var_reduced_baseline_bias) {
        // constant extra coefficient on the chain scores
        std::vector<double> ones(b.generations.size(), 1.0);
        add_cot_score_gradients(params, b, ones, 0.05 / b.n(), g.total);
      }
      return g;
    };
  }

  void check_normalization();
  void check_score_zero_mean();
  void check_logprob_finite_difference();
  void check_bound_sandwich_exact();
  void check_bound_sandwich_monte_carlo();
  void check_gap_identity();
  void check_grad_jensen();
  void check_grad_multisample();
  void check_control_variate_unbiasedness();
  void check_tied_inference();
  void check_conditional_expectation();
  void check_variance_reduction();
  void check_control_variate_variance();
  void check_sft_reduction();
  void check_kl_regularizer_gradient();
  void check_kl_nonneg();
  void check_advantage_normalization();

  VerifyScope scope_;
  FaultInjection fault_;
  std::uint64_t seed_;
  VerifyReport report_;
};

void Suite::check_normalization() {
  double worst = 0.0;
  for (int s = 0; s < reps(3, 10); ++s) {
    Instance inst = make_instance(seed_ + static_cast<std::uint64_t>(s));
    auto cots = oracle::enumerate_cots(inst.params, 0);
    double total = 0.0;
    for (const auto& c : cots) total += std::exp(c.logp);
    worst = std::max(worst, std::abs(total - 1.0));
    double ans_total = 0.0;
    for (const auto& a : enumerate_answer_sequences(inst.params.shape()))
      ans_total += std::exp(logprob_answer(inst.params, 0, cots[0].tokens, a));
    worst = std::max(worst, std::abs(ans_total - 1.0));
  }
  record_worst("normalization", worst, 1e-10);
}

void Suite::check_score_zero_mean() {
  double worst = 0.0;
  for (int s = 0; s < reps(3, 10); ++s) {
    Instance inst = make_instance(seed_ + 100 + static_cast<std::uint64_t>(s));
    std::vector<double> expected(inst.params.dim(), 0.0);
    for (const auto& c : oracle::enumerate_cots(inst.params, 0))
      accumulate_grad_logprob_cot(inst.params, 0, c.tokens, std::exp(c.logp), expected);
    worst = std::max(worst, max_abs(expected));
  }
  record_worst("score-zero-mean", worst, 1e-10);
}

void Suite::check_logprob_finite_difference() {
  double worst = 0.0;
  for (int s = 0; s < reps(5, 20); ++s) {
    Instance inst = make_instance(seed_ + 200 + static_cast<std::uint64_t>(s));
    Rng rng = Rng::derive(seed_, 0x6664, static_cast<std::uint64_t>(s));
    Generation g = sample_generation(inst.params, 0, rng);
    GradientVector analytic = grad_logprob_cot(inst.params, 0, g.cot);
    std::vector<Token> cot = g.cot;
    std::vector<double> fd = oracle::finite_difference_gradient(
        [&](const PolicyParams& p) { return logprob_cot(p, 0, cot); }, inst.params, 1e-5);
    worst = std::max(worst, relative_l2_error(analytic.total, fd));

    GradientVector analytic_ans = grad_logprob_answer(inst.params, 0, g.cot, inst.a_star);
    std::vector<Token> target = inst.a_star;
    std::vector<double> fd_ans = oracle::finite_difference_gradient(
        [&](const PolicyParams& p) { return logprob_answer(p, 0, cot, target); }, inst.params,
        1e-5);
    worst = std::max(worst, relative_l2_error(analytic_ans.total, fd_ans));
  }
  record_worst("finite-difference-logprob", worst, 1e-4);
}

void Suite::check_bound_sandwich_exact() {
  double worst = -1e300;
  for (int s = 0; s < reps(10, 50); ++s) {
    Instance inst = make_instance(seed_ + 300 + static_cast<std::uint64_t>(s));
    double jensen = oracle::jensen_bound_exact(inst.params, 0, inst.a_star);
    double l2 = oracle::multi_sample_bound(inst.params, 0, inst.a_star, 2,
                                           oracle::MultiSampleMode::exact)
                    .value;
    double l3 = oracle::multi_sample_bound(inst.params, 0, inst.a_star, 3,
                                           oracle::MultiSampleMode::exact)
                    .value;
    double marginal = oracle::marginal_loglik(inst.params, 0, inst.a_star);
    worst = std::max({worst, jensen - l2, l2 - l3, l3 - marginal});
  }
  record_worst("bound-sandwich-exact", worst, 1e-10);
}

void Suite::check_bound_sandwich_monte_carlo() {
  int trials = reps(2000, 10000);
  double worst = -1e300;
  for (int s = 0; s < reps(3, 10); ++s) {
    Instance inst = make_instance(seed_ + 400 + static_cast<std::uint64_t>(s));
    double prev = 0.0, prev_se = 0.0;
    bool first = true;
    for (int n : {1, 2, 4, 8}) {
      auto est = oracle::multi_sample_bound(inst.params, 0, inst.a_star, n,
                                            oracle::MultiSampleMode::monte_carlo, trials,
                                            seed_ + static_cast<std::uint64_t>(n));
      if (!first) {
        double slack = 3.0 * std::sqrt(prev_se * prev_se + est.std_error * est.std_error);
        worst = std::max(worst, prev - est.value - slack);
      }
      prev = est.value;
      prev_se = est.std_error;
      first = false;
    }
  }
  record_worst("bound-sandwich-monte-carlo", worst, 0.0);
}

void Suite::check_gap_identity() {
  double worst = 0.0;
  for (int s = 0; s < reps(10, 50); ++s) {
    Instance inst = make_instance(seed_ + 300 + static_cast<std::uint64_t>(s));
    double marginal = oracle::marginal_loglik(inst.params, 0, inst.a_star);
    double jensen = oracle::jensen_bound_exact(inst.params, 0, inst.a_star);
    double kl = oracle::kl_prior_posterior(inst.params, 0, inst.a_star);
    worst = std::max(worst, std::abs((marginal - jensen) - kl));
  }
  record_worst("gap-identity", worst, 1e-10);
}

void Suite::check_grad_jensen() {
  double worst = 0.0;
  for (int s = 0; s < reps(5, 20); ++s) {
    Instance inst = make_instance(seed_ + 500 + static_cast<std::uint64_t>(s));
    std::vector<Token> target = inst.a_star;
    std::vector<double> fd = oracle::finite_difference_gradient(
        [&](const PolicyParams& p) { return oracle::jensen_bound_exact(p, 0, target); },
        inst.params, 1e-5);
    GradientVector plain = oracle::expected_gradient(jepo_single_est(inst.params, false),
                                                     inst.params, 0, target, 1,
                                                     oracle::TupleScope::cot_only);
    GradientVector loo = oracle::expected_gradient(jepo_single_est(inst.params, true),
                                                   inst.params, 0, target, 2,
                                                   oracle::TupleScope::cot_only);
    worst = std::max({worst, relative_l2_error(plain.total, fd), relative_l2_error(loo.total, fd)});
  }
  record_worst("grad-jensen-single", worst, 1e-4);
}

void Suite::check_grad_multisample() {
  double worst = 0.0;
  for (int s = 0; s < reps(5, 20); ++s) {
    Instance inst = make_instance(seed_ + 600 + static_cast<std::uint64_t>(s));
    std::vector<Token> target = inst.a_star;
    std::vector<double> fd = oracle::finite_difference_gradient(
        [&](const PolicyParams& p) {
          return oracle::multi_sample_bound(p, 0, target, 2, oracle::MultiSampleMode::exact)
              .value;
        },
        inst.params, 1e-5);
    const PolicyParams& params = inst.params;
    BatchEstimator multi = [&params](const SampleBatch& b) {
      return jepo_grad_multi(b, params, true, ReinforceScaling::summed);
    };
    GradientVector expected =
        oracle::expected_gradient(multi, params, 0, target, 2, oracle::TupleScope::cot_only);
    worst = std::max(worst, relative_l2_error(expected.total, fd));
  }
  record_worst("grad-multisample", worst, 1e-4);
}

void Suite::check_control_variate_unbiasedness() {
  double worst = 0.0;
  std::vector<int> ns = scope_ == VerifyScope::fast ? std::vector<int>{2} : std::vector<int>{2, 3};
  for (int s = 0; s < reps(3, 6); ++s) {
    Instance inst = make_instance(seed_ + 700 + static_cast<std::uint64_t>(s));
    const PolicyParams& params = inst.params;
    std::vector<Token> target = inst.a_star;
    MatchFunction exact = MatchFunction::exact();
    for (int n : ns) {
      auto diff_cot = [&](const BatchEstimator& on, const BatchEstimator& off) {
        GradientVector a =
            oracle::expected_gradient(on, params, 0, target, n, oracle::TupleScope::cot_only);
        GradientVector b =
            oracle::expected_gradient(off, params, 0, target, n, oracle::TupleScope::cot_only);
        return max_abs_diff(a.total, b.total);
      };
      worst = std::max(worst, diff_cot(jepo_single_est(params, true), jepo_single_est(params, false)));
      worst = std::max(worst, diff_cot(
                                  [&params](const SampleBatch& b) {
                                    return jepo_grad_multi(b, params, true);
                                  },
                                  [&params](const SampleBatch& b) {
                                    return jepo_grad_multi(b, params, false);
                                  }));
      if (n >= 2) {
        auto diff_full = [&](const BatchEstimator& on, const BatchEstimator& off) {
          GradientVector a = oracle::expected_gradient(on, params, 0, target, n,
                                                       oracle::TupleScope::full_generation);
          GradientVector b = oracle::expected_gradient(off, params, 0, target, n,
                                                       oracle::TupleScope::full_generation);
          return max_abs_diff(a.total, b.total);
        };
        worst = std::max(worst, diff_full(
                                    [&params, &exact](const SampleBatch& b) {
                                      return vanilla_pg_rloo(b, params, exact, true);
                                    },
                                    [&params, &exact](const SampleBatch& b) {
                                      return vanilla_pg_rloo(b, params, exact, false);
                                    }));
        worst = std::max(worst,
                         diff_full(var_reduced_est(params, true), var_reduced_est(params, false)));
      }
    }
  }
  record_worst("control-variate-unbiasedness", worst, 1e-10);
}

void Suite::check_tied_inference() {
  double worst = 0.0;
  Instance inst = make_instance(seed_ + 800);
  const PolicyParams& params = inst.params;
  Rng rng = Rng::derive(seed_, 0x6c31);
  int samples = reps(200, 1000);
  for (int s = 0; s < samples; ++s) {
    Generation g = sample_generation(params, 0, rng);
    SampleBatch batch = make_sample_batch(params, 0, inst.a_star, {g});
    auto [g_theta, g_phi] = elbo_grads(params, params, 0, batch);
    GradientVector direct = jepo_grad_single(batch, params, false);
    std::vector<double> combined(params.dim(), 0.0);
    for (std::size_t i = 0; i < combined.size(); ++i)
      combined[i] = g_theta.total[i] + g_phi.total[i];
    worst = std::max(worst, max_abs_diff(combined, direct.total));
  }
  record_worst("tied-inference-equivalence", worst, 1e-12);
}

void Suite::check_conditional_expectation() {
  double worst = 0.0;
  MatchFunction exact = MatchFunction::exact();
  for (int s = 0; s < reps(5, 20); ++s) {
    Instance inst = make_instance(seed_ + 900 + static_cast<std::uint64_t>(s));
    const PolicyParams& params = inst.params;
    Rng rng = Rng::derive(seed_, 0x6c33, static_cast<std::uint64_t>(s));
    for (int t = 0; t < reps(4, 10); ++t) {
      std::vector<std::vector<Token>> cots;
      std::vector<Generation> gens;
      for (int i = 0; i < 2; ++i) {
        Generation g = sample_generation(params, 0, rng);
        cots.push_back(g.cot);
        gens.push_back(std::move(g));
      }
      BatchEstimator vanilla = [&params, &exact](const SampleBatch& b) {
        return vanilla_pg_rloo(b, params, exact, true);
      };
      GradientVector conditional = oracle::expected_gradient_answers_given_cots(
          vanilla, params, 0, inst.a_star, cots);
      SampleBatch batch = make_sample_batch(params, 0, inst.a_star, gens);
      GradientVector reduced = var_reduced_est(params, true)(batch);
      worst = std::max(worst, max_abs_diff(conditional.total, reduced.total));
    }
  }
  record_worst("conditional-expectation", worst, 1e-10);
}

void Suite::check_variance_reduction() {
  int trials = reps(2000, 10000);
  int policies = reps(5, 20);
  double worst = -1e300;
  MatchFunction exact = MatchFunction::exact();
  std::string detail;
  for (int s = 0; s < policies; ++s) {
    Instance inst = make_instance(seed_ + 1000 + static_cast<std::uint64_t>(s));
    const PolicyParams& params = inst.params;
    BatchEstimator vanilla = [&params, &exact](const SampleBatch& b) {
      return vanilla_pg_rloo(b, params, exact, true);
    };
    auto cmp = oracle::compare_estimator_variance(vanilla, var_reduced_est(params, true), params,
                                                  0, inst.a_star, 4, trials,
                                                  seed_ + static_cast<std::uint64_t>(s), 1000);
    double scale = std::max(cmp.first.trace, 1.0);
    worst = std::max(worst, -cmp.delta_q01 / scale);
    if (detail.empty())
      detail = "first policy: vanilla trace " + std::to_string(cmp.first.trace) +
               ", reduced trace " + std::to_string(cmp.second.trace);
  }
  record_worst("variance-reduction", worst, 1e-9, detail);
}

void Suite::check_control_variate_variance() {
  int trials = reps(2000, 10000);
  double worst = -1e300;
  for (int s = 0; s < reps(3, 20); ++s) {
    Instance inst = make_instance(seed_ + 1100 + static_cast<std::uint64_t>(s));
    const PolicyParams& params = inst.params;
    auto cmp = oracle::compare_estimator_variance(
        jepo_single_est(params, false), jepo_single_est(params, true), params, 0, inst.a_star, 4,
        trials, seed_ + 7 + static_cast<std::uint64_t>(s), 1000);
    double scale = std::max(cmp.first.trace, 1.0);
    worst = std::max(worst, -cmp.delta_q01 / scale);
  }
  record_worst("control-variate-variance", worst, 1e-9);
}

void Suite::check_sft_reduction() {
  // degenerate no-chain family: the bound gradient must equal the SFT gradient
  PolicyShape shape{Vocab::make(3), 2, 0, 2, 1};
  double worst = 0.0;
  int instances = reps(200, 1000);
  for (int s = 0; s < instances; ++s) {
    PolicyParams params = PolicyParams::random(shape, seed_ + 1200 + static_cast<std::uint64_t>(s), 1.0);
    Rng rng = Rng::derive(seed_, 0x736674, static_cast<std::uint64_t>(s));
    std::vector<Token> target = random_target(shape, rng);
    int n = 1 + static_cast<int>(rng.below(4));
    std::vector<Generation> gens;
    std::vector<SftPair> pairs;
    for (int i = 0; i < n; ++i) {
      Generation g = sample_generation(params, 0, rng);
      gens.push_back(g);
      pairs.push_back({0, g.cot, target});
    }
    SampleBatch batch = make_sample_batch(params, 0, target, gens);
    GradientVector bound_grad = jepo_grad_single(batch, params, true);
    GradientVector sft = sft_gradient(params, pairs);
    double diff = 0.0;
    for (std::size_t i = 0; i < sft.total.size(); ++i)
      if (bound_grad.total[i] != sft.total[i]) diff = std::max(diff, 1.0);
    worst = std::max(worst, diff);
  }
  record_worst("sft-reduction", worst, 0.0);
}

void Suite::check_kl_regularizer_gradient() {
  double worst = 0.0;
  for (int s = 0; s < reps(3, 10); ++s) {
    Instance inst = make_instance(seed_ + 1300 + static_cast<std::uint64_t>(s));
    const PolicyParams& params = inst.params;
    ReferencePolicy ref(PolicyParams::random(small_shape(), seed_ + 5000 + static_cast<std::uint64_t>(s), 0.7));
    BatchEstimator kl_est = [&params, &ref](const SampleBatch& b) {
      return kl_reg_grad(params, ref, b);
    };
    GradientVector expected = oracle::expected_gradient(kl_est, params, 0, inst.a_star, 1,
                                                        oracle::TupleScope::full_generation);
    std::vector<double> fd = oracle::finite_difference_gradient(
        [&](const PolicyParams& p) { return sequence_kl(p, ref, 0).value; }, params, 1e-5);
    worst = std::max(worst, relative_l2_error(expected.total, fd));
  }
  record_worst("kl-regularizer-gradient", worst, 1e-3);
}

void Suite::check_kl_nonneg() {
  double worst = -1e300;
  double self_kl = 0.0;
  for (int s = 0; s < reps(3, 10); ++s) {
    Instance inst = make_instance(seed_ + 1400 + static_cast<std::uint64_t>(s));
    ReferencePolicy self(inst.params);
    self_kl = std::max(self_kl, std::abs(sequence_kl(inst.params, self, 0).value));
    ReferencePolicy other(
        PolicyParams::random(small_shape(), seed_ + 6000 + static_cast<std::uint64_t>(s), 0.5));
    worst = std::max(worst, -sequence_kl(inst.params, other, 0).value);
  }
  record_worst("kl-nonneg", std::max(worst, self_kl), 0.0);
}

void Suite::check_advantage_normalization() {
  std::vector<double> a{2.0, -2.0};
  std::vector<double> out = normalize_advantages(a, -1.0, 1.0);
  double worst = std::max(std::abs(out[0] - 1.0), std::abs(out[1] + 1.0));
  std::vector<double> b{5.0, 1.0};
  out = normalize_advantages(b, -1.0, 1.0);
  worst = std::max({worst, std::abs(out[0] - 1.0), std::abs(out[1] - 0.5)});
  std::vector<double> zeros{0.0, 0.0};
  out = normalize_advantages(zeros, -1.0, 1.0);
  worst = std::max({worst, std::abs(out[0]), std::abs(out[1])});
  Rng rng = Rng::derive(seed_, 0x6e726d);
  for (int s = 0; s < 100; ++s) {
    std::vector<double> xs(2 + rng.below(6));
    for (double& x : xs) x = (rng.uniform() - 0.5) * 20.0;
    for (double v : normalize_advantages(xs, -1.0, 1.0))
      worst = std::max({worst, v - 1.0, -1.0 - v});
  }
  record_worst("advantage-normalization", worst, 1e-12);
}

VerifyReport Suite::run() {
  auto start = std::chrono::steady_clock::now();
  // a check whose enumeration outgrows the budget reports as skipped, never
  // as silently passed
  auto guarded = [this](const char* name, void (Suite::*check)()) {
    try {
      (this->*check)();
    } catch (const oracle::BudgetExceeded& e) {
      report_.checks.push_back(
          {name, false, true, 0.0, 0.0, std::string("skipped: ") + e.what()});
    }
  };
  guarded("normalization", &Suite::check_normalization);
  guarded("score-zero-mean", &Suite::check_score_zero_mean);
  guarded("finite-difference-logprob", &Suite::check_logprob_finite_difference);
  guarded("bound-sandwich-exact", &Suite::check_bound_sandwich_exact);
  guarded("bound-sandwich-monte-carlo", &Suite::check_bound_sandwich_monte_carlo);
  guarded("gap-identity", &Suite::check_gap_identity);
  guarded("grad-jensen-single", &Suite::check_grad_jensen);
  guarded("grad-multisample", &Suite::check_grad_multisample);
  guarded("control-variate-unbiasedness", &Suite::check_control_variate_unbiasedness);
  guarded("tied-inference-equivalence", &Suite::check_tied_inference);
  guarded("conditional-expectation", &Suite::check_conditional_expectation);
  guarded("variance-reduction", &Suite::check_variance_reduction);
  guarded("control-variate-variance", &Suite::check_control_variate_variance);
  guarded("sft-reduction", &Suite::check_sft_reduction);
  guarded("kl-regularizer-gradient", &Suite::check_kl_regularizer_gradient);
  guarded("kl-nonneg", &Suite::check_kl_nonneg);
  guarded("advantage-normalization", &Suite::check_advantage_normalization);
  report_.elapsed_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return std::move(report_);
}

}  // namespace

nlohmann::json VerifyReport::to_json() const {
  nlohmann::json checks_doc = nlohmann::json::array();
  for (const CheckResult& c : checks) {
    checks_doc.push_back({{"name", c.name},
                          {"pass", c.pass},
                          {"skipped", c.skipped},
                          {"measured", c.measured},
                          {"tolerance", c.tolerance},
                          {"detail", c.detail}});
  }
  return nlohmann::json{{"all_pass", all_pass()},
                        {"elapsed_seconds", elapsed_seconds},
                        {"checks", checks_doc}};
}

FaultInjection fault_from_name(const std::string& name) {
  if (name.empty() || name == "none") return FaultInjection::none;
  if (name == "var-reduced-baseline-bias") return FaultInjection::var_reduced_baseline_bias;
  if (name == "jepo-single-drop-supervised") return FaultInjection::jepo_single_drop_supervised;
  throw std::invalid_argument("unknown fault injection '" + name + "'");
}

VerifyReport run_verification(VerifyScope scope, FaultInjection fault, std::uint64_t seed) {
  return Suite(scope, fault, seed).run();
}

}  // namespace jepolab
