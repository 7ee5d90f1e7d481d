#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "jepolab/estimators.hpp"
#include "jepolab/oracle.hpp"
#include "jepolab/policy.hpp"
#include "jepolab/tasks.hpp"

namespace jepolab {

enum class Algorithm { jepo_single, jepo_multi, rl, sft, hybrid };
enum class OptimizerKind { sgd, adam };
enum class LengthNorm { none, cot_plus_answer, cot_only };

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainerConfig {
  Algorithm algorithm = Algorithm::jepo_multi;
  int n = 4;                 // generations per prompt
  int batch_prompts = 0;     // 0 = every train prompt each step
  double beta_kl = 1e-3;
  double beta_sup = 1.0;
  double penalty_p = 10.0;
  double clip_lo = -1.0;
  double clip_hi = 1.0;
  double lr = 1e-2;
  OptimizerKind optimizer = OptimizerKind::sgd;
  AdamParams adam;
  int steps = 0;
  std::uint64_t seed = 0;
  ReinforceScaling reinforce_scaling = ReinforceScaling::averaged;
  LengthNorm length_norm = LengthNorm::none;
  bool kl_grad_exact = false;

  void validate(const TaskSpec& task) const;
};

struct EvalOptions {
  int oracle_every = 1;   // cadence for enumeration-backed metrics
  int proxy_nll_n = 4;
  int proxy_nll_groups = 8;
  double max_enum_sequences = 200000;
};

struct AdvantageStats {
  double mean = 0.0;
  double stddev = 0.0;
  double min = 0.0;
  double max = 0.0;
  int count = 0;
};

struct MetricsRecord {
  int step = 0;
  double train_reward = 0.0;
  double kl_to_ref = 0.0;
  double jensen_bound = 0.0;       // nan = not enumerable this step
  double marginal_loglik = 0.0;    // nan = not enumerable this step
  double proxy_nll = 0.0;
  double format_valid_rate = 0.0;
  double branch_jepo_fraction = 0.0;
  AdvantageStats advantage_stats;
  std::vector<int> branch_labels;  // per batch prompt, 1 = jepo branch
  std::vector<int> batch_prompts;
};

// clip(A_i / std, lo, hi) with the population std floored at 1e-6, applied per
// prompt group. On a degenerate group the floor takes over: zero advantages
// map to zero and an uncentered singleton saturates the clip. The scaled
// variant is used where the divisor is the std of the raw rewards rather than
// of the advantages.
std::vector<double> normalize_advantages(std::span<const double> advantages, double clip_lo,
                                         double clip_hi);
std::vector<double> normalize_advantages_scaled(std::span<const double> advantages, double scale,
                                                double clip_lo, double clip_hi);

struct SftPair {
  int prompt = 0;
  std::vector<Token> golden_cot;  // [eoc] in the no-chain family
  std::vector<Token> a_star;
};

// (1/N) sum over pairs of grad log pi(c_g|x) + grad log pi(a*|x,c_g).
GradientVector sft_gradient(const PolicyParams& params, std::span<const SftPair> pairs);

struct ProxyNll {
  double sampled = 0.0;
  std::optional<double> exact;  // enumeration counterpart when within budget
};

// -E log((1/n) sum_i pi(a*|x,c_i)) with chains sampled from the policy,
// averaged over the given prompts and `groups` independent n-groups each.
ProxyNll proxy_nll(const PolicyParams& params, const TaskSpec& task, std::span<const int> prompts,
                   int n, int groups, std::uint64_t seed,
                   double max_enum_sequences = 200000);

// Single-writer training loop: batch assembly, masking, advantage
// normalization, loss combination, KL regularization, optimizer step, and
// metrics. Holds the mutable parameters and the frozen reference copy.
class Trainer {
 public:
  struct PromptUpdate {
    int prompt = 0;
    GradientVector grad;
    std::vector<Generation> generations;
    std::vector<double> normalized_advantages;
    int branch = -1;  // 1 jepo, 0 rl
    double reward_sum = 0.0;
    int valid_count = 0;
  };

  Trainer(PolicyParams init, TaskSpec task, TrainerConfig config, EvalOptions eval = {});

  const PolicyParams& params() const { return params_; }
  const ReferencePolicy& ref() const { return ref_; }
  const TaskSpec& task() const { return task_; }
  int current_step() const { return step_; }

  // Metrics of the untouched policy; the step-0 row of a run.
  MetricsRecord initial_metrics();

  // One optimizer update; returns the metrics row for the new step.
  MetricsRecord step();

  // Post-step diagnostics for the most recent update.
  const GradientVector& last_gradient() const { return last_gradient_; }
  const std::vector<PromptUpdate>& last_updates() const { return last_updates_; }

  // The generation stream for (seed, step, prompt); each sampling site owns an
  // independently derived generator.
  static Rng sampling_rng(std::uint64_t seed, int step, int prompt);

 private:
  std::vector<int> pick_batch(int step) const;
  std::vector<Generation> sample_prompt_batch(int prompt, int step) const;
  PromptUpdate build_prompt_update(int prompt, int step, Algorithm effective);
  void add_reward_terms(PromptUpdate& u, const SampleBatch& valid_batch, Algorithm effective);
  void add_format_term(PromptUpdate& u, const SampleBatch& all_batch);
  void add_kl_term(PromptUpdate& u, const SampleBatch& all_batch);
  void apply_update(std::span<const double> grad);
  MetricsRecord make_metrics(int step, std::span<const int> batch,
                             const std::vector<PromptUpdate>& updates);

  PolicyParams params_;
  ReferencePolicy ref_;
  TaskSpec task_;
  TrainerConfig config_;
  EvalOptions eval_;
  int step_ = 0;
  GradientVector last_gradient_;
  std::vector<PromptUpdate> last_updates_;
  // adam state
  std::vector<double> adam_m_;
  std::vector<double> adam_v_;
  long adam_t_ = 0;
  // carried oracle metrics between cadence points
  double last_kl_ = 0.0;
  double last_jensen_ = 0.0;
  double last_marginal_ = 0.0;
  double last_proxy_ = 0.0;
  bool have_oracle_metrics_ = false;
};

}  // namespace jepolab
