#pragma once

#include <span>
#include <utility>
#include <vector>

#include "jepolab/gradient.hpp"
#include "jepolab/policy.hpp"
#include "jepolab/tasks.hpp"

namespace jepolab {

// n generations from one prompt together with the forward-pass evaluations
// log pi(a*|x, c_i) the estimators consume.
struct SampleBatch {
  int prompt = 0;
  std::vector<Generation> generations;
  std::vector<Token> a_star;
  std::vector<double> logp_astar;

  int n() const { return static_cast<int>(generations.size()); }
  void validate() const;
};

SampleBatch make_sample_batch(const PolicyParams& params, int prompt, std::vector<Token> a_star,
                              std::vector<Generation> generations);

enum class ReinforceScaling { averaged, summed };

// Raw (unnormalized) advantages. Leave-one-out baselines over singleton
// batches are defined as 0.
std::vector<double> jepo_single_advantages(const SampleBatch& batch, bool leave_one_out = true);
std::vector<double> jepo_multi_advantages(const SampleBatch& batch, bool leave_one_out = true);
std::vector<double> rloo_advantages(std::span<const double> rewards, bool leave_one_out = true);
std::vector<double> format_rewards(const SampleBatch& batch, double penalty);

// Softmax weights w_i = pi(a*|x,c_i) / sum_j pi(a*|x,c_j) for the multi-sample
// supervised term.
std::vector<double> multi_sample_supervised_weights(std::span<const double> logp_astar);

// Gradient assembly used by the estimators and, with normalized advantages,
// by the trainer. Each accumulates scale * sum_i coeff_i * (term_i) into out.
void add_cot_score_gradients(const PolicyParams& params, const SampleBatch& batch,
                             std::span<const double> coeffs, double scale, std::span<double> out);
void add_answer_astar_gradients(const PolicyParams& params, const SampleBatch& batch,
                                std::span<const double> weights, double scale,
                                std::span<double> out);
void add_full_score_gradients(const PolicyParams& params, const SampleBatch& batch,
                              std::span<const double> coeffs, double scale, std::span<double> out);

// Single-sample bound gradient with leave-one-out control variates:
// (1/n) sum_i (logp_i - v_i) grad log pi(c_i|x) + (1/n) sum_i grad log pi(a*|x,c_i).
GradientVector jepo_grad_single(const SampleBatch& batch, const PolicyParams& params,
                                bool leave_one_out = true);

// Multi-sample bound gradient. The reinforce part is a sum over samples (not
// an average); the supervised part is the softmax-weighted combination of
// per-sample answer gradients, algebraically grad log mean_i pi(a*|x,c_i).
GradientVector jepo_grad_multi(const SampleBatch& batch, const PolicyParams& params,
                               bool leave_one_out = true,
                               ReinforceScaling scaling = ReinforceScaling::summed);

// Classic policy gradient over full generations with indicator reward and
// leave-one-out baseline.
GradientVector vanilla_pg_rloo(const SampleBatch& batch, const PolicyParams& params,
                               const MatchFunction& match, bool leave_one_out = true);

// Conditional expectation of vanilla_pg_rloo given the chains: the answer
// sample is integrated out analytically. Exact-match rewards only.
GradientVector var_reduced_pg(const SampleBatch& batch, const PolicyParams& params,
                              bool leave_one_out = true);

// Evidence-lower-bound gradients for a separate inference policy q. The batch
// must have been sampled from q's chain-of-thought head at q_prompt (a
// per-(prompt, a*) key when q conditions on the target answer); logp_astar is
// evaluated under theta. Returns (g_theta, g_phi).
std::pair<GradientVector, GradientVector> elbo_grads(const PolicyParams& theta,
                                                     const PolicyParams& q, int q_prompt,
                                                     const SampleBatch& batch);

// REINFORCE estimate of grad KL(pi_theta || pi_ref) over full generations; the
// trainer subtracts beta * this.
GradientVector kl_reg_grad(const PolicyParams& params, const ReferencePolicy& ref,
                           const SampleBatch& batch);

// RLOO-style gradient on the chain score with reward -penalty for
// format-invalid generations, 0 otherwise. The one estimator fed unfiltered
// batches; the trainer normalizes its advantages before use.
GradientVector format_penalty_grad(const SampleBatch& batch, const PolicyParams& params,
                                   double penalty);

}  // namespace jepolab
