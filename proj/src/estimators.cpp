#include "jepolab/estimators.hpp"

#include <cmath>
#include <stdexcept>

#include "jepolab/math.hpp"

namespace jepolab {

void SampleBatch::validate() const {
  if (generations.empty()) throw std::invalid_argument("SampleBatch: empty batch");
  if (logp_astar.size() != generations.size())
    throw std::invalid_argument("SampleBatch: logp_astar length mismatch");
  for (const Generation& g : generations)
    if (g.prompt != prompt) throw std::invalid_argument("SampleBatch: mixed prompts");
}

SampleBatch make_sample_batch(const PolicyParams& params, int prompt, std::vector<Token> a_star,
                              std::vector<Generation> generations) {
  SampleBatch batch;
  batch.prompt = prompt;
  batch.a_star = std::move(a_star);
  batch.generations = std::move(generations);
  batch.logp_astar.reserve(batch.generations.size());
  for (const Generation& g : batch.generations)
    batch.logp_astar.push_back(logprob_answer(params, prompt, g.cot, batch.a_star));
  batch.validate();
  return batch;
}

std::vector<double> jepo_single_advantages(const SampleBatch& batch, bool leave_one_out) {
  batch.validate();
  const std::vector<double>& lp = batch.logp_astar;
  int n = batch.n();
  std::vector<double> adv(lp.size());
  double sum = 0.0;
  for (double x : lp) sum += x;
  for (int i = 0; i < n; ++i) {
    double v = 0.0;
    if (leave_one_out && n > 1) v = (sum - lp[static_cast<std::size_t>(i)]) / (n - 1);
    adv[static_cast<std::size_t>(i)] = lp[static_cast<std::size_t>(i)] - v;
  }
  return adv;
}

std::vector<double> jepo_multi_advantages(const SampleBatch& batch, bool leave_one_out) {
  batch.validate();
  const std::vector<double>& lp = batch.logp_astar;
  int n = batch.n();
  double bound = log_mean_exp(lp);
  std::vector<double> adv(lp.size());
  for (int i = 0; i < n; ++i) {
    double v = 0.0;
    if (leave_one_out && n > 1) {
      std::vector<double> rest;
      rest.reserve(lp.size() - 1);
      for (int j = 0; j < n; ++j)
        if (j != i) rest.push_back(lp[static_cast<std::size_t>(j)]);
      v = log_mean_exp(rest);
    }
    adv[static_cast<std::size_t>(i)] = bound - v;
  }
  return adv;
}

std::vector<double> rloo_advantages(std::span<const double> rewards, bool leave_one_out) {
  if (rewards.empty()) throw std::invalid_argument("rloo_advantages: empty rewards");
  double sum = 0.0;
  for (double r : rewards) sum += r;
  int n = static_cast<int>(rewards.size());
  std::vector<double> adv(rewards.size());
  for (int i = 0; i < n; ++i) {
    double baseline = 0.0;
    if (leave_one_out && n > 1) baseline = (sum - rewards[static_cast<std::size_t>(i)]) / (n - 1);
    adv[static_cast<std::size_t>(i)] = rewards[static_cast<std::size_t>(i)] - baseline;
  }
  return adv;
}

std::vector<double> format_rewards(const SampleBatch& batch, double penalty) {
  std::vector<double> r(batch.generations.size(), 0.0);
  for (std::size_t i = 0; i < batch.generations.size(); ++i)
    if (!batch.generations[i].format_valid) r[i] = -penalty;
  return r;
}

std::vector<double> multi_sample_supervised_weights(std::span<const double> logp_astar) {
  double lse = log_sum_exp(logp_astar);
  std::vector<double> w(logp_astar.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(logp_astar[i] - lse);
  return w;
}

void add_cot_score_gradients(const PolicyParams& params, const SampleBatch& batch,
                             std::span<const double> coeffs, double scale, std::span<double> out) {
  for (std::size_t i = 0; i < batch.generations.size(); ++i)
    accumulate_grad_logprob_cot(params, batch.prompt, batch.generations[i].cot,
                                scale * coeffs[i], out);
}

void add_answer_astar_gradients(const PolicyParams& params, const SampleBatch& batch,
                                std::span<const double> weights, double scale,
                                std::span<double> out) {
  for (std::size_t i = 0; i < batch.generations.size(); ++i)
    accumulate_grad_logprob_answer(params, batch.prompt, batch.generations[i].cot, batch.a_star,
                                   scale * weights[i], out);
}

void add_full_score_gradients(const PolicyParams& params, const SampleBatch& batch,
                              std::span<const double> coeffs, double scale, std::span<double> out) {
  for (std::size_t i = 0; i < batch.generations.size(); ++i) {
    const Generation& g = batch.generations[i];
    accumulate_grad_logprob_cot(params, batch.prompt, g.cot, scale * coeffs[i], out);
    accumulate_grad_logprob_answer(params, batch.prompt, g.cot, g.answer, scale * coeffs[i], out);
  }
}

GradientVector jepo_grad_single(const SampleBatch& batch, const PolicyParams& params,
                                bool leave_one_out) {
  batch.validate();
  GradientVector g(params.dim());
  g.advantages = jepo_single_advantages(batch, leave_one_out);
  double inv_n = 1.0 / batch.n();
  add_cot_score_gradients(params, batch, g.advantages, inv_n, g.add_part("reinforce"));
  std::vector<double> ones(batch.generations.size(), 1.0);
  add_answer_astar_gradients(params, batch, ones, inv_n, g.add_part("supervised"));
  g.sum_parts_into_total();
  return g;
}

GradientVector jepo_grad_multi(const SampleBatch& batch, const PolicyParams& params,
                               bool leave_one_out, ReinforceScaling scaling) {
  batch.validate();
  if (batch.n() == 1) return jepo_grad_single(batch, params, leave_one_out);
  GradientVector g(params.dim());
  g.advantages = jepo_multi_advantages(batch, leave_one_out);
  double scale = scaling == ReinforceScaling::averaged ? 1.0 / batch.n() : 1.0;
  add_cot_score_gradients(params, batch, g.advantages, scale, g.add_part("reinforce"));
  std::vector<double> w = multi_sample_supervised_weights(batch.logp_astar);
  add_answer_astar_gradients(params, batch, w, 1.0, g.add_part("supervised"));
  g.sum_parts_into_total();
  return g;
}

GradientVector vanilla_pg_rloo(const SampleBatch& batch, const PolicyParams& params,
                               const MatchFunction& match, bool leave_one_out) {
  batch.validate();
  if (batch.n() < 2)
    throw std::invalid_argument("vanilla_pg_rloo: needs n >= 2 for a leave-one-out baseline");
  std::vector<double> rewards(batch.generations.size());
  for (std::size_t i = 0; i < rewards.size(); ++i)
    rewards[i] = match.matches(batch.generations[i].answer, batch.a_star) ? 1.0 : 0.0;
  GradientVector g(params.dim());
  g.advantages = rloo_advantages(rewards, leave_one_out);
  add_full_score_gradients(params, batch, g.advantages, 1.0 / batch.n(),
                           g.add_part("reinforce"));
  g.sum_parts_into_total();
  return g;
}

GradientVector var_reduced_pg(const SampleBatch& batch, const PolicyParams& params,
                              bool leave_one_out) {
  batch.validate();
  if (batch.n() < 2)
    throw std::invalid_argument("var_reduced_pg: needs n >= 2 for a leave-one-out baseline");
  int n = batch.n();
  std::vector<double> prob(batch.logp_astar.size());
  for (std::size_t i = 0; i < prob.size(); ++i) prob[i] = std::exp(batch.logp_astar[i]);
  double sum = 0.0;
  for (double p : prob) sum += p;
  GradientVector g(params.dim());
  g.advantages.resize(prob.size());
  for (int i = 0; i < n; ++i) {
    double baseline = leave_one_out ? (sum - prob[static_cast<std::size_t>(i)]) / (n - 1) : 0.0;
    g.advantages[static_cast<std::size_t>(i)] = prob[static_cast<std::size_t>(i)] - baseline;
  }
  double inv_n = 1.0 / n;
  add_cot_score_gradients(params, batch, g.advantages, inv_n, g.add_part("reinforce"));
  // grad pi(a*|x,c_i) realized as pi * grad log pi
  add_answer_astar_gradients(params, batch, prob, inv_n, g.add_part("supervised"));
  g.sum_parts_into_total();
  return g;
}

std::pair<GradientVector, GradientVector> elbo_grads(const PolicyParams& theta,
                                                     const PolicyParams& q, int q_prompt,
                                                     const SampleBatch& batch) {
  batch.validate();
  if (theta.shape().vocab != q.shape().vocab || theta.shape().context_order != q.shape().context_order ||
      theta.shape().max_cot_len != q.shape().max_cot_len ||
      theta.shape().max_ans_len != q.shape().max_ans_len)
    throw std::invalid_argument("elbo_grads: theta and q have mismatched shapes");
  int n = batch.n();
  double inv_n = 1.0 / n;

  GradientVector g_theta(theta.dim());
  auto& g_theta_sup = g_theta.add_part("supervised");
  auto& g_theta_prior = g_theta.add_part("prior");
  GradientVector g_phi(q.dim());
  auto& g_phi_reinforce = g_phi.add_part("reinforce");
  auto& g_phi_entropy = g_phi.add_part("entropy");

  for (int i = 0; i < n; ++i) {
    const Generation& gen = batch.generations[static_cast<std::size_t>(i)];
    double logp_astar = batch.logp_astar[static_cast<std::size_t>(i)];
    double log_q = logprob_cot(q, q_prompt, gen.cot);
    double log_prior = logprob_cot(theta, batch.prompt, gen.cot);
    double elbo_weight = logp_astar - (log_q - log_prior);

    accumulate_grad_logprob_answer(theta, batch.prompt, gen.cot, batch.a_star, inv_n, g_theta_sup);
    accumulate_grad_logprob_cot(theta, batch.prompt, gen.cot, inv_n, g_theta_prior);
    accumulate_grad_logprob_cot(q, q_prompt, gen.cot, inv_n * elbo_weight, g_phi_reinforce);
    accumulate_grad_logprob_cot(q, q_prompt, gen.cot, -inv_n, g_phi_entropy);
  }
  g_theta.sum_parts_into_total();
  g_phi.sum_parts_into_total();
  return {std::move(g_theta), std::move(g_phi)};
}

GradientVector kl_reg_grad(const PolicyParams& params, const ReferencePolicy& ref,
                           const SampleBatch& batch) {
  batch.validate();
  if (!params.same_geometry(ref.params()))
    throw std::invalid_argument("kl_reg_grad: reference policy shape mismatch");
  GradientVector g(params.dim());
  auto& part = g.add_part("kl");
  double inv_n = 1.0 / batch.n();
  for (const Generation& gen : batch.generations) {
    double lp = logprob_cot(params, batch.prompt, gen.cot) +
                logprob_answer(params, batch.prompt, gen.cot, gen.answer);
    double lp_ref = logprob_cot(ref.params(), batch.prompt, gen.cot) +
                    logprob_answer(ref.params(), batch.prompt, gen.cot, gen.answer);
    double ratio = lp - lp_ref;
    accumulate_grad_logprob_cot(params, batch.prompt, gen.cot, inv_n * ratio, part);
    accumulate_grad_logprob_answer(params, batch.prompt, gen.cot, gen.answer, inv_n * ratio, part);
  }
  g.sum_parts_into_total();
  return g;
}

GradientVector format_penalty_grad(const SampleBatch& batch, const PolicyParams& params,
                                   double penalty) {
  batch.validate();
  GradientVector g(params.dim());
  std::vector<double> rewards = format_rewards(batch, penalty);
  g.advantages = rloo_advantages(rewards);
  add_cot_score_gradients(params, batch, g.advantages, 1.0 / batch.n(), g.add_part("format"));
  g.sum_parts_into_total();
  return g;
}

}  // namespace jepolab
