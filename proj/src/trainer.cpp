#include "jepolab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "jepolab/math.hpp"
#include "jepolab/rng.hpp"

namespace jepolab {

namespace {

constexpr std::uint64_t kSampleStream = 0x73616d70;
constexpr std::uint64_t kEvalStream = 0x6576616c;
constexpr std::uint64_t kBatchStream = 0x62617463;
constexpr std::uint64_t kProxyStream = 0x70726f78;

double quiet_nan() { return std::numeric_limits<double>::quiet_NaN(); }

}  // namespace

void TrainerConfig::validate(const TaskSpec& task) const {
  if (n < 1) throw std::invalid_argument("TrainerConfig: n must be >= 1");
  if (steps < 0) throw std::invalid_argument("TrainerConfig: steps must be >= 0");
  if (lr <= 0.0) throw std::invalid_argument("TrainerConfig: lr must be > 0");
  if (!(clip_lo < clip_hi)) throw std::invalid_argument("TrainerConfig: clip_lo must be < clip_hi");
  if (beta_kl < 0.0 || beta_sup < 0.0 || penalty_p < 0.0)
    throw std::invalid_argument("TrainerConfig: coefficients must be >= 0");
  if (batch_prompts < 0) throw std::invalid_argument("TrainerConfig: batch_prompts must be >= 0");
  if ((algorithm == Algorithm::rl || algorithm == Algorithm::hybrid) && n < 2)
    throw std::invalid_argument("TrainerConfig: rl and hybrid need n >= 2");
  if ((algorithm == Algorithm::rl || algorithm == Algorithm::hybrid) &&
      !task.train_match.has_value())
    throw std::invalid_argument(
        "TrainerConfig: task has no train-time match function; rl/hybrid cannot run on it");
  if (task.train_split.empty())
    throw std::invalid_argument("TrainerConfig: task has an empty train split");
}

std::vector<double> normalize_advantages_scaled(std::span<const double> advantages, double scale,
                                                double clip_lo, double clip_hi) {
  if (advantages.empty()) throw std::invalid_argument("normalize_advantages: empty group");
  std::vector<double> out(advantages.size(), 0.0);
  double denom = std::max(scale, 1e-6);
  for (std::size_t i = 0; i < advantages.size(); ++i)
    out[i] = clip(advantages[i] / denom, clip_lo, clip_hi);
  return out;
}

std::vector<double> normalize_advantages(std::span<const double> advantages, double clip_lo,
                                         double clip_hi) {
  if (advantages.empty()) throw std::invalid_argument("normalize_advantages: empty group");
  return normalize_advantages_scaled(advantages, population_std(advantages), clip_lo, clip_hi);
}

GradientVector sft_gradient(const PolicyParams& params, std::span<const SftPair> pairs) {
  if (pairs.empty()) throw std::invalid_argument("sft_gradient: no pairs");
  GradientVector g(params.dim());
  double inv_n = 1.0 / static_cast<double>(pairs.size());
  for (const SftPair& pair : pairs) {
    accumulate_grad_logprob_cot(params, pair.prompt, pair.golden_cot, inv_n, g.total);
    accumulate_grad_logprob_answer(params, pair.prompt, pair.golden_cot, pair.a_star, inv_n,
                                   g.total);
  }
  return g;
}

ProxyNll proxy_nll(const PolicyParams& params, const TaskSpec& task, std::span<const int> prompts,
                   int n, int groups, std::uint64_t seed, double max_enum_sequences) {
  if (n < 1) throw std::invalid_argument("proxy_nll: n must be >= 1");
  if (groups < 1) throw std::invalid_argument("proxy_nll: groups must be >= 1");
  if (prompts.empty()) throw std::invalid_argument("proxy_nll: no prompts");

  ProxyNll result;
  std::vector<double> lps(static_cast<std::size_t>(n));
  double total = 0.0;
  for (int x : prompts) {
    const std::vector<Token>& a_star = task.truth[static_cast<std::size_t>(x)];
    for (int g = 0; g < groups; ++g) {
      Rng rng = Rng::derive(seed, (kProxyStream << 16) ^ static_cast<std::uint64_t>(g),
                            static_cast<std::uint64_t>(x));
      for (int i = 0; i < n; ++i) {
        Generation gen = sample_generation(params, x, rng);
        lps[static_cast<std::size_t>(i)] = logprob_answer(params, x, gen.cot, a_star);
      }
      total += -log_mean_exp(lps);
    }
  }
  result.sampled = total / static_cast<double>(prompts.size() * static_cast<std::size_t>(groups));

  oracle::EnumerationBudget budget{max_enum_sequences};
  if (n <= oracle::kMaxExactTupleN &&
      params.shape().cot_space_size() <= static_cast<double>(oracle::kMaxExactTupleSpace) &&
      std::pow(params.shape().cot_space_size(), n) <= max_enum_sequences) {
    double exact = 0.0;
    for (int x : prompts)
      exact += -oracle::multi_sample_bound(params, x, task.truth[static_cast<std::size_t>(x)], n,
                                           oracle::MultiSampleMode::exact, 0, 0, budget)
                    .value;
    result.exact = exact / static_cast<double>(prompts.size());
  }
  return result;
}

Trainer::Trainer(PolicyParams init, TaskSpec task, TrainerConfig config, EvalOptions eval)
    : params_(std::move(init)),
      ref_(params_),
      task_(std::move(task)),
      config_(config),
      eval_(eval) {
  task_.validate();
  config_.validate(task_);
  if (params_.shape() != task_.shape())
    throw std::invalid_argument("Trainer: policy shape does not match the task geometry");
  if (config_.optimizer == OptimizerKind::adam) {
    adam_m_.assign(params_.dim(), 0.0);
    adam_v_.assign(params_.dim(), 0.0);
  }
}

std::vector<int> Trainer::pick_batch(int step) const {
  const std::vector<int>& train = task_.train_split;
  int want = config_.batch_prompts;
  if (want <= 0 || want >= static_cast<int>(train.size())) return train;
  std::vector<int> order = train;
  Rng rng = Rng::derive(config_.seed, (kBatchStream << 24) ^ static_cast<std::uint64_t>(step));
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng.below(i)]);
  order.resize(static_cast<std::size_t>(want));
  std::sort(order.begin(), order.end());
  return order;
}

Rng Trainer::sampling_rng(std::uint64_t seed, int step, int prompt) {
  return Rng::derive(seed, (kSampleStream << 24) ^ static_cast<std::uint64_t>(step),
                     static_cast<std::uint64_t>(prompt));
}

std::vector<Generation> Trainer::sample_prompt_batch(int prompt, int step) const {
  Rng rng = sampling_rng(config_.seed, step, prompt);
  std::vector<Generation> gens;
  gens.reserve(static_cast<std::size_t>(config_.n));
  for (int i = 0; i < config_.n; ++i) gens.push_back(sample_generation(params_, prompt, rng));
  return gens;
}

void Trainer::add_reward_terms(PromptUpdate& u, const SampleBatch& valid_batch,
                               Algorithm effective) {
  const int m = valid_batch.n();
  auto& reinforce = u.grad.add_part("reinforce");

  std::vector<double> length_factor(static_cast<std::size_t>(m), 1.0);
  if (config_.length_norm != LengthNorm::none) {
    for (int i = 0; i < m; ++i) {
      double len = static_cast<double>(valid_batch.generations[static_cast<std::size_t>(i)].cot.size());
      if (config_.length_norm == LengthNorm::cot_plus_answer)
        len += static_cast<double>(valid_batch.a_star.size());
      length_factor[static_cast<std::size_t>(i)] = 1.0 / len;
    }
  }

  if (effective == Algorithm::rl) {
    std::vector<double> rewards(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i)
      rewards[static_cast<std::size_t>(i)] =
          task_.train_score(valid_batch.prompt,
                            valid_batch.generations[static_cast<std::size_t>(i)].answer);
    std::vector<double> raw = rloo_advantages(rewards);
    u.normalized_advantages = normalize_advantages_scaled(raw, population_std(rewards),
                                                          config_.clip_lo, config_.clip_hi);
    std::vector<double> coeffs = u.normalized_advantages;
    for (int i = 0; i < m; ++i)
      coeffs[static_cast<std::size_t>(i)] *= length_factor[static_cast<std::size_t>(i)];
    add_full_score_gradients(params_, valid_batch, coeffs, 1.0 / m, reinforce);
    return;
  }

  std::vector<double> raw = (effective == Algorithm::jepo_single || m == 1)
                                ? jepo_single_advantages(valid_batch)
                                : jepo_multi_advantages(valid_batch);
  u.normalized_advantages = normalize_advantages(raw, config_.clip_lo, config_.clip_hi);
  std::vector<double> coeffs = u.normalized_advantages;
  for (int i = 0; i < m; ++i)
    coeffs[static_cast<std::size_t>(i)] *= length_factor[static_cast<std::size_t>(i)];
  double scale = config_.reinforce_scaling == ReinforceScaling::averaged ? 1.0 / m : 1.0;
  add_cot_score_gradients(params_, valid_batch, coeffs, scale, reinforce);

  if (config_.beta_sup > 0.0) {
    auto& supervised = u.grad.add_part("supervised");
    if (effective == Algorithm::jepo_single || m == 1) {
      std::vector<double> ones(static_cast<std::size_t>(m), 1.0);
      add_answer_astar_gradients(params_, valid_batch, ones, config_.beta_sup / m, supervised);
    } else {
      std::vector<double> w = multi_sample_supervised_weights(valid_batch.logp_astar);
      add_answer_astar_gradients(params_, valid_batch, w, config_.beta_sup, supervised);
    }
  }
}

void Trainer::add_format_term(PromptUpdate& u, const SampleBatch& all_batch) {
  if (config_.penalty_p <= 0.0) return;
  std::vector<double> rewards = format_rewards(all_batch, config_.penalty_p);
  std::vector<double> raw = rloo_advantages(rewards);
  std::vector<double> norm = normalize_advantages(raw, config_.clip_lo, config_.clip_hi);
  add_cot_score_gradients(params_, all_batch, norm, 1.0 / all_batch.n(),
                          u.grad.add_part("format"));
}

void Trainer::add_kl_term(PromptUpdate& u, const SampleBatch& all_batch) {
  if (config_.beta_kl <= 0.0) return;
  auto& part = u.grad.add_part("kl");
  if (config_.kl_grad_exact) {
    GradientVector exact = oracle::exact_kl_gradient(
        params_, ref_, all_batch.prompt, oracle::EnumerationBudget{eval_.max_enum_sequences});
    vec_axpy(-config_.beta_kl, exact.total, part);
  } else {
    GradientVector est = kl_reg_grad(params_, ref_, all_batch);
    vec_axpy(-config_.beta_kl, est.total, part);
  }
}

Trainer::PromptUpdate Trainer::build_prompt_update(int prompt, int step, Algorithm effective) {
  PromptUpdate u;
  u.prompt = prompt;
  u.grad = GradientVector(params_.dim());
  u.generations = sample_prompt_batch(prompt, step);
  const std::vector<Token>& a_star = task_.truth[static_cast<std::size_t>(prompt)];

  SampleBatch all_batch =
      make_sample_batch(params_, prompt, a_star, u.generations);

  if (effective == Algorithm::hybrid) {
    bool any_match = false;
    for (const Generation& g : u.generations)
      if (task_.train_score(prompt, g.answer) > 0.0) any_match = true;
    effective = any_match ? Algorithm::rl : Algorithm::jepo_multi;
  }
  u.branch = (effective == Algorithm::rl) ? 0 : 1;

  std::vector<Generation> valid;
  for (const Generation& g : u.generations) {
    if (g.format_valid) valid.push_back(g);
    if (task_.train_match.has_value())
      u.reward_sum += task_.train_score(prompt, g.answer);
    else
      u.reward_sum += task_.eval_score(prompt, g.answer);
  }
  u.valid_count = static_cast<int>(valid.size());

  if (!valid.empty()) {
    SampleBatch valid_batch = make_sample_batch(params_, prompt, a_star, std::move(valid));
    add_reward_terms(u, valid_batch, effective);
  }
  add_format_term(u, all_batch);
  add_kl_term(u, all_batch);
  u.grad.sum_parts_into_total();
  return u;
}

void Trainer::apply_update(std::span<const double> grad) {
  std::span<double> theta = params_.values();
  if (config_.optimizer == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] += config_.lr * grad[i];
    return;
  }
  ++adam_t_;
  const AdamParams& a = config_.adam;
  double bc1 = 1.0 - std::pow(a.beta1, static_cast<double>(adam_t_));
  double bc2 = 1.0 - std::pow(a.beta2, static_cast<double>(adam_t_));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    adam_m_[i] = a.beta1 * adam_m_[i] + (1.0 - a.beta1) * grad[i];
    adam_v_[i] = a.beta2 * adam_v_[i] + (1.0 - a.beta2) * grad[i] * grad[i];
    theta[i] += config_.lr * (adam_m_[i] / bc1) / (std::sqrt(adam_v_[i] / bc2) + a.eps);
  }
}

MetricsRecord Trainer::initial_metrics() {
  std::vector<int> batch = pick_batch(0);
  std::vector<PromptUpdate> updates;
  for (int x : batch) {
    PromptUpdate u;
    u.prompt = x;
    Rng rng = Rng::derive(config_.seed, (kEvalStream << 24), static_cast<std::uint64_t>(x));
    for (int i = 0; i < config_.n; ++i) u.generations.push_back(sample_generation(params_, x, rng));
    for (const Generation& g : u.generations) {
      if (task_.train_match.has_value())
        u.reward_sum += task_.train_score(x, g.answer);
      else
        u.reward_sum += task_.eval_score(x, g.answer);
      if (g.format_valid) ++u.valid_count;
    }
    u.branch = -1;
    updates.push_back(std::move(u));
  }
  return make_metrics(0, batch, updates);
}

MetricsRecord Trainer::step() {
  ++step_;
  std::vector<int> batch = pick_batch(step_);
  std::vector<PromptUpdate> updates;
  updates.reserve(batch.size());

  if (config_.algorithm == Algorithm::sft) {
    std::vector<SftPair> pairs;
    for (int x : batch) {
      SftPair pair;
      pair.prompt = x;
      auto it = task_.golden_cots.find(x);
      pair.golden_cot = (it != task_.golden_cots.end()) ? it->second
                                                        : std::vector<Token>{task_.vocab.eoc};
      pair.a_star = task_.truth[static_cast<std::size_t>(x)];
      pairs.push_back(std::move(pair));
    }
    GradientVector g = sft_gradient(params_, pairs);
    apply_update(g.total);
    last_gradient_ = std::move(g);
    last_updates_.clear();
    // sampled generations for the reward/format columns only
    for (int x : batch) {
      PromptUpdate u;
      u.prompt = x;
      Rng rng = Rng::derive(config_.seed, (kEvalStream << 24) ^ static_cast<std::uint64_t>(step_),
                            static_cast<std::uint64_t>(x));
      for (int i = 0; i < config_.n; ++i)
        u.generations.push_back(sample_generation(params_, x, rng));
      for (const Generation& gen : u.generations) {
        if (task_.train_match.has_value())
          u.reward_sum += task_.train_score(x, gen.answer);
        else
          u.reward_sum += task_.eval_score(x, gen.answer);
        if (gen.format_valid) ++u.valid_count;
      }
      u.branch = -1;
      updates.push_back(std::move(u));
    }
    return make_metrics(step_, batch, updates);
  }

  GradientVector total(params_.dim());
  double inv_b = 1.0 / static_cast<double>(batch.size());
  for (int x : batch) {
    PromptUpdate u = build_prompt_update(x, step_, config_.algorithm);
    vec_axpy(inv_b, u.grad.total, total.total);
    for (const auto& [name, vec] : u.grad.parts) {
      std::vector<double>* dst = nullptr;
      for (auto& [tname, tvec] : total.parts)
        if (tname == name) dst = &tvec;
      if (!dst) dst = &total.add_part(name);
      vec_axpy(inv_b, vec, *dst);
    }
    updates.push_back(std::move(u));
  }
  apply_update(total.total);
  last_gradient_ = std::move(total);
  last_updates_ = updates;
  return make_metrics(step_, batch, updates);
}

MetricsRecord Trainer::make_metrics(int step, std::span<const int> batch,
                                    const std::vector<PromptUpdate>& updates) {
  MetricsRecord rec;
  rec.step = step;
  rec.batch_prompts.assign(batch.begin(), batch.end());

  int gen_count = 0, valid_count = 0;
  double reward_sum = 0.0;
  int jepo_branches = 0, branch_count = 0;
  std::vector<double> all_adv;
  for (const PromptUpdate& u : updates) {
    gen_count += static_cast<int>(u.generations.size());
    valid_count += u.valid_count;
    reward_sum += u.reward_sum;
    if (u.branch >= 0) {
      ++branch_count;
      jepo_branches += u.branch;
      rec.branch_labels.push_back(u.branch);
    }
    all_adv.insert(all_adv.end(), u.normalized_advantages.begin(),
                   u.normalized_advantages.end());
  }
  rec.train_reward = gen_count > 0 ? reward_sum / gen_count : 0.0;
  rec.format_valid_rate = gen_count > 0 ? static_cast<double>(valid_count) / gen_count : 0.0;
  rec.branch_jepo_fraction =
      branch_count > 0 ? static_cast<double>(jepo_branches) / branch_count : 0.0;
  if (!all_adv.empty()) {
    rec.advantage_stats.count = static_cast<int>(all_adv.size());
    rec.advantage_stats.mean = mean(all_adv);
    rec.advantage_stats.stddev = population_std(all_adv);
    rec.advantage_stats.min = *std::min_element(all_adv.begin(), all_adv.end());
    rec.advantage_stats.max = *std::max_element(all_adv.begin(), all_adv.end());
  }

  bool refresh = !have_oracle_metrics_ || eval_.oracle_every <= 1 ||
                 step % eval_.oracle_every == 0 || step == 0;
  if (refresh) {
    KlOptions kl_opts;
    kl_opts.max_exact_sequences = eval_.max_enum_sequences;
    kl_opts.seed = config_.seed ^ static_cast<std::uint64_t>(step);
    double kl_sum = 0.0;
    for (int x : batch) kl_sum += sequence_kl(params_, ref_, x, kl_opts).value;
    last_kl_ = kl_sum / static_cast<double>(batch.size());

    bool enumerable =
        params_.shape().cot_space_size() <= eval_.max_enum_sequences;
    if (enumerable) {
      oracle::EnumerationBudget budget{eval_.max_enum_sequences};
      double jensen_sum = 0.0, marginal_sum = 0.0;
      for (int x : batch) {
        const std::vector<Token>& a_star = task_.truth[static_cast<std::size_t>(x)];
        jensen_sum += oracle::jensen_bound_exact(params_, x, a_star, budget);
        marginal_sum += oracle::marginal_loglik(params_, x, a_star, budget);
      }
      last_jensen_ = jensen_sum / static_cast<double>(batch.size());
      last_marginal_ = marginal_sum / static_cast<double>(batch.size());
    } else {
      last_jensen_ = quiet_nan();
      last_marginal_ = quiet_nan();
    }

    last_proxy_ = proxy_nll(params_, task_, task_.train_split, eval_.proxy_nll_n,
                            eval_.proxy_nll_groups,
                            config_.seed ^ (static_cast<std::uint64_t>(step) << 20),
                            eval_.max_enum_sequences)
                      .sampled;
    have_oracle_metrics_ = true;
  }
  rec.kl_to_ref = last_kl_;
  rec.jensen_bound = last_jensen_;
  rec.marginal_loglik = last_marginal_;
  rec.proxy_nll = last_proxy_;
  return rec;
}

}  // namespace jepolab
