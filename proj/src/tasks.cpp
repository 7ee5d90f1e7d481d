#include "jepolab/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "jepolab/rng.hpp"

namespace jepolab {

MatchFunction MatchFunction::exact() { return MatchFunction(); }

MatchFunction MatchFunction::equivalence(std::vector<std::vector<std::vector<Token>>> classes) {
  MatchFunction m;
  m.kind_ = MatchKind::equivalence_class;
  m.classes_ = std::move(classes);
  for (std::size_t c = 0; c < m.classes_.size(); ++c) {
    for (const auto& member : m.classes_[c]) {
      auto [it, inserted] = m.class_of_.emplace(member, static_cast<int>(c));
      if (!inserted) throw std::invalid_argument("equivalence classes must be disjoint");
    }
  }
  return m;
}

bool MatchFunction::matches(std::span<const Token> a, std::span<const Token> b) const {
  auto equal = [&] { return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin()); };
  if (kind_ == MatchKind::exact) return equal();
  auto ia = class_of_.find(std::vector<Token>(a.begin(), a.end()));
  auto ib = class_of_.find(std::vector<Token>(b.begin(), b.end()));
  if (ia == class_of_.end() || ib == class_of_.end()) return equal();
  return ia->second == ib->second;
}

double TaskSpec::train_score(int prompt, std::span<const Token> answer) const {
  if (!train_match.has_value()) return 0.0;
  if (!train_verifiable[static_cast<std::size_t>(prompt)]) return 0.0;
  return train_match->matches(answer, truth[static_cast<std::size_t>(prompt)]) ? 1.0 : 0.0;
}

double TaskSpec::eval_score(int prompt, std::span<const Token> answer) const {
  return eval_match.matches(answer, truth[static_cast<std::size_t>(prompt)]) ? 1.0 : 0.0;
}

double TaskSpec::combined_score(int prompt, std::span<const Token> answer) const {
  double r_train = train_score(prompt, answer);
  double r_eval = eval_score(prompt, answer);
  return r_train + r_eval * (r_train == 0.0 ? 1.0 : 0.0);
}

std::vector<int> TaskSpec::unverifiable_prompts() const {
  std::vector<int> out;
  for (int x = 0; x < num_prompts(); ++x)
    if (!train_verifiable[static_cast<std::size_t>(x)]) out.push_back(x);
  return out;
}

void TaskSpec::validate() const {
  PolicyShape s = shape();
  s.validate();
  if (train_verifiable.size() != truth.size())
    throw std::invalid_argument("TaskSpec: train_verifiable size mismatch");
  std::set<int> train(train_split.begin(), train_split.end());
  for (int x : test_split)
    if (train.count(x)) throw std::invalid_argument("TaskSpec: train/test splits overlap");
  for (const auto& a : truth) validate_answer(s, a);
  for (const auto& [x, c] : golden_cots) {
    validate_prompt(s, x);
    validate_cot(s, c);
    if (!cot_format_valid(s, c))
      throw std::invalid_argument("TaskSpec: golden chain-of-thought is format-invalid");
  }
}

ScoreReport score_generations(const TaskSpec& task, std::span<const Generation> generations,
                              std::span<const int> expected_prompts) {
  std::map<int, const Generation*> by_prompt;
  for (const Generation& g : generations) {
    if (by_prompt.count(g.prompt))
      throw std::invalid_argument("score_generations: duplicate generation for prompt " +
                                  std::to_string(g.prompt));
    by_prompt[g.prompt] = &g;
  }
  std::string missing;
  for (int x : expected_prompts)
    if (!by_prompt.count(x)) missing += (missing.empty() ? "" : ", ") + std::to_string(x);
  if (!missing.empty())
    throw std::invalid_argument("score_generations: missing prompts: " + missing);

  ScoreReport report;
  double sum_t = 0, sum_e = 0, sum_c = 0, sum_e_u = 0, sum_c_u = 0;
  for (int x : expected_prompts) {
    const Generation& g = *by_prompt.at(x);
    ScoreRow row;
    row.prompt = x;
    row.r_train = task.train_score(x, g.answer);
    row.r_eval = task.eval_score(x, g.answer);
    row.r_combined = task.combined_score(x, g.answer);
    sum_t += row.r_train;
    sum_e += row.r_eval;
    sum_c += row.r_combined;
    if (!task.train_verifiable[static_cast<std::size_t>(x)]) {
      ++report.unverifiable_count;
      sum_e_u += row.r_eval;
      sum_c_u += row.r_combined;
    }
    report.rows.push_back(row);
  }
  double n = static_cast<double>(expected_prompts.size());
  if (n > 0) {
    report.mean_train = sum_t / n;
    report.mean_eval = sum_e / n;
    report.mean_combined = sum_c / n;
  }
  if (report.unverifiable_count > 0) {
    report.mean_eval_unverifiable = sum_e_u / report.unverifiable_count;
    report.mean_combined_unverifiable = sum_c_u / report.unverifiable_count;
  }
  return report;
}

namespace {

std::vector<Token> random_answer(Rng& rng, const Vocab& v, int ordinary_count) {
  std::vector<Token> a;
  for (int i = 0; i < ordinary_count; ++i)
    a.push_back(static_cast<Token>(rng.below(static_cast<std::uint64_t>(v.size))));
  a.push_back(v.eoa);
  return a;
}

std::vector<Token> random_golden_cot(Rng& rng, const Vocab& v, int max_cot_len) {
  std::vector<Token> c;
  if (max_cot_len > 0) {
    int body = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_cot_len)));
    for (int i = 0; i < body; ++i)
      c.push_back(static_cast<Token>(rng.below(static_cast<std::uint64_t>(v.size))));
  }
  c.push_back(v.eoc);
  return c;
}

void seeded_shuffle(std::vector<int>& xs, Rng& rng) {
  for (std::size_t i = xs.size(); i > 1; --i)
    std::swap(xs[i - 1], xs[rng.below(i)]);
}

TaskSpec base_task(std::uint64_t seed, const TaskSizes& sizes, const char* name) {
  if (sizes.num_prompts < 1) throw std::invalid_argument("TaskSizes: num_prompts must be >= 1");
  if (sizes.max_ans_len < 2)
    throw std::invalid_argument("TaskSizes: max_ans_len must be >= 2 so answers carry content");
  if (sizes.train_fraction < 0.0 || sizes.train_fraction > 1.0)
    throw std::invalid_argument("TaskSizes: train_fraction outside [0, 1]");

  TaskSpec task;
  task.name = name;
  task.vocab = Vocab::make(sizes.vocab_size);
  task.context_order = sizes.context_order;
  task.max_cot_len = sizes.max_cot_len;
  task.max_ans_len = sizes.max_ans_len;

  Rng rng = Rng::derive(seed, 0x7461736b);
  for (int x = 0; x < sizes.num_prompts; ++x) {
    // sampled-eoa answers only: body length in [1, L_a - 1]
    int body = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sizes.max_ans_len - 1)));
    task.truth.push_back(random_answer(rng, task.vocab, body));
    task.golden_cots[x] = random_golden_cot(rng, task.vocab, sizes.max_cot_len);
  }
  task.train_verifiable.assign(static_cast<std::size_t>(sizes.num_prompts), true);

  std::vector<int> order(static_cast<std::size_t>(sizes.num_prompts));
  std::iota(order.begin(), order.end(), 0);
  seeded_shuffle(order, rng);
  int num_train = static_cast<int>(std::llround(sizes.train_fraction * sizes.num_prompts));
  task.train_split.assign(order.begin(), order.begin() + num_train);
  task.test_split.assign(order.begin() + num_train, order.end());
  std::sort(task.train_split.begin(), task.train_split.end());
  std::sort(task.test_split.begin(), task.test_split.end());
  return task;
}

}  // namespace

TaskSpec make_verifiable_task(std::uint64_t seed, const TaskSizes& sizes) {
  TaskSpec task = base_task(seed, sizes, "verifiable");
  task.regime = Regime::verifiable;
  task.train_match = MatchFunction::exact();
  task.eval_match = MatchFunction::exact();
  task.validate();
  return task;
}

TaskSpec make_semi_verifiable_task(std::uint64_t seed, const TaskSizes& sizes,
                                   double unverifiable_fraction) {
  if (unverifiable_fraction < 0.0 || unverifiable_fraction > 1.0)
    throw std::invalid_argument("unverifiable_fraction outside [0, 1]");
  TaskSpec task = base_task(seed, sizes, "semi-verifiable");
  task.regime = Regime::semi_verifiable;

  // Partition the whole answer space into classes of size 2..4, so every
  // ground truth has at least one sibling the exact matcher cannot see.
  PolicyShape shape = task.shape();
  std::vector<std::vector<Token>> space = enumerate_answer_sequences(shape);
  if (space.size() < 2) throw std::invalid_argument("answer space too small for classes");
  std::vector<int> order(space.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::derive(seed, 0x636c7373);
  seeded_shuffle(order, rng);
  std::vector<std::vector<std::vector<Token>>> classes;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t want = 2 + rng.below(3);
    want = std::min(want, order.size() - i);
    std::vector<std::vector<Token>> cls;
    for (std::size_t j = 0; j < want; ++j) cls.push_back(space[static_cast<std::size_t>(order[i++])]);
    classes.push_back(std::move(cls));
  }
  if (classes.size() > 1 && classes.back().size() < 2) {
    auto tail = std::move(classes.back());
    classes.pop_back();
    for (auto& member : tail) classes.back().push_back(std::move(member));
  }

  task.train_match = MatchFunction::exact();
  task.eval_match = MatchFunction::equivalence(std::move(classes));

  int num_unverifiable =
      static_cast<int>(std::llround(unverifiable_fraction * sizes.num_prompts));
  std::vector<int> prompts(static_cast<std::size_t>(sizes.num_prompts));
  std::iota(prompts.begin(), prompts.end(), 0);
  Rng rng2 = Rng::derive(seed, 0x756e7672);
  seeded_shuffle(prompts, rng2);
  for (int j = 0; j < num_unverifiable; ++j)
    task.train_verifiable[static_cast<std::size_t>(prompts[static_cast<std::size_t>(j)])] = false;
  task.validate();
  return task;
}

TaskSpec make_unverifiable_task(std::uint64_t seed, const TaskSizes& sizes) {
  TaskSpec task = base_task(seed, sizes, "unverifiable");
  task.regime = Regime::unverifiable;
  // long-form ground truth: answers use the full sampled budget
  Rng rng = Rng::derive(seed, 0x6c6f6e67);
  for (int x = 0; x < sizes.num_prompts; ++x)
    task.truth[static_cast<std::size_t>(x)] =
        random_answer(rng, task.vocab, sizes.max_ans_len - 1);
  task.train_match.reset();
  task.train_verifiable.assign(static_cast<std::size_t>(sizes.num_prompts), false);
  task.eval_match = MatchFunction::exact();
  task.validate();
  return task;
}

}  // namespace jepolab
