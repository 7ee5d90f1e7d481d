#include <algorithm>
#include <set>

#include "doctest.h"
#include "helpers.hpp"

#include "jepolab/oracle.hpp"
#include "jepolab/rng.hpp"
#include "jepolab/tasks.hpp"

using namespace jepolab;

namespace {

TaskSizes small_sizes() {
  TaskSizes s;
  s.num_prompts = 10;
  s.train_fraction = 0.8;
  s.vocab_size = 2;
  s.context_order = 2;
  s.max_cot_len = 2;
  s.max_ans_len = 2;
  return s;
}

}  // namespace

TEST_CASE("make_verifiable_task is deterministic in the seed") {
  TaskSpec a = make_verifiable_task(7, small_sizes());
  TaskSpec b = make_verifiable_task(7, small_sizes());
  CHECK(a.truth == b.truth);
  CHECK(a.train_split == b.train_split);
  CHECK(a.test_split == b.test_split);
  TaskSpec c = make_verifiable_task(8, small_sizes());
  CHECK(a.truth != c.truth);
}

TEST_CASE("verifiable task honors the split ratio exactly") {
  TaskSpec task = make_verifiable_task(3, small_sizes());
  CHECK(task.train_split.size() == 8);
  CHECK(task.test_split.size() == 2);
  std::set<int> all(task.train_split.begin(), task.train_split.end());
  all.insert(task.test_split.begin(), task.test_split.end());
  CHECK(all.size() == 10);
}

TEST_CASE("every ground truth is reachable with positive probability") {
  TaskSpec task = make_verifiable_task(11, small_sizes());
  PolicyParams uniform(task.shape());
  for (int x = 0; x < task.num_prompts(); ++x) {
    double lp = logprob_answer(uniform, x, std::vector<Token>{task.vocab.eoc},
                               task.truth[static_cast<std::size_t>(x)]);
    CHECK(std::isfinite(lp));
    CHECK(std::exp(lp) > 0.0);
    // sampled-terminator form only: the answer fits strictly inside the budget
    CHECK(static_cast<int>(task.truth[static_cast<std::size_t>(x)].size()) <= task.max_ans_len);
  }
}

TEST_CASE("task sizes are validated") {
  TaskSizes bad = small_sizes();
  bad.max_ans_len = 1;
  CHECK_THROWS_AS(make_verifiable_task(1, bad), std::invalid_argument);
  TaskSizes bad2 = small_sizes();
  bad2.vocab_size = 1;
  CHECK_THROWS_AS(make_verifiable_task(1, bad2), std::invalid_argument);
}

TEST_CASE("semi-verifiable task structure") {
  TaskSizes sizes = small_sizes();
  TaskSpec task = make_semi_verifiable_task(5, sizes, 0.4);
  CHECK(task.regime == Regime::semi_verifiable);
  CHECK(task.eval_match.kind() == MatchKind::equivalence_class);
  CHECK(task.train_match.has_value());

  int unverifiable = static_cast<int>(task.unverifiable_prompts().size());
  CHECK(std::abs(unverifiable - 4) <= 1);

  // classes partition the full answer space with at least two members each
  std::set<std::vector<Token>> seen;
  std::size_t members = 0;
  for (const auto& cls : task.eval_match.classes()) {
    CHECK(cls.size() >= 2);
    for (const auto& m : cls) {
      CHECK(seen.insert(m).second);
      ++members;
    }
  }
  CHECK(members == enumerate_answer_sequences(task.shape()).size());
}

TEST_CASE("semi-verifiable: class sibling scores eval but not train") {
  TaskSpec task = make_semi_verifiable_task(9, small_sizes(), 0.0);
  // boundary fraction: all prompts stay train-verifiable
  CHECK(task.unverifiable_prompts().empty());
  int x = 0;
  const std::vector<Token>& a_star = task.truth[0];
  // find the sibling of the truth inside its class
  std::vector<Token> sibling;
  for (const auto& cls : task.eval_match.classes()) {
    bool holds_truth = false;
    for (const auto& m : cls)
      if (m == a_star) holds_truth = true;
    if (holds_truth)
      for (const auto& m : cls)
        if (m != a_star) sibling = m;
  }
  REQUIRE_FALSE(sibling.empty());
  CHECK(task.train_score(x, sibling) == 0.0);
  CHECK(task.eval_score(x, sibling) == 1.0);
  CHECK(task.combined_score(x, sibling) == 1.0);
  CHECK(task.combined_score(x, a_star) == 1.0);
}

TEST_CASE("semi-verifiable: unverifiable prompts never earn train reward") {
  TaskSpec task = make_semi_verifiable_task(13, small_sizes(), 0.5);
  for (int x : task.unverifiable_prompts()) {
    const std::vector<Token>& a_star = task.truth[static_cast<std::size_t>(x)];
    CHECK(task.train_score(x, a_star) == 0.0);
    CHECK(task.eval_score(x, a_star) == 1.0);
    CHECK(task.combined_score(x, a_star) == 1.0);
  }
  CHECK_THROWS_AS(make_semi_verifiable_task(1, small_sizes(), 1.5), std::invalid_argument);
}

TEST_CASE("unverifiable task: no train match, long answers, deterministic") {
  TaskSizes sizes = small_sizes();
  sizes.max_ans_len = 3;
  TaskSpec task = make_unverifiable_task(21, sizes);
  CHECK(task.regime == Regime::unverifiable);
  CHECK_FALSE(task.train_match.has_value());
  double mean_len = 0.0;
  for (const auto& a : task.truth) mean_len += static_cast<double>(a.size());
  mean_len /= static_cast<double>(task.truth.size());
  CHECK(mean_len >= 0.8 * sizes.max_ans_len);
  TaskSpec again = make_unverifiable_task(21, sizes);
  CHECK(task.truth == again.truth);
}

TEST_CASE("score_generations aggregates per-prompt rows") {
  TaskSpec task = make_semi_verifiable_task(17, small_sizes(), 0.4);
  std::vector<Generation> gens;
  std::vector<int> prompts;
  for (int x = 0; x < task.num_prompts(); ++x) {
    Generation g;
    g.prompt = x;
    g.cot = {task.vocab.eoc};
    // half exact hits, half misses
    g.answer = (x % 2 == 0) ? task.truth[static_cast<std::size_t>(x)]
                            : std::vector<Token>{task.vocab.eoa};
    gens.push_back(std::move(g));
    prompts.push_back(x);
  }
  ScoreReport report = score_generations(task, gens, prompts);
  REQUIRE(report.rows.size() == gens.size());
  double sum_combined = 0.0;
  for (const ScoreRow& row : report.rows) {
    CHECK(row.r_combined >= row.r_train);
    CHECK(row.r_combined == std::max(row.r_train, row.r_eval));
    sum_combined += row.r_combined;
  }
  CHECK(report.mean_combined ==
        doctest::Approx(sum_combined / static_cast<double>(gens.size())));
  // exact truth always earns the combined point
  for (const ScoreRow& row : report.rows)
    if (row.prompt % 2 == 0) CHECK(row.r_combined == 1.0);
}

TEST_CASE("score_generations reports missing prompts by id") {
  TaskSpec task = make_verifiable_task(19, small_sizes());
  Generation g;
  g.prompt = 0;
  g.cot = {task.vocab.eoc};
  g.answer = task.truth[0];
  std::vector<Generation> gens{g};
  std::vector<int> expected{0, 3, 4};
  CHECK_THROWS_WITH_AS(score_generations(task, gens, expected),
                       doctest::Contains("missing prompts: 3, 4"), std::invalid_argument);
}

TEST_CASE("match function symmetry and reflexivity") {
  TaskSpec task = make_semi_verifiable_task(23, small_sizes(), 0.4);
  auto space = enumerate_answer_sequences(task.shape());
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const auto& a = space[rng.below(space.size())];
    const auto& b = space[rng.below(space.size())];
    CHECK(task.eval_match.matches(a, a));
    CHECK(task.eval_match.matches(a, b) == task.eval_match.matches(b, a));
  }
}
