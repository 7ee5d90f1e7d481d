#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "jepolab/policy.hpp"

namespace jepolab {

enum class Regime { verifiable, semi_verifiable, unverifiable };

enum class MatchKind { exact, equivalence_class };

// Binary answer-equivalence predicate. The exact kind matches identical token
// sequences; the equivalence-class kind matches answers sharing a class in a
// partition of the answer space. Sequences outside the partition fall back to
// exact comparison.
class MatchFunction {
 public:
  static MatchFunction exact();
  static MatchFunction equivalence(std::vector<std::vector<std::vector<Token>>> classes);

  bool matches(std::span<const Token> a, std::span<const Token> b) const;
  MatchKind kind() const { return kind_; }
  const std::vector<std::vector<std::vector<Token>>>& classes() const { return classes_; }

 private:
  MatchKind kind_ = MatchKind::exact;
  std::vector<std::vector<std::vector<Token>>> classes_;
  std::map<std::vector<Token>, int> class_of_;
};

struct TaskSizes {
  int num_prompts = 16;
  double train_fraction = 1.0;
  int vocab_size = 4;
  int context_order = 2;
  int max_cot_len = 4;
  int max_ans_len = 3;
};

// A synthetic prompt set with ground-truth answers and the match functions
// available at train versus eval time. Prompts are plain ids 0..P-1; the task
// carries the policy geometry it was generated for.
struct TaskSpec {
  std::string name;
  Regime regime = Regime::verifiable;
  Vocab vocab;
  int context_order = 1;
  int max_cot_len = 1;
  int max_ans_len = 2;

  std::vector<std::vector<Token>> truth;  // indexed by prompt id
  std::vector<int> train_split;
  std::vector<int> test_split;
  std::vector<bool> train_verifiable;    // per prompt; gates train_match
  std::optional<MatchFunction> train_match;
  MatchFunction eval_match = MatchFunction::exact();
  std::map<int, std::vector<Token>> golden_cots;  // stand-in reference chains for SFT

  int num_prompts() const { return static_cast<int>(truth.size()); }
  PolicyShape shape() const {
    return PolicyShape{vocab, context_order, max_cot_len, max_ans_len, num_prompts()};
  }

  // r_train: train-time match, 0 on prompts outside the verifiable subset.
  double train_score(int prompt, std::span<const Token> answer) const;
  double eval_score(int prompt, std::span<const Token> answer) const;
  // r_combined = r_train + r_eval * 1{r_train = 0}
  double combined_score(int prompt, std::span<const Token> answer) const;

  std::vector<int> unverifiable_prompts() const;
  void validate() const;
};

struct ScoreRow {
  int prompt = 0;
  double r_train = 0.0;
  double r_eval = 0.0;
  double r_combined = 0.0;
};

struct ScoreReport {
  std::vector<ScoreRow> rows;
  double mean_train = 0.0;
  double mean_eval = 0.0;
  double mean_combined = 0.0;
  // aggregates over the prompts whose answers the train-time matcher cannot see
  int unverifiable_count = 0;
  double mean_eval_unverifiable = 0.0;
  double mean_combined_unverifiable = 0.0;
};

// Scores one generation per expected prompt; throws listing any missing or
// duplicated prompts.
ScoreReport score_generations(const TaskSpec& task, std::span<const Generation> generations,
                              std::span<const int> expected_prompts);

TaskSpec make_verifiable_task(std::uint64_t seed, const TaskSizes& sizes);
TaskSpec make_semi_verifiable_task(std::uint64_t seed, const TaskSizes& sizes,
                                   double unverifiable_fraction = 0.4);
TaskSpec make_unverifiable_task(std::uint64_t seed, const TaskSizes& sizes);

}  // namespace jepolab
