#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "jepolab/gradient.hpp"
#include "jepolab/rng.hpp"
#include "jepolab/vocab.hpp"

namespace jepolab {

// Geometry shared by comparable policies. Sequences are generated in two
// phases. Chain-of-thought: positions 0..max_cot_len-1 are sampled from a
// softmax over (ordinary tokens | eoc); if no eoc was sampled, the token at
// position max_cot_len is forced to eoc. A forced termination is
// format-invalid, except in the degenerate max_cot_len == 0 family where the
// bare [eoc] chain is the whole space and counts as well-formed. The answer
// phase works the same way with eoa and max_ans_len, seeded with the context
// window left behind by the chain-of-thought (bos-padded when shorter than k).
// Forced tokens are deterministic events: they contribute log-prob 0 and no
// gradient.
struct PolicyShape {
  Vocab vocab;
  int context_order = 1;   // k
  int max_cot_len = 2;     // L_c, number of sampled chain-of-thought steps
  int max_ans_len = 2;     // L_a, number of sampled answer steps
  int num_prompts = 1;

  void validate() const;
  bool operator==(const PolicyShape&) const = default;

  // |sequence space| per phase, counting forced-termination sequences.
  double cot_space_size() const;
  double answer_space_size() const;
};

enum class Phase { cot, answer };

// Tabular order-k softmax policy. One logits row per reachable
// (prompt, context window) pair and phase; rows hold V ordinary slots plus a
// terminal-marker slot. There is no parameter sharing across prompts.
class PolicyParams {
 public:
  explicit PolicyParams(PolicyShape shape);
  static PolicyParams random(PolicyShape shape, std::uint64_t seed, double scale = 1.0);

  const PolicyShape& shape() const { return shape_; }
  int row_width() const { return shape_.vocab.size + 1; }
  int marker_slot() const { return shape_.vocab.size; }
  std::size_t dim() const { return values_.size(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  std::size_t rows_per_prompt() const { return cot_contexts_.size() + ans_contexts_.size(); }
  const std::vector<ContextCode>& cot_contexts() const { return cot_contexts_; }
  const std::vector<ContextCode>& ans_contexts() const { return ans_contexts_; }

  // Flat offset of a logits row; throws on a context outside the reachable set.
  std::size_t row_offset(Phase phase, int prompt, ContextCode ctx) const;
  std::span<const double> row(Phase phase, int prompt, ContextCode ctx) const;
  std::span<double> row(Phase phase, int prompt, ContextCode ctx);

  bool same_geometry(const PolicyParams& other) const { return shape_ == other.shape_; }

 private:
  PolicyShape shape_;
  std::vector<ContextCode> cot_contexts_;  // sorted
  std::vector<ContextCode> ans_contexts_;  // sorted
  std::unordered_map<ContextCode, int> cot_index_;
  std::unordered_map<ContextCode, int> ans_index_;
  std::vector<double> values_;
};

// A frozen copy of policy parameters serving as the KL anchor.
class ReferencePolicy {
 public:
  explicit ReferencePolicy(PolicyParams params) : params_(std::move(params)) {}
  const PolicyParams& params() const { return params_; }

 private:
  PolicyParams params_;
};

// One sampled (chain-of-thought, answer) pair with cached per-sequence
// log-probabilities. format_valid mirrors cot_format_valid below.
struct Generation {
  int prompt = 0;
  std::vector<Token> cot;
  std::vector<Token> answer;
  bool format_valid = false;
  double logp_cot = 0.0;
  double logp_answer = 0.0;
};

// Structural validation; throws std::invalid_argument on malformed input.
void validate_prompt(const PolicyShape& shape, int prompt);
void validate_cot(const PolicyShape& shape, std::span<const Token> cot);
void validate_answer(const PolicyShape& shape, std::span<const Token> answer);

bool cot_format_valid(const PolicyShape& shape, std::span<const Token> cot);

// Per-sequence sums of conditional log-probs; no length normalization.
double logprob_cot(const PolicyParams& params, int prompt, std::span<const Token> cot);
double logprob_answer(const PolicyParams& params, int prompt, std::span<const Token> cot,
                      std::span<const Token> answer);

// Context window after consuming the whole chain-of-thought (including eoc);
// this window seeds the answer phase.
ContextCode context_after_cot(const PolicyParams& params, int prompt,
                              std::span<const Token> cot);

// Analytic score-function gradients of the per-sequence log-probs, accumulated
// as weight * grad into a flat buffer sized params.dim(). Rows never touched
// stay exactly zero.
void accumulate_grad_logprob_cot(const PolicyParams& params, int prompt,
                                 std::span<const Token> cot, double weight,
                                 std::span<double> out);
void accumulate_grad_logprob_answer(const PolicyParams& params, int prompt,
                                    std::span<const Token> cot, std::span<const Token> answer,
                                    double weight, std::span<double> out);

GradientVector grad_logprob_cot(const PolicyParams& params, int prompt,
                                std::span<const Token> cot);
GradientVector grad_logprob_answer(const PolicyParams& params, int prompt,
                                   std::span<const Token> cot, std::span<const Token> answer);

Generation sample_generation(const PolicyParams& params, int prompt, Rng& rng);

struct KlOptions {
  double max_exact_sequences = 200000;  // exact enumeration cap on |C| * |A|
  int sample_trials = 4000;
  std::uint64_t seed = 0;
};

struct KlEstimate {
  double value = 0.0;
  double std_error = 0.0;  // 0 when exact
  bool exact = true;
};

// Sequence-level KL(pi_theta(.|x) || pi_ref(.|x)). Exact via a visit-probability
// sweep over reachable context windows when the sequence space is within the
// cap, otherwise a Rao-Blackwellized sample estimate (sum of exact per-step
// conditional KLs along sampled trajectories) with a standard error.
KlEstimate sequence_kl(const PolicyParams& params, const ReferencePolicy& ref, int prompt,
                       const KlOptions& opts = {});

// Token-level enumeration of the full phase spaces (valid and forced forms).
std::vector<std::vector<Token>> enumerate_cot_sequences(const PolicyShape& shape);
std::vector<std::vector<Token>> enumerate_answer_sequences(const PolicyShape& shape);

}  // namespace jepolab
