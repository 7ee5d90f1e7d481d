#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "jepolab/policy.hpp"

namespace jepolab {
namespace testing {

inline PolicyShape tiny_shape(int vocab = 2, int k = 2, int lc = 2, int la = 2, int prompts = 1) {
  return PolicyShape{Vocab::make(vocab), k, lc, la, prompts};
}

// A policy whose chain space is effectively two sequences [t0,eoc] and
// [t1,eoc] with prior (p0, 1-p0), and whose answer head gives the target
// answer [eoa] probability q0 after t0 and q1 after t1. The sampled-eoc chain
// carries weight exp(-50), which is negligible at the tolerances in use.
struct TwoCotFixture {
  PolicyParams params;
  std::vector<Token> a_star;
};

inline TwoCotFixture make_two_cot(double p0, double q0, double q1) {
  PolicyShape shape{Vocab::make(2), 2, 1, 1, 1};
  PolicyParams params(shape);
  const Vocab& v = shape.vocab;
  ContextCode root = initial_context(v, 2);

  std::span<double> cot_row = params.row(Phase::cot, 0, root);
  cot_row[0] = std::log(p0);
  cot_row[1] = std::log(1.0 - p0);
  cot_row[2] = -50.0;

  auto set_answer_row = [&](Token tail, double q) {
    ContextCode w = shift_context(root, tail, v, 2);
    w = shift_context(w, v.eoc, v, 2);
    std::span<double> row = params.row(Phase::answer, 0, w);
    row[0] = std::log((1.0 - q) / 2.0);
    row[1] = std::log((1.0 - q) / 2.0);
    row[2] = std::log(q);
  };
  set_answer_row(0, q0);
  set_answer_row(1, q1);
  // the negligible bare-[eoc] chain reuses q0
  ContextCode w = shift_context(root, v.eoc, v, 2);
  std::span<double> row = params.row(Phase::answer, 0, w);
  row[0] = std::log((1.0 - q0) / 2.0);
  row[1] = std::log((1.0 - q0) / 2.0);
  row[2] = std::log(q0);

  return {std::move(params), {v.eoa}};
}

// Independent re-walk of the conditional tables with its own softmax code;
// the oracle the analytic log-prob paths are checked against.
inline double naive_phase_logprob(const PolicyParams& params, Phase phase, int prompt,
                                  ContextCode start, std::span<const Token> seq, int max_len,
                                  Token marker) {
  const Vocab& v = params.shape().vocab;
  ContextCode w = start;
  double lp = 0.0;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (static_cast<int>(i) < max_len) {
      std::span<const double> row = params.row(phase, prompt, w);
      double denom = 0.0;
      for (double x : row) denom += std::exp(x);
      int slot = seq[i] == marker ? params.marker_slot() : seq[i];
      lp += std::log(std::exp(row[slot]) / denom);
    }
    w = shift_context(w, seq[i], v, params.shape().context_order);
  }
  return lp;
}

inline double naive_logprob_cot(const PolicyParams& params, int prompt,
                                std::span<const Token> cot) {
  return naive_phase_logprob(params, Phase::cot, prompt,
                             initial_context(params.shape().vocab, params.shape().context_order),
                             cot, params.shape().max_cot_len, params.shape().vocab.eoc);
}

inline double naive_logprob_answer(const PolicyParams& params, int prompt,
                                   std::span<const Token> cot, std::span<const Token> answer) {
  const Vocab& v = params.shape().vocab;
  ContextCode w = initial_context(v, params.shape().context_order);
  for (Token t : cot) w = shift_context(w, t, v, params.shape().context_order);
  return naive_phase_logprob(params, Phase::answer, prompt, w, answer,
                             params.shape().max_ans_len, v.eoa);
}

}  // namespace testing
}  // namespace jepolab
