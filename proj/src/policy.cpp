#include "jepolab/policy.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <string>

#include "jepolab/math.hpp"

namespace jepolab {

namespace {

double row_log_softmax_at(std::span<const double> row, int slot) {
  double m = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (double v : row) s += std::exp(v - m);
  return row[slot] - (m + std::log(s));
}

void row_softmax(std::span<const double> row, std::vector<double>& probs) {
  probs.resize(row.size());
  double m = *std::max_element(row.begin(), row.end());
  double s = 0.0;
  for (std::size_t i = 0; i < row.size(); ++i) {
    probs[i] = std::exp(row[i] - m);
    s += probs[i];
  }
  for (double& p : probs) p /= s;
}

// slot index within a logits row; the marker (eoc/eoa) sits after the
// ordinary tokens.
int slot_of(const Vocab& v, Token t, Token marker) {
  if (v.is_ordinary(t)) return t;
  if (t == marker) return v.size;
  throw std::invalid_argument("token " + std::to_string(t) + " not valid in this phase");
}

}  // namespace

void PolicyShape::validate() const {
  vocab.validate();
  if (context_order < 0) throw std::invalid_argument("PolicyShape: context_order must be >= 0");
  if (max_cot_len < 0) throw std::invalid_argument("PolicyShape: max_cot_len must be >= 0");
  if (max_ans_len < 1) throw std::invalid_argument("PolicyShape: max_ans_len must be >= 1");
  if (num_prompts < 1) throw std::invalid_argument("PolicyShape: num_prompts must be >= 1");
}

double PolicyShape::cot_space_size() const {
  double total = 0.0, pow = 1.0;
  for (int d = 0; d < max_cot_len; ++d) {
    total += pow;  // d ordinary tokens + sampled eoc
    pow *= vocab.size;
  }
  return total + pow;  // forced termination after max_cot_len ordinary tokens
}

double PolicyShape::answer_space_size() const {
  double total = 0.0, pow = 1.0;
  for (int d = 0; d < max_ans_len; ++d) {
    total += pow;
    pow *= vocab.size;
  }
  return total + pow;
}

PolicyParams::PolicyParams(PolicyShape shape) : shape_(shape) {
  shape_.validate();
  const Vocab& v = shape_.vocab;
  const int k = shape_.context_order;

  // Reachable windows carry positive probability under any parameter setting,
  // so the reachable sets fix the parameter layout once and for all.
  std::set<ContextCode> cot_set;
  std::set<ContextCode> frontier = {initial_context(v, k)};
  for (int step = 0; step < shape_.max_cot_len; ++step) {
    cot_set.insert(frontier.begin(), frontier.end());
    std::set<ContextCode> next;
    for (ContextCode w : frontier)
      for (Token t = 0; t < v.size; ++t) next.insert(shift_context(w, t, v, k));
    frontier = std::move(next);
  }
  std::set<ContextCode> ans_starts;
  for (ContextCode w : cot_set) ans_starts.insert(shift_context(w, v.eoc, v, k));
  for (ContextCode w : frontier) ans_starts.insert(shift_context(w, v.eoc, v, k));

  std::set<ContextCode> ans_set;
  frontier = std::move(ans_starts);
  for (int step = 0; step < shape_.max_ans_len; ++step) {
    ans_set.insert(frontier.begin(), frontier.end());
    std::set<ContextCode> next;
    for (ContextCode w : frontier)
      for (Token t = 0; t < v.size; ++t) next.insert(shift_context(w, t, v, k));
    frontier = std::move(next);
  }

  cot_contexts_.assign(cot_set.begin(), cot_set.end());
  ans_contexts_.assign(ans_set.begin(), ans_set.end());
  for (std::size_t i = 0; i < cot_contexts_.size(); ++i)
    cot_index_[cot_contexts_[i]] = static_cast<int>(i);
  for (std::size_t i = 0; i < ans_contexts_.size(); ++i)
    ans_index_[ans_contexts_[i]] = static_cast<int>(i);

  values_.assign(static_cast<std::size_t>(shape_.num_prompts) * rows_per_prompt() * row_width(),
                 0.0);
}

PolicyParams PolicyParams::random(PolicyShape shape, std::uint64_t seed, double scale) {
  PolicyParams p(shape);
  Rng rng = Rng::derive(seed, 0x706f6c69);
  for (double& v : p.values_) {
    // sum of 4 uniforms, centered: cheap bell-shaped noise in (-2, 2) * scale
    double z = rng.uniform() + rng.uniform() + rng.uniform() + rng.uniform() - 2.0;
    v = scale * z;
  }
  return p;
}

std::size_t PolicyParams::row_offset(Phase phase, int prompt, ContextCode ctx) const {
  validate_prompt(shape_, prompt);
  const auto& index = (phase == Phase::cot) ? cot_index_ : ans_index_;
  auto it = index.find(ctx);
  if (it == index.end()) throw std::logic_error("row_offset: context not in reachable set");
  std::size_t row = static_cast<std::size_t>(prompt) * rows_per_prompt();
  if (phase == Phase::answer) row += cot_contexts_.size();
  row += static_cast<std::size_t>(it->second);
  return row * static_cast<std::size_t>(row_width());
}

std::span<const double> PolicyParams::row(Phase phase, int prompt, ContextCode ctx) const {
  return std::span<const double>(values_).subspan(row_offset(phase, prompt, ctx), row_width());
}

std::span<double> PolicyParams::row(Phase phase, int prompt, ContextCode ctx) {
  return std::span<double>(values_).subspan(row_offset(phase, prompt, ctx), row_width());
}

void validate_prompt(const PolicyShape& shape, int prompt) {
  if (prompt < 0 || prompt >= shape.num_prompts)
    throw std::invalid_argument("unknown prompt id " + std::to_string(prompt));
}

namespace {

void validate_phase_sequence(const PolicyShape& shape, std::span<const Token> seq, Token marker,
                             int max_len, const char* what) {
  if (seq.empty() || seq.back() != marker)
    throw std::invalid_argument(std::string(what) + ": sequence must end with its terminal marker");
  for (std::size_t i = 0; i + 1 < seq.size(); ++i)
    if (!shape.vocab.is_ordinary(seq[i]))
      throw std::invalid_argument(std::string(what) + ": non-ordinary token before the marker");
  int ordinary = static_cast<int>(seq.size()) - 1;
  if (ordinary > max_len)
    throw std::invalid_argument(std::string(what) + ": sequence longer than the phase allows");
}

}  // namespace

void validate_cot(const PolicyShape& shape, std::span<const Token> cot) {
  validate_phase_sequence(shape, cot, shape.vocab.eoc, shape.max_cot_len, "cot");
}

void validate_answer(const PolicyShape& shape, std::span<const Token> answer) {
  validate_phase_sequence(shape, answer, shape.vocab.eoa, shape.max_ans_len, "answer");
}

bool cot_format_valid(const PolicyShape& shape, std::span<const Token> cot) {
  int ordinary = static_cast<int>(cot.size()) - 1;
  return ordinary < shape.max_cot_len || shape.max_cot_len == 0;
}

double logprob_cot(const PolicyParams& params, int prompt, std::span<const Token> cot) {
  validate_prompt(params.shape(), prompt);
  validate_cot(params.shape(), cot);
  const Vocab& v = params.shape().vocab;
  const int k = params.shape().context_order;
  ContextCode w = initial_context(v, k);
  double lp = 0.0;
  for (std::size_t i = 0; i < cot.size(); ++i) {
    if (static_cast<int>(i) < params.shape().max_cot_len)
      lp += row_log_softmax_at(params.row(Phase::cot, prompt, w), slot_of(v, cot[i], v.eoc));
    w = shift_context(w, cot[i], v, k);
  }
  return lp;
}

ContextCode context_after_cot(const PolicyParams& params, int prompt,
                              std::span<const Token> cot) {
  validate_prompt(params.shape(), prompt);
  validate_cot(params.shape(), cot);
  const Vocab& v = params.shape().vocab;
  const int k = params.shape().context_order;
  ContextCode w = initial_context(v, k);
  for (Token t : cot) w = shift_context(w, t, v, k);
  return w;
}

double logprob_answer(const PolicyParams& params, int prompt, std::span<const Token> cot,
                      std::span<const Token> answer) {
  validate_answer(params.shape(), answer);
  const Vocab& v = params.shape().vocab;
  const int k = params.shape().context_order;
  ContextCode w = context_after_cot(params, prompt, cot);
  double lp = 0.0;
  for (std::size_t i = 0; i < answer.size(); ++i) {
    if (static_cast<int>(i) < params.shape().max_ans_len)
      lp += row_log_softmax_at(params.row(Phase::answer, prompt, w), slot_of(v, answer[i], v.eoa));
    w = shift_context(w, answer[i], v, k);
  }
  return lp;
}

namespace {

// e_slot - softmax(row), scaled by weight, added in place.
void accumulate_row_score(const PolicyParams& params, Phase phase, int prompt, ContextCode w,
                          int slot, double weight, std::span<double> out) {
  std::size_t off = params.row_offset(phase, prompt, w);
  std::span<const double> row = params.values().subspan(off, params.row_width());
  std::vector<double> probs;
  row_softmax(row, probs);
  out[off + static_cast<std::size_t>(slot)] += weight;
  for (int s = 0; s < params.row_width(); ++s)
    out[off + static_cast<std::size_t>(s)] -= weight * probs[static_cast<std::size_t>(s)];
}

}  // namespace

void accumulate_grad_logprob_cot(const PolicyParams& params, int prompt,
                                 std::span<const Token> cot, double weight,
                                 std::span<double> out) {
  validate_prompt(params.shape(), prompt);
  validate_cot(params.shape(), cot);
  const Vocab& v = params.shape().vocab;
  const int k = params.shape().context_order;
  ContextCode w = initial_context(v, k);
  for (std::size_t i = 0; i < cot.size(); ++i) {
    if (static_cast<int>(i) < params.shape().max_cot_len)
      accumulate_row_score(params, Phase::cot, prompt, w, slot_of(v, cot[i], v.eoc), weight, out);
    w = shift_context(w, cot[i], v, k);
  }
}

void accumulate_grad_logprob_answer(const PolicyParams& params, int prompt,
                                    std::span<const Token> cot, std::span<const Token> answer,
                                    double weight, std::span<double> out) {
  validate_answer(params.shape(), answer);
  const Vocab& v = params.shape().vocab;
  const int k = params.shape().context_order;
  ContextCode w = context_after_cot(params, prompt, cot);
  for (std::size_t i = 0; i < answer.size(); ++i) {
    if (static_cast<int>(i) < params.shape().max_ans_len)
      accumulate_row_score(params, Phase::answer, prompt, w, slot_of(v, answer[i], v.eoa), weight,
                           out);
    w = shift_context(w, answer[i], v, k);
  }
}

GradientVector grad_logprob_cot(const PolicyParams& params, int prompt,
                                std::span<const Token> cot) {
  GradientVector g(params.dim());
  accumulate_grad_logprob_cot(params, prompt, cot, 1.0, g.total);
  return g;
}

GradientVector grad_logprob_answer(const PolicyParams& params, int prompt,
                                   std::span<const Token> cot, std::span<const Token> answer) {
  GradientVector g(params.dim());
  accumulate_grad_logprob_answer(params, prompt, cot, answer, 1.0, g.total);
  return g;
}

namespace {

// Samples one phase; appends tokens, accumulates the sampled log-prob, and
// leaves the window positioned after the terminal marker.
void sample_phase(const PolicyParams& params, Phase phase, int prompt, int max_len, Token marker,
                  Rng& rng, std::vector<Token>& out, double& logp, ContextCode& w) {
  const Vocab& v = params.shape().vocab;
  const int k = params.shape().context_order;
  std::vector<double> probs;
  for (int pos = 0;; ++pos) {
    if (pos == max_len) {
      out.push_back(marker);
      w = shift_context(w, marker, v, k);
      return;
    }
    std::span<const double> row = params.row(phase, prompt, w);
    row_softmax(row, probs);
    double u = rng.uniform();
    int slot = params.row_width() - 1;
    double acc = 0.0;
    for (int s = 0; s < params.row_width(); ++s) {
      acc += probs[static_cast<std::size_t>(s)];
      if (u < acc) {
        slot = s;
        break;
      }
    }
    Token t = (slot == params.marker_slot()) ? marker : static_cast<Token>(slot);
    logp += row_log_softmax_at(row, slot);
    out.push_back(t);
    w = shift_context(w, t, v, k);
    if (t == marker) return;
  }
}

}  // namespace

Generation sample_generation(const PolicyParams& params, int prompt, Rng& rng) {
  validate_prompt(params.shape(), prompt);
  const PolicyShape& shape = params.shape();
  Generation g;
  g.prompt = prompt;
  ContextCode w = initial_context(shape.vocab, shape.context_order);
  sample_phase(params, Phase::cot, prompt, shape.max_cot_len, shape.vocab.eoc, rng, g.cot,
               g.logp_cot, w);
  g.format_valid = cot_format_valid(shape, g.cot);
  sample_phase(params, Phase::answer, prompt, shape.max_ans_len, shape.vocab.eoa, rng, g.answer,
               g.logp_answer, w);
  return g;
}

namespace {

double row_kl(std::span<const double> p_row, std::span<const double> q_row) {
  std::vector<double> p, q;
  row_softmax(p_row, p);
  row_softmax(q_row, q);
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    kl += p[i] * (std::log(p[i]) - std::log(q[i]));
  return std::max(kl, 0.0);
}

// One phase of the exact KL sweep: mass flows through reachable windows; each
// sampled step adds visit-mass-weighted conditional KL. Returns the map of
// terminal windows to the mass that leaves the phase through them.
std::map<ContextCode, double> kl_sweep_phase(const PolicyParams& p, const PolicyParams& q,
                                             Phase phase, int prompt, int max_len, Token marker,
                                             std::map<ContextCode, double> front, double& kl) {
  const Vocab& v = p.shape().vocab;
  const int k = p.shape().context_order;
  std::map<ContextCode, double> done;
  std::vector<double> probs;
  for (int step = 0; step < max_len; ++step) {
    std::map<ContextCode, double> next;
    for (const auto& [w, mass] : front) {
      kl += mass * row_kl(p.row(phase, prompt, w), q.row(phase, prompt, w));
      row_softmax(p.row(phase, prompt, w), probs);
      done[shift_context(w, marker, v, k)] +=
          mass * probs[static_cast<std::size_t>(p.marker_slot())];
      for (Token t = 0; t < v.size; ++t)
        next[shift_context(w, t, v, k)] += mass * probs[static_cast<std::size_t>(t)];
    }
    front = std::move(next);
  }
  // forced termination: deterministic in both policies, no KL contribution
  for (const auto& [w, mass] : front) done[shift_context(w, marker, v, k)] += mass;
  return done;
}

}  // namespace

KlEstimate sequence_kl(const PolicyParams& params, const ReferencePolicy& ref, int prompt,
                       const KlOptions& opts) {
  if (!params.same_geometry(ref.params()))
    throw std::invalid_argument("sequence_kl: policies have mismatched shapes");
  validate_prompt(params.shape(), prompt);
  const PolicyShape& shape = params.shape();

  if (shape.cot_space_size() * shape.answer_space_size() <= opts.max_exact_sequences) {
    double kl = 0.0;
    std::map<ContextCode, double> front{
        {initial_context(shape.vocab, shape.context_order), 1.0}};
    front = kl_sweep_phase(params, ref.params(), Phase::cot, prompt, shape.max_cot_len,
                           shape.vocab.eoc, std::move(front), kl);
    kl_sweep_phase(params, ref.params(), Phase::answer, prompt, shape.max_ans_len, shape.vocab.eoa,
                   std::move(front), kl);
    return {std::max(kl, 0.0), 0.0, true};
  }

  // Rao-Blackwellized sampling: per trajectory, sum the exact conditional KLs
  // of every row visited at a sampled position.
  Rng rng = Rng::derive(opts.seed, 0x6b6c, static_cast<std::uint64_t>(prompt));
  std::vector<double> trials(static_cast<std::size_t>(opts.sample_trials));
  const Vocab& v = shape.vocab;
  const int k = shape.context_order;
  for (double& trial : trials) {
    Generation g = sample_generation(params, prompt, rng);
    double kl = 0.0;
    ContextCode w = initial_context(v, k);
    for (std::size_t i = 0; i < g.cot.size(); ++i) {
      if (static_cast<int>(i) < shape.max_cot_len)
        kl += row_kl(params.row(Phase::cot, prompt, w), ref.params().row(Phase::cot, prompt, w));
      w = shift_context(w, g.cot[i], v, k);
    }
    for (std::size_t i = 0; i < g.answer.size(); ++i) {
      if (static_cast<int>(i) < shape.max_ans_len)
        kl += row_kl(params.row(Phase::answer, prompt, w),
                     ref.params().row(Phase::answer, prompt, w));
      w = shift_context(w, g.answer[i], v, k);
    }
    trial = kl;
  }
  double value = 0.0;
  for (double t : trials) value += t;
  value /= static_cast<double>(trials.size());
  double se = sample_std(trials) / std::sqrt(static_cast<double>(trials.size()));
  return {std::max(value, 0.0), se, false};
}

namespace {

std::vector<std::vector<Token>> enumerate_phase(const Vocab& v, int max_len, Token marker) {
  std::vector<std::vector<Token>> out;
  std::vector<std::vector<Token>> prefixes{{}};
  for (int d = 0; d <= max_len; ++d) {
    for (const auto& prefix : prefixes) {
      std::vector<Token> seq = prefix;
      seq.push_back(marker);
      out.push_back(std::move(seq));
    }
    if (d == max_len) break;
    std::vector<std::vector<Token>> next;
    next.reserve(prefixes.size() * static_cast<std::size_t>(v.size));
    for (const auto& prefix : prefixes)
      for (Token t = 0; t < v.size; ++t) {
        std::vector<Token> seq = prefix;
        seq.push_back(t);
        next.push_back(std::move(seq));
      }
    prefixes = std::move(next);
  }
  return out;
}

}  // namespace

std::vector<std::vector<Token>> enumerate_cot_sequences(const PolicyShape& shape) {
  return enumerate_phase(shape.vocab, shape.max_cot_len, shape.vocab.eoc);
}

std::vector<std::vector<Token>> enumerate_answer_sequences(const PolicyShape& shape) {
  return enumerate_phase(shape.vocab, shape.max_ans_len, shape.vocab.eoa);
}

}  // namespace jepolab
