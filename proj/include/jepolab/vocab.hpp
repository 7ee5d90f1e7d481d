#pragma once

#include <cstdint>
#include <stdexcept>

namespace jepolab {

using Token = int;

// Token id space: ordinary tokens are [0, size); three reserved ids follow.
//   eoc  terminates a chain-of-thought,
//   eoa  terminates an answer,
//   bos  pads context windows before any token has been generated.
struct Vocab {
  int size = 0;
  Token eoc = -1;
  Token eoa = -1;
  Token bos = -1;

  static Vocab make(int num_ordinary) {
    Vocab v;
    v.size = num_ordinary;
    v.eoc = num_ordinary;
    v.eoa = num_ordinary + 1;
    v.bos = num_ordinary + 2;
    v.validate();
    return v;
  }

  bool is_ordinary(Token t) const { return t >= 0 && t < size; }

  // Number of distinct ids that can appear in a context window.
  int alphabet_size() const { return size + 3; }

  void validate() const {
    if (size < 2) throw std::invalid_argument("Vocab: size must be >= 2");
    if (is_ordinary(eoc) || is_ordinary(eoa) || is_ordinary(bos) || eoc == eoa ||
        eoc == bos || eoa == bos || eoc < 0 || eoa < 0 || bos < 0) {
      throw std::invalid_argument("Vocab: reserved ids must be distinct and outside ordinary range");
    }
  }

  bool operator==(const Vocab&) const = default;
};

// A context window of the last k tokens, encoded base alphabet_size with the
// oldest token in the lowest digit. Shifting drops the oldest and appends.
using ContextCode = std::uint64_t;

inline ContextCode initial_context(const Vocab& v, int k) {
  ContextCode code = 0;
  ContextCode pow = 1;
  for (int i = 0; i < k; ++i) {
    code += static_cast<ContextCode>(v.bos) * pow;
    pow *= static_cast<ContextCode>(v.alphabet_size());
  }
  return code;
}

inline ContextCode shift_context(ContextCode code, Token t, const Vocab& v, int k) {
  if (k == 0) return 0;
  ContextCode alpha = static_cast<ContextCode>(v.alphabet_size());
  ContextCode high = 1;
  for (int i = 0; i < k - 1; ++i) high *= alpha;
  return code / alpha + static_cast<ContextCode>(t) * high;
}

}  // namespace jepolab
