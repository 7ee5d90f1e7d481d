#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace jepolab {

// A flat gradient aligned with the PolicyParams layout, plus named sub-term
// diagnostics (reinforce / supervised / kl / format) and the per-sample
// advantages that produced it. When parts are present, total is their sum.
struct GradientVector {
  std::vector<double> total;
  std::vector<std::pair<std::string, std::vector<double>>> parts;
  std::vector<double> advantages;

  GradientVector() = default;
  explicit GradientVector(std::size_t dim) : total(dim, 0.0) {}

  std::vector<double>& add_part(std::string name) {
    parts.emplace_back(std::move(name), std::vector<double>(total.size(), 0.0));
    return parts.back().second;
  }

  const std::vector<double>* part(std::string_view name) const {
    for (const auto& [n, v] : parts)
      if (n == name) return &v;
    return nullptr;
  }

  // total = sum of parts, accumulated in part order.
  void sum_parts_into_total() {
    std::fill(total.begin(), total.end(), 0.0);
    for (const auto& [n, v] : parts)
      for (std::size_t i = 0; i < total.size(); ++i) total[i] += v[i];
  }
};

}  // namespace jepolab
