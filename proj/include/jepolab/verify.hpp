#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace jepolab {

enum class VerifyScope { fast, full };

// Test-fixture hooks that deliberately corrupt one estimator, so the suite's
// ability to catch a broken implementation is itself checkable.
enum class FaultInjection { none, var_reduced_baseline_bias, jepo_single_drop_supervised };

struct CheckResult {
  std::string name;
  bool pass = false;
  bool skipped = false;
  double measured = 0.0;   // worst observed value of the check's statistic
  double tolerance = 0.0;
  std::string detail;
};

struct VerifyReport {
  std::vector<CheckResult> checks;
  double elapsed_seconds = 0.0;

  bool all_pass() const {
    for (const CheckResult& c : checks)
      if (!c.pass && !c.skipped) return false;
    return true;
  }
  nlohmann::json to_json() const;
};

VerifyReport run_verification(VerifyScope scope, FaultInjection fault = FaultInjection::none,
                              std::uint64_t seed = 20240501);

FaultInjection fault_from_name(const std::string& name);

}  // namespace jepolab
