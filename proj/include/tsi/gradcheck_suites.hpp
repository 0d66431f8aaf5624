#pragma once

// Canned 64-bit gradient checks over every primitive and the composed modules.
// Shared by the CLI, the unit tests and the acceptance suite.

#include <string>
#include <vector>

#include "tsi/gradcheck.hpp"

namespace tsi {

struct SuiteResult {
  std::string name;
  GradCheckReport report;
};

/// primitives, sme, cti, block, model
std::vector<std::string> gradcheck_suite_names();

/// Throws ConfigError for an unknown suite name.
std::vector<SuiteResult> run_gradcheck_suite(const std::string& suite, const GradCheckOptions& options = {});

}  // namespace tsi
