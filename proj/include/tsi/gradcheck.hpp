#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tsi/autograd.hpp"

namespace tsi {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t total = 0;
  bool passed = true;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  double step = 0.0;
  std::uint64_t seed = 0;

  bool passed() const;
  double max_rel_error() const;
  std::string to_string() const;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Elements compared per parameter; 0 compares every element.
  std::size_t max_samples = 0;
  std::uint64_t seed = 0;
};

/// Relative error |a-n| / max(|a|, |n|, 1e-12).
double relative_error(double analytic, double numeric);

/// Builds the scalar objective on a fresh tape from the current parameter values.
using Objective = std::function<Var<double>(Tape<double>&)>;

/// Compares analytic gradients against central differences for each parameter.
/// Runs in 64-bit only.
GradCheckReport grad_check(const Objective& objective, const std::vector<Parameter<double>*>& params,
                           const GradCheckOptions& options = {});

}  // namespace tsi
