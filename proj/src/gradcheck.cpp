#include "tsi/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "tsi/rng.hpp"

namespace tsi {

bool GradCheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
}

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

std::string GradCheckReport::to_string() const {
  std::ostringstream os;
  os << "gradient check: step " << step << ", tolerance " << tolerance << ", sampling seed " << seed << "\n";
  for (const auto& e : entries) {
    os << "  " << (e.passed ? "PASS " : "FAIL ") << e.name << "  max rel err " << e.max_rel_error << "  ("
       << e.checked << "/" << e.total << " elements)";
    if (!e.passed) os << "  worst [" << e.worst_index << "] analytic " << e.worst_analytic << " numeric " << e.worst_numeric;
    os << "\n";
  }
  os << (passed() ? "PASS" : "FAIL") << "  overall max rel err " << max_rel_error() << "\n";
  return os.str();
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-12});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const Objective& objective, const std::vector<Parameter<double>*>& params,
                           const GradCheckOptions& options) {
  GradCheckReport report;
  report.tolerance = options.tolerance;
  report.step = options.step;
  report.seed = options.seed;

  for (auto* p : params) p->zero_grad();
  {
    Tape<double> tape;
    Var<double> loss = objective(tape);
    tape.backward(loss);
  }

  auto evaluate = [&]() {
    Tape<double> tape;
    NoGradGuard<double> guard(tape);
    return objective(tape).value().item();
  };

  Rng rng(options.seed);
  for (auto* p : params) {
    GradCheckEntry entry;
    entry.name = p->name;
    entry.total = p->value.numel();
    std::vector<std::size_t> idx(entry.total);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (options.max_samples > 0 && idx.size() > options.max_samples) {
      rng.shuffle(idx);
      idx.resize(options.max_samples);
      std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) {
      const double orig = p->value[i];
      p->value[i] = orig + options.step;
      const double plus = evaluate();
      p->value[i] = orig - options.step;
      const double minus = evaluate();
      p->value[i] = orig;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double err = relative_error(p->grad[i], numeric);
      if (err > entry.max_rel_error || entry.checked == 0) {
        entry.max_rel_error = err;
        entry.worst_index = i;
        entry.worst_analytic = p->grad[i];
        entry.worst_numeric = numeric;
      }
      ++entry.checked;
    }
    entry.passed = entry.max_rel_error < options.tolerance;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace tsi
