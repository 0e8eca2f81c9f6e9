#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace modsquad {

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-6;
  double w_mi = 0.1;
  std::uint64_t seed = 3;
  // Test hook: perturbs the analytic gradient of one parameter group.
  bool inject_fault = false;
};

struct GradCheckEntry {
  std::string name;
  std::size_t size = 0;
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
  // ||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||, 1e-8)
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double worst = 0.0;
  std::string worst_name;
  bool passed = false;
};

// Central-difference check of the full training loss (task losses with
// log-variance weights plus the MI term) on a 2-task, 2-expert, 1-block model.
GradCheckReport grad_check(const GradCheckOptions& options = {});

}  // namespace modsquad
