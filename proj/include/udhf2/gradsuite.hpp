#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace udhf2 {

struct GradSuiteEntry {
  std::string name;
  int instances = 0;
  int passed = 0;
  double worst_rel_error = 0.0;
  std::int64_t checked = 0;
};

/// Finite-difference checks (float64, h = 1e-4, relative tolerance 1e-4) of
/// every learnable operation and loss on `instances` random small cases each.
std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed, int instances);

}  // namespace udhf2
