#pragma once

// Central finite-difference checks of every differentiable op, the lattice
// gradient and the three stage objectives, all in 64-bit arithmetic.

#include <cstdint>
#include <string>
#include <vector>

namespace tpkd {

struct GradCheckItem {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  int checked = 0;  // number of scalar entries compared
  bool passed() const { return max_rel_error <= tolerance; }
};

/// |a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from
/// turning rounding noise into large relative errors.
double relative_error(double analytic, double numeric, double floor = 1e-3);

std::vector<GradCheckItem> run_grad_checks(uint64_t seed);

std::string to_json_line(const GradCheckItem& item);

}  // namespace tpkd
