#pragma once

#include <functional>
#include <string>
#include <vector>

#include "apaseg/gradcheck.hpp"

namespace apaseg {

struct GradCheckCase {
  std::string name;
  GradCheckResult result;
  double seconds = 0.0;
};

struct GradCheckReport {
  double tolerance = 1e-4;
  std::vector<GradCheckCase> cases;
  double seconds = 0.0;

  bool passed() const;
  std::size_t failures() const;
};

/// Finite-difference checks, in double precision with spatial extents of at
/// most 4, for every kernel op, the projection ops, the encoder, decoder and
/// fusion blocks of every variant and the training losses. `on_case` is
/// called after each case finishes.
GradCheckReport run_gradcheck_suite(double tolerance = 1e-4,
                                    const std::function<void(const GradCheckCase&)>& on_case = {});

/// "PASS name max_rel_err=..." style line for one case.
std::string format_case(const GradCheckCase& c, double tolerance);

}  // namespace apaseg
