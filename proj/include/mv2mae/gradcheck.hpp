#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mv2mae {

struct GradcheckEntry {
  std::string name;
  double rel_error = 0;
  double tolerance = 0;
  bool pass = false;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> primitives;
  /// Worst error per parameter group of the tiny pre-training model.
  std::vector<GradcheckEntry> model_groups;
  bool pass = false;
};

struct GradcheckOptions {
  std::uint64_t seed = 0;
  bool run_primitives = true;
  bool run_model = true;
  /// Defaults: 1e-6 / 1e-4 in double precision, 1e-2 for both in float.
  double primitive_tol = 0;
  double model_tol = 0;
};

/// Central finite differences against reverse mode for every primitive and for
/// the full pre-training loss of a tiny model (d_enc 16, depth 2, d_dec 8,
/// depth 1, N = 32, B = 1). T is float or double.
template <class T>
GradcheckReport run_gradcheck(const GradcheckOptions& opts = {});

/// ||a - b|| / max(||a||, ||b||, floor).
double gradient_error(const std::vector<double>& analytic, const std::vector<double>& numeric, double floor);

}  // namespace mv2mae
