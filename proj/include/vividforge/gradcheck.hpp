#pragma once

#include <functional>
#include <vector>

#include "vividforge/graph.hpp"

namespace vividforge {

// Builds a scalar loss node from leaves that are already in the graph, in the
// order the leaves were passed to check_gradients.
using LossBuilder = std::function<int(Graph&, const std::vector<int>&)>;

struct GradCheckReport {
  bool pass = true;
  double worst_rel_err = 0.0;
  int worst_input = -1;
  int64_t worst_element = -1;
  int64_t evaluations = 0;  // forward passes spent on finite differences
};

// Central finite differences against the analytic backward pass, elementwise:
//   rel_err = |analytic - numeric| / max(1, |analytic|, |numeric|)
// Fails if any element exceeds tol. All arithmetic is double precision.
GradCheckReport check_gradients(const LossBuilder& build,
                                const std::vector<Tensor>& inputs,
                                double eps = 1e-5, double tol = 1e-4);

}  // namespace vividforge
