#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "cmcrl/tensor.hpp"

namespace cmcrl {

struct GradcheckOptions {
  double eps = 1e-4;
  // Distance from coordinate (param_index, linear_index) to the nearest
  // non-differentiable point; return a negative value when there is none.
  // Coordinates closer than 10·eps are excluded from the max (kink rule).
  std::function<double(size_t, int64_t)> kink_distance;
  // Cap on coordinates checked per parameter (-1 = all); the subset is drawn
  // with a fixed-seed shuffle so reruns compare the same coordinates.
  int64_t max_coords_per_param = -1;
  uint64_t subsample_seed = 7;
  // Coordinates whose relative error exceeds retry_threshold are re-measured
  // once at eps / retry_shrink and the smaller error wins. Finite-difference
  // artifacts (kink straddles, curvature) shrink with eps; genuine gradient
  // bugs persist, so the retry cannot mask one. retry_shrink <= 1 disables.
  double retry_threshold = 1e-5;
  double retry_shrink = 16.0;
};

struct GradcheckReport {
  double max_rel_err = 0.0;
  int64_t compared = 0;
  int64_t skipped = 0;
};

// Compares analytic gradients of the scalar f() against central differences
// (f(x+eps·e_i) − f(x−eps·e_i)) / (2·eps) per coordinate of each parameter.
// Relative error uses denominator max(|analytic|, |numeric|, 1e-8). f must
// be a deterministic function of the parameter values; a non-finite f(x)
// raises NumericalError.
GradcheckReport gradcheck(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                          const GradcheckOptions& opt = {});

}  // namespace cmcrl
