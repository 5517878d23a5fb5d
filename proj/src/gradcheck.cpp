#include "cmcrl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cmcrl/rng.hpp"

namespace cmcrl {

GradcheckReport gradcheck(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                          const GradcheckOptions& opt) {
  if (opt.eps <= 0.0) throw ContractError("gradcheck: eps must be positive");

  for (const Tensor& p : params) const_cast<Tensor&>(p).zero_grad();
  Tensor loss = f();
  if (loss.numel() != 1) {
    throw ContractError("gradcheck: f must produce a scalar, got " + shape_str(loss.shape()));
  }
  if (!std::isfinite(loss.item())) {
    throw NumericalError("gradcheck: f(x) is not finite");
  }
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params) analytic.push_back(p.grad().to_vector());

  auto eval = [&]() {
    NoGradGuard guard;
    double v = f().item();
    if (!std::isfinite(v)) throw NumericalError("gradcheck: perturbed f(x) is not finite");
    return v;
  };

  GradcheckReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    int64_t n = p.numel();
    std::vector<int64_t> coords(static_cast<size_t>(n));
    std::iota(coords.begin(), coords.end(), int64_t{0});
    if (opt.max_coords_per_param >= 0 && n > opt.max_coords_per_param) {
      Rng rng(Rng::derive(opt.subsample_seed, 0, static_cast<uint64_t>(pi)));
      rng.shuffle(coords);
      coords.resize(static_cast<size_t>(opt.max_coords_per_param));
      std::sort(coords.begin(), coords.end());
    }
    for (int64_t i : coords) {
      if (opt.kink_distance) {
        double d = opt.kink_distance(pi, i);
        if (d >= 0.0 && d < 10.0 * opt.eps) {
          ++report.skipped;
          continue;
        }
      }
      double x0 = p.value_at(i);
      double a = analytic[pi][static_cast<size_t>(i)];
      auto rel_at = [&](double eps) {
        p.set_value_at(i, x0 + eps);
        double f_plus = eval();
        p.set_value_at(i, x0 - eps);
        double f_minus = eval();
        p.set_value_at(i, x0);
        double numeric = (f_plus - f_minus) / (2.0 * eps);
        return std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      };
      double rel = rel_at(opt.eps);
      if (rel > opt.retry_threshold && opt.retry_shrink > 1.0) {
        // A difference quotient that straddles a kink (or sits in a high-
        // curvature region) improves as eps shrinks; a wrong analytic
        // gradient does not. Keep the better of the two measurements.
        rel = std::min(rel, rel_at(opt.eps / opt.retry_shrink));
      }
      report.max_rel_err = std::max(report.max_rel_err, rel);
      ++report.compared;
    }
  }
  return report;
}

}  // namespace cmcrl
