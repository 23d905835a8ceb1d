#pragma once

// Finite-difference verification of recorded gradients.

#include <cmath>
#include <functional>

#include "nerfmark/tensor.hpp"

namespace nerfmark {

// Compares the analytic gradient of a scalar-valued function against central
// differences, elementwise. Returns the maximum relative error with
// denominator max(|analytic|, |numeric|, 1e-6). Never throws for numeric
// disagreement; it just reports the number.
//
// `fn` must be deterministic and must route its arithmetic through the
// recorded ops so the tape sees it.
inline double gradient_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& input,
                             double eps = 1e-3) {
  Tensor x = input.clone();
  GradTape tape;
  tape.watch(x);
  const int node = x.node();
  Tensor loss = fn(x);
  auto grads = tape.backward(loss);
  const Tensor analytic = grads.at(node);

  double max_rel = 0.0;
  Tensor probe = input.clone();
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const float saved = probe[i];
    probe[i] = static_cast<float>(saved + eps);
    const double f_plus = fn(probe).item_f64();
    probe[i] = static_cast<float>(saved - eps);
    const double f_minus = fn(probe).item_f64();
    probe[i] = saved;
    const double numeric = (f_plus - f_minus) / (2.0 * eps);
    const double a = static_cast<double>(analytic[i]);
    const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
    max_rel = std::max(max_rel, std::fabs(a - numeric) / denom);
  }
  return max_rel;
}

}  // namespace nerfmark
