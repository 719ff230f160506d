#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sate/tensor.hpp"

namespace sate {

struct GradCheckReport {
  double max_rel_error = 0.0;
  int64_t checked = 0;
  std::string worst;  // "tensor 1 elem 3: ad=? fd=?"
  bool passed(double tol) const { return max_rel_error <= tol; }
};

// Central-difference check of reverse-mode gradients.
// f must map the point tensors to a scalar and be deterministic (no dropout).
// Error metric per element: |ad - fd| / max(1, |ad|, |fd|).
GradCheckReport grad_check(const std::function<Tensor(std::vector<Tensor>&)>& f,
                           std::vector<Tensor> point, double h = 1e-3,
                           double tol = 1e-3);

}  // namespace sate
