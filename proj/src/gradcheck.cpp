#include "sate/gradcheck.hpp"

#include <cmath>
#include <sstream>

namespace sate {

GradCheckReport grad_check(const std::function<Tensor(std::vector<Tensor>&)>& f,
                           std::vector<Tensor> point, double h, double tol) {
  (void)tol;
  for (Tensor& p : point) p.set_requires_grad(true);

  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = f(point);
    if (loss.size() != 1) throw ContractError("grad_check: f must return a scalar");
    tape.backward(loss);
  }

  std::vector<std::vector<float>> analytic;
  analytic.reserve(point.size());
  for (Tensor& p : point)
    analytic.push_back(p.has_grad() ? p.grad() : std::vector<float>(static_cast<size_t>(p.size()), 0.0f));

  GradCheckReport report;
  for (size_t ti = 0; ti < point.size(); ++ti) {
    Tensor& p = point[ti];
    for (int64_t i = 0; i < p.size(); ++i) {
      const float orig = p.data()[i];
      p.data()[i] = static_cast<float>(orig + h);
      const double fp = f(point).item();
      p.data()[i] = static_cast<float>(orig - h);
      const double fm = f(point).item();
      p.data()[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double ad = analytic[ti][static_cast<size_t>(i)];
      const double denom = std::max({1.0, std::abs(ad), std::abs(fd)});
      const double rel = std::abs(ad - fd) / denom;
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        std::ostringstream os;
        os << "tensor " << ti << " elem " << i << ": ad=" << ad << " fd=" << fd;
        report.worst = os.str();
      }
    }
  }
  return report;
}

}  // namespace sate
