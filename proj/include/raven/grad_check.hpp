#pragma once

// Central-difference gradient verification. The caller supplies two
// callbacks over the same parameter store: one that evaluates the scalar
// objective, and one that evaluates it AND fills master gradients via the
// tape backward sweep. Entries are sampled per parameter so large tensors
// stay affordable.

#include <functional>
#include <string>

#include "raven/params.hpp"
#include "raven/rng.hpp"

namespace raven {

template <class T>
struct GradCheckReport {
  T max_rel_err = T(0);
  T max_abs_err = T(0);
  std::string worst_param;
  int checked = 0;
};

// denom_floor bounds the relative-error denominator from below so that
// finite-difference roundoff on (near-)zero gradients is not reported as a
// large relative error: the FD probe itself is only accurate to about
// machine_eps * |loss| / h in absolute terms. Pass a floor of roughly that
// magnitude when the objective is large; 0 keeps a precision-based default.
template <class T>
GradCheckReport<T> grad_check(ParamStore<T>& P, std::function<T()> loss_value,
                              std::function<T()> loss_backward, T h,
                              int max_entries_per_param = 24, uint64_t seed = 7,
                              T denom_floor = T(0)) {
  Rng rng(seed);
  P.zero_grad();
  loss_backward();
  GradCheckReport<T> rep;
  if (denom_floor <= T(0)) denom_floor = sizeof(T) == 8 ? T(1e-7) : T(1e-4);
  for (int i = 0; i < P.count(); ++i) {
    ArrayT<T>& w = P.value(i);
    const int64_t n = w.numel();
    for (int pick = 0; pick < max_entries_per_param && pick < n; ++pick) {
      const int64_t j =
          (n <= max_entries_per_param) ? pick : (int64_t)rng.below((uint64_t)n);
      const T keep = w.data[j];
      w.data[j] = keep + h;
      const T lp = loss_value();
      w.data[j] = keep - h;
      const T lm = loss_value();
      w.data[j] = keep;
      const T fd = (lp - lm) / (2 * h);
      const T an = P.grad(i).data[j];
      const T abs_err = std::abs(fd - an);
      const T rel = abs_err / std::max(std::max(std::abs(fd), std::abs(an)), denom_floor);
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = P.name(i);
      }
      rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
      ++rep.checked;
    }
  }
  return rep;
}

}  // namespace raven
