#pragma once

#include <cmath>
#include <functional>

#include "vitad/autodiff.hpp"

namespace vitad {

struct GradCheckResult {
  double max_rel_error = 0;
  double max_abs_error = 0;
  std::size_t worst_index = 0;
};

/// Compares the tape gradient of a scalar function against central finite
/// differences at `x`. Relative error is |a - n| / (|n| + floor); raise the floor
/// when near-zero components should not dominate.
template <typename T>
GradCheckResult grad_check(const std::function<Var<T>(Tape<T>&, Var<T>)>& f, const Tensor<T>& x,
                           T h = T(1e-6), double floor = 1e-12) {
  Tape<T> tape;
  Var<T> in = tape.input(x);
  Var<T> out = f(tape, in);
  if (out.value().numel() != 1)
    throw ContractError("grad_check: function must return a scalar, got shape " + shape_str(out.value().shape()));
  tape.backward(out);
  const Tensor<T>* g = tape.grad(in);
  const Tensor<T> analytic = g ? *g : Tensor<T>::zeros(x.shape());

  auto eval = [&](const Tensor<T>& at) {
    Tape<T> t(false);
    return static_cast<double>(f(t, t.constant(at)).value().item());
  };
  GradCheckResult res;
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + h;
    const double up = eval(probe);
    probe[i] = orig - h;
    const double down = eval(probe);
    probe[i] = orig;
    const double numeric = (up - down) / (2 * static_cast<double>(h));
    const double abs_err = std::abs(static_cast<double>(analytic[i]) - numeric);
    const double rel = abs_err / (std::abs(numeric) + floor);
    res.max_abs_error = std::max(res.max_abs_error, abs_err);
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_index = i;
    }
  }
  return res;
}

}  // namespace vitad
