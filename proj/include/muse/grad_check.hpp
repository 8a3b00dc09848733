#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>

#include "muse/tape.hpp"

namespace muse {

using ScalarFn = std::function<Var(Tape&, Var)>;
using ObjectiveFn = std::function<Var(Tape&)>;

namespace detail {

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / denom;
}

inline void require_step(double h) {
  if (!(h >= 1e-5 && h <= 1e-2)) throw ContractError("grad_check: step must lie in [1e-5, 1e-2]");
}

inline double eval_scalar(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  tape.set_grad_enabled(false);
  Var out = f(tape, tape.leaf(x));
  if (out.value().size() != 1) throw ContractError("grad_check: f must be scalar-valued");
  return out.value().item();
}

}  // namespace detail

/// Max over coordinates of |analytic − central difference| / max(1, |a|, |n|).
inline double grad_check(const ScalarFn& f, const Tensor& x, double h = 1e-3) {
  detail::require_step(h);
  Tape tape;
  Var leaf = tape.leaf(x, true);
  Var out = f(tape, leaf);
  if (out.value().size() != 1) throw ContractError("grad_check: f must be scalar-valued");
  backward_pass(tape, out);
  const Tensor analytic = leaf.grad();

  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = detail::eval_scalar(f, probe);
    probe[i] = orig - h;
    const double down = detail::eval_scalar(f, probe);
    probe[i] = orig;
    worst = std::max(worst, detail::relative_error(analytic[i], (up - down) / (2.0 * h)));
  }
  return worst;
}

/// Same measure over every coordinate of a set of parameters. `f` must build a
/// fresh graph on the tape it receives and bind parameters via Tape::param.
/// A positive `stride` visits only every stride-th coordinate per parameter.
inline double grad_check_parameters(const ObjectiveFn& f, std::span<Parameter* const> params, double h = 1e-3,
                                    std::size_t stride = 1) {
  detail::require_step(h);
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var out = f(tape);
    if (out.value().size() != 1) throw ContractError("grad_check: objective must be scalar-valued");
    backward_pass(tape, out);
  }
  auto eval = [&] {
    Tape tape;
    tape.set_grad_enabled(false);
    return f(tape).value().item();
  };
  double worst = 0.0;
  for (Parameter* p : params) {
    for (std::size_t i = 0; i < p->value.size(); i += std::max<std::size_t>(stride, 1)) {
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double up = eval();
      p->value[i] = orig - h;
      const double down = eval();
      p->value[i] = orig;
      worst = std::max(worst, detail::relative_error(p->grad[i], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

}  // namespace muse
