#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "muse/tape.hpp"
#include "muse/tensor.hpp"

namespace muse {

namespace kernel {

// C[m×p] (+)= A[m×k] · B[k×p]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * p;
    const double* ai = a + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = ai[l];
      if (av == 0.0) continue;
      const double* bl = b + l * p;
      for (std::size_t j = 0; j < p; ++j) ci[j] += av * bl[j];
    }
  }
}

// C[m×p] (+)= A[m×k] · B[p×k]ᵀ
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < p; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t l = 0; l < k; ++l) s += ai[l] * bj[l];
      c[i * p + j] += s;
    }
  }
}

// C[m×p] (+)= A[k×m]ᵀ · B[k×p]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t k, std::size_t m,
                    std::size_t p) {
  for (std::size_t l = 0; l < k; ++l) {
    const double* al = a + l * m;
    const double* bl = b + l * p;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = al[i];
      if (av == 0.0) continue;
      double* ci = c + i * p;
      for (std::size_t j = 0; j < p; ++j) ci[j] += av * bl[j];
    }
  }
}

}  // namespace kernel

namespace detail {

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

inline void require_same_tape(const Var& a, const Var& b, const char* op) {
  if (&a.tape() != &b.tape()) throw ContractError(std::string(op) + ": operands on different tapes");
}

inline void axpy(std::span<double> dst, std::span<const double> src, double scale = 1.0) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::require_same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_matrix(av, "matmul");
  detail::require_matrix(bv, "matmul");
  const std::size_t m = av.rows(), k = av.cols(), p = bv.cols();
  if (bv.rows() != k) {
    throw ShapeError("matmul: dimension mismatch " + shape_str(av.shape()) + " · " + shape_str(bv.shape()));
  }
  Tensor out(Shape{m, p});
  kernel::gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, p);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("matmul", std::move(out), {a, b}, [ia, ib, m, k, p](Tape& t, std::size_t self) {
    const double* g = t.grad(self).data().data();
    if (Tensor* ga = t.grad_sink(ia)) kernel::gemm_nt(g, t.value(ib).data().data(), ga->data().data(), m, p, k);
    if (Tensor* gb = t.grad_sink(ib)) kernel::gemm_tn(t.value(ia).data().data(), g, gb->data().data(), m, k, p);
  });
}

/// a · bᵀ without materializing the transpose.
inline Var matmul_nt(Var a, Var b) {
  detail::require_same_tape(a, b, "matmul_nt");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_matrix(av, "matmul_nt");
  detail::require_matrix(bv, "matmul_nt");
  const std::size_t m = av.rows(), k = av.cols(), p = bv.rows();
  if (bv.cols() != k) {
    throw ShapeError("matmul_nt: dimension mismatch " + shape_str(av.shape()) + " · " +
                     shape_str(bv.shape()) + "ᵀ");
  }
  Tensor out(Shape{m, p});
  kernel::gemm_nt(av.data().data(), bv.data().data(), out.data().data(), m, k, p);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("matmul_nt", std::move(out), {a, b}, [ia, ib, m, k, p](Tape& t, std::size_t self) {
    const double* g = t.grad(self).data().data();
    if (Tensor* ga = t.grad_sink(ia)) kernel::gemm_nn(g, t.value(ib).data().data(), ga->data().data(), m, p, k);
    if (Tensor* gb = t.grad_sink(ib)) kernel::gemm_tn(g, t.value(ia).data().data(), gb->data().data(), m, p, k);
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_tape(a, b, "add");
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out = a.value();
  detail::axpy(out.data(), b.value().data());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("add", std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const auto g = t.grad(self).data();
    if (Tensor* ga = t.grad_sink(ia)) detail::axpy(ga->data(), g);
    if (Tensor* gb = t.grad_sink(ib)) detail::axpy(gb->data(), g);
  });
}

/// x[m×d] + b[d] broadcast over rows.
inline Var add_bias(Var x, Var b) {
  detail::require_same_tape(x, b, "add_bias");
  const std::size_t m = x.rows(), d = x.cols();
  if (b.value().size() != d) {
    throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " does not fit " + shape_str(x.shape()));
  }
  Tensor out = x.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < m; ++i) detail::axpy(out.row(i), bv);
  const std::size_t ix = x.id(), ib = b.id();
  return x.tape().record("add_bias", std::move(out), {x, b}, [ix, ib, m](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (Tensor* gx = t.grad_sink(ix)) detail::axpy(gx->data(), g.data());
    if (Tensor* gb = t.grad_sink(ib)) {
      for (std::size_t i = 0; i < m; ++i) detail::axpy(gb->data(), g.row(i));
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  const std::size_t ia = a.id();
  return a.tape().record("scale", std::move(out), {a}, [ia, s](Tape& t, std::size_t self) {
    if (Tensor* ga = t.grad_sink(ia)) detail::axpy(ga->data(), t.grad(self).data(), s);
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same_tape(a, b, "mul");
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out = a.value();
  const auto bv = b.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("mul", std::move(out), {a, b}, [ia, ib](Tape& t, std::size_t self) {
    const auto g = t.grad(self).data();
    if (Tensor* ga = t.grad_sink(ia)) {
      const auto bv2 = t.value(ib).data();
      auto gd = ga->data();
      for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += g[i] * bv2[i];
    }
    if (Tensor* gb = t.grad_sink(ib)) {
      const auto av2 = t.value(ia).data();
      auto gd = gb->data();
      for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += g[i] * av2[i];
    }
  });
}

/// Gaussian error linear unit, exact erf form.
inline Var gelu(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  const std::size_t ia = a.id();
  return a.tape().record("gelu", std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    Tensor* ga = t.grad_sink(ia);
    if (!ga) return;
    const auto x = t.value(ia).data();
    const auto g = t.grad(self).data();
    auto gd = ga->data();
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    for (std::size_t i = 0; i < gd.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(x[i] * M_SQRT1_2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
      gd[i] += g[i] * (cdf + x[i] * pdf);
    }
  });
}

/// Row-wise softmax with max subtraction.
inline Var softmax_rows(Var x) {
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const auto in = xv.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  const std::size_t ix = x.id();
  return x.tape().record("softmax_rows", std::move(out), {x}, [ix, m, n](Tape& t, std::size_t self) {
    Tensor* gx = t.grad_sink(ix);
    if (!gx) return;
    const Tensor& y = t.value(self);
    const Tensor& g = t.grad(self);
    for (std::size_t i = 0; i < m; ++i) {
      const auto yi = y.row(i);
      const auto gi = g.row(i);
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += yi[j] * gi[j];
      auto gxi = gx->row(i);
      for (std::size_t j = 0; j < n; ++j) gxi[j] += yi[j] * (gi[j] - dot);
    }
  });
}

/// Per-row normalization with population variance, then γ scale and β shift.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), d = xv.cols();
  if (gamma.value().size() != d || beta.value().size() != d) {
    throw ShapeError("layer_norm: affine parameters do not match width " + std::to_string(d));
  }
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<double> rstd(m);
  const auto gv = gamma.value().data();
  const auto bv = beta.value().data();
  for (std::size_t i = 0; i < m; ++i) {
    const auto xi = xv.row(i);
    double mean = 0.0;
    for (double v : xi) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : xi) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    auto hi = xhat.row(i);
    auto oi = out.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      hi[j] = (xi[j] - mean) * rstd[i];
      oi[j] = gv[j] * hi[j] + bv[j];
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      "layer_norm", std::move(out), {x, gamma, beta},
      [ix, ig, ib, m, d, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (Tensor* gg = t.grad_sink(ig)) {
          for (std::size_t i = 0; i < m; ++i) {
            const auto gi = g.row(i);
            const auto hi = xhat.row(i);
            auto dst = gg->data();
            for (std::size_t j = 0; j < d; ++j) dst[j] += gi[j] * hi[j];
          }
        }
        if (Tensor* gb = t.grad_sink(ib)) {
          for (std::size_t i = 0; i < m; ++i) detail::axpy(gb->data(), g.row(i));
        }
        if (Tensor* gx = t.grad_sink(ix)) {
          const auto gam = t.value(ig).data();
          std::vector<double> gh(d);
          for (std::size_t i = 0; i < m; ++i) {
            const auto gi = g.row(i);
            const auto hi = xhat.row(i);
            double mean_gh = 0.0, mean_ghx = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              gh[j] = gi[j] * gam[j];
              mean_gh += gh[j];
              mean_ghx += gh[j] * hi[j];
            }
            mean_gh /= static_cast<double>(d);
            mean_ghx /= static_cast<double>(d);
            auto gxi = gx->row(i);
            for (std::size_t j = 0; j < d; ++j) gxi[j] += rstd[i] * (gh[j] - mean_gh - hi[j] * mean_ghx);
          }
        }
      });
}

/// Mean negative log-softmax of the target class over unmasked rows. With
/// every row masked the loss is 0 and no gradient flows.
inline Var cross_entropy_logits(Var logits, std::span<const int> targets,
                                std::optional<std::vector<bool>> mask = std::nullopt) {
  const Tensor& lv = logits.value();
  const std::size_t m = lv.rows(), c = lv.cols();
  if (targets.size() != m) {
    throw ShapeError("cross_entropy_logits: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(m) + " rows");
  }
  if (mask && mask->size() != m) throw ShapeError("cross_entropy_logits: mask length mismatch");
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<char> active(m, 1);
  std::size_t count = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (mask && !(*mask)[i]) active[i] = 0;
    if (tgt[i] < 0 || static_cast<std::size_t>(tgt[i]) >= c) {
      throw IndexError("cross_entropy_logits: target " + std::to_string(tgt[i]) + " outside [0, " +
                       std::to_string(c) + ")");
    }
    count += active[i];
  }
  Tensor probs(lv.shape());
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const auto row = lv.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    auto pi = probs.row(i);
    for (std::size_t j = 0; j < c; ++j) z += (pi[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) pi[j] /= z;
    if (active[i]) loss += mx + std::log(z) - row[static_cast<std::size_t>(tgt[i])];
  }
  if (count > 0) loss /= static_cast<double>(count);
  const std::size_t il = logits.id();
  return logits.tape().record(
      "cross_entropy", Tensor::scalar(loss), {logits},
      [il, m, c, count, tgt = std::move(tgt), active = std::move(active), probs = std::move(probs)](
          Tape& t, std::size_t self) {
        Tensor* gl = t.grad_sink(il);
        if (!gl || count == 0) return;
        const double g = t.grad(self).item() / static_cast<double>(count);
        for (std::size_t i = 0; i < m; ++i) {
          if (!active[i]) continue;
          const auto pi = probs.row(i);
          auto gi = gl->row(i);
          for (std::size_t j = 0; j < c; ++j) gi[j] += g * pi[j];
          gi[static_cast<std::size_t>(tgt[i])] -= g;
        }
      });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  return a.tape().record("sum", Tensor::scalar(s), {a}, [ia](Tape& t, std::size_t self) {
    if (Tensor* ga = t.grad_sink(ia)) {
      const double g = t.grad(self).item();
      for (double& v : ga->data()) v += g;
    }
  });
}

/// Σ w_k · s_k over scalar inputs.
inline Var weighted_sum(const std::vector<Var>& scalars, const std::vector<double>& weights) {
  if (scalars.empty() || scalars.size() != weights.size()) {
    throw ShapeError("weighted_sum: need one weight per input");
  }
  double s = 0.0;
  std::vector<std::size_t> ids;
  for (std::size_t k = 0; k < scalars.size(); ++k) {
    if (scalars[k].value().size() != 1) throw ShapeError("weighted_sum: inputs must be scalar");
    s += weights[k] * scalars[k].value().item();
    ids.push_back(scalars[k].id());
  }
  return scalars.front().tape().record_many(
      "weighted_sum", Tensor::scalar(s), scalars, [ids, weights](Tape& t, std::size_t self) {
        const double g = t.grad(self).item();
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (Tensor* gk = t.grad_sink(ids[k])) (*gk)[0] += weights[k] * g;
        }
      });
}

/// Rows of `table` selected by `ids`; the backward scatters into the table.
inline Var embedding_lookup(std::span<const int> ids, Var table) {
  const Tensor& tv = table.value();
  detail::require_matrix(tv, "embedding_lookup");
  const std::size_t vocab = tv.rows(), d = tv.cols();
  std::vector<int> idx(ids.begin(), ids.end());
  Tensor out(Shape{idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
      throw IndexError("embedding_lookup: id " + std::to_string(idx[i]) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
    const auto src = tv.row(static_cast<std::size_t>(idx[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  const std::size_t it = table.id();
  return table.tape().record("embedding_lookup", std::move(out), {table},
                             [it, idx = std::move(idx)](Tape& t, std::size_t self) {
                               Tensor* gt = t.grad_sink(it);
                               if (!gt) return;
                               const Tensor& g = t.grad(self);
                               for (std::size_t i = 0; i < idx.size(); ++i) {
                                 detail::axpy(gt->row(static_cast<std::size_t>(idx[i])), g.row(i));
                               }
                             });
}

/// [a; b] stacked vertically. A rank-1 operand counts as one row.
inline Var concat_rows(Var a, Var b) {
  detail::require_same_tape(a, b, "concat_rows");
  const std::size_t d = a.cols();
  if (b.cols() != d) {
    throw ShapeError("concat_rows: width mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t ma = a.value().rows(), mb = b.value().rows();
  std::vector<double> data;
  data.reserve((ma + mb) * d);
  data.insert(data.end(), a.value().data().begin(), a.value().data().end());
  data.insert(data.end(), b.value().data().begin(), b.value().data().end());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("concat_rows", Tensor(Shape{ma + mb, d}, std::move(data)), {a, b},
                         [ia, ib, ma, d](Tape& t, std::size_t self) {
                           const auto g = t.grad(self).data();
                           if (Tensor* ga = t.grad_sink(ia)) detail::axpy(ga->data(), g.subspan(0, ma * d));
                           if (Tensor* gb = t.grad_sink(ib)) detail::axpy(gb->data(), g.subspan(ma * d));
                         });
}

/// [p_0 | p_1 | ...] side by side; all parts share the row count.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::vector<std::size_t> widths, ids;
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.rows() != m) throw ShapeError("concat_cols: row-count mismatch " + shape_str(parts.front().shape()) +
                                        " vs " + shape_str(p.shape()));
    widths.push_back(p.cols());
    ids.push_back(p.id());
    total += p.cols();
  }
  Tensor out(Shape{m, total});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t i = 0; i < m; ++i) std::copy(pv.row(i).begin(), pv.row(i).end(), out.row(i).begin() + off);
    off += p.cols();
  }
  return parts.front().tape().record_many(
      "concat_cols", std::move(out), parts, [ids, widths, m](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        std::size_t off2 = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (Tensor* gk = t.grad_sink(ids[k])) {
            for (std::size_t i = 0; i < m; ++i) detail::axpy(gk->row(i), g.row(i).subspan(off2, widths[k]));
          }
          off2 += widths[k];
        }
      });
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Tensor& av = a.value();
  const std::size_t d = av.cols();
  if (begin + count > av.rows()) {
    throw IndexError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") outside " + shape_str(av.shape()));
  }
  std::vector<double> data(av.data().begin() + static_cast<std::ptrdiff_t>(begin * d),
                           av.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * d));
  const std::size_t ia = a.id();
  return a.tape().record("slice_rows", Tensor(Shape{count, d}, std::move(data)), {a},
                         [ia, begin, d](Tape& t, std::size_t self) {
                           if (Tensor* ga = t.grad_sink(ia)) {
                             detail::axpy(ga->data().subspan(begin * d, t.grad(self).size()), t.grad(self).data());
                           }
                         });
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Tensor& av = a.value();
  const std::size_t m = av.rows();
  if (begin + count > av.cols()) {
    throw IndexError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") outside " + shape_str(av.shape()));
  }
  Tensor out(Shape{m, count});
  for (std::size_t i = 0; i < m; ++i) {
    const auto src = av.row(i).subspan(begin, count);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  const std::size_t ia = a.id();
  return a.tape().record("slice_cols", std::move(out), {a}, [ia, begin, count, m](Tape& t, std::size_t self) {
    Tensor* ga = t.grad_sink(ia);
    if (!ga) return;
    const Tensor& g = t.grad(self);
    for (std::size_t i = 0; i < m; ++i) detail::axpy(ga->row(i).subspan(begin, count), g.row(i));
  });
}

/// Column-wise mean, 1×d.
inline Var mean_rows(Var a) {
  const Tensor& av = a.value();
  const std::size_t m = av.rows(), d = av.cols();
  if (m == 0) throw ShapeError("mean_rows: no rows");
  Tensor out(Shape{1, d});
  for (std::size_t i = 0; i < m; ++i) detail::axpy(out.data(), av.row(i));
  for (double& v : out.data()) v /= static_cast<double>(m);
  const std::size_t ia = a.id();
  return a.tape().record("mean_rows", std::move(out), {a}, [ia, m](Tape& t, std::size_t self) {
    Tensor* ga = t.grad_sink(ia);
    if (!ga) return;
    const auto g = t.grad(self).data();
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i) detail::axpy(ga->row(i), g, inv);
  });
}

/// Copy of x with row vector v added to each listed row.
inline Var add_to_rows(Var x, const std::vector<std::size_t>& rows, Var v) {
  detail::require_same_tape(x, v, "add_to_rows");
  const std::size_t d = x.cols();
  if (v.value().size() != d) {
    throw ShapeError("add_to_rows: row vector " + shape_str(v.shape()) + " does not fit " + shape_str(x.shape()));
  }
  Tensor out = x.value();
  for (std::size_t r : rows) {
    if (r >= out.rows()) throw IndexError("add_to_rows: row " + std::to_string(r) + " out of range");
    detail::axpy(out.row(r), v.value().data());
  }
  const std::size_t ix = x.id(), iv = v.id();
  return x.tape().record("add_to_rows", std::move(out), {x, v}, [ix, iv, rows](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (Tensor* gx = t.grad_sink(ix)) detail::axpy(gx->data(), g.data());
    if (Tensor* gv = t.grad_sink(iv)) {
      for (std::size_t r : rows) detail::axpy(gv->data(), g.row(r));
    }
  });
}

inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return a.tape().record("reshape", std::move(out), {a}, [ia](Tape& t, std::size_t self) {
    if (Tensor* ga = t.grad_sink(ia)) detail::axpy(ga->data(), t.grad(self).data());
  });
}

/// x·W + b for x[m×in], W[in×out], b[out].
inline Var affine(Var x, Var w, Var b) { return add_bias(matmul(x, w), b); }

}  // namespace muse
