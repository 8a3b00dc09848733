#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "muse/nn.hpp"

namespace muse {

/// BIO tag inventory. Id 0 is O; each entity type T contributes B-T then I-T.
class LabelScheme {
 public:
  LabelScheme() = default;
  explicit LabelScheme(std::vector<std::string> names) : names_(std::move(names)) { validate(); }

  static LabelScheme bio(const std::vector<std::string>& types) {
    std::vector<std::string> names{"O"};
    for (const auto& t : types) {
      names.push_back("B-" + t);
      names.push_back("I-" + t);
    }
    return LabelScheme(std::move(names));
  }

  std::size_t size() const noexcept { return names_.size(); }
  const std::string& name(std::size_t id) const { return names_.at(id); }
  const std::vector<std::string>& names() const noexcept { return names_; }

  bool is_begin(int id) const { return prefix(id) == 'B'; }
  bool is_inside(int id) const { return prefix(id) == 'I'; }
  bool is_outside(int id) const { return prefix(id) == 'O'; }
  std::string type_of(int id) const {
    const std::string& n = names_.at(static_cast<std::size_t>(id));
    return n.size() > 2 ? n.substr(2) : std::string{};
  }

  /// No I-T without a preceding B-T or I-T.
  bool is_valid_sequence(std::span<const int> labels) const {
    int prev = -1;
    for (int id : labels) {
      if (is_inside(id) && (prev < 0 || is_outside(prev) || type_of(prev) != type_of(id))) return false;
      prev = id;
    }
    return true;
  }

 private:
  char prefix(int id) const {
    const std::string& n = names_.at(static_cast<std::size_t>(id));
    return n.empty() ? 'O' : n[0];
  }

  void validate() const {
    for (const auto& n : names_) {
      if (n.rfind("I-", 0) == 0 &&
          std::find(names_.begin(), names_.end(), "B-" + n.substr(2)) == names_.end()) {
        throw ConfigError("label scheme: " + n + " has no matching B- tag");
      }
    }
  }

  std::vector<std::string> names_;
};

struct CrfParams {
  Parameter* transitions = nullptr;  // L × L, [i][j] scores label j after label i
  Parameter* start = nullptr;        // L
  Parameter* end = nullptr;          // L

  std::size_t labels() const { return start->value.size(); }

  static CrfParams create(ParameterStore& store, std::size_t labels) {
    return {&store.add("crf.transitions", Tensor(Shape{labels, labels}), ParamGroup::crf),
            &store.add("crf.start", Tensor(Shape{labels}), ParamGroup::crf),
            &store.add("crf.end", Tensor(Shape{labels}), ParamGroup::crf)};
  }
};

namespace detail {

inline double log_sum_exp(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

inline void require_crf_shapes(const Tensor& emissions, const Tensor& trans, const Tensor& start, const Tensor& end) {
  const std::size_t l = emissions.cols();
  if (trans.rows() != l || trans.cols() != l || start.size() != l || end.size() != l) {
    throw ShapeError("crf: parameters do not match " + std::to_string(l) + " labels");
  }
}

}  // namespace detail

/// Unnormalized score of one label path.
inline double crf_path_score(const Tensor& emissions, std::span<const int> labels, const Tensor& trans,
                             const Tensor& start, const Tensor& end) {
  const std::size_t n = labels.size();
  const std::size_t l = emissions.cols();
  double s = start[static_cast<std::size_t>(labels[0])] + end[static_cast<std::size_t>(labels[n - 1])];
  for (std::size_t t = 0; t < n; ++t) {
    s += emissions.at(t, static_cast<std::size_t>(labels[t]));
    if (t > 0) s += trans[static_cast<std::size_t>(labels[t - 1]) * l + static_cast<std::size_t>(labels[t])];
  }
  return s;
}

/// Forward-algorithm log partition.
inline double crf_log_partition(const Tensor& emissions, const Tensor& trans, const Tensor& start,
                                const Tensor& end) {
  detail::require_crf_shapes(emissions, trans, start, end);
  const std::size_t n = emissions.rows(), l = emissions.cols();
  std::vector<double> alpha(l), next(l), buf(l);
  for (std::size_t j = 0; j < l; ++j) alpha[j] = start[j] + emissions.at(0, j);
  for (std::size_t t = 1; t < n; ++t) {
    for (std::size_t j = 0; j < l; ++j) {
      for (std::size_t i = 0; i < l; ++i) buf[i] = alpha[i] + trans[i * l + j];
      next[j] = detail::log_sum_exp(buf) + emissions.at(t, j);
    }
    std::swap(alpha, next);
  }
  for (std::size_t j = 0; j < l; ++j) alpha[j] += end[j];
  return detail::log_sum_exp(alpha);
}

/// Negative log-likelihood of the gold path: logZ − score(labels). The
/// backward pass uses forward-backward marginals.
inline Var crf_log_likelihood(Var emissions, std::span<const int> labels, Var transitions, Var start, Var end) {
  const Tensor& e = emissions.value();
  const Tensor& tr = transitions.value();
  const Tensor& st = start.value();
  const Tensor& en = end.value();
  detail::require_crf_shapes(e, tr, st, en);
  const std::size_t n = e.rows(), l = e.cols();
  if (n == 0) throw ContractError("crf_log_likelihood: empty sequence");
  if (labels.size() != n) throw ShapeError("crf_log_likelihood: label count differs from emission rows");
  std::vector<int> gold(labels.begin(), labels.end());
  for (int y : gold) {
    if (y < 0 || static_cast<std::size_t>(y) >= l) {
      throw IndexError("crf_log_likelihood: label " + std::to_string(y) + " outside [0, " + std::to_string(l) + ")");
    }
  }

  std::vector<double> alpha(n * l), beta(n * l), buf(l);
  for (std::size_t j = 0; j < l; ++j) alpha[j] = st[j] + e.at(0, j);
  for (std::size_t t = 1; t < n; ++t) {
    for (std::size_t j = 0; j < l; ++j) {
      for (std::size_t i = 0; i < l; ++i) buf[i] = alpha[(t - 1) * l + i] + tr[i * l + j];
      alpha[t * l + j] = detail::log_sum_exp(buf) + e.at(t, j);
    }
  }
  for (std::size_t j = 0; j < l; ++j) beta[(n - 1) * l + j] = en[j];
  for (std::size_t t = n - 1; t-- > 0;) {
    for (std::size_t i = 0; i < l; ++i) {
      for (std::size_t j = 0; j < l; ++j) buf[j] = tr[i * l + j] + e.at(t + 1, j) + beta[(t + 1) * l + j];
      beta[t * l + i] = detail::log_sum_exp(buf);
    }
  }
  for (std::size_t j = 0; j < l; ++j) buf[j] = alpha[(n - 1) * l + j] + en[j];
  const double log_z = detail::log_sum_exp(buf);
  const double loss = log_z - crf_path_score(e, gold, tr, st, en);

  // Unary and pairwise marginals.
  Tensor unary(Shape{n, l});
  Tensor pair(Shape{l, l});
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t j = 0; j < l; ++j) unary.at(t, j) = std::exp(alpha[t * l + j] + beta[t * l + j] - log_z);
  }
  for (std::size_t t = 1; t < n; ++t) {
    for (std::size_t i = 0; i < l; ++i) {
      for (std::size_t j = 0; j < l; ++j) {
        pair.at(i, j) += std::exp(alpha[(t - 1) * l + i] + tr[i * l + j] + e.at(t, j) + beta[t * l + j] - log_z);
      }
    }
  }

  const std::size_t ie = emissions.id(), it = transitions.id(), is = start.id(), ien = end.id();
  return emissions.tape().record(
      "crf_nll", Tensor::scalar(loss), {emissions, transitions, start, end},
      [ie, it, is, ien, n, l, gold = std::move(gold), unary = std::move(unary), pair = std::move(pair)](
          Tape& t, std::size_t self) {
        const double g = t.grad(self).item();
        if (Tensor* ge = t.grad_sink(ie)) {
          for (std::size_t k = 0; k < n; ++k) {
            for (std::size_t j = 0; j < l; ++j) ge->at(k, j) += g * unary.at(k, j);
            ge->at(k, static_cast<std::size_t>(gold[k])) -= g;
          }
        }
        if (Tensor* gt = t.grad_sink(it)) {
          for (std::size_t k = 0; k < l * l; ++k) (*gt)[k] += g * pair[k];
          for (std::size_t k = 1; k < n; ++k) {
            (*gt)[static_cast<std::size_t>(gold[k - 1]) * l + static_cast<std::size_t>(gold[k])] -= g;
          }
        }
        if (Tensor* gs = t.grad_sink(is)) {
          for (std::size_t j = 0; j < l; ++j) (*gs)[j] += g * unary.at(0, j);
          (*gs)[static_cast<std::size_t>(gold[0])] -= g;
        }
        if (Tensor* gn = t.grad_sink(ien)) {
          for (std::size_t j = 0; j < l; ++j) (*gn)[j] += g * unary.at(n - 1, j);
          (*gn)[static_cast<std::size_t>(gold[n - 1])] -= g;
        }
      });
}

inline Var crf_log_likelihood(Tape& tape, Var emissions, std::span<const int> labels, const CrfParams& crf) {
  return crf_log_likelihood(emissions, labels, tape.param(*crf.transitions), tape.param(*crf.start),
                            tape.param(*crf.end));
}

/// Highest-scoring label path. Ties resolve to the lower label id, both for
/// the final label and at every backpointer.
inline std::vector<int> crf_viterbi_decode(const Tensor& emissions, const Tensor& trans, const Tensor& start,
                                           const Tensor& end) {
  detail::require_crf_shapes(emissions, trans, start, end);
  const std::size_t n = emissions.rows(), l = emissions.cols();
  if (n == 0) return {};
  std::vector<double> score(l), next(l);
  std::vector<int> back(n * l, 0);
  for (std::size_t j = 0; j < l; ++j) score[j] = start[j] + emissions.at(0, j);
  for (std::size_t t = 1; t < n; ++t) {
    for (std::size_t j = 0; j < l; ++j) {
      double best = -std::numeric_limits<double>::infinity();
      int arg = 0;
      for (std::size_t i = 0; i < l; ++i) {
        const double s = score[i] + trans[i * l + j];
        if (s > best) {
          best = s;
          arg = static_cast<int>(i);
        }
      }
      next[j] = best + emissions.at(t, j);
      back[t * l + j] = arg;
    }
    std::swap(score, next);
  }
  int last = 0;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < l; ++j) {
    if (score[j] + end[j] > best) {
      best = score[j] + end[j];
      last = static_cast<int>(j);
    }
  }
  std::vector<int> path(n);
  path[n - 1] = last;
  for (std::size_t t = n - 1; t > 0; --t) path[t - 1] = back[t * l + static_cast<std::size_t>(path[t])];
  return path;
}

inline std::vector<int> crf_viterbi_decode(const Tensor& emissions, const CrfParams& crf) {
  return crf_viterbi_decode(emissions, crf.transitions->value, crf.start->value, crf.end->value);
}

/// One affine map on the dropped-out cls row of the fusion embedding.
inline Var classify_sentiment(Tape& tape, Var fusion, const Linear& head, double dropout_rate, bool training,
                              Rng* rng) {
  Var cls = slice_rows(fusion, 0, 1);
  return head(tape, dropout_mask(cls, dropout_rate, training, rng));
}

}  // namespace muse
