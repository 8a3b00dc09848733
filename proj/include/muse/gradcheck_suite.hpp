#pragma once

#include <chrono>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "muse/grad_check.hpp"
#include "muse/harness.hpp"

namespace muse {

struct GradcheckRow {
  std::string name;
  double max_error = 0.0;
  double tolerance = 1e-4;

  bool passed() const { return max_error < tolerance; }
};

struct GradcheckReport {
  std::vector<GradcheckRow> rows;
  double seconds = 0.0;

  bool all_passed() const {
    for (const auto& r : rows) {
      if (!r.passed()) return false;
    }
    return !rows.empty();
  }

  std::string table() const {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof line, "%-28s %14s %10s  %s\n", "op", "max_rel_error", "tolerance", "status");
    os << line;
    for (const auto& r : rows) {
      std::snprintf(line, sizeof line, "%-28s %14.3e %10.0e  %s\n", r.name.c_str(), r.max_error, r.tolerance,
                    r.passed() ? "ok" : "FAIL");
      os << line;
    }
    return os.str();
  }
};

namespace detail {

inline Tensor random_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
  return normal_init(std::move(shape), stddev, rng);
}

/// Contracts a non-scalar output against fixed random weights so every output
/// coordinate contributes a distinct gradient.
inline Var project(Tape& tape, Var y, const Tensor& weights) { return sum(mul(y, tape.constant(weights))); }

class SuiteBuilder {
 public:
  SuiteBuilder(double h, std::uint64_t seed) : h_(h), rng_(seed) {}

  Rng& rng() { return rng_; }

  /// Worst error over all inputs; `op` receives every input as a Var, with the
  /// checked one differentiable and the others constant.
  void op(const std::string& name, const std::vector<Tensor>& inputs,
          const std::function<Var(Tape&, const std::vector<Var>&)>& fn, double tolerance = 1e-4) {
    Tensor probe_out;
    {
      Tape tape;
      tape.set_grad_enabled(false);
      std::vector<Var> vars;
      for (const auto& t : inputs) vars.push_back(tape.constant(t));
      probe_out = fn(tape, vars).value();
    }
    const bool scalar = probe_out.size() == 1;
    const Tensor weights = random_tensor(probe_out.shape(), rng_);
    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      auto f = [&](Tape& tape, Var x) {
        std::vector<Var> vars;
        for (std::size_t j = 0; j < inputs.size(); ++j) vars.push_back(j == k ? x : tape.constant(inputs[j]));
        Var y = fn(tape, vars);
        return scalar ? y : project(tape, y, weights);
      };
      worst = std::max(worst, grad_check(f, inputs[k], h_));
    }
    rows_.push_back({name, worst, tolerance});
  }

  /// Parameters plus an input tensor.
  void module(const std::string& name, std::vector<Parameter*> params, const Tensor& input,
              const std::function<Var(Tape&, Var)>& fn, double tolerance = 1e-4) {
    Tensor probe_out;
    {
      Tape tape;
      tape.set_grad_enabled(false);
      probe_out = fn(tape, tape.constant(input)).value();
    }
    const Tensor weights = random_tensor(probe_out.shape(), rng_);
    auto objective_x = [&](Tape& tape, Var x) { return project(tape, fn(tape, x), weights); };
    double worst = grad_check(objective_x, input, h_);
    auto objective_p = [&](Tape& tape) { return project(tape, fn(tape, tape.constant(input)), weights); };
    worst = std::max(worst, grad_check_parameters(objective_p, params, h_));
    rows_.push_back({name, worst, tolerance});
  }

  void add_row(GradcheckRow row) { rows_.push_back(std::move(row)); }
  std::vector<GradcheckRow> take() { return std::move(rows_); }
  double h() const { return h_; }

 private:
  double h_;
  Rng rng_;
  std::vector<GradcheckRow> rows_;
};

inline SynthExample micro_example(std::size_t n, Rng& rng) {
  SynthExample ex;
  for (std::size_t i = 0; i < n; ++i) ex.tokens.push_back(rng.integer(0, kVocabSize - 1));
  ex.labels = {0, 1, 2, 0};
  ex.labels.resize(n, 0);
  ex.image = Tensor(Shape{kImageSide, kImageSide});
  for (double& v : ex.image.data()) v = rng.uniform();
  return ex;
}

}  // namespace detail

/// Finite-difference check of every differentiable op, the composite
/// modules, and an end-to-end micro model (d=8, L=2, n=4).
inline GradcheckReport run_gradcheck_suite(double h = 1e-3, std::uint64_t seed = 1) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  detail::SuiteBuilder s(h, seed);
  Rng& rng = s.rng();
  auto r = [&](Shape shape, double sd = 1.0) { return detail::random_tensor(std::move(shape), rng, sd); };

  s.op("matmul", {r({3, 4}), r({4, 2})}, [](Tape&, const std::vector<Var>& v) { return matmul(v[0], v[1]); });
  s.op("matmul_nt", {r({3, 4}), r({5, 4})}, [](Tape&, const std::vector<Var>& v) { return matmul_nt(v[0], v[1]); });
  s.op("add", {r({3, 4}), r({3, 4})}, [](Tape&, const std::vector<Var>& v) { return add(v[0], v[1]); });
  s.op("add_bias", {r({3, 4}), r({4})}, [](Tape&, const std::vector<Var>& v) { return add_bias(v[0], v[1]); });
  s.op("scale", {r({3, 4})}, [](Tape&, const std::vector<Var>& v) { return scale(v[0], -1.7); });
  s.op("mul", {r({3, 4}), r({3, 4})}, [](Tape&, const std::vector<Var>& v) { return mul(v[0], v[1]); });
  s.op("gelu", {r({4, 5}, 2.0)}, [](Tape&, const std::vector<Var>& v) { return gelu(v[0]); });
  s.op("softmax_rows", {r({4, 5}, 2.0)}, [](Tape&, const std::vector<Var>& v) { return softmax_rows(v[0]); });
  s.op("layer_norm", {r({4, 6}), r({6}), r({6})},
       [](Tape&, const std::vector<Var>& v) { return layer_norm(v[0], v[1], v[2]); });
  {
    const std::vector<int> targets{2, 0, 4, 1};
    s.op("cross_entropy_logits", {r({4, 5}, 2.0)},
         [targets](Tape&, const std::vector<Var>& v) { return cross_entropy_logits(v[0], targets); });
    s.op("cross_entropy_logits/mask", {r({4, 5}, 2.0)}, [targets](Tape&, const std::vector<Var>& v) {
      return cross_entropy_logits(v[0], targets, std::vector<bool>{true, false, true, true});
    });
  }
  s.op("sum", {r({3, 4})}, [](Tape&, const std::vector<Var>& v) { return sum(v[0]); });
  s.op("weighted_sum", {Tensor::scalar(0.3), Tensor::scalar(-1.2), Tensor::scalar(2.0)},
       [](Tape&, const std::vector<Var>& v) { return weighted_sum({v[0], v[1], v[2]}, {1.0, 0.5, 2.0}); });
  {
    const std::vector<int> ids{3, 0, 3, 5};
    s.op("embedding_lookup", {r({6, 4})},
         [ids](Tape&, const std::vector<Var>& v) { return embedding_lookup(ids, v[0]); });
  }
  s.op("concat_rows", {r({2, 4}), r({3, 4})}, [](Tape&, const std::vector<Var>& v) { return concat_rows(v[0], v[1]); });
  s.op("concat_cols", {r({3, 2}), r({3, 4})},
       [](Tape&, const std::vector<Var>& v) { return concat_cols({v[0], v[1]}); });
  s.op("slice_rows", {r({5, 3})}, [](Tape&, const std::vector<Var>& v) { return slice_rows(v[0], 1, 3); });
  s.op("slice_cols", {r({3, 5})}, [](Tape&, const std::vector<Var>& v) { return slice_cols(v[0], 2, 2); });
  s.op("mean_rows", {r({4, 3})}, [](Tape&, const std::vector<Var>& v) { return mean_rows(v[0]); });
  s.op("add_to_rows", {r({5, 3}), r({1, 3})},
       [](Tape&, const std::vector<Var>& v) { return add_to_rows(v[0], {1, 3}, v[1]); });
  s.op("reshape", {r({4, 3})}, [](Tape&, const std::vector<Var>& v) { return reshape(v[0], {2, 6}); });
  s.op("affine", {r({3, 4}), r({4, 2}), r({2})},
       [](Tape&, const std::vector<Var>& v) { return affine(v[0], v[1], v[2]); });
  s.op("dropout_mask", {r({4, 5})}, [](Tape&, const std::vector<Var>& v) {
    Rng fixed(11);
    return dropout_mask(v[0], 0.5, true, &fixed);
  });
  s.op("prepend_cls", {r({3, 4}), r({4})}, [](Tape&, const std::vector<Var>& v) { return prepend_cls(v[0], v[1]); });
  s.op("exchange_update", {r({4, 3}), r({5, 3})}, [](Tape&, const std::vector<Var>& v) {
    auto [t, i] = exchange_update(v[0], v[1], {1, 3}, {2});
    return concat_rows(t, i);
  });
  s.op("align_rows", {r({17, 3})}, [](Tape& tape, const std::vector<Var>& v) { return align_rows(tape, v[0], 12); });
  {
    const std::vector<int> labels{1, 2, 0, 3};
    s.op("crf_nll", {r({4, 4}), r({4, 4}), r({4}), r({4})}, [labels](Tape&, const std::vector<Var>& v) {
      return crf_log_likelihood(v[0], labels, v[1], v[2], v[3]);
    });
  }

  {
    ParameterStore store;
    const std::size_t d = 8;
    auto attn = AttentionWeights::create(store, "attn", d, 2, rng);
    s.module("multi_head_attention", store.with_prefix("attn"), r({5, d}),
             [&](Tape& tape, Var x) { return multi_head_attention(tape, x, attn, 0.0, false, nullptr).output; });
    auto ffn = FfnWeights::create(store, "ffn", d, 4 * d, rng);
    s.module("ffn_block", store.with_prefix("ffn"), r({5, d}),
             [&](Tape& tape, Var x) { return ffn_block(tape, x, ffn, 0.0, false, nullptr); });
    auto noise = NoiseMlpWeights::create(store, "noise", d, rng);
    s.module("inject_noise", store.with_prefix("noise"), r({5, d}), [&](Tape& tape, Var x) {
      Rng fixed(5);
      return inject_noise(tape, x, 1.0, true, noise, &fixed, true);
    });
  }

  {
    ModelConfig mc;
    mc.d = 8;
    mc.num_layers = 2;
    mc.heads = 2;
    mc.mu = 1;
    mc.eta = 2;
    mc.theta = 0.5;
    mc.dropout = 0.0;
    mc.head_dropout = 0.0;
    mc.max_len = 8;
    for (Task task : {Task::mner, Task::msa}) {
      mc.task = task;
      MuseModel model(mc, seed);
      SynthExample ex = detail::micro_example(4, rng);
      ex.label = task == Task::msa ? 2 : -1;
      if (task == Task::msa) ex.labels.clear();
      auto objective = [&](Tape& tape) {
        Rng noise(17);
        ForwardOptions fo;
        fo.training = true;  // noise path active, dropout rates are zero
        fo.rng = &noise;
        ForwardOutput f = model.forward(tape, ex, fo);
        return total_loss(f.l_task, f.recon.loss_it, f.recon.loss_ti, LossWeights{0.7, 1.3});
      };
      const auto params = model.params().all();
      const double err = grad_check_parameters(objective, params, h);
      s.add_row({"end_to_end/" + to_string(task), err, 1e-3});
    }
  }

  GradcheckReport report;
  report.rows = s.take();
  report.seconds = std::chrono::duration<double>(clock::now() - t0).count();
  return report;
}

}  // namespace muse
