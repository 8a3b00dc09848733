#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "muse/ops.hpp"
#include "muse/random.hpp"

namespace muse {

/// Owns every trainable tensor of a model. Parameter addresses are stable for
/// the lifetime of the store.
class ParameterStore {
 public:
  Parameter& add(const std::string& name, Tensor value, ParamGroup group = ParamGroup::standard) {
    if (index_.count(name)) throw ConfigError("parameter '" + name + "' registered twice");
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->value = std::move(value);
    p->grad = Tensor(p->value.shape());
    p->group = group;
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }

  Parameter& get(const std::string& name) const {
    if (Parameter* p = find(name)) return *p;
    throw IndexError("unknown parameter '" + name + "'");
  }

  std::vector<Parameter*> all() const {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }

  std::vector<Parameter*> with_prefix(const std::string& prefix) const {
    std::vector<Parameter*> out;
    for (const auto& p : params_) {
      if (p->name.rfind(prefix, 0) == 0) out.push_back(p.get());
    }
    return out;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  std::size_t size() const noexcept { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// i.i.d. N(0, 2/fan_in).
inline Tensor kaiming_init(Shape shape, std::size_t fan_in, Rng& rng) {
  if (fan_in < 1) throw ConfigError("kaiming_init: fan_in must be >= 1");
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

inline Tensor normal_init(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

/// Inverted dropout. In eval mode, or at rate 0, returns `x` itself.
inline Var dropout_mask(Var x, double rate, bool training, Rng* rng) {
  if (!(rate >= 0.0) || rate >= 1.0) throw ConfigError("dropout: rate must lie in [0, 1)");
  if (!training || rate == 0.0) return x;
  if (rng == nullptr) throw ContractError("dropout: training mode needs a random stream");
  Tensor mask(x.shape());
  const double keep_scale = 1.0 / (1.0 - rate);
  for (double& m : mask.data()) m = rng->uniform() < rate ? 0.0 : keep_scale;
  return mul(x, x.tape().constant(std::move(mask)));
}

/// Projection weights use a quarter of the Kaiming variance; full Kaiming
/// saturates the softmax of a seven-deep post-norm stack at d=32.
inline Tensor projection_init(std::size_t in, std::size_t out, Rng& rng) {
  if (in < 1) throw ConfigError("projection_init: fan_in must be >= 1");
  return normal_init({in, out}, std::sqrt(0.5 / static_cast<double>(in)), rng);
}

struct Linear {
  Parameter* weight = nullptr;  // in × out
  Parameter* bias = nullptr;    // out

  static Linear create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                       ParamGroup group = ParamGroup::standard) {
    Linear l;
    l.weight = &store.add(name + ".weight", projection_init(in, out, rng), group);
    l.bias = &store.add(name + ".bias", Tensor(Shape{out}), group);
    return l;
  }

  Var operator()(Tape& tape, Var x) const { return affine(x, tape.param(*weight), tape.param(*bias)); }
};

struct LayerNormWeights {
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;

  static LayerNormWeights create(ParameterStore& store, const std::string& name, std::size_t d) {
    return {&store.add(name + ".gamma", Tensor(Shape{d}, 1.0)), &store.add(name + ".beta", Tensor(Shape{d}))};
  }

  Var operator()(Tape& tape, Var x) const { return layer_norm(x, tape.param(*gamma), tape.param(*beta)); }
};

/// Query/key/value/output projections for h heads of width d/h. The per-head
/// d×d_h blocks are column slices of the d×d matrices.
struct AttentionWeights {
  std::size_t heads = 1;
  Linear query, key, value, output;
  LayerNormWeights norm;

  static AttentionWeights create(ParameterStore& store, const std::string& name, std::size_t d, std::size_t heads,
                                 Rng& rng) {
    if (heads == 0 || d % heads != 0) {
      throw ConfigError("attention: dim " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                        " heads");
    }
    AttentionWeights w;
    w.heads = heads;
    w.query = Linear::create(store, name + ".query", d, d, rng);
    w.key = Linear::create(store, name + ".key", d, d, rng);
    w.value = Linear::create(store, name + ".value", d, d, rng);
    w.output = Linear::create(store, name + ".output", d, d, rng);
    w.norm = LayerNormWeights::create(store, name + ".norm", d);
    return w;
  }
};

/// Row-stochastic attention scores, per head and head-averaged.
struct AttentionMap {
  std::vector<Tensor> per_head;
  Tensor averaged;
};

struct AttentionResult {
  Var output;
  AttentionMap map;
};

/// Self-attention sub-layer: softmax(QKᵀ/√d_k)V per head, output projection,
/// dropout, then residual add and layer norm.
inline AttentionResult multi_head_attention(Tape& tape, Var x, const AttentionWeights& w, double dropout_rate,
                                            bool training, Rng* rng) {
  const std::size_t d = x.cols();
  if (w.heads == 0 || d % w.heads != 0) {
    throw ConfigError("attention: dim " + std::to_string(d) + " not divisible by " + std::to_string(w.heads) +
                      " heads");
  }
  const std::size_t dh = d / w.heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = w.query(tape, x);
  Var k = w.key(tape, x);
  Var v = w.value(tape, x);

  AttentionResult result;
  std::vector<Var> head_out;
  head_out.reserve(w.heads);
  for (std::size_t h = 0; h < w.heads; ++h) {
    Var qh = w.heads == 1 ? q : slice_cols(q, h * dh, dh);
    Var kh = w.heads == 1 ? k : slice_cols(k, h * dh, dh);
    Var vh = w.heads == 1 ? v : slice_cols(v, h * dh, dh);
    Var scores = softmax_rows(scale(matmul_nt(qh, kh), inv_scale));
    result.map.per_head.push_back(scores.value());
    head_out.push_back(matmul(scores, vh));
  }
  Var merged = w.heads == 1 ? head_out.front() : concat_cols(head_out);
  Var projected = dropout_mask(w.output(tape, merged), dropout_rate, training, rng);
  result.output = w.norm(tape, add(x, projected));

  result.map.averaged = Tensor(result.map.per_head.front().shape());
  const double inv_h = 1.0 / static_cast<double>(w.heads);
  for (const Tensor& m : result.map.per_head) detail::axpy(result.map.averaged.data(), m.data(), inv_h);
  return result;
}

struct FfnWeights {
  Linear inner, outer;
  LayerNormWeights norm;

  static FfnWeights create(ParameterStore& store, const std::string& name, std::size_t d, std::size_t hidden,
                           Rng& rng) {
    if (hidden < 1) throw ConfigError("ffn: hidden width must be >= 1");
    FfnWeights w;
    w.inner = Linear::create(store, name + ".inner", d, hidden, rng);
    w.outer = Linear::create(store, name + ".outer", hidden, d, rng);
    w.norm = LayerNormWeights::create(store, name + ".norm", d);
    return w;
  }
};

/// layer_norm(x + W2·gelu(W1·x)), shape preserving.
inline Var ffn_block(Tape& tape, Var x, const FfnWeights& w, double dropout_rate, bool training, Rng* rng) {
  Var h = gelu(w.inner(tape, x));
  Var y = dropout_mask(w.outer(tape, h), dropout_rate, training, rng);
  return w.norm(tape, add(x, y));
}

/// One post-norm Transformer encoder layer.
struct EncoderLayerWeights {
  AttentionWeights attention;
  FfnWeights ffn;

  static EncoderLayerWeights create(ParameterStore& store, const std::string& name, std::size_t d,
                                    std::size_t heads, std::size_t hidden, Rng& rng) {
    EncoderLayerWeights w;
    w.attention = AttentionWeights::create(store, name + ".attention", d, heads, rng);
    w.ffn = FfnWeights::create(store, name + ".ffn", d, hidden, rng);
    return w;
  }
};

}  // namespace muse
