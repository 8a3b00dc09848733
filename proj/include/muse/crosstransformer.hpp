#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "muse/nn.hpp"

namespace muse {

/// Exchange schedule of the two-stream backbone. Layers are numbered from 1;
/// layers mu+1 .. eta exchange, the rest are regular encoder layers.
struct ExchangeConfig {
  double theta = 0.1;
  std::size_t mu = 2;
  std::size_t eta = 4;
  std::size_t num_layers = 6;
  std::size_t heads = 4;
  std::size_t dim = 32;

  void validate() const {
    if (!(theta >= 0.0 && theta <= 1.0)) throw ConfigError("theta: must lie in [0, 1]");
    if (mu > eta) throw ConfigError("mu: start layer exceeds end layer eta");
    if (eta > num_layers) throw ConfigError("eta: end layer exceeds num_layers");
    if (heads == 0 || dim % heads != 0) throw ConfigError("heads: dim must be divisible by heads");
  }

  bool exchanges_at(std::size_t layer) const { return layer > mu && layer <= eta; }
};

enum class Modality { text, image };

/// Per-modality sequence with the cls row at index 0.
struct ModalityStream {
  Var embeddings;
  Modality modality = Modality::text;

  std::size_t tokens() const { return embeddings.rows() - 1; }
};

struct ExchangeLayerTrace {
  std::size_t layer = 0;
  std::vector<std::size_t> text_selected;
  std::vector<std::size_t> image_selected;
  std::vector<double> text_cls_scores;
  std::vector<double> image_cls_scores;
  // Stream values around the exchange sub-module; filled only when capture is on.
  Tensor text_before, text_after, image_before, image_after;
};

struct ExchangeTrace {
  std::vector<ExchangeLayerTrace> layers;

  nlohmann::json to_json() const {
    nlohmann::json out;
    out["layers"] = nlohmann::json::array();
    for (const auto& l : layers) {
      out["layers"].push_back({{"layer", l.layer},
                               {"text_selected", l.text_selected},
                               {"image_selected", l.image_selected},
                               {"text_cls_scores", l.text_cls_scores},
                               {"image_cls_scores", l.image_cls_scores}});
    }
    return out;
  }
};

/// Row 0 = cls, rows 1..n = E.
inline Var prepend_cls(Var embeddings, Var cls) {
  if (cls.value().size() != embeddings.cols()) {
    throw ShapeError("prepend_cls: cls " + shape_str(cls.shape()) + " does not match " +
                     shape_str(embeddings.shape()));
  }
  Var cls_row = cls.value().rank() == 2 ? cls : reshape(cls, {1, cls.value().size()});
  return concat_rows(cls_row, embeddings);
}

/// First row of the head-averaged attention map without the cls→cls entry.
inline std::vector<double> cls_attention_scores(const AttentionMap& map) {
  if (map.per_head.empty()) {
    const auto row = map.averaged.row(0);
    return {row.begin() + 1, row.end()};
  }
  const std::size_t n = map.per_head.front().cols();
  std::vector<double> scores(n - 1, 0.0);
  const double inv = 1.0 / static_cast<double>(map.per_head.size());
  for (const Tensor& head : map.per_head) {
    const auto row = head.row(0);
    for (std::size_t j = 1; j < n; ++j) scores[j - 1] += inv * row[j];
  }
  return scores;
}

inline std::size_t exchange_count(double theta, std::size_t n) {
  // The epsilon keeps products like 0.3 * 10 from flooring to 2.
  return std::min(n, static_cast<std::size_t>(std::floor(theta * static_cast<double>(n) + 1e-9)));
}

/// Stream indices (1-based, cls excluded) of the floor(θ·n) smallest scores,
/// ties to the lower index, returned ascending.
inline std::vector<std::size_t> select_exchange_tokens(std::span<const double> scores, double theta) {
  if (!(theta >= 0.0 && theta <= 1.0)) throw ConfigError("select_exchange_tokens: theta outside [0, 1]");
  const std::size_t k = exchange_count(theta, scores.size());
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<std::size_t> picked(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  for (auto& i : picked) ++i;
  std::sort(picked.begin(), picked.end());
  return picked;
}

/// Simultaneous residual exchange: each selected row gains the mean of the
/// other stream's non-cls rows, both means taken from the pre-update values.
inline std::pair<Var, Var> exchange_update(Var text, Var image, const std::vector<std::size_t>& text_sel,
                                           const std::vector<std::size_t>& image_sel) {
  auto check = [](const std::vector<std::size_t>& sel, std::size_t rows, const char* which) {
    for (std::size_t k : sel) {
      if (k == 0) throw ContractError(std::string("exchange_update: cls row selected in ") + which);
      if (k >= rows) throw IndexError(std::string("exchange_update: row out of range in ") + which);
    }
  };
  check(text_sel, text.rows(), "text");
  check(image_sel, image.rows(), "image");
  Var text_out = text;
  Var image_out = image;
  if (!text_sel.empty()) text_out = add_to_rows(text, text_sel, mean_rows(slice_rows(image, 1, image.rows() - 1)));
  if (!image_sel.empty()) image_out = add_to_rows(image, image_sel, mean_rows(slice_rows(text, 1, text.rows() - 1)));
  return {text_out, image_out};
}

struct CrossTransformerWeights {
  std::vector<EncoderLayerWeights> layers;

  static CrossTransformerWeights create(ParameterStore& store, const std::string& name, const ExchangeConfig& cfg,
                                        std::size_t ffn_hidden, Rng& rng) {
    cfg.validate();
    CrossTransformerWeights w;
    for (std::size_t l = 1; l <= cfg.num_layers; ++l) {
      w.layers.push_back(
          EncoderLayerWeights::create(store, name + ".layer" + std::to_string(l), cfg.dim, cfg.heads, ffn_hidden, rng));
    }
    return w;
  }
};

struct CrossOptions {
  double dropout = 0.0;
  bool training = false;
  Rng* rng = nullptr;
  bool capture_states = false;
};

struct CrossResult {
  Var text;
  Var image;
  ExchangeTrace trace;
};

/// Both streams pass through the same layer weights. Exchange layers insert
/// select-and-exchange between the attention and FFN sub-layers.
inline CrossResult cross_forward(Tape& tape, const ModalityStream& text0, const ModalityStream& image0,
                                 const CrossTransformerWeights& weights, const ExchangeConfig& cfg,
                                 const CrossOptions& opt = {}) {
  cfg.validate();
  if (weights.layers.size() != cfg.num_layers) throw ConfigError("num_layers: weights hold a different depth");
  if (text0.embeddings.cols() != image0.embeddings.cols()) {
    throw ShapeError("cross_forward: stream widths differ");
  }
  CrossResult r;
  Var t = text0.embeddings;
  Var i = image0.embeddings;
  for (std::size_t l = 1; l <= cfg.num_layers; ++l) {
    const EncoderLayerWeights& lw = weights.layers[l - 1];
    AttentionResult ta = multi_head_attention(tape, t, lw.attention, opt.dropout, opt.training, opt.rng);
    AttentionResult ia = multi_head_attention(tape, i, lw.attention, opt.dropout, opt.training, opt.rng);
    t = ta.output;
    i = ia.output;
    if (cfg.exchanges_at(l)) {
      ExchangeLayerTrace lt;
      lt.layer = l;
      lt.text_cls_scores = cls_attention_scores(ta.map);
      lt.image_cls_scores = cls_attention_scores(ia.map);
      lt.text_selected = select_exchange_tokens(lt.text_cls_scores, cfg.theta);
      lt.image_selected = select_exchange_tokens(lt.image_cls_scores, cfg.theta);
      if (opt.capture_states) {
        lt.text_before = t.value();
        lt.image_before = i.value();
      }
      std::tie(t, i) = exchange_update(t, i, lt.text_selected, lt.image_selected);
      if (opt.capture_states) {
        lt.text_after = t.value();
        lt.image_after = i.value();
      }
      r.trace.layers.push_back(std::move(lt));
    }
    t = ffn_block(tape, t, lw.ffn, opt.dropout, opt.training, opt.rng);
    i = ffn_block(tape, i, lw.ffn, opt.dropout, opt.training, opt.rng);
  }
  r.text = t;
  r.image = i;
  return r;
}

/// One stream through the same layers with no exchange partner.
inline Var single_stream_forward(Tape& tape, Var stream, const CrossTransformerWeights& weights,
                                 const CrossOptions& opt = {}) {
  for (const EncoderLayerWeights& lw : weights.layers) {
    stream = multi_head_attention(tape, stream, lw.attention, opt.dropout, opt.training, opt.rng).output;
    stream = ffn_block(tape, stream, lw.ffn, opt.dropout, opt.training, opt.rng);
  }
  return stream;
}

/// Pooling matrix mapping an (m+1)-row stream to rows+1 rows: cls to cls, the
/// m token rows averaged into `rows` equal-width bins. Identity when m == rows.
inline Tensor row_alignment_matrix(std::size_t rows, std::size_t m) {
  Tensor p(Shape{rows + 1, m + 1});
  p.at(0, 0) = 1.0;
  if (m == 0) return p;
  const double width = static_cast<double>(m) / static_cast<double>(rows ? rows : 1);
  for (std::size_t k = 0; k < rows; ++k) {
    const double lo = static_cast<double>(k) * width;
    const double hi = lo + width;
    for (std::size_t j = 0; j < m; ++j) {
      const double overlap = std::min(hi, static_cast<double>(j + 1)) - std::max(lo, static_cast<double>(j));
      if (overlap > 0.0) p.at(k + 1, j + 1) = overlap / width;
    }
  }
  return p;
}

inline Var align_rows(Tape& tape, Var stream, std::size_t target_tokens) {
  const std::size_t m = stream.rows() - 1;
  if (m == target_tokens) return stream;
  return matmul(tape.constant(row_alignment_matrix(target_tokens, m)), stream);
}

/// Rowwise concat of both outputs followed by one affine map back to width d.
inline Var fuse_outputs(Tape& tape, Var text_out, Var image_out, const Linear& fusion) {
  if (text_out.rows() != image_out.rows()) {
    throw ShapeError("fuse_outputs: row-count mismatch " + shape_str(text_out.shape()) + " vs " +
                     shape_str(image_out.shape()));
  }
  return fusion(tape, concat_cols({text_out, image_out}));
}

}  // namespace muse
