#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <span>
#include <string>
#include <vector>

#include "muse/crosstransformer.hpp"
#include "muse/nn.hpp"

namespace muse {

inline constexpr std::size_t kImageSide = 8;
inline constexpr std::size_t kPatchSide = 2;
inline constexpr std::size_t kImageCells = kImageSide * kImageSide;
inline constexpr std::size_t kPatchCount = (kImageSide / kPatchSide) * (kImageSide / kPatchSide);
inline constexpr std::size_t kPatchValues = kPatchSide * kPatchSide;

struct NoiseConfig {
  double std_text = 1.0;
  double std_image = 1.0;
  bool enabled = true;
};

struct TextEncoderWeights {
  Parameter* token_embedding = nullptr;     // vocab × d
  Parameter* position_embedding = nullptr;  // max_len × d
  EncoderLayerWeights layer;

  std::size_t max_len() const { return position_embedding->value.rows(); }

  static TextEncoderWeights create(ParameterStore& store, std::size_t vocab, std::size_t max_len, std::size_t d,
                                   std::size_t heads, std::size_t hidden, Rng& rng) {
    TextEncoderWeights w;
    w.token_embedding = &store.add("text_encoder.token_embedding", normal_init({vocab, d}, 1.0, rng));
    w.position_embedding = &store.add("text_encoder.position_embedding", normal_init({max_len, d}, 0.1, rng));
    w.layer = EncoderLayerWeights::create(store, "text_encoder.layer", d, heads, hidden, rng);
    return w;
  }
};

struct ImageEncoderWeights {
  Linear patch;                             // 4 → d
  Parameter* position_embedding = nullptr;  // 16 × d

  static ImageEncoderWeights create(ParameterStore& store, std::size_t d, Rng& rng) {
    ImageEncoderWeights w;
    w.patch = Linear::create(store, "image_encoder.patch", kPatchValues, d, rng);
    w.position_embedding = &store.add("image_encoder.position_embedding", normal_init({kPatchCount, d}, 0.1, rng));
    return w;
  }
};

struct EncodeOptions {
  double dropout = 0.0;
  bool training = false;
  Rng* rng = nullptr;
};

/// Token embeddings plus learned positions through one encoder layer.
/// Sequences longer than the position table are truncated with a warning.
inline Var encode_text(Tape& tape, std::span<const int> tokens, const TextEncoderWeights& w,
                       const EncodeOptions& opt = {}) {
  if (tokens.size() > w.max_len()) {
    std::clog << "warning: text of " << tokens.size() << " tokens truncated to " << w.max_len() << '\n';
    tokens = tokens.first(w.max_len());
  }
  const std::size_t n = tokens.size();
  Var emb = embedding_lookup(tokens, tape.param(*w.token_embedding));
  Var pos = slice_rows(tape.param(*w.position_embedding), 0, n);
  Var x = add(emb, pos);
  x = multi_head_attention(tape, x, w.layer.attention, opt.dropout, opt.training, opt.rng).output;
  return ffn_block(tape, x, w.layer.ffn, opt.dropout, opt.training, opt.rng);
}

inline void require_unit_grid(const Tensor& grid, const char* op) {
  if (grid.size() != kImageCells) {
    throw InputError(std::string(op) + ": image must be 8x8, got " + shape_str(grid.shape()));
  }
  for (double v : grid.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw InputError(std::string(op) + ": pixel value outside [0, 1]");
  }
}

/// 16×4 matrix of non-overlapping 2×2 patches in raster order, each flattened
/// row-major.
inline Tensor image_patches(const Tensor& grid) {
  Tensor patches(Shape{kPatchCount, kPatchValues});
  const std::size_t per_side = kImageSide / kPatchSide;
  for (std::size_t pr = 0; pr < per_side; ++pr) {
    for (std::size_t pc = 0; pc < per_side; ++pc) {
      auto dst = patches.row(pr * per_side + pc);
      std::size_t k = 0;
      for (std::size_t dr = 0; dr < kPatchSide; ++dr) {
        for (std::size_t dc = 0; dc < kPatchSide; ++dc) {
          dst[k++] = grid[(pr * kPatchSide + dr) * kImageSide + pc * kPatchSide + dc];
        }
      }
    }
  }
  return patches;
}

inline Var encode_image(Tape& tape, const Tensor& grid, const ImageEncoderWeights& w) {
  require_unit_grid(grid, "encode_image");
  Var patches = tape.constant(image_patches(grid));
  return add(w.patch(tape, patches), tape.param(*w.position_embedding));
}

/// One hidden layer of width d.
struct NoiseMlpWeights {
  Linear hidden, output;

  static NoiseMlpWeights create(ParameterStore& store, const std::string& name, std::size_t d, Rng& rng) {
    return {Linear::create(store, name + ".hidden", d, d, rng), Linear::create(store, name + ".output", d, d, rng)};
  }

  Var operator()(Tape& tape, Var x) const { return output(tape, gelu(hidden(tape, x))); }
};

/// E + i.i.d. N(0, std²), the pre-MLP half of noise injection.
inline Var add_gaussian_noise(Tape& tape, Var embeddings, double stddev, Rng& rng) {
  if (stddev < 0.0) throw ConfigError("noise: std must be non-negative");
  Tensor noise(embeddings.shape());
  for (double& v : noise.data()) v = rng.normal(0.0, stddev);
  return add(embeddings, tape.constant(std::move(noise)));
}

/// MLP(E + N(0, std²)) while training with noise enabled, MLP(E) otherwise.
inline Var inject_noise(Tape& tape, Var embeddings, double stddev, bool enabled, const NoiseMlpWeights& mlp,
                        Rng* rng, bool training) {
  if (stddev < 0.0) throw ConfigError("noise: std must be non-negative");
  Var x = embeddings;
  if (training && enabled && stddev > 0.0) {
    if (rng == nullptr) throw ContractError("inject_noise: training mode needs a random stream");
    x = add_gaussian_noise(tape, x, stddev, *rng);
  }
  return mlp(tape, x);
}

struct DecoderOutput {
  Var logits;
  Var loss;
};

/// Teacher-forced caption predictor: step t sees the pooled image context and
/// the embedding of token t-1 (a begin token at t = 0).
struct CaptionDecoderWeights {
  Parameter* embedding = nullptr;  // (vocab + 1) × d, last row is the begin token
  Linear hidden;                   // 2d → d
  Linear output;                   // d → vocab

  std::size_t vocab() const { return embedding->value.rows() - 1; }

  static CaptionDecoderWeights create(ParameterStore& store, std::size_t vocab, std::size_t d, Rng& rng) {
    CaptionDecoderWeights w;
    w.embedding = &store.add("caption_decoder.embedding", normal_init({vocab + 1, d}, 1.0, rng));
    w.hidden = Linear::create(store, "caption_decoder.hidden", 2 * d, d, rng);
    w.output = Linear::create(store, "caption_decoder.output", d, vocab, rng);
    return w;
  }
};

inline DecoderOutput decode_text_captioning(Tape& tape, Var image_noisy, std::span<const int> targets,
                                            const CaptionDecoderWeights& w) {
  const std::size_t n = targets.size();
  if (n == 0) throw ContractError("decode_text_captioning: empty target");
  std::vector<int> previous(n);
  previous[0] = static_cast<int>(w.vocab());
  for (std::size_t t = 1; t < n; ++t) previous[t] = targets[t - 1];
  Var context = matmul(tape.constant(Tensor(Shape{n, 1}, 1.0)), mean_rows(image_noisy));
  Var prev = embedding_lookup(previous, tape.param(*w.embedding));
  Var h = gelu(w.hidden(tape, concat_cols({context, prev})));
  Var logits = w.output(tape, h);
  return {logits, cross_entropy_logits(logits, targets)};
}

inline int quantize_cell(double v, int levels) {
  return std::min(static_cast<int>(std::floor(v * levels)), levels - 1);
}

struct ImageDecoderWeights {
  std::size_t levels = 4;
  Linear hidden;  // d → d
  Linear output;  // d → 64·levels

  static ImageDecoderWeights create(ParameterStore& store, std::size_t d, std::size_t levels, Rng& rng) {
    ImageDecoderWeights w;
    w.levels = levels;
    w.hidden = Linear::create(store, "image_decoder.hidden", d, d, rng);
    w.output = Linear::create(store, "image_decoder.output", d, kImageCells * levels, rng);
    return w;
  }
};

/// Per-cell classification of the quantized target grid from pooled text.
inline DecoderOutput decode_image_generation(Tape& tape, Var text_noisy, const Tensor& target_grid,
                                             const ImageDecoderWeights& w) {
  require_unit_grid(target_grid, "decode_image_generation");
  const int levels = static_cast<int>(w.levels);
  std::vector<int> classes(kImageCells);
  for (std::size_t c = 0; c < kImageCells; ++c) classes[c] = quantize_cell(target_grid[c], levels);
  Var h = gelu(w.hidden(tape, mean_rows(text_noisy)));
  Var logits = reshape(w.output(tape, h), {kImageCells, w.levels});
  return {logits, cross_entropy_logits(logits, classes)};
}

}  // namespace muse
