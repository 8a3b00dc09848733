#include <gtest/gtest.h>

#include <cmath>

#include "muse/codec.hpp"

using namespace muse;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.normal(0.0, 1.0);
  return t;
}

Tensor random_grid(Rng& rng) {
  Tensor g(Shape{8, 8});
  for (double& v : g.data()) v = rng.uniform();
  return g;
}

void zero_params(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->value.fill(0.0);
}

double grad_norm(const std::vector<Parameter*>& params) {
  double s = 0.0;
  for (const Parameter* p : params) {
    for (double g : p->grad.data()) s += g * g;
  }
  return std::sqrt(s);
}

}  // namespace

TEST(TextEncoder, ShapeDeterminismAndPositions) {
  ParameterStore store;
  Rng rng(1);
  auto w = TextEncoderWeights::create(store, 64, 64, 16, 2, 64, rng);
  const std::vector<int> tokens{5, 9, 12, 40};
  Tape tape;
  Tensor a = encode_text(tape, tokens, w).value();
  Tensor b = encode_text(tape, tokens, w).value();
  EXPECT_EQ(a.shape(), (Shape{4, 16}));
  EXPECT_EQ(a, b);
  const std::vector<int> permuted{40, 12, 9, 5};
  Tensor c = encode_text(tape, permuted, w).value();
  // Same multiset of tokens; rows differ only because positions moved.
  EXPECT_GT(max_abs_diff(a, c), 1e-6);
  bool row_match = true;
  for (std::size_t j = 0; j < 16; ++j) row_match &= std::abs(a.at(0, j) - c.at(3, j)) < 1e-9;
  EXPECT_FALSE(row_match);
}

TEST(TextEncoder, OverLengthIsTruncated) {
  ParameterStore store;
  Rng rng(2);
  auto w = TextEncoderWeights::create(store, 64, 4, 8, 2, 16, rng);
  const std::vector<int> tokens{1, 2, 3, 4, 5, 6};
  Tape tape;
  EXPECT_EQ(encode_text(tape, tokens, w).shape(), (Shape{4, 8}));
}

TEST(ImageEncoder, ZeroGridGivesPositions) {
  ParameterStore store;
  Rng rng(3);
  auto w = ImageEncoderWeights::create(store, 8, rng);
  w.patch.bias->value.fill(0.0);
  Tape tape;
  Tensor e = encode_image(tape, Tensor(Shape{8, 8}), w).value();
  EXPECT_EQ(e.shape(), (Shape{16, 8}));
  EXPECT_EQ(e, w.position_embedding->value);
}

TEST(ImageEncoder, PatchLocality) {
  Rng rng(4);
  Tensor g = random_grid(rng);
  Tensor h = g;
  h.at(5, 2) = 1.0 - h.at(5, 2);  // patch row 2, col 1 → patch 9, inner (1, 0) → slot 2
  const Tensor pg = image_patches(g), ph = image_patches(h);
  for (std::size_t p = 0; p < 16; ++p) {
    for (std::size_t k = 0; k < 4; ++k) {
      if (p == 9 && k == 2) {
        EXPECT_NE(pg.at(p, k), ph.at(p, k));
      } else {
        EXPECT_EQ(pg.at(p, k), ph.at(p, k));
      }
    }
  }
}

TEST(ImageEncoder, RejectsOutOfRangePixels) {
  ParameterStore store;
  Rng rng(5);
  auto w = ImageEncoderWeights::create(store, 8, rng);
  Tensor g(Shape{8, 8});
  g.at(0, 0) = 1.5;
  Tape tape;
  EXPECT_THROW(encode_image(tape, g, w), InputError);
  g.at(0, 0) = -0.01;
  EXPECT_THROW(encode_image(tape, g, w), InputError);
}

TEST(Noise, ZeroStdIsDeterministicMlp) {
  ParameterStore store;
  Rng rng(6);
  auto mlp = NoiseMlpWeights::create(store, "n", 8, rng);
  const Tensor e = random_tensor({4, 8}, rng);
  Tape tape;
  Tensor a = inject_noise(tape, tape.constant(e), 0.0, true, mlp, &rng, true).value();
  Tensor b = mlp(tape, tape.constant(e)).value();
  EXPECT_EQ(a, b);
  Tensor eval = inject_noise(tape, tape.constant(e), 1.0, true, mlp, &rng, false).value();
  EXPECT_EQ(eval, b);
  Tensor disabled = inject_noise(tape, tape.constant(e), 1.0, false, mlp, &rng, true).value();
  EXPECT_EQ(disabled, b);
}

TEST(Noise, FixedSeedReproducible) {
  ParameterStore store;
  Rng init(7);
  auto mlp = NoiseMlpWeights::create(store, "n", 8, init);
  const Tensor e = random_tensor({4, 8}, init);
  Tape tape;
  Rng a(99), b(99);
  EXPECT_EQ(inject_noise(tape, tape.constant(e), 1.0, true, mlp, &a, true).value(),
            inject_noise(tape, tape.constant(e), 1.0, true, mlp, &b, true).value());
}

TEST(Noise, MonteCarloMoments) {
  Rng rng(8);
  Tape tape;
  const double stddev = 1.0;
  Var clean = tape.constant(Tensor(Shape{1000, 100}, 0.25));
  Tensor noisy = add_gaussian_noise(tape, clean, stddev, rng).value();
  double mean = 0.0, var = 0.0;
  for (double v : noisy.data()) mean += (v - 0.25) / 1e5;
  for (double v : noisy.data()) var += (v - 0.25 - mean) * (v - 0.25 - mean) / (1e5 - 1);
  EXPECT_NEAR(mean, 0.0, 0.02);
  EXPECT_NEAR(var, stddev * stddev, 0.03 * stddev * stddev);
}

TEST(Noise, NegativeStdRejected) {
  ParameterStore store;
  Rng rng(9);
  auto mlp = NoiseMlpWeights::create(store, "n", 4, rng);
  Tape tape;
  EXPECT_THROW(inject_noise(tape, tape.constant(Tensor(Shape{2, 4})), -1.0, true, mlp, &rng, true), ConfigError);
}

TEST(Captioning, ZeroWeightsGiveLnV) {
  ParameterStore store;
  Rng rng(10);
  auto w = CaptionDecoderWeights::create(store, 64, 8, rng);
  zero_params(store.all());
  const std::vector<int> targets{3, 17, 60, 1};
  Tape tape;
  auto out = decode_text_captioning(tape, tape.constant(random_tensor({16, 8}, rng)), targets, w);
  EXPECT_EQ(out.logits.shape(), (Shape{4, 64}));
  EXPECT_NEAR(out.loss.value().item(), std::log(64.0), 1e-12);
}

TEST(Captioning, LossNonNegativeAndMemorizes) {
  ParameterStore store;
  Rng rng(11);
  auto w = CaptionDecoderWeights::create(store, 64, 8, rng);
  const Tensor image = random_tensor({16, 8}, rng);
  const std::vector<int> targets{3, 17, 60, 1, 9};
  double loss = 0.0;
  for (int step = 0; step < 50; ++step) {
    store.zero_grad();
    Tape tape;
    auto out = decode_text_captioning(tape, tape.constant(image), targets, w);
    loss = out.loss.value().item();
    EXPECT_GE(loss, 0.0);
    backward_pass(tape, out.loss);
    for (Parameter* p : store.all()) {
      for (std::size_t i = 0; i < p->value.size(); ++i) p->value.data()[i] -= 0.5 * p->grad[i];
    }
  }
  EXPECT_LT(loss, std::log(64.0));
}

TEST(Generation, QuantizationAndZeroWeights) {
  EXPECT_EQ(quantize_cell(0.6, 4), 2);
  EXPECT_EQ(quantize_cell(1.0, 4), 3);
  EXPECT_EQ(quantize_cell(0.0, 4), 0);
  EXPECT_EQ(quantize_cell(0.25, 4), 1);
  ParameterStore store;
  Rng rng(12);
  auto w = ImageDecoderWeights::create(store, 8, 4, rng);
  zero_params(store.all());
  Tape tape;
  auto out = decode_image_generation(tape, tape.constant(random_tensor({12, 8}, rng)), random_grid(rng), w);
  EXPECT_EQ(out.logits.shape(), (Shape{64, 4}));
  EXPECT_NEAR(out.loss.value().item(), std::log(4.0), 1e-12);
}

TEST(Regularizers, GradientsReachEncoders) {
  ParameterStore store;
  Rng rng(13);
  auto text = TextEncoderWeights::create(store, 64, 16, 8, 2, 32, rng);
  auto image = ImageEncoderWeights::create(store, 8, rng);
  auto tn = NoiseMlpWeights::create(store, "tn", 8, rng);
  auto in = NoiseMlpWeights::create(store, "in", 8, rng);
  auto cap = CaptionDecoderWeights::create(store, 64, 8, rng);
  auto gen = ImageDecoderWeights::create(store, 8, 4, rng);
  const std::vector<int> tokens{4, 20, 33, 7};
  const Tensor grid = random_grid(rng);
  Tape tape;
  Var te = encode_text(tape, tokens, text);
  Var ie = encode_image(tape, grid, image);
  auto l_it = decode_text_captioning(tape, inject_noise(tape, ie, 1.0, true, in, &rng, true), tokens, cap).loss;
  auto l_ti = decode_image_generation(tape, inject_noise(tape, te, 1.0, true, tn, &rng, true), grid, gen).loss;
  EXPECT_TRUE(std::isfinite(l_it.value().item()));
  EXPECT_TRUE(std::isfinite(l_ti.value().item()));
  backward_pass(tape, add(l_it, l_ti));
  EXPECT_GT(grad_norm(store.with_prefix("text_encoder")), 0.0);
  EXPECT_GT(grad_norm(store.with_prefix("image_encoder")), 0.0);
}
