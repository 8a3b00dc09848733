#pragma once

#include <string>
#include <vector>

#include "muse/codec.hpp"
#include "muse/crosstransformer.hpp"
#include "muse/data.hpp"
#include "muse/heads.hpp"

namespace muse {

enum class ModelVariant {
  full,
  only_text,
  only_image,
  no_crosstransformer,
  task_only,
  no_caption_loss,
  no_generation_loss,
};

inline const std::vector<ModelVariant>& all_variants() {
  static const std::vector<ModelVariant> v{ModelVariant::full,          ModelVariant::only_text,
                                           ModelVariant::only_image,    ModelVariant::no_crosstransformer,
                                           ModelVariant::task_only,     ModelVariant::no_caption_loss,
                                           ModelVariant::no_generation_loss};
  return v;
}

inline std::string to_string(ModelVariant v) {
  switch (v) {
    case ModelVariant::full: return "full";
    case ModelVariant::only_text: return "only_text";
    case ModelVariant::only_image: return "only_image";
    case ModelVariant::no_crosstransformer: return "no_crosstransformer";
    case ModelVariant::task_only: return "task_only";
    case ModelVariant::no_caption_loss: return "no_caption_loss";
    case ModelVariant::no_generation_loss: return "no_generation_loss";
  }
  return "full";
}

inline ModelVariant parse_variant(const std::string& s) {
  for (ModelVariant v : all_variants()) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("variant: unknown variant '" + s + "'");
}

struct ModelConfig {
  Task task = Task::mner;
  ModelVariant variant = ModelVariant::full;
  std::size_t vocab = kVocabSize;
  std::size_t max_len = 64;
  std::size_t d = 32;
  std::size_t num_layers = 6;
  std::size_t heads = 4;
  std::size_t ffn_hidden = 0;  // 0 means 4d
  std::size_t mu = 2;
  std::size_t eta = 4;
  double theta = 0.1;
  double dropout = 0.1;
  double head_dropout = 0.5;
  NoiseConfig noise;
  std::size_t qlevels = 4;

  std::size_t hidden() const { return ffn_hidden ? ffn_hidden : 4 * d; }

  ExchangeConfig exchange() const {
    ExchangeConfig e;
    e.theta = theta;
    e.mu = mu;
    e.eta = eta;
    e.num_layers = num_layers;
    e.heads = heads;
    e.dim = d;
    return e;
  }

  bool uses_text() const { return variant != ModelVariant::only_image; }
  bool uses_image() const { return variant != ModelVariant::only_text; }
  bool uses_crosstransformer() const { return variant != ModelVariant::no_crosstransformer; }
  // Both regularizers read one modality and reconstruct the other, so the
  // single-modality variants drop them along with the missing input.
  bool uses_caption_loss() const {
    return uses_text() && uses_image() && variant != ModelVariant::task_only &&
           variant != ModelVariant::no_caption_loss;
  }
  bool uses_generation_loss() const {
    return uses_text() && uses_image() && variant != ModelVariant::task_only &&
           variant != ModelVariant::no_generation_loss;
  }
};

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;
  bool compute_aux = true;  // decoder losses; evaluation can skip them
  bool capture_states = false;
};

struct ReconstructionOutput {
  Var text_logits;   // n × V, captioning
  Var image_logits;  // 64 × levels, generation
  Var loss_it;
  Var loss_ti;
};

struct ForwardOutput {
  Var l_task;
  ReconstructionOutput recon;  // losses are constant zeros when gated off
  Var task_output;             // n × labels emissions (MNER) or 1 × classes logits (MSA)
  Var fusion;
  ExchangeTrace trace;
};

/// Encoders, regularizing decoders, the shared two-stream backbone, fusion,
/// and the task head, wired per ModelVariant.
class MuseModel {
 public:
  MuseModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.exchange().validate();
    if (cfg_.d < 1) throw ConfigError("d: must be >= 1");
    Rng rng(derive_seed(seed, 0x1417));
    const std::size_t d = cfg_.d;
    text_encoder_ = TextEncoderWeights::create(store_, cfg_.vocab, cfg_.max_len, d, cfg_.heads, cfg_.hidden(), rng);
    image_encoder_ = ImageEncoderWeights::create(store_, d, rng);
    text_noise_ = NoiseMlpWeights::create(store_, "text_noise", d, rng);
    image_noise_ = NoiseMlpWeights::create(store_, "image_noise", d, rng);
    caption_decoder_ = CaptionDecoderWeights::create(store_, cfg_.vocab, d, rng);
    image_decoder_ = ImageDecoderWeights::create(store_, d, cfg_.qlevels, rng);
    text_cls_ = &store_.add("cls.text", kaiming_init({d}, d, rng));
    image_cls_ = &store_.add("cls.image", kaiming_init({d}, d, rng));
    cross_ = CrossTransformerWeights::create(store_, "cross", cfg_.exchange(), cfg_.hidden(), rng);
    fusion_ = Linear::create(store_, "fusion", 2 * d, d, rng);
    if (cfg_.task == Task::mner) {
      emission_ = Linear::create(store_, "emission", d, mner_scheme().size(), rng);
      crf_ = CrfParams::create(store_, mner_scheme().size());
    } else {
      classifier_ = Linear::create(store_, "classifier", d, kMsaClasses, rng);
    }
  }

  MuseModel(const MuseModel&) = delete;
  MuseModel& operator=(const MuseModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  const CrfParams& crf() const { return crf_; }

  ForwardOutput forward(Tape& tape, const SynthExample& ex, const ForwardOptions& opt = {}) const {
    ForwardOutput out;
    const std::size_t d = cfg_.d;
    const std::size_t n_text = std::min(ex.tokens.size(), text_encoder_.max_len());
    const EncodeOptions enc{cfg_.dropout, opt.training, opt.rng};
    const CrossOptions cross_opt{cfg_.dropout, opt.training, opt.rng, opt.capture_states};

    Var text_e, image_e;
    if (cfg_.uses_text()) text_e = encode_text(tape, ex.tokens, text_encoder_, enc);
    if (cfg_.uses_image()) image_e = encode_image(tape, ex.image, image_encoder_);

    Var zero = tape.constant(Tensor::scalar(0.0));
    out.recon.loss_it = zero;
    out.recon.loss_ti = zero;
    if (opt.compute_aux && cfg_.uses_caption_loss()) {
      Var image_n = inject_noise(tape, image_e, cfg_.noise.std_image, cfg_.noise.enabled, image_noise_, opt.rng,
                                 opt.training);
      auto dec = decode_text_captioning(tape, image_n, std::span(ex.tokens).first(n_text), caption_decoder_);
      out.recon.text_logits = dec.logits;
      out.recon.loss_it = dec.loss;
    }
    if (opt.compute_aux && cfg_.uses_generation_loss()) {
      Var text_n = inject_noise(tape, text_e, cfg_.noise.std_text, cfg_.noise.enabled, text_noise_, opt.rng,
                                opt.training);
      auto dec = decode_image_generation(tape, text_n, ex.image, image_decoder_);
      out.recon.image_logits = dec.logits;
      out.recon.loss_ti = dec.loss;
    }

    Var text_out, image_out;
    const std::size_t n_image = kPatchCount;
    if (cfg_.uses_text() && cfg_.uses_image()) {
      ModalityStream t0{prepend_cls(text_e, tape.param(*text_cls_)), Modality::text};
      ModalityStream i0{prepend_cls(image_e, tape.param(*image_cls_)), Modality::image};
      if (cfg_.uses_crosstransformer()) {
        CrossResult r = cross_forward(tape, t0, i0, cross_, cfg_.exchange(), cross_opt);
        text_out = r.text;
        image_out = r.image;
        out.trace = std::move(r.trace);
      } else {
        text_out = t0.embeddings;
        image_out = i0.embeddings;
      }
    } else if (cfg_.uses_text()) {
      text_out = single_stream_forward(tape, prepend_cls(text_e, tape.param(*text_cls_)), cross_, cross_opt);
      image_out = tape.constant(Tensor(Shape{n_image + 1, d}));
    } else {
      image_out = single_stream_forward(tape, prepend_cls(image_e, tape.param(*image_cls_)), cross_, cross_opt);
      text_out = tape.constant(Tensor(Shape{n_text + 1, d}));
    }

    out.fusion = fuse_outputs(tape, text_out, align_rows(tape, image_out, n_text), fusion_);

    if (cfg_.task == Task::mner) {
      Var tokens = dropout_mask(slice_rows(out.fusion, 1, n_text), cfg_.head_dropout, opt.training, opt.rng);
      out.task_output = emission_(tape, tokens);
      if (!ex.labels.empty()) {
        out.l_task = crf_log_likelihood(tape, out.task_output, std::span(ex.labels).first(n_text), crf_);
      }
    } else {
      out.task_output = classify_sentiment(tape, out.fusion, classifier_, cfg_.head_dropout, opt.training, opt.rng);
      if (ex.label >= 0) {
        const int target = ex.label;
        out.l_task = cross_entropy_logits(out.task_output, std::span(&target, 1));
      }
    }
    if (!out.l_task.valid()) out.l_task = zero;
    return out;
  }

  /// Viterbi labels (MNER) or a single-element argmax class (MSA).
  std::vector<int> predict(const SynthExample& ex) const {
    Tape tape;
    tape.set_grad_enabled(false);
    ForwardOptions opt;
    opt.compute_aux = false;
    SynthExample unlabeled;
    unlabeled.tokens = ex.tokens;
    unlabeled.image = ex.image;
    ForwardOutput f = forward(tape, unlabeled, opt);
    const Tensor& o = f.task_output.value();
    if (cfg_.task == Task::mner) return crf_viterbi_decode(o, crf_);
    int best = 0;
    for (std::size_t c = 1; c < o.size(); ++c) {
      if (o[c] > o[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
    }
    return {best};
  }

 private:
  ModelConfig cfg_;
  ParameterStore store_;
  TextEncoderWeights text_encoder_;
  ImageEncoderWeights image_encoder_;
  NoiseMlpWeights text_noise_, image_noise_;
  CaptionDecoderWeights caption_decoder_;
  ImageDecoderWeights image_decoder_;
  Parameter* text_cls_ = nullptr;
  Parameter* image_cls_ = nullptr;
  CrossTransformerWeights cross_;
  Linear fusion_;
  Linear emission_;
  CrfParams crf_;
  Linear classifier_;
};

}  // namespace muse
