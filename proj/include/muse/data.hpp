#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "muse/codec.hpp"
#include "muse/heads.hpp"
#include "muse/random.hpp"

namespace muse {

enum class Task { mner, msa };

inline std::string to_string(Task t) { return t == Task::mner ? "mner" : "msa"; }

inline Task parse_task(const std::string& s) {
  if (s == "mner") return Task::mner;
  if (s == "msa") return Task::msa;
  throw ConfigError("task: unknown task '" + s + "'");
}

// Synthetic vocabulary layout (V = 64).
inline constexpr int kVocabSize = 64;
inline constexpr int kSequenceLength = 12;
inline constexpr int kTriggerFirst = 1;  // 1..4: entity openers whose type only the image reveals
inline constexpr int kTriggerCount = 4;
inline constexpr int kContinueFirst = 5;  // 5..8: entity continuations
inline constexpr int kContinueCount = 4;
inline constexpr int kCueFirst = 1;  // 1..3: sentiment cue c = id - 1
inline constexpr int kFillerFirst = 9;
inline constexpr int kMsaClasses = 3;

enum class StripePattern { horizontal = 0, vertical = 1 };

inline const LabelScheme& mner_scheme() {
  static const LabelScheme scheme = LabelScheme::bio({"X", "Y"});
  return scheme;
}

struct ExampleMeta {
  std::vector<std::size_t> trigger_positions;
  int pattern = 0;
  int cue = -1;
};

struct SynthExample {
  std::vector<int> tokens;
  Tensor image;             // 8×8, values in [0, 1]
  std::vector<int> labels;  // per-token BIO ids (MNER)
  int label = -1;           // class id (MSA)
  ExampleMeta meta;
};

struct TaskConfig {
  Task task = Task::mner;
  std::size_t train_size = 2000;
  std::size_t val_size = 500;
  std::size_t test_size = 500;
  std::uint64_t seed = 7;
  int noise_pixels = 4;

  void validate() const {
    if (train_size < 1 || val_size < 1 || test_size < 1) throw ConfigError("sizes: every split needs >= 1 example");
    if (noise_pixels < 0 || noise_pixels > static_cast<int>(kImageCells)) throw ConfigError("noise_pixels: out of range");
  }
};

struct Dataset {
  Task task = Task::mner;
  std::vector<SynthExample> train, val, test;
};

enum class Split : std::uint64_t { train = 1, val = 2, test = 3 };

namespace detail {

inline int filler_token(Rng& rng) { return rng.integer(kFillerFirst, kVocabSize - 1); }

/// Stripes of high values on a low background, one random phase, then
/// `noise_pixels` distinct cells inverted. Values sit on a 1/32 grid.
inline Tensor stripe_image(StripePattern pattern, int noise_pixels, Rng& rng) {
  Tensor img(Shape{kImageSide, kImageSide});
  const std::size_t phase = static_cast<std::size_t>(rng.integer(0, 1));
  for (std::size_t r = 0; r < kImageSide; ++r) {
    for (std::size_t c = 0; c < kImageSide; ++c) {
      const std::size_t line = pattern == StripePattern::horizontal ? r : c;
      const bool on = line % 2 == phase;
      const int jitter = rng.integer(0, 8);
      img.at(r, c) = on ? (32 - jitter) / 32.0 : jitter / 32.0;
    }
  }
  std::vector<std::size_t> cells(kImageCells);
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
  for (int k = 0; k < noise_pixels; ++k) {
    const auto pick = static_cast<std::size_t>(rng.integer(k, static_cast<int>(kImageCells) - 1));
    std::swap(cells[static_cast<std::size_t>(k)], cells[pick]);
    double& v = img[cells[static_cast<std::size_t>(k)]];
    v = 1.0 - v;
  }
  return img;
}

inline SynthExample make_mner_example(int noise_pixels, Rng& rng) {
  SynthExample ex;
  ex.meta.pattern = rng.integer(0, 1);
  const int begin_label = ex.meta.pattern == 0 ? 1 : 3;  // B-X or B-Y
  ex.tokens.resize(kSequenceLength);
  for (int& t : ex.tokens) t = filler_token(rng);
  ex.labels.assign(kSequenceLength, 0);

  const int spans = rng.integer(1, 2);
  std::vector<char> used(kSequenceLength, 0);
  for (int s = 0; s < spans; ++s) {
    const int len = rng.integer(1, 2);
    for (;;) {
      const int start = rng.integer(0, kSequenceLength - len);
      bool free = true;
      for (int k = start; k < start + len; ++k) free = free && !used[static_cast<std::size_t>(k)];
      // Keep a gap so that neighbouring spans never merge.
      if (start > 0 && used[static_cast<std::size_t>(start - 1)]) free = false;
      if (start + len < kSequenceLength && used[static_cast<std::size_t>(start + len)]) free = false;
      if (!free) continue;
      const auto st = static_cast<std::size_t>(start);
      ex.tokens[st] = kTriggerFirst + rng.integer(0, kTriggerCount - 1);
      ex.labels[st] = begin_label;
      used[st] = 1;
      ex.meta.trigger_positions.push_back(st);
      if (len == 2) {
        ex.tokens[st + 1] = kContinueFirst + rng.integer(0, kContinueCount - 1);
        ex.labels[st + 1] = begin_label + 1;
        used[st + 1] = 1;
      }
      break;
    }
  }
  std::sort(ex.meta.trigger_positions.begin(), ex.meta.trigger_positions.end());
  ex.image = stripe_image(static_cast<StripePattern>(ex.meta.pattern), noise_pixels, rng);
  return ex;
}

inline SynthExample make_msa_example(int noise_pixels, Rng& rng) {
  SynthExample ex;
  ex.meta.cue = rng.integer(0, kMsaClasses - 1);
  ex.meta.pattern = rng.integer(0, 1);
  ex.tokens.resize(kSequenceLength);
  for (int& t : ex.tokens) t = filler_token(rng);
  ex.tokens[static_cast<std::size_t>(rng.integer(0, kSequenceLength - 1))] = kCueFirst + ex.meta.cue;
  ex.label = (ex.meta.cue + ex.meta.pattern) % kMsaClasses;
  ex.image = stripe_image(static_cast<StripePattern>(ex.meta.pattern), noise_pixels, rng);
  return ex;
}

inline std::vector<SynthExample> generate_split(const TaskConfig& cfg, Split split, std::size_t count) {
  std::vector<SynthExample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(split), i));
    out.push_back(cfg.task == Task::mner ? make_mner_example(cfg.noise_pixels, rng)
                                         : make_msa_example(cfg.noise_pixels, rng));
  }
  return out;
}

}  // namespace detail

/// Each example draws from its own counter-derived stream, so splits are
/// independent of each other's sizes and of generation order.
inline Dataset generate_task(const TaskConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.task = cfg.task;
  ds.train = detail::generate_split(cfg, Split::train, cfg.train_size);
  ds.val = detail::generate_split(cfg, Split::val, cfg.val_size);
  ds.test = detail::generate_split(cfg, Split::test, cfg.test_size);
  return ds;
}

/// Shuffled index batches; the last partial batch is kept.
inline std::vector<std::vector<std::size_t>> make_batches(std::size_t count, std::size_t batch_size, Rng& rng) {
  if (batch_size < 1) throw ConfigError("batch_size: must be >= 1");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < count; i += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(count, i + batch_size)));
  }
  return batches;
}

// ---- span metrics ----

struct Span {
  std::size_t begin;
  std::size_t end;  // exclusive
  std::string type;
  friend auto operator<=>(const Span&, const Span&) = default;
};

/// Exact spans of a BIO sequence. A stray I-T opens a new span.
inline std::vector<Span> extract_spans(std::span<const int> labels, const LabelScheme& scheme) {
  std::vector<Span> spans;
  bool open = false;
  Span cur{};
  auto close = [&](std::size_t at) {
    if (open) {
      cur.end = at;
      spans.push_back(cur);
      open = false;
    }
  };
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int id = labels[i];
    if (scheme.is_begin(id) || (scheme.is_inside(id) && (!open || cur.type != scheme.type_of(id)))) {
      close(i);
      cur = Span{i, i, scheme.type_of(id)};
      open = true;
    } else if (!scheme.is_inside(id)) {
      close(i);
    }
  }
  close(labels.size());
  return spans;
}

struct PrfScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline PrfScore prf_from_counts(std::size_t correct, std::size_t predicted, std::size_t gold) {
  PrfScore s;
  s.precision = predicted ? static_cast<double>(correct) / static_cast<double>(predicted) : 0.0;
  s.recall = gold ? static_cast<double>(correct) / static_cast<double>(gold) : 0.0;
  s.f1 = (s.precision + s.recall) > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

struct SpanCounts {
  std::size_t correct = 0, predicted = 0, gold = 0;

  void add(std::span<const int> pred, std::span<const int> gold_labels, const LabelScheme& scheme) {
    if (pred.size() != gold_labels.size()) throw ContractError("span_f1: sequence lengths differ");
    const auto p = extract_spans(pred, scheme);
    const auto g = extract_spans(gold_labels, scheme);
    const std::set<Span> gs(g.begin(), g.end());
    for (const Span& s : p) correct += gs.count(s);
    predicted += p.size();
    gold += g.size();
  }

  PrfScore score() const { return prf_from_counts(correct, predicted, gold); }
};

inline PrfScore span_f1(std::span<const int> pred, std::span<const int> gold, const LabelScheme& scheme) {
  SpanCounts c;
  c.add(pred, gold, scheme);
  return c.score();
}

// ---- JSON-lines persistence ----

inline nlohmann::json example_to_json(const SynthExample& ex, Task task) {
  nlohmann::json img = nlohmann::json::array();
  for (std::size_t r = 0; r < kImageSide; ++r) {
    const auto row = ex.image.row(r);
    img.push_back(std::vector<double>(row.begin(), row.end()));
  }
  nlohmann::json j;
  j["tokens"] = ex.tokens;
  j["image"] = std::move(img);
  if (task == Task::mner) {
    j["labels"] = ex.labels;
  } else {
    j["label"] = ex.label;
  }
  return j;
}

/// Inverse of example_to_json. Meta fields are rebuilt from the labels and
/// tokens, since the line format does not carry them.
inline SynthExample example_from_json(const nlohmann::json& j, Task task) {
  SynthExample ex;
  ex.tokens = j.at("tokens").get<std::vector<int>>();
  const auto rows = j.at("image").get<std::vector<std::vector<double>>>();
  if (rows.size() != kImageSide) throw InputError("dataset: image must have 8 rows");
  ex.image = Tensor(Shape{kImageSide, kImageSide});
  for (std::size_t r = 0; r < kImageSide; ++r) {
    if (rows[r].size() != kImageSide) throw InputError("dataset: image rows must have 8 values");
    for (std::size_t c = 0; c < kImageSide; ++c) ex.image.at(r, c) = rows[r][c];
  }
  for (int t : ex.tokens) {
    if (t < 0 || t >= kVocabSize) throw InputError("dataset: token id outside vocabulary");
  }
  if (task == Task::mner) {
    ex.labels = j.at("labels").get<std::vector<int>>();
    if (ex.labels.size() != ex.tokens.size()) throw InputError("dataset: labels and tokens differ in length");
    for (std::size_t i = 0; i < ex.labels.size(); ++i) {
      const int y = ex.labels[i];
      if (y < 0 || static_cast<std::size_t>(y) >= mner_scheme().size()) throw InputError("dataset: label id out of range");
      if (mner_scheme().is_begin(y)) {
        ex.meta.trigger_positions.push_back(i);
        ex.meta.pattern = mner_scheme().type_of(y) == "X" ? 0 : 1;
      }
    }
  } else {
    ex.label = j.at("label").get<int>();
    if (ex.label < 0 || ex.label >= kMsaClasses) throw InputError("dataset: class id out of range");
    for (int t : ex.tokens) {
      if (t >= kCueFirst && t < kCueFirst + kMsaClasses) ex.meta.cue = t - kCueFirst;
    }
    if (ex.meta.cue >= 0) ex.meta.pattern = ((ex.label - ex.meta.cue) % kMsaClasses + kMsaClasses) % kMsaClasses;
  }
  return ex;
}

inline std::string to_jsonl(const std::vector<SynthExample>& examples, Task task) {
  std::string out;
  for (const auto& ex : examples) {
    out += example_to_json(ex, task).dump();
    out += '\n';
  }
  return out;
}

inline std::vector<SynthExample> from_jsonl(std::istream& in, Task task) {
  std::vector<SynthExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(example_from_json(nlohmann::json::parse(line), task));
    } catch (const nlohmann::json::exception& e) {
      throw InputError("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_jsonl(const std::string& path, const std::vector<SynthExample>& examples, Task task) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot write " + path);
  f << to_jsonl(examples, task);
}

inline std::vector<SynthExample> read_jsonl(const std::string& path, Task task) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot read " + path);
  return from_jsonl(f, task);
}

}  // namespace muse
