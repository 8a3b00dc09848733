#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "muse/model.hpp"

namespace muse {

struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct LoadError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- objective ----

struct LossWeights {
  double alpha = 1.0;
  double beta = 1.0;

  void validate() const {
    if (!(std::isfinite(alpha) && alpha >= 0.0)) throw ConfigError("alpha: must be finite and >= 0");
    if (!(std::isfinite(beta) && beta >= 0.0)) throw ConfigError("beta: must be finite and >= 0");
  }
};

/// L = L_task + α·L_it + β·L_ti
inline double total_loss(double l_task, double l_it, double l_ti, const LossWeights& w) {
  return l_task + w.alpha * l_it + w.beta * l_ti;
}

inline Var total_loss(Var l_task, Var l_it, Var l_ti, const LossWeights& w) {
  return weighted_sum({l_task, l_it, l_ti}, {1.0, w.alpha, w.beta});
}

// ---- optimizer ----

struct AdamMoments {
  Tensor m;
  Tensor v;
  std::size_t step = 0;
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam update of one tensor in place.
inline void adam_step(Tensor& param, const Tensor& grad, AdamMoments& state, double lr, const AdamHyper& h = {}) {
  if (param.shape() != grad.shape()) {
    throw ContractError("adam_step: gradient " + shape_str(grad.shape()) + " does not match parameter " +
                        shape_str(param.shape()));
  }
  if (state.m.shape() != param.shape() || state.m.size() != param.size()) {
    state.m = Tensor(param.shape());
    state.v = Tensor(param.shape());
    state.step = 0;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  auto p = param.data();
  const auto g = grad.data();
  auto m = state.m.data();
  auto v = state.v.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
    v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
    const double m_hat = m[i] / c1;
    const double v_hat = v[i] / c2;
    p[i] -= lr * m_hat / (std::sqrt(v_hat) + h.eps);
  }
}

class Adam {
 public:
  Adam(double lr, double crf_lr, AdamHyper hyper = {}) : lr_(lr), crf_lr_(crf_lr), hyper_(hyper) {}

  void step(const std::vector<Parameter*>& params) {
    if (moments_.size() != params.size()) moments_.resize(params.size());
    for (std::size_t k = 0; k < params.size(); ++k) {
      Parameter& p = *params[k];
      adam_step(p.value, p.grad, moments_[k], p.group == ParamGroup::crf ? crf_lr_ : lr_, hyper_);
    }
  }

 private:
  double lr_, crf_lr_;
  AdamHyper hyper_;
  std::vector<AdamMoments> moments_;
};

// ---- run configuration ----

struct RunConfig {
  Task task = Task::mner;
  ModelVariant variant = ModelVariant::full;
  std::size_t d = 32;
  std::size_t num_layers = 6;
  std::size_t heads = 4;
  std::size_t ffn_hidden = 0;
  std::size_t mu = 2;
  std::size_t eta = 4;
  double theta = 0.1;
  double alpha = 1.0;
  double beta = 1.0;
  double lr = 1e-3;
  double crf_lr = 1e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  double dropout = 0.1;
  double head_dropout = 0.5;
  bool noise_enabled = true;
  std::uint64_t seed = 7;
  std::size_t train_size = 2000;
  std::size_t val_size = 500;
  std::size_t test_size = 500;
  int noise_pixels = 4;
  std::size_t qlevels = 4;
  std::string data_dir;
  std::string out_dir;

  /// Rejects invalid settings naming the offending field, before any model
  /// state is allocated.
  void validate() const {
    if (d < 1) throw ConfigError("d: must be >= 1");
    if (heads < 1 || d % heads != 0) throw ConfigError("heads: d must be divisible by heads");
    if (num_layers < 1) throw ConfigError("num_layers: must be >= 1");
    if (mu > eta) throw ConfigError("mu: must not exceed eta");
    if (eta > num_layers) throw ConfigError("eta: must not exceed num_layers");
    if (!(theta >= 0.0 && theta <= 1.0)) throw ConfigError("theta: must lie in [0, 1]");
    LossWeights{alpha, beta}.validate();
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr: must be finite and >= 0");
    if (!(crf_lr >= 0.0) || !std::isfinite(crf_lr)) throw ConfigError("crf_lr: must be finite and >= 0");
    if (batch_size < 1) throw ConfigError("batch_size: must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout: must lie in [0, 1)");
    if (!(head_dropout >= 0.0 && head_dropout < 1.0)) throw ConfigError("head_dropout: must lie in [0, 1)");
    if (qlevels < 2) throw ConfigError("qlevels: must be >= 2");
    task_config().validate();
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.task = task;
    m.variant = variant;
    m.d = d;
    m.num_layers = num_layers;
    m.heads = heads;
    m.ffn_hidden = ffn_hidden;
    m.mu = mu;
    m.eta = eta;
    m.theta = theta;
    m.dropout = dropout;
    m.head_dropout = head_dropout;
    m.noise.enabled = noise_enabled;
    m.qlevels = qlevels;
    return m;
  }

  TaskConfig task_config() const {
    TaskConfig t;
    t.task = task;
    t.train_size = train_size;
    t.val_size = val_size;
    t.test_size = test_size;
    t.seed = seed;
    t.noise_pixels = noise_pixels;
    return t;
  }

  LossWeights loss_weights() const { return {alpha, beta}; }

  nlohmann::json to_json() const {
    return {{"task", to_string(task)},
            {"variant", to_string(variant)},
            {"d", d},
            {"num_layers", num_layers},
            {"heads", heads},
            {"ffn_hidden", ffn_hidden},
            {"mu", mu},
            {"eta", eta},
            {"theta", theta},
            {"alpha", alpha},
            {"beta", beta},
            {"lr", lr},
            {"crf_lr", crf_lr},
            {"batch_size", batch_size},
            {"epochs", epochs},
            {"dropout", dropout},
            {"head_dropout", head_dropout},
            {"noise_enabled", noise_enabled},
            {"seed", seed},
            {"train_size", train_size},
            {"val_size", val_size},
            {"test_size", test_size},
            {"noise_pixels", noise_pixels},
            {"qlevels", qlevels},
            {"data_dir", data_dir},
            {"out_dir", out_dir}};
  }

  /// Overlays the keys present in `j`; unknown keys are rejected.
  void merge_json(const nlohmann::json& j) {
    for (const auto& [key, val] : j.items()) {
      try {
        if (key == "task") task = parse_task(val.get<std::string>());
        else if (key == "variant") variant = parse_variant(val.get<std::string>());
        else if (key == "d") d = val.get<std::size_t>();
        else if (key == "num_layers") num_layers = val.get<std::size_t>();
        else if (key == "heads") heads = val.get<std::size_t>();
        else if (key == "ffn_hidden") ffn_hidden = val.get<std::size_t>();
        else if (key == "mu") mu = val.get<std::size_t>();
        else if (key == "eta") eta = val.get<std::size_t>();
        else if (key == "theta") theta = val.get<double>();
        else if (key == "alpha") alpha = val.get<double>();
        else if (key == "beta") beta = val.get<double>();
        else if (key == "lr") lr = val.get<double>();
        else if (key == "crf_lr") crf_lr = val.get<double>();
        else if (key == "batch_size") batch_size = val.get<std::size_t>();
        else if (key == "epochs") epochs = val.get<std::size_t>();
        else if (key == "dropout") dropout = val.get<double>();
        else if (key == "head_dropout") head_dropout = val.get<double>();
        else if (key == "noise_enabled") noise_enabled = val.get<bool>();
        else if (key == "seed") seed = val.get<std::uint64_t>();
        else if (key == "train_size") train_size = val.get<std::size_t>();
        else if (key == "val_size") val_size = val.get<std::size_t>();
        else if (key == "test_size") test_size = val.get<std::size_t>();
        else if (key == "noise_pixels") noise_pixels = val.get<int>();
        else if (key == "qlevels") qlevels = val.get<std::size_t>();
        else if (key == "data_dir") data_dir = val.get<std::string>();
        else if (key == "out_dir") out_dir = val.get<std::string>();
        else throw ConfigError(key + ": unknown config field");
      } catch (const nlohmann::json::exception&) {
        throw ConfigError(key + ": wrong value type");
      }
    }
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    c.merge_json(j);
    return c;
  }

  /// Fingerprint of everything that determines parameter layout and meaning.
  std::string architecture_hash() const {
    const nlohmann::json arch{{"task", to_string(task)}, {"variant", to_string(variant)},
                              {"d", d},                  {"num_layers", num_layers},
                              {"heads", heads},          {"ffn_hidden", ffn_hidden},
                              {"mu", mu},                {"eta", eta},
                              {"theta", theta},          {"qlevels", qlevels}};
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : arch.dump()) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
  }
};

/// Sets one numeric field by name (used by sweeps).
inline void set_run_param(RunConfig& cfg, const std::string& name, double value) {
  auto as_count = [&](const char* field) {
    if (value < 0.0 || value != std::floor(value)) throw ConfigError(std::string(field) + ": must be a whole number");
    return static_cast<std::size_t>(value);
  };
  if (name == "theta") cfg.theta = value;
  else if (name == "mu") cfg.mu = as_count("mu");
  else if (name == "eta") cfg.eta = as_count("eta");
  else if (name == "alpha") cfg.alpha = value;
  else if (name == "beta") cfg.beta = value;
  else if (name == "lr") cfg.lr = value;
  else if (name == "crf_lr") cfg.crf_lr = value;
  else if (name == "dropout") cfg.dropout = value;
  else if (name == "num_layers") cfg.num_layers = as_count("num_layers");
  else if (name == "d") cfg.d = as_count("d");
  else if (name == "heads") cfg.heads = as_count("heads");
  else if (name == "seed") cfg.seed = static_cast<std::uint64_t>(as_count("seed"));
  else throw ConfigError("param: '" + name + "' cannot be swept");
}

// ---- evaluation ----

struct Metrics {
  Task task = Task::mner;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  double trigger_accuracy = 0.0;  // MNER: gold label reproduced at entity openers
  double accuracy = 0.0, macro_f1 = 0.0;

  double primary() const { return task == Task::mner ? f1 : accuracy; }

  nlohmann::json to_json() const {
    if (task == Task::mner) {
      return {{"task", "mner"}, {"precision", precision}, {"recall", recall}, {"f1", f1},
              {"trigger_accuracy", trigger_accuracy}};
    }
    return {{"task", "msa"}, {"accuracy", accuracy}, {"macro_f1", macro_f1}};
  }
};

inline Metrics metrics_from_predictions(Task task, const std::vector<SynthExample>& examples,
                                        const std::vector<std::vector<int>>& predictions) {
  if (examples.size() != predictions.size()) throw ContractError("metrics: prediction count mismatch");
  Metrics m;
  m.task = task;
  if (task == Task::mner) {
    SpanCounts counts;
    std::size_t triggers = 0, trigger_hits = 0;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      counts.add(predictions[i], examples[i].labels, mner_scheme());
      for (std::size_t pos : examples[i].meta.trigger_positions) {
        ++triggers;
        trigger_hits += predictions[i][pos] == examples[i].labels[pos];
      }
    }
    const PrfScore s = counts.score();
    m.precision = s.precision;
    m.recall = s.recall;
    m.f1 = s.f1;
    m.trigger_accuracy = triggers ? static_cast<double>(trigger_hits) / static_cast<double>(triggers) : 0.0;
  } else {
    std::vector<std::size_t> tp(kMsaClasses), fp(kMsaClasses), fn(kMsaClasses);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      const int pred = predictions[i].at(0);
      const int gold = examples[i].label;
      if (pred == gold) {
        ++hits;
        ++tp[static_cast<std::size_t>(gold)];
      } else {
        if (pred >= 0 && pred < kMsaClasses) ++fp[static_cast<std::size_t>(pred)];
        ++fn[static_cast<std::size_t>(gold)];
      }
    }
    m.accuracy = examples.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(examples.size());
    double f1_sum = 0.0;
    for (int c = 0; c < kMsaClasses; ++c) {
      const auto k = static_cast<std::size_t>(c);
      f1_sum += prf_from_counts(tp[k], tp[k] + fp[k], tp[k] + fn[k]).f1;
    }
    m.macro_f1 = f1_sum / kMsaClasses;
  }
  return m;
}

/// Deterministic: dropout and noise are off.
inline Metrics evaluate(const MuseModel& model, const std::vector<SynthExample>& examples) {
  std::vector<std::vector<int>> preds;
  preds.reserve(examples.size());
  for (const auto& ex : examples) preds.push_back(model.predict(ex));
  return metrics_from_predictions(model.config().task, examples, preds);
}

inline Metrics evaluate(const MuseModel& model, const std::vector<SynthExample>& examples, Task data_task) {
  if (model.config().task != data_task) {
    throw ConfigError("task: model trained for " + to_string(model.config().task) + " but data is " +
                      to_string(data_task));
  }
  return evaluate(model, examples);
}

// ---- checkpoints ----

inline constexpr int kCheckpointFormat = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  RunConfig config;
  std::string config_hash;
  std::string rng_state;
  std::vector<NamedTensor> tensors;
};

namespace detail {

inline void put_le(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
}

inline double get_le(const char* p) {
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[b])) << (8 * b);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

inline void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw LoadError("cannot write " + tmp);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw LoadError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw LoadError("cannot read " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

}  // namespace detail

/// Writes `<prefix>.json` (manifest) and `<prefix>.bin` (little-endian f64 blob).
inline void save_checkpoint(const std::string& prefix, const ParameterStore& store, const RunConfig& cfg,
                            const std::string& rng_state = {}) {
  std::string blob;
  nlohmann::json tensors = nlohmann::json::array();
  for (const Parameter* p : store.all()) {
    tensors.push_back({{"name", p->name}, {"shape", p->value.shape()}, {"offset", blob.size()}});
    for (double v : p->value.data()) detail::put_le(blob, v);
  }
  const std::string blob_name = std::filesystem::path(prefix + ".bin").filename().string();
  nlohmann::json manifest{{"format_version", kCheckpointFormat},
                          {"blob", blob_name},
                          {"blob_bytes", blob.size()},
                          {"tensors", std::move(tensors)},
                          {"config", cfg.to_json()},
                          {"config_hash", cfg.architecture_hash()},
                          {"rng_state", rng_state}};
  detail::write_file_atomic(prefix + ".bin", blob);
  detail::write_file_atomic(prefix + ".json", manifest.dump(2) + "\n");
}

/// Reads and validates a checkpoint; nothing is returned unless every entry
/// fits inside the blob.
inline Checkpoint load_checkpoint(const std::string& prefix) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(detail::read_file(prefix + ".json"));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("checkpoint manifest: " + std::string(e.what()));
  }
  Checkpoint ck;
  try {
    if (manifest.at("format_version").get<int>() != kCheckpointFormat) {
      throw LoadError("checkpoint manifest: unsupported format_version");
    }
    ck.config = RunConfig::from_json(manifest.at("config"));
    ck.config_hash = manifest.at("config_hash").get<std::string>();
    ck.rng_state = manifest.value("rng_state", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("checkpoint manifest: " + std::string(e.what()));
  }
  const auto dir = std::filesystem::path(prefix).parent_path();
  const std::string blob = detail::read_file((dir / manifest.value("blob", std::string{})).string());
  for (const auto& entry : manifest.at("tensors")) {
    const std::string name = entry.value("name", std::string{"<unnamed>"});
    Shape shape;
    std::size_t offset = 0;
    try {
      shape = entry.at("shape").get<Shape>();
      offset = entry.at("offset").get<std::size_t>();
    } catch (const nlohmann::json::exception&) {
      throw LoadError("checkpoint entry '" + name + "': malformed shape or offset");
    }
    const std::size_t count = shape_size(shape);
    if (offset % 8 != 0 || offset > blob.size() || count > (blob.size() - offset) / 8) {
      throw LoadError("checkpoint entry '" + name + "': offset " + std::to_string(offset) + " + " +
                      std::to_string(count * 8) + " bytes overflows blob of " + std::to_string(blob.size()) +
                      " bytes");
    }
    std::vector<double> data(count);
    for (std::size_t i = 0; i < count; ++i) data[i] = detail::get_le(blob.data() + offset + 8 * i);
    ck.tensors.push_back({name, Tensor(shape, std::move(data))});
  }
  if (manifest.value("blob_bytes", blob.size()) != blob.size()) {
    throw LoadError("checkpoint blob: expected " + std::to_string(manifest.value("blob_bytes", std::size_t{0})) +
                    " bytes, found " + std::to_string(blob.size()));
  }
  return ck;
}

/// Copies checkpoint tensors into `store`. A config-hash mismatch is refused
/// unless `force`; shape or name mismatches always are. The store is left
/// untouched on any error.
inline void apply_checkpoint(const Checkpoint& ck, ParameterStore& store, const std::string& expected_hash,
                             bool force = false) {
  if (ck.config_hash != expected_hash) {
    std::clog << "warning: checkpoint config hash " << ck.config_hash << " differs from " << expected_hash << '\n';
    if (!force) throw LoadError("checkpoint config hash mismatch (use force to override)");
  }
  std::vector<std::pair<Parameter*, const Tensor*>> plan;
  for (const NamedTensor& t : ck.tensors) {
    Parameter* p = store.find(t.name);
    if (!p) throw LoadError("checkpoint entry '" + t.name + "': no such parameter in model");
    if (p->value.shape() != t.value.shape()) {
      throw LoadError("checkpoint entry '" + t.name + "': shape " + shape_str(t.value.shape()) + " vs model " +
                      shape_str(p->value.shape()));
    }
    plan.emplace_back(p, &t.value);
  }
  if (plan.size() != store.size()) throw LoadError("checkpoint: model has parameters missing from checkpoint");
  for (auto& [p, t] : plan) p->value = *t;
}

inline std::unique_ptr<MuseModel> load_model(const std::string& prefix, bool force = false) {
  Checkpoint ck = load_checkpoint(prefix);
  auto model = std::make_unique<MuseModel>(ck.config.model_config(), ck.config.seed);
  apply_checkpoint(ck, model->params(), ck.config.architecture_hash(), force);
  return model;
}

// ---- training ----

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0, l_task = 0.0, l_it = 0.0, l_ti = 0.0;
  double val_metric = 0.0;
  double seconds = 0.0;
};

inline std::string epoch_log_csv(const std::vector<EpochLog>& rows, bool with_seconds = true) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "epoch,train_loss,l_task,l_it,l_ti,val_metric" << (with_seconds ? ",seconds" : "") << '\n';
  for (const auto& r : rows) {
    os << r.epoch << ',' << r.train_loss << ',' << r.l_task << ',' << r.l_it << ',' << r.l_ti << ',' << r.val_metric;
    if (with_seconds) os << ',' << r.seconds;
    os << '\n';
  }
  return os.str();
}

struct TrainResult {
  std::unique_ptr<MuseModel> model;  // holds the best-validation parameters
  std::vector<EpochLog> log;
  Metrics initial_val;
  Metrics best_val;
  Metrics test;
  std::size_t best_epoch = 0;
  std::string rng_state;
  double seconds = 0.0;
};

struct TrainOptions {
  bool verbose = false;
  std::ostream* log = &std::clog;
};

inline Dataset load_or_generate(const RunConfig& cfg) {
  if (cfg.data_dir.empty()) return generate_task(cfg.task_config());
  Dataset ds;
  ds.task = cfg.task;
  const std::filesystem::path dir(cfg.data_dir);
  ds.train = read_jsonl((dir / "train.jsonl").string(), cfg.task);
  ds.val = read_jsonl((dir / "val.jsonl").string(), cfg.task);
  ds.test = read_jsonl((dir / "test.jsonl").string(), cfg.task);
  return ds;
}

/// Epoch loop: per-example forward/backward with gradients averaged over each
/// batch, one Adam step per batch, best-validation parameters retained.
inline TrainResult train(const RunConfig& cfg, const Dataset& data, const TrainOptions& opt = {}) {
  cfg.validate();
  if (data.task != cfg.task) throw ConfigError("task: config and dataset disagree");
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();

  TrainResult res;
  res.model = std::make_unique<MuseModel>(cfg.model_config(), cfg.seed);
  MuseModel& model = *res.model;
  ParameterStore& store = model.params();
  const auto params = store.all();
  Adam adam(cfg.lr, cfg.crf_lr);
  Rng step_rng(derive_seed(cfg.seed, 0x5eed));
  Rng shuffle_rng(derive_seed(cfg.seed, 0x5ff1e));
  const LossWeights weights = cfg.loss_weights();

  res.initial_val = evaluate(model, data.val);
  res.best_val = res.initial_val;
  std::vector<Tensor> best;
  for (const Parameter* p : params) best.push_back(p->value);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochLog row;
    row.epoch = epoch;
    std::size_t seen = 0;
    for (const auto& batch : make_batches(data.train.size(), cfg.batch_size, shuffle_rng)) {
      store.zero_grad();
      const double inv_b = 1.0 / static_cast<double>(batch.size());
      for (std::size_t idx : batch) {
        Tape tape;
        ForwardOptions fo;
        fo.training = true;
        fo.rng = &step_rng;
        ForwardOutput f = model.forward(tape, data.train[idx], fo);
        Var total = total_loss(f.l_task, f.recon.loss_it, f.recon.loss_ti, weights);
        if (!std::isfinite(total.value().item())) {
          const std::string where = tape.first_non_finite();
          throw NonFiniteError("non-finite loss at epoch " + std::to_string(epoch) + ", example " +
                               std::to_string(idx) + "; first non-finite tensor: " +
                               (where.empty() ? std::string("loss") : where));
        }
        backward_pass(tape, scale(total, inv_b));
        row.train_loss += total.value().item();
        row.l_task += f.l_task.value().item();
        row.l_it += f.recon.loss_it.value().item();
        row.l_ti += f.recon.loss_ti.value().item();
        ++seen;
      }
      adam.step(params);
    }
    const double denom = seen ? static_cast<double>(seen) : 1.0;
    row.train_loss /= denom;
    row.l_task /= denom;
    row.l_it /= denom;
    row.l_ti /= denom;
    const Metrics val = evaluate(model, data.val);
    row.val_metric = val.primary();
    row.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    res.log.push_back(row);
    if (opt.verbose && opt.log) {
      *opt.log << "epoch " << epoch << " loss " << row.train_loss << " task " << row.l_task << " it " << row.l_it
               << " ti " << row.l_ti << " val " << row.val_metric << " (" << row.seconds << "s)" << std::endl;
    }
    if (epoch == 1 || val.primary() > res.best_val.primary()) {
      res.best_val = val;
      res.best_epoch = epoch;
      for (std::size_t k = 0; k < params.size(); ++k) best[k] = params[k]->value;
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = best[k];
  res.test = evaluate(model, data.test);
  res.rng_state = step_rng.state();
  res.seconds = std::chrono::duration<double>(clock::now() - t0).count();

  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    const std::filesystem::path out(cfg.out_dir);
    save_checkpoint((out / "checkpoint").string(), store, cfg, res.rng_state);
    std::ofstream((out / "train_log.csv").string()) << epoch_log_csv(res.log);
    nlohmann::json summary{{"best_epoch", res.best_epoch},
                           {"val", res.best_val.to_json()},
                           {"test", res.test.to_json()},
                           {"seconds", res.seconds}};
    std::ofstream((out / "metrics.json").string()) << summary.dump(2) << '\n';
  }
  return res;
}

// ---- sweeps and ablations ----

inline std::size_t thread_budget() {
  if (const char* env = std::getenv("MUSE_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<std::size_t>(n);
  }
  return 1;
}

/// Runs jobs 0..count-1 on up to `threads` workers; results land by index.
inline void run_parallel(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& job) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < count;) {
        try {
          job(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct SweepRow {
  std::string param;
  double value = 0.0;
  std::uint64_t seed = 0;
  double val_metric = 0.0;
  double test_metric = 0.0;
  double seconds = 0.0;
};

inline std::string format_number(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "param,value,seed,val_metric,test_metric,seconds\n";
  for (const auto& r : rows) {
    os << r.param << ',' << format_number(r.value) << ',' << r.seed << ',' << format_number(r.val_metric) << ','
       << format_number(r.test_metric) << ',' << std::fixed << std::setprecision(3) << r.seconds
       << std::defaultfloat << '\n';
  }
  return os.str();
}

/// Every value is validated before any training starts.
inline std::vector<SweepRow> run_sweep(const RunConfig& base, const std::string& param,
                                       const std::vector<double>& values, const Dataset& data,
                                       std::size_t threads = thread_budget()) {
  std::vector<RunConfig> configs;
  for (double v : values) {
    RunConfig c = base;
    c.out_dir.clear();
    set_run_param(c, param, v);
    c.validate();
    configs.push_back(c);
  }
  std::vector<SweepRow> rows(values.size());
  run_parallel(values.size(), threads, [&](std::size_t i) {
    TrainResult r = train(configs[i], data);
    rows[i] = SweepRow{param, values[i], configs[i].seed, r.best_val.primary(), r.test.primary(), r.seconds};
  });
  return rows;
}

struct AblationRow {
  Task task = Task::mner;
  ModelVariant variant = ModelVariant::full;
  Metrics val;
  Metrics test;
  double seconds = 0.0;
};

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "task,variant,val_metric,test_metric,test_precision,test_recall,test_f1,test_trigger_accuracy,"
        "test_accuracy,test_macro_f1,seconds\n";
  for (const auto& r : rows) {
    os << to_string(r.task) << ',' << to_string(r.variant) << ',' << format_number(r.val.primary()) << ','
       << format_number(r.test.primary()) << ',' << format_number(r.test.precision) << ','
       << format_number(r.test.recall) << ',' << format_number(r.test.f1) << ','
       << format_number(r.test.trigger_accuracy) << ',' << format_number(r.test.accuracy) << ','
       << format_number(r.test.macro_f1) << ',' << std::fixed << std::setprecision(3) << r.seconds
       << std::defaultfloat << '\n';
  }
  return os.str();
}

inline std::vector<AblationRow> run_ablation(const RunConfig& base, const Dataset& data,
                                             const std::vector<ModelVariant>& variants = all_variants(),
                                             std::size_t threads = thread_budget()) {
  std::vector<AblationRow> rows(variants.size());
  run_parallel(variants.size(), threads, [&](std::size_t i) {
    RunConfig c = base;
    c.out_dir.clear();
    c.variant = variants[i];
    TrainResult r = train(c, data);
    rows[i] = AblationRow{c.task, c.variant, r.best_val, r.test, r.seconds};
  });
  return rows;
}

}  // namespace muse
