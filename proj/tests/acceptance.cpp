// Acceptance run: one PASS/FAIL line per criterion; exit status 0 only if all pass.

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "crf_oracle.hpp"
#include "muse/gradcheck_suite.hpp"
#include "muse/harness.hpp"

using namespace muse;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool cond, const std::string& what) {
    if (!cond && pass) detail = what;
    pass = pass && cond;
  }
};

std::map<int, std::pair<bool, std::string>> g_results;

void report(int id, const std::string& title, const Verdict& v, const std::string& summary) {
  std::ostringstream line;
  line << "criterion " << id << " [" << title << "]: " << (v.pass ? "PASS" : "FAIL") << " - "
       << (v.pass ? summary : v.detail + "; " + summary);
  g_results[id] = {v.pass, line.str()};
  std::cout << "  done: criterion " << id << std::endl;
}

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

std::string shortest(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

Tensor random_tensor(Shape shape, Rng& rng, double sd = 1.0) {
  Tensor t(std::move(shape));
  for (double& x : t.data()) x = rng.normal(0.0, sd);
  return t;
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

// Well-formed: expected header, expected row count, same column count
// everywhere, every numeric field finite.
bool csv_well_formed(const std::string& csv, const std::string& header, std::size_t rows, std::size_t first_numeric) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != header) return false;
  const auto columns = static_cast<std::size_t>(std::count(header.begin(), header.end(), ',')) + 1;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    if (cells.size() != columns) return false;
    for (std::size_t k = first_numeric; k < cells.size(); ++k) {
      char* end = nullptr;
      const double v = std::strtod(cells[k].c_str(), &end);
      if (end == cells[k].c_str() || *end != '\0' || !std::isfinite(v)) return false;
    }
  }
  return n == rows;
}

// ---- 1 ----
void gradient_correctness() {
  const GradcheckReport r = run_gradcheck_suite(1e-3);
  Verdict v;
  double worst_op = 0.0, worst_e2e = 0.0;
  std::size_t e2e = 0;
  for (const auto& row : r.rows) {
    const bool end_to_end = row.name.rfind("end_to_end/", 0) == 0;
    const double limit = end_to_end ? 1e-3 : 1e-4;
    v.require(std::isfinite(row.max_error) && row.max_error < limit,
              row.name + " error " + std::to_string(row.max_error));
    (end_to_end ? worst_e2e : worst_op) = std::max(end_to_end ? worst_e2e : worst_op, row.max_error);
    e2e += end_to_end;
  }
  v.require(e2e == 2 && r.rows.size() >= 30, "suite is missing rows");
  v.require(r.seconds < 120.0, "runtime " + fmt(r.seconds, 1) + " s");
  std::cout << r.table();
  report(1, "gradient correctness", v,
         std::to_string(r.rows.size()) + " checks, worst op " + sci(worst_op) + ", worst end-to-end " + sci(worst_e2e) +
             ", " + fmt(r.seconds, 1) + " s");
}

// ---- 2 ----
void crf_oracle() {
  Rng rng(2024);
  Verdict v;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(rng.integer(0, 4));
    const std::size_t l = 1 + static_cast<std::size_t>(rng.integer(0, 3));
    const Tensor e = random_tensor({n, l}, rng, 2.0), tr = random_tensor({l, l}, rng), st = random_tensor({l}, rng),
                 en = random_tensor({l}, rng);
    const double err = std::abs(crf_log_partition(e, tr, st, en) - oracle::brute_log_partition(e, tr, st, en));
    worst = std::max(worst, err);
    v.require(err <= 1e-8, "trial " + std::to_string(trial) + " logZ error " + std::to_string(err));
    v.require(oracle::viterbi_matches(crf_viterbi_decode(e, tr, st, en), e, tr, st, en),
              "trial " + std::to_string(trial) + " Viterbi path differs from enumeration");
  }
  // Fully tied scores must resolve to the all-lowest path.
  const std::vector<int> tied = crf_viterbi_decode(Tensor(Shape{4, 3}), Tensor(Shape{3, 3}), Tensor(Shape{3}),
                                                   Tensor(Shape{3}));
  v.require(tied == std::vector<int>(4, 0), "tie rule not applied");
  report(2, "CRF oracle equivalence", v, "100 trials, worst logZ error " + sci(worst));
}

// ---- 3 ----
void exchange_invariants() {
  Rng rng(33);
  Verdict v;
  std::size_t layers_checked = 0;
  double worst_theta0 = 0.0;
  for (int pass = 0; pass < 50; ++pass) {
    ExchangeConfig cfg;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.num_layers = static_cast<std::size_t>(rng.integer(2, 5));
    cfg.eta = static_cast<std::size_t>(rng.integer(1, static_cast<int>(cfg.num_layers)));
    cfg.mu = static_cast<std::size_t>(rng.integer(0, static_cast<int>(cfg.eta) - 1));
    const int tenths = rng.integer(0, 10);
    cfg.theta = tenths / 10.0;
    const std::size_t n_text = static_cast<std::size_t>(rng.integer(2, 16));
    const std::size_t n_image = static_cast<std::size_t>(rng.integer(2, 20));

    ParameterStore store;
    const auto weights = CrossTransformerWeights::create(store, "cross", cfg, 4 * cfg.dim, rng);
    const Tensor text = random_tensor({n_text + 1, cfg.dim}, rng), image = random_tensor({n_image + 1, cfg.dim}, rng);
    Tape tape;
    tape.set_grad_enabled(false);
    CrossOptions opt;
    opt.capture_states = true;
    const CrossResult r = cross_forward(tape, {tape.constant(text), Modality::text},
                                        {tape.constant(image), Modality::image}, weights, cfg, opt);
    const std::string where = "pass " + std::to_string(pass);
    v.require(r.trace.layers.size() == cfg.eta - cfg.mu, where + ": wrong number of exchange layers");
    for (const auto& lt : r.trace.layers) {
      ++layers_checked;
      const std::size_t want_t = static_cast<std::size_t>(tenths) * n_text / 10;
      const std::size_t want_i = static_cast<std::size_t>(tenths) * n_image / 10;
      v.require(lt.text_selected.size() == want_t && lt.image_selected.size() == want_i,
                where + ": selected count differs from floor(theta*n)");
      for (const auto* sel : {&lt.text_selected, &lt.image_selected}) {
        for (std::size_t k : *sel) v.require(k != 0, where + ": cls row selected");
      }
      auto rows_unchanged = [](const Tensor& before, const Tensor& after, const std::vector<std::size_t>& sel) {
        for (std::size_t row = 0; row < before.rows(); ++row) {
          if (std::find(sel.begin(), sel.end(), row) != sel.end()) continue;
          if (std::memcmp(before.row(row).data(), after.row(row).data(), before.cols() * sizeof(double)) != 0) {
            return false;
          }
        }
        return true;
      };
      v.require(rows_unchanged(lt.text_before, lt.text_after, lt.text_selected) &&
                    rows_unchanged(lt.image_before, lt.image_after, lt.image_selected),
                where + ": a non-selected row changed");
    }

    ExchangeConfig zero = cfg, none = cfg;
    zero.theta = 0.0;
    none.mu = none.eta;
    Tape t0, t1;
    const CrossResult a = cross_forward(t0, {t0.constant(text), Modality::text}, {t0.constant(image), Modality::image},
                                        weights, zero);
    const CrossResult b = cross_forward(t1, {t1.constant(text), Modality::text}, {t1.constant(image), Modality::image},
                                        weights, none);
    const double diff = std::max(max_abs_diff(a.text.value(), b.text.value()),
                                 max_abs_diff(a.image.value(), b.image.value()));
    worst_theta0 = std::max(worst_theta0, diff);
    v.require(diff <= 1e-12, where + ": theta=0 differs from no-exchange run by " + std::to_string(diff));
  }
  report(3, "exchange invariants", v,
         "50 passes, " + std::to_string(layers_checked) + " exchange layers, theta=0 max diff " +
             sci(worst_theta0));
}

// ---- 4 ----
void attention_normalization() {
  Rng rng(44);
  Verdict v;
  double worst = 0.0;
  std::size_t rows = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t heads = static_cast<std::size_t>(rng.integer(1, 4));
    const std::size_t d = heads * static_cast<std::size_t>(rng.integer(1, 4));
    const std::size_t layers = static_cast<std::size_t>(rng.integer(1, 6));
    ParameterStore store;
    ExchangeConfig cfg;
    cfg.dim = d;
    cfg.heads = heads;
    cfg.num_layers = layers;
    cfg.mu = cfg.eta = 0;
    const auto weights = CrossTransformerWeights::create(store, "cross", cfg, 4 * d, rng);
    Tape tape;
    tape.set_grad_enabled(false);
    Var x = tape.constant(random_tensor({static_cast<std::size_t>(rng.integer(1, 20)), d}, rng, 3.0));
    for (const auto& lw : weights.layers) {
      AttentionResult a = multi_head_attention(tape, x, lw.attention, 0.0, false, nullptr);
      std::vector<const Tensor*> maps{&a.map.averaged};
      for (const auto& h : a.map.per_head) maps.push_back(&h);
      v.require(a.map.per_head.size() == heads, "missing per-head maps");
      for (const Tensor* m : maps) {
        for (std::size_t i = 0; i < m->rows(); ++i) {
          double s = 0.0;
          for (double p : m->row(i)) s += p;
          worst = std::max(worst, std::abs(s - 1.0));
          ++rows;
        }
      }
      x = ffn_block(tape, a.output, lw.ffn, 0.0, false, nullptr);
    }
  }
  v.require(worst <= 1e-6, "row sum off by " + std::to_string(worst));
  report(4, "attention normalization", v, std::to_string(rows) + " rows, worst |sum-1| " + sci(worst));
}

// ---- 5 ----
void loss_exactness() {
  Verdict v;
  v.require(total_loss(2.0, 0.5, 0.25, LossWeights{1, 1}) == 2.75, "(2,0.5,0.25) != 2.75");
  v.require(total_loss(2.0, 0.5, 0.25, LossWeights{0, 0}) == 2.0, "alpha=beta=0 != l_task");
  v.require(total_loss(1.0, 0.4, 0.3, LossWeights{0.5, 2}) == 1.0 + 0.5 * 0.4 + 2.0 * 0.3, "(1,0.4,0.3) mismatch");
  for (const LossWeights w : {LossWeights{1, 1}, LossWeights{0.5, 2}, LossWeights{0.37, 0}}) {
    Tape tape;
    Var a = tape.leaf(Tensor::scalar(2.0), true), b = tape.leaf(Tensor::scalar(0.5), true),
        c = tape.leaf(Tensor::scalar(0.25), true);
    Var total = total_loss(a, b, c, w);
    backward_pass(tape, total);
    v.require(total.value().item() == total_loss(2.0, 0.5, 0.25, w), "tape value differs from scalar form");
    v.require(a.grad().item() == 1.0 && b.grad().item() == w.alpha && c.grad().item() == w.beta,
              "gradients differ from (1, alpha, beta)");
  }
  report(5, "loss exactness", v, "hand values exact, d/dl_it == alpha");
}

// ---- 6, 7, 8, 10 ----
struct TaskRuns {
  std::vector<AblationRow> rows;
  std::map<ModelVariant, double> seconds;
  TrainResult full;
};

TaskRuns ablate(Task task, const Dataset& data) {
  RunConfig base;
  base.task = task;
  TaskRuns out;
  for (ModelVariant variant : all_variants()) {
    RunConfig c = base;
    c.variant = variant;
    TrainResult r = train(c, data);
    std::cout << "  " << to_string(task) << ' ' << to_string(variant) << ": val " << fmt(r.best_val.primary())
              << " test " << fmt(r.test.primary()) << " (" << fmt(r.seconds, 1) << " s)" << std::endl;
    out.rows.push_back(AblationRow{task, variant, r.best_val, r.test, r.seconds});
    out.seconds[variant] = r.seconds;
    if (variant == ModelVariant::full) out.full = std::move(r);
  }
  return out;
}

const AblationRow& row_of(const TaskRuns& runs, ModelVariant v) {
  for (const auto& r : runs.rows) {
    if (r.variant == v) return r;
  }
  throw std::logic_error("variant missing");
}

void fusion_and_ablation(const fs::path& out_dir) {
  RunConfig defaults;
  defaults.task = Task::mner;
  const Dataset mner_data = generate_task(defaults.task_config());
  defaults.task = Task::msa;
  const Dataset msa_data = generate_task(defaults.task_config());

  std::cout << "training ablation variants (2000/500/500, seed 7)" << std::endl;
  TaskRuns mner = ablate(Task::mner, mner_data);
  TaskRuns msa = ablate(Task::msa, msa_data);

  {
    const auto& full = row_of(mner, ModelVariant::full);
    const auto& text = row_of(mner, ModelVariant::only_text);
    const double secs = mner.seconds[ModelVariant::full] + mner.seconds[ModelVariant::only_text];
    Verdict v;
    v.require(full.test.f1 >= 0.90, "full F1 " + fmt(full.test.f1));
    v.require(full.test.f1 - text.test.f1 >= 0.15, "full - only_text = " + fmt(full.test.f1 - text.test.f1));
    v.require(std::abs(text.test.trigger_accuracy - 0.5) <= 0.10,
              "only_text trigger accuracy " + fmt(text.test.trigger_accuracy));
    v.require(secs <= 900.0, "runtime " + fmt(secs, 1) + " s");
    report(6, "fusion efficacy, MNER", v,
           "full F1 " + fmt(full.test.f1) + ", only_text F1 " + fmt(text.test.f1) + ", only_text trigger acc " +
               fmt(text.test.trigger_accuracy) + ", " + fmt(secs, 1) + " s");
  }
  {
    const auto& full = row_of(msa, ModelVariant::full);
    const auto& text = row_of(msa, ModelVariant::only_text);
    const auto& image = row_of(msa, ModelVariant::only_image);
    const double secs = msa.seconds[ModelVariant::full] + msa.seconds[ModelVariant::only_text] +
                        msa.seconds[ModelVariant::only_image];
    Verdict v;
    v.require(full.test.accuracy >= 0.90, "full accuracy " + fmt(full.test.accuracy));
    v.require(text.test.accuracy <= 0.60, "only_text accuracy " + fmt(text.test.accuracy));
    v.require(image.test.accuracy <= 0.45, "only_image accuracy " + fmt(image.test.accuracy));
    v.require(secs <= 900.0, "runtime " + fmt(secs, 1) + " s");
    report(7, "fusion efficacy, MSA", v,
           "full acc " + fmt(full.test.accuracy) + ", only_text " + fmt(text.test.accuracy) + ", only_image " +
               fmt(image.test.accuracy) + ", " + fmt(secs, 1) + " s");
  }
  {
    std::vector<AblationRow> all = mner.rows;
    all.insert(all.end(), msa.rows.begin(), msa.rows.end());
    const std::string csv = ablation_csv(all);
    write_text(out_dir / "ablation.csv", csv);
    Verdict v;
    v.require(csv_well_formed(csv,
                              "task,variant,val_metric,test_metric,test_precision,test_recall,test_f1,"
                              "test_trigger_accuracy,test_accuracy,test_macro_f1,seconds",
                              14, 2),
              "ablation CSV malformed");
    std::string notes;
    for (const TaskRuns* runs : {&mner, &msa}) {
      const double f = row_of(*runs, ModelVariant::full).test.primary();
      const double t = row_of(*runs, ModelVariant::task_only).test.primary();
      notes += to_string(runs->rows.front().task) + " full " + fmt(f) + (f >= t ? " >= " : " < ") + "task_only " +
               fmt(t) + "; ";
    }
    report(8, "ablation table", v, "14 rows in " + (out_dir / "ablation.csv").string() + "; " + notes);
  }

  // ---- 10 ----
  {
    RunConfig c;
    c.task = Task::mner;
    Verdict v;
    const TrainResult again = train(c, mner_data);
    v.require(epoch_log_csv(again.log, false) == epoch_log_csv(mner.full.log, false), "epoch logs differ");
    v.require(again.test.to_json() == mner.full.test.to_json(), "test metrics differ");
    const fs::path prefix = out_dir / "determinism_checkpoint";
    save_checkpoint(prefix.string(), mner.full.model->params(), c, mner.full.rng_state);
    const auto loaded = load_model(prefix.string());
    const auto a = mner.full.model->params().all(), b = loaded->params().all();
    bool bitwise = a.size() == b.size();
    for (std::size_t i = 0; bitwise && i < a.size(); ++i) {
      bitwise = a[i]->name == b[i]->name && a[i]->value.shape() == b[i]->value.shape() &&
                std::memcmp(a[i]->value.data().data(), b[i]->value.data().data(), a[i]->value.size() * 8) == 0;
    }
    v.require(bitwise, "checkpoint round-trip not bitwise");
    v.require(load_checkpoint(prefix.string()).config.to_json() == c.to_json(), "config not restored");
    v.require(evaluate(*loaded, mner_data.test).to_json() == mner.full.test.to_json(), "re-evaluation differs");
    write_text(out_dir / "train_log_mner_full.csv", epoch_log_csv(mner.full.log));
    report(10, "determinism and persistence", v,
           "two runs identical over " + std::to_string(again.log.size()) + " epochs; " +
               std::to_string(a.size()) + " tensors round-trip bitwise; re-evaluated F1 " + fmt(again.test.f1));
  }
}

// ---- 9 ----
void sweeps(const fs::path& out_dir) {
  RunConfig base;
  base.task = Task::mner;
  base.train_size = 600;
  base.val_size = 150;
  base.test_size = 150;
  base.epochs = 6;
  const Dataset data = generate_task(base.task_config());
  const std::string header = "param,value,seed,val_metric,test_metric,seconds";
  Verdict v;

  const auto theta = run_sweep(base, "theta", {0.0, 0.1, 0.2, 0.3, 0.5}, data, 1);
  RunConfig eta4 = base;
  eta4.eta = 4;
  const auto mu = run_sweep(eta4, "mu", {1, 2, 3, 4}, data, 1);
  RunConfig mu2 = base;
  mu2.mu = 2;
  const auto eta = run_sweep(mu2, "eta", {2, 3, 4, 5, 6}, data, 1);
  for (const auto& [name, rows, count] :
       {std::tuple{"theta", &theta, 5u}, std::tuple{"mu", &mu, 4u}, std::tuple{"eta", &eta, 5u}}) {
    const std::string csv = sweep_csv(*rows);
    write_text(out_dir / ("sweep_" + std::string(name) + ".csv"), csv);
    v.require(csv_well_formed(csv, header, count, 1), std::string(name) + " sweep CSV malformed");
  }

  RunConfig no_exchange = base;
  no_exchange.mu = no_exchange.eta;
  const TrainResult baseline = train(no_exchange, data);
  v.require(theta[0].val_metric == baseline.best_val.primary() && theta[0].test_metric == baseline.test.primary(),
            "theta=0 row differs from the no-exchange baseline");

  auto series = [](const std::vector<SweepRow>& rows) {
    std::string s;
    for (const auto& r : rows) s += shortest(r.value) + ":" + fmt(r.test_metric, 3) + " ";
    return s;
  };
  report(9, "sweeps", v,
         "theta " + series(theta) + "| mu " + series(mu) + "| eta " + series(eta) + "| no-exchange test " +
             fmt(baseline.test.primary(), 3));
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path out_dir = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_artifacts");
  fs::create_directories(out_dir);
  std::cout << std::unitbuf;
  try {
    gradient_correctness();
    crf_oracle();
    exchange_invariants();
    attention_normalization();
    loss_exactness();
    fusion_and_ablation(out_dir);
    sweeps(out_dir);
  } catch (const std::exception& e) {
    std::cout << "acceptance aborted: " << e.what() << std::endl;
  }
  std::size_t passed = 0;
  std::cout << '\n';
  for (const auto& [id, result] : g_results) {
    std::cout << result.second << '\n';
    passed += result.first;
  }
  std::cout << passed << '/' << g_results.size() << " criteria passed" << std::endl;
  return passed == 10 ? 0 : 1;
}
