#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "mvfuse/adam.hpp"
#include "mvfuse/autodiff.hpp"
#include "mvfuse/data.hpp"
#include "mvfuse/fusion.hpp"
#include "mvfuse/metrics.hpp"
#include "mvfuse/missing.hpp"

namespace mvfuse {

struct TrainingConfig {
  std::size_t batch_size = 128;
  std::size_t max_epochs = 200;
  std::size_t patience = 10;
  double lr = 1e-3;
  double es_fraction = 0.1;  // share of the training fold held out for early stopping
};

struct ExperimentConfig {
  // Dataset: a synthetic preset or a CSV manifest.
  std::optional<std::string> preset;
  std::size_t n = 2000;
  std::size_t latent_dim = 8;
  double noise = 1.0;
  std::optional<std::string> manifest;
  std::optional<TaskKind> task;  // when set, must match the dataset

  std::vector<Method> methods = all_methods();
  std::size_t folds = 10;
  std::optional<std::size_t> run_folds;  // evaluate only the first m folds
  TrainingConfig training;
  std::optional<std::vector<MissingScenario>> scenarios;
  std::size_t cca_dims = 32;
  double cca_gamma = 1e-3;
  std::string out_dir = "results";
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
};

namespace detail {

using json = nlohmann::json;

inline void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError(where + "." + it.key() + ": unknown key");
  }
}

inline std::size_t get_count(const json& j, const std::string& where, bool allow_zero = false) {
  if (!j.is_number_integer() || j.get<long long>() < (allow_zero ? 0 : 1)) {
    throw ConfigError(where + ": expected a " + (allow_zero ? "non-negative" : "positive") + " integer");
  }
  return j.get<std::size_t>();
}

inline double get_positive(const json& j, const std::string& where) {
  if (!j.is_number() || !(j.get<double>() > 0.0) || !std::isfinite(j.get<double>())) throw ConfigError(where + ": expected a positive number");
  return j.get<double>();
}

inline std::string get_string(const json& j, const std::string& where) {
  if (!j.is_string()) throw ConfigError(where + ": expected a string");
  return j.get<std::string>();
}

}  // namespace detail

/// Parses the JSON experiment config. Unknown keys are rejected and every
/// error names the offending field.
inline ExperimentConfig parse_config(const nlohmann::json& j) {
  using detail::get_count;
  using detail::get_positive;
  using detail::get_string;
  detail::reject_unknown(j, "config",
                         {"dataset", "task", "methods", "folds", "run_folds", "training", "scenarios", "cca", "out_dir", "seed", "jobs"});
  ExperimentConfig c;
  if (!j.contains("dataset")) throw ConfigError("config.dataset: required");
  const auto& d = j.at("dataset");
  detail::reject_unknown(d, "config.dataset", {"preset", "n", "latent_dim", "noise", "manifest"});
  if (d.contains("preset") == d.contains("manifest")) throw ConfigError("config.dataset: give exactly one of 'preset' or 'manifest'");
  if (d.contains("preset")) {
    c.preset = get_string(d.at("preset"), "config.dataset.preset");
    try {
      parse_preset(*c.preset);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("config.dataset.preset: ") + e.what());
    }
  } else {
    c.manifest = get_string(d.at("manifest"), "config.dataset.manifest");
  }
  if (d.contains("n")) c.n = get_count(d.at("n"), "config.dataset.n");
  if (d.contains("latent_dim")) c.latent_dim = get_count(d.at("latent_dim"), "config.dataset.latent_dim");
  if (d.contains("noise")) c.noise = get_positive(d.at("noise"), "config.dataset.noise");

  if (j.contains("task")) {
    const auto t = get_string(j.at("task"), "config.task");
    if (t == "binary") c.task = TaskKind::binary;
    else if (t == "multiclass") c.task = TaskKind::multiclass;
    else if (t == "regression") c.task = TaskKind::regression;
    else throw ConfigError("config.task: unknown task '" + t + "'");
  }
  if (j.contains("methods")) {
    const auto& m = j.at("methods");
    if (!m.is_array() || m.empty()) throw ConfigError("config.methods: expected a non-empty array");
    c.methods.clear();
    for (std::size_t i = 0; i < m.size(); ++i) {
      const std::string where = "config.methods[" + std::to_string(i) + "]";
      try {
        c.methods.push_back(parse_method(get_string(m[i], where)));
      } catch (const ConfigError& e) {
        throw ConfigError(where + ": " + e.what());
      }
    }
  }
  if (j.contains("folds")) c.folds = get_count(j.at("folds"), "config.folds");
  if (c.folds < 2) throw ConfigError("config.folds: need at least 2 folds");
  if (j.contains("run_folds")) {
    c.run_folds = get_count(j.at("run_folds"), "config.run_folds");
    if (*c.run_folds > c.folds) throw ConfigError("config.run_folds: exceeds folds");
  }
  if (j.contains("training")) {
    const auto& t = j.at("training");
    detail::reject_unknown(t, "config.training", {"batch_size", "max_epochs", "patience", "lr", "es_fraction"});
    if (t.contains("batch_size")) c.training.batch_size = get_count(t.at("batch_size"), "config.training.batch_size");
    if (t.contains("max_epochs")) c.training.max_epochs = get_count(t.at("max_epochs"), "config.training.max_epochs");
    if (t.contains("patience")) c.training.patience = get_count(t.at("patience"), "config.training.patience");
    if (t.contains("lr")) c.training.lr = get_positive(t.at("lr"), "config.training.lr");
    if (t.contains("es_fraction")) {
      c.training.es_fraction = get_positive(t.at("es_fraction"), "config.training.es_fraction");
      if (c.training.es_fraction >= 1.0) throw ConfigError("config.training.es_fraction: must be below 1");
    }
  }
  if (j.contains("scenarios")) {
    const auto& s = j.at("scenarios");
    if (!s.is_array() || s.empty()) throw ConfigError("config.scenarios: expected a non-empty array");
    std::vector<MissingScenario> grid;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const std::string where = "config.scenarios[" + std::to_string(i) + "]";
      detail::reject_unknown(s[i], where, {"missing", "degree"});
      if (!s[i].contains("missing") || !s[i].at("missing").is_array()) throw ConfigError(where + ".missing: expected an array");
      std::set<std::string> missing;
      for (const auto& v : s[i].at("missing")) missing.insert(get_string(v, where + ".missing"));
      Degree degree = missing.empty() ? Degree::none : Degree::moderate;
      if (s[i].contains("degree")) {
        try {
          degree = parse_degree(get_string(s[i].at("degree"), where + ".degree"));
        } catch (const ConfigError& e) {
          throw ConfigError(where + ".degree: " + e.what());
        }
      }
      grid.push_back(make_scenario(std::move(missing), degree));
    }
    c.scenarios = std::move(grid);
  }
  if (j.contains("cca")) {
    const auto& k = j.at("cca");
    detail::reject_unknown(k, "config.cca", {"dims", "gamma"});
    if (k.contains("dims")) c.cca_dims = get_count(k.at("dims"), "config.cca.dims");
    if (k.contains("gamma")) c.cca_gamma = get_positive(k.at("gamma"), "config.cca.gamma");
  }
  if (j.contains("out_dir")) c.out_dir = get_string(j.at("out_dir"), "config.out_dir");
  if (j.contains("seed")) {
    if (!j.at("seed").is_number_unsigned() && !(j.at("seed").is_number_integer() && j.at("seed").get<long long>() >= 0)) {
      throw ConfigError("config.seed: expected a non-negative integer");
    }
    c.seed = j.at("seed").get<std::uint64_t>();
  }
  if (j.contains("jobs")) c.jobs = get_count(j.at("jobs"), "config.jobs");
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open config");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return parse_config(j);
}

inline MultiViewDataset load_dataset(const ExperimentConfig& c) {
  MultiViewDataset data;
  if (c.preset) {
    SyntheticConfig s;
    s.preset = parse_preset(*c.preset);
    s.n = c.n;
    s.seed = c.seed;
    s.latent_dim = c.latent_dim;
    s.noise = c.noise;
    s.folds = c.folds;
    data = generate_synthetic(s);
  } else if (c.manifest) {
    data = load_csv(*c.manifest);
  } else {
    throw ConfigError("config.dataset: no dataset source");
  }
  if (c.task && *c.task != data.task.kind) {
    throw ConfigError("config.task: '" + to_string(*c.task) + "' does not match the dataset task '" + to_string(data.task.kind) + "'");
  }
  if (c.folds > data.size()) throw ConfigError("config.folds: more folds than samples");
  return data;
}

// ---------------------------------------------------------------------------
// Training

/// Tracks the best validation loss; stop after `patience` epochs without a
/// strict improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  /// Returns true when `loss` improves on the best seen so far.
  bool update(std::size_t epoch, double loss) {
    if (loss < best_) {
      best_ = loss;
      best_epoch_ = epoch;
      stale_ = 0;
      return true;
    }
    ++stale_;
    return false;
  }

  bool should_stop() const { return stale_ >= patience_; }
  double best_loss() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
  std::size_t stale_ = 0;
};

struct TrainStats {
  std::size_t epochs = 0;      // epochs run
  std::size_t best_epoch = 0;  // 1-based epoch whose parameters were restored
  double best_loss = 0.0;
};

/// Mean loss of `net` over `rows` (all views present), evaluated in chunks.
inline double evaluate_loss(const Network& net, const Task& task, const MultiViewDataset& data, std::span<const std::size_t> rows,
                            const std::vector<double>& targets, std::size_t chunk = 512) {
  double total = 0.0;
  for (std::size_t s = 0; s < rows.size(); s += chunk) {
    const auto sub = rows.subspan(s, std::min(chunk, rows.size() - s));
    Graph g;
    auto bound = bind(g, net, false);
    const double l = network_loss(net, bound, make_batch(data, sub), task, gather(targets, sub)).value().item();
    total += l * static_cast<double>(sub.size());
  }
  return total / static_cast<double>(rows.size());
}

/// Minibatch Adam on `fit_rows` with early stopping on `es_rows`; the best
/// parameters are restored on exit. `targets` are indexed by dataset row.
inline TrainStats train_network(Network& net, const Task& task, const MultiViewDataset& data, std::span<const std::size_t> fit_rows,
                                std::span<const std::size_t> es_rows, const std::vector<double>& targets, const TrainingConfig& cfg,
                                Rng& rng, const std::string& label) {
  if (fit_rows.empty()) throw ContractError(label + ": no training rows");
  if (es_rows.empty()) throw ContractError(label + ": no early-stopping rows");
  AdamState adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  EarlyStopping stopper(cfg.patience);
  std::vector<Tensor> best = net.parameter_values();
  std::vector<std::size_t> order(fit_rows.begin(), fit_rows.end());
  TrainStats stats;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      const std::span<const std::size_t> rows(order.data() + s, std::min(cfg.batch_size, order.size() - s));
      Graph g;
      auto bound = bind(g, net, true);
      Var loss;
      try {
        loss = network_loss(net, bound, make_batch(data, rows), task, gather(targets, rows));
      } catch (const NumericalError& e) {
        throw TrainingError(label + ": non-finite value at epoch " + std::to_string(epoch) + " (" + e.what() + ")");
      }
      if (!std::isfinite(loss.value().item())) throw TrainingError(label + ": non-finite loss at epoch " + std::to_string(epoch));
      g.backward(loss);
      std::vector<Tensor> grads;
      grads.reserve(bound.all.size());
      for (const auto& v : bound.all) grads.push_back(g.grad(v));
      auto params = net.parameters();
      adam_step(params, grads, adam);
    }
    double es_loss = 0.0;
    try {
      es_loss = evaluate_loss(net, task, data, es_rows, targets);
    } catch (const NumericalError& e) {
      throw TrainingError(label + ": non-finite value at epoch " + std::to_string(epoch) + " (" + e.what() + ")");
    }
    if (!std::isfinite(es_loss)) throw TrainingError(label + ": non-finite validation loss at epoch " + std::to_string(epoch));
    stats.epochs = epoch;
    if (stopper.update(epoch, es_loss)) best = net.parameter_values();
    if (stopper.should_stop()) break;
  }
  net.set_parameter_values(best);
  stats.best_epoch = stopper.best_epoch();
  stats.best_loss = stopper.best_loss();
  return stats;
}

/// Encoder outputs [rows x 128] of every view, computed in chunks.
inline std::map<std::string, Tensor> extract_features(const Network& net, const MultiViewDataset& data, std::span<const std::size_t> rows,
                                                      std::size_t chunk = 512) {
  std::map<std::string, Tensor> out;
  for (const auto& v : net.views) out.emplace(v.name, Tensor(Shape{rows.size(), kFeatureWidth}));
  for (std::size_t s = 0; s < rows.size(); s += chunk) {
    const auto sub = rows.subspan(s, std::min(chunk, rows.size() - s));
    Graph g;
    auto bound = bind(g, net, false);
    const auto batch = make_batch(data, sub);
    for (std::size_t v = 0; v < net.views.size(); ++v) {
      const Tensor f = view_feature(net, bound, v, batch).value();
      auto& dst = out.at(net.views[v].name);
      std::copy(f.data().begin(), f.data().end(), dst.data().begin() + static_cast<std::ptrdiff_t>(s * kFeatureWidth));
    }
  }
  return out;
}

/// The split of a training fold into fitting rows and the early-stopping
/// slice. Depends only on the global seed and the fold.
struct FoldRows {
  std::vector<std::size_t> train;  // whole training fold
  std::vector<std::size_t> fit;
  std::vector<std::size_t> early_stop;
  std::vector<std::size_t> validation;
};

inline FoldRows fold_rows(const FoldSplit& split, std::size_t fold, double es_fraction, std::uint64_t seed) {
  FoldRows r;
  r.train = split.training(fold);
  r.validation = split.validation(fold);
  std::vector<std::size_t> shuffled = r.train;
  Rng rng(derive_seed(seed, "early-stop", fold));
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  auto n_es = static_cast<std::size_t>(std::ceil(es_fraction * static_cast<double>(shuffled.size())));
  n_es = std::clamp<std::size_t>(n_es, 1, shuffled.size() - 1);
  r.early_stop.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_es));
  r.fit.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(n_es), shuffled.end());
  std::sort(r.early_stop.begin(), r.early_stop.end());
  std::sort(r.fit.begin(), r.fit.end());
  return r;
}

/// A method trained on one fold, with its inference artifacts.
struct TrainedMethod {
  FusionModel model;
  Normalizer normalizer;
  std::size_t epochs = 0;  // summed over the method's networks
  double seconds = 0.0;
};

/// Trains one method on one fold: normaliser on the training rows, all-view
/// training with early stopping, then the technique's artifacts.
inline TrainedMethod train_fold(const ExperimentConfig& cfg, const MultiViewDataset& raw, const FoldSplit& split, std::size_t fold,
                                Method method) {
  const auto t0 = std::chrono::steady_clock::now();
  const FoldRows rows = fold_rows(split, fold, cfg.training.es_fraction, cfg.seed);
  TrainedMethod out;
  out.normalizer = zscore_fit(raw, rows.train);
  const MultiViewDataset data = zscore_apply(out.normalizer, raw);

  // feature-cca shares the feature-concat backbone, so it uses that key.
  const std::string key = method == Method::feature_cca ? to_string(Method::feature_concat) : to_string(method);
  Rng init_rng(derive_seed(cfg.seed, "init/" + key, fold));
  out.model = make_model(method, data.task, data.views, data.temporal_encoder, init_rng);

  std::vector<double> targets = data.targets;
  if (!data.task.classification()) {
    double mu = 0.0;
    for (auto r : rows.train) mu += data.targets[r];
    mu /= static_cast<double>(rows.train.size());
    double var = 0.0;
    for (auto r : rows.train) var += (data.targets[r] - mu) * (data.targets[r] - mu);
    var /= static_cast<double>(rows.train.size());
    out.model.target = {mu, var > 1e-24 ? std::sqrt(var) : 1.0};
    for (auto& t : targets) t = (t - out.model.target.mean) / out.model.target.scale;
  }

  for (std::size_t i = 0; i < out.model.networks.size(); ++i) {
    auto& net = out.model.networks[i];
    std::string label = to_string(method);
    if (method == Method::ensemble_avg) label += "[" + net.views.front().name + "]";
    Rng rng(derive_seed(cfg.seed, "shuffle/" + key + "/" + std::to_string(i), fold));
    out.epochs += train_network(net, data.task, data, rows.fit, rows.early_stop, targets, cfg.training, rng, label).epochs;
  }

  if (out.model.technique == Technique::impute) out.model.impute_bank = compute_impute_bank(data.arrays, rows.train);
  if (out.model.technique == Technique::exemplar) {
    auto features = extract_features(out.model.networks.front(), data, rows.train);
    out.model.cca = fit_cca(features, cfg.cca_dims, cfg.cca_gamma);
    out.model.exemplars = build_exemplar_index(*out.model.cca, features);
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

/// One (method, scenario, fold) evaluation.
struct ResultRow {
  MetricsReport report;
  std::size_t epochs = 0;
  double seconds = 0.0;  // training wall time of the (method, fold) job
};

/// Model outputs for `rows` under `scenario`, in chunks.
inline Tensor predict_rows(const FusionModel& model, const MultiViewDataset& data, std::span<const std::size_t> rows,
                           const MissingScenario& scenario, std::size_t chunk = 512) {
  std::vector<Tensor> parts;
  for (std::size_t s = 0; s < rows.size(); s += chunk) {
    const auto sub = rows.subspan(s, std::min(chunk, rows.size() - s));
    parts.push_back(forward(model, make_batch(data, sub), scenario));
  }
  const std::size_t cols = parts.front().rank() == 2 ? parts.front().extent(1) : 1;
  std::vector<double> all;
  all.reserve(rows.size() * cols);
  for (const auto& p : parts) all.insert(all.end(), p.data().begin(), p.data().end());
  return parts.front().rank() == 2 ? Tensor(Shape{rows.size(), cols}, std::move(all)) : Tensor(Shape{rows.size()}, std::move(all));
}

/// Quality, error and PRS of a trained method on its validation fold for
/// every scenario of the grid. `data` must be normalised with the method's
/// normaliser. The grid must start with no-miss.
inline std::vector<ResultRow> evaluate_scenarios(const TrainedMethod& trained, const MultiViewDataset& data,
                                                 std::span<const std::size_t> validation, std::size_t fold,
                                                 const std::vector<MissingScenario>& grid) {
  if (grid.empty() || !grid.front().empty()) throw ConfigError("scenario grid must start with no-miss");
  const auto& model = trained.model;
  const auto targets = gather(data.targets, validation);
  std::vector<ResultRow> out;
  double e_full = 0.0;
  for (const auto& sc : grid) {
    ResultRow row;
    auto& r = row.report;
    r.method = to_string(model.method);
    r.technique = to_string(model.technique);
    r.scenario = sc.name;
    r.degree = to_string(sc.degree);
    r.fold = fold;
    r.task = model.task.kind;
    try {
      const Tensor pred = predict_rows(model, data, validation, sc);
      r.quality = quality(model.task, pred, targets);
      r.error = prediction_error(model.task, pred, targets);
    } catch (const Error& e) {
      throw ConfigError(r.method + " / " + sc.name + ": " + e.what());
    }
    if (sc.empty()) e_full = r.error;
    else r.prs = prs(e_full, r.error);
    row.epochs = trained.epochs;
    row.seconds = trained.seconds;
    out.push_back(std::move(row));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation and reports

struct SummaryRow {
  std::string method, technique, scenario, degree;
  double quality_mean = 0.0, quality_std = 0.0;
  std::optional<double> prs_mean, prs_std;
  std::size_t folds = 0;
};

/// Mean and sample standard deviation (n - 1; zero for a single value).
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) throw ContractError("mean_std: no values");
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size() - 1))};
}

/// Fold aggregation per (method, scenario), in first-appearance order.
inline std::vector<SummaryRow> aggregate(const std::vector<ResultRow>& rows) {
  std::vector<std::pair<std::string, std::string>> keys;
  std::map<std::pair<std::string, std::string>, std::vector<const ResultRow*>> groups;
  for (const auto& r : rows) {
    auto k = std::make_pair(r.report.method, r.report.scenario);
    if (!groups.count(k)) keys.push_back(k);
    groups[k].push_back(&r);
  }
  std::vector<SummaryRow> out;
  for (const auto& k : keys) {
    const auto& g = groups.at(k);
    SummaryRow s;
    s.method = k.first;
    s.scenario = k.second;
    s.technique = g.front()->report.technique;
    s.degree = g.front()->report.degree;
    s.folds = g.size();
    std::vector<double> q, p;
    for (const auto* r : g) {
      q.push_back(r->report.quality);
      if (r->report.prs) p.push_back(*r->report.prs);
    }
    std::tie(s.quality_mean, s.quality_std) = mean_std(q);
    if (!p.empty()) {
      auto [m, sd] = mean_std(p);
      s.prs_mean = m;
      s.prs_std = sd;
    }
    out.push_back(std::move(s));
  }
  return out;
}

struct ExperimentResult {
  std::vector<ResultRow> rows;  // ordered by method, scenario, fold
  std::vector<SummaryRow> summary;
  std::vector<MissingScenario> grid;
};

namespace detail {

inline std::string num(double v) { return format_double(v); }

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p);
  if (!out) throw ConfigError(p.string() + ": cannot write output file");
  return out;
}

}  // namespace detail

inline void write_results_csv(const std::vector<ResultRow>& rows, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << "method,technique,scenario,degree,fold,task,quality,error,prs,epochs\n";
  for (const auto& row : rows) {
    const auto& r = row.report;
    out << r.method << "," << r.technique << "," << r.scenario << "," << r.degree << "," << r.fold << "," << to_string(r.task) << ","
        << detail::num(r.quality) << "," << detail::num(r.error) << "," << (r.prs ? detail::num(*r.prs) : "") << "," << row.epochs
        << "\n";
  }
}

inline void write_summary(const std::vector<SummaryRow>& summary, const std::filesystem::path& dir, const nlohmann::json& extra = {}) {
  {
    auto out = detail::open_out(dir / "summary.csv");
    out << "method,technique,scenario,quality_mean,quality_std,prs_mean,prs_std,folds\n";
    for (const auto& s : summary) {
      out << s.method << "," << s.technique << "," << s.scenario << "," << detail::num(s.quality_mean) << "," << detail::num(s.quality_std)
          << "," << (s.prs_mean ? detail::num(*s.prs_mean) : "") << "," << (s.prs_std ? detail::num(*s.prs_std) : "") << "," << s.folds
          << "\n";
    }
  }
  {
    // Plot-ready robustness series: one line per (method, scenario) with missing views.
    auto out = detail::open_out(dir / "prs_series.csv");
    out << "method,scenario,degree,prs_mean,prs_std\n";
    for (const auto& s : summary)
      if (s.prs_mean) out << s.method << "," << s.scenario << "," << s.degree << "," << detail::num(*s.prs_mean) << "," << detail::num(*s.prs_std) << "\n";
  }
  nlohmann::ordered_json j;
  j["aggregation"] = {{"center", "mean over folds"}, {"spread", "sample standard deviation over folds (n-1), 0 for one fold"},
                      {"prs", "computed per fold against the same fold's no-miss error, then averaged"}};
  if (!extra.is_null()) j["experiment"] = extra;
  j["results"] = nlohmann::ordered_json::array();
  for (const auto& s : summary) {
    nlohmann::ordered_json e;
    e["method"] = s.method;
    e["technique"] = s.technique;
    e["scenario"] = s.scenario;
    e["degree"] = s.degree;
    e["quality_mean"] = s.quality_mean;
    e["quality_std"] = s.quality_std;
    e["prs_mean"] = s.prs_mean ? nlohmann::ordered_json(*s.prs_mean) : nlohmann::ordered_json(nullptr);
    e["prs_std"] = s.prs_std ? nlohmann::ordered_json(*s.prs_std) : nlohmann::ordered_json(nullptr);
    e["folds"] = s.folds;
    j["results"].push_back(e);
  }
  auto out = detail::open_out(dir / "summary.json");
  out << j.dump(2) << "\n";
}

/// Trains and evaluates every (fold, method) job, aggregates across folds
/// and, when `write` is set, writes the report files into cfg.out_dir.
/// Jobs run on cfg.jobs threads; results do not depend on the thread count.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const MultiViewDataset& data, bool write = true) {
  if (cfg.methods.empty()) throw ConfigError("config.methods: empty");
  data.validate();
  std::vector<MissingScenario> grid = cfg.scenarios ? *cfg.scenarios : scenario_grid(data.views);
  for (const auto& s : grid) {
    try {
      validate_scenario(s, data.views);
    } catch (const Error& e) {
      throw ConfigError(std::string("config.scenarios: ") + e.what());
    }
  }
  if (grid.empty() || !grid.front().empty()) {
    grid.erase(std::remove_if(grid.begin(), grid.end(), [](const MissingScenario& s) { return s.empty(); }), grid.end());
    grid.insert(grid.begin(), no_miss());
  }
  const FoldSplit split = kfold_split(data.size(), cfg.folds, derive_seed(cfg.seed, "folds"));
  const std::size_t folds = cfg.run_folds ? *cfg.run_folds : cfg.folds;

  if (write) {
    std::error_code ec;
    std::filesystem::create_directories(cfg.out_dir, ec);
    if (ec || !std::filesystem::is_directory(cfg.out_dir)) throw ConfigError("config.out_dir: cannot create '" + cfg.out_dir + "'");
  }

  struct Job {
    std::size_t fold;
    std::size_t method;
    std::vector<ResultRow> rows;
    std::exception_ptr error;
  };
  std::vector<Job> jobs;
  for (std::size_t m = 0; m < cfg.methods.size(); ++m)
    for (std::size_t f = 0; f < folds; ++f) jobs.push_back({f, m, {}, nullptr});

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      auto& job = jobs[i];
      try {
        const auto trained = train_fold(cfg, data, split, job.fold, cfg.methods[job.method]);
        const auto normed = zscore_apply(trained.normalizer, data);
        job.rows = evaluate_scenarios(trained, normed, split.validation(job.fold), job.fold, grid);
      } catch (...) {
        job.error = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(cfg.jobs, jobs.size()));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& job : jobs)
    if (job.error) std::rethrow_exception(job.error);

  // Order rows by method, scenario, fold regardless of completion order.
  ExperimentResult result;
  result.grid = grid;
  for (std::size_t m = 0; m < cfg.methods.size(); ++m)
    for (std::size_t s = 0; s < grid.size(); ++s)
      for (std::size_t f = 0; f < folds; ++f) result.rows.push_back(jobs[m * folds + f].rows[s]);
  result.summary = aggregate(result.rows);

  if (write) {
    const std::filesystem::path dir = cfg.out_dir;
    write_results_csv(result.rows, dir / "results.csv");
    nlohmann::ordered_json extra;
    extra["dataset"] = data.preset;
    extra["task"] = to_string(data.task.kind);
    extra["samples"] = data.size();
    extra["folds"] = cfg.folds;
    extra["folds_run"] = folds;
    extra["seed"] = cfg.seed;
    std::vector<std::string> methods;
    for (auto m : cfg.methods) methods.push_back(to_string(m));
    extra["methods"] = methods;
    write_summary(result.summary, dir, extra);
    // Wall times vary run to run, so they stay out of the CSV reports.
    nlohmann::ordered_json t = nlohmann::ordered_json::array();
    for (const auto& job : jobs)
      t.push_back({{"method", to_string(cfg.methods[job.method])}, {"fold", job.fold}, {"seconds", job.rows.front().seconds},
                   {"epochs", job.rows.front().epochs}});
    auto out = detail::open_out(dir / "timings.json");
    out << t.dump(2) << "\n";
  }
  return result;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, bool write = true) {
  return run_experiment(cfg, load_dataset(cfg), write);
}

/// Re-reads results.csv from `dir` and rewrites the aggregated reports.
inline std::vector<SummaryRow> report_from_dir(const std::filesystem::path& dir) {
  std::ifstream in(dir / "results.csv");
  if (!in) throw DataError((dir / "results.csv").string() + ": cannot open");
  std::string line;
  std::getline(in, line);
  const auto header = detail::split_csv_line(line);
  const std::vector<std::string> expect{"method", "technique", "scenario", "degree", "fold", "task", "quality", "error", "prs", "epochs"};
  if (header != expect) throw DataError("results.csv:1: unexpected header");
  std::vector<ResultRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto c = detail::split_csv_line(line);
    if (c.size() != expect.size()) throw DataError("results.csv:" + std::to_string(lineno) + ": expected 10 cells");
    ResultRow row;
    auto& r = row.report;
    r.method = c[0];
    r.technique = c[1];
    r.scenario = c[2];
    r.degree = c[3];
    r.fold = static_cast<std::size_t>(detail::parse_cell(c[4], "results.csv", lineno, "fold"));
    r.quality = detail::parse_cell(c[6], "results.csv", lineno, "quality");
    r.error = detail::parse_cell(c[7], "results.csv", lineno, "error");
    if (!c[8].empty()) r.prs = detail::parse_cell(c[8], "results.csv", lineno, "prs");
    row.epochs = static_cast<std::size_t>(detail::parse_cell(c[9], "results.csv", lineno, "epochs"));
    rows.push_back(std::move(row));
  }
  auto summary = aggregate(rows);
  write_summary(summary, dir);
  return summary;
}

}  // namespace mvfuse
