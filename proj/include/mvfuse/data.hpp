#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "mvfuse/encoders.hpp"
#include "mvfuse/tensor.hpp"
#include "mvfuse/views.hpp"

namespace mvfuse {

/// N samples of every view plus targets. Views are kept in canonical order.
struct MultiViewDataset {
  std::string preset;
  Task task;
  Architecture temporal_encoder = Architecture::tempcnn;
  std::vector<ViewSpec> views;
  std::map<std::string, Tensor> arrays;                      // [N x width]
  std::map<std::string, std::vector<std::size_t>> lengths;   // variable-length views
  std::vector<double> targets;                               // class index or value

  std::size_t size() const { return targets.size(); }

  const ViewSpec& view(const std::string& name) const {
    for (const auto& v : views)
      if (v.name == name) return v;
    throw ConfigError("dataset: unknown view '" + name + "'");
  }

  void validate() const {
    const std::size_t n = size();
    if (n == 0) throw DataError("dataset: no samples");
    for (const auto& v : views) {
      v.validate();
      auto it = arrays.find(v.name);
      if (it == arrays.end()) throw DataError("dataset: no array for view '" + v.name + "'");
      if (it->second.rank() != 2 || it->second.extent(0) != n || it->second.extent(1) != v.width()) {
        throw DataError("dataset: view '" + v.name + "' has shape " + shape_str(it->second.shape()));
      }
      if (v.variable_length) {
        auto l = lengths.find(v.name);
        if (l == lengths.end() || l->second.size() != n) throw DataError("dataset: view '" + v.name + "' lacks per-sample lengths");
      }
    }
    if (task.classification()) {
      for (double t : targets) {
        if (t < 0 || t != std::floor(t) || static_cast<std::size_t>(t) >= task.classes) {
          throw DataError("dataset: class label " + std::to_string(t) + " outside [0, " + std::to_string(task.classes) + ")");
        }
      }
    }
  }
};

/// Rows `rows` of every view, all flagged available.
inline MultiViewBatch make_batch(const MultiViewDataset& data, std::span<const std::size_t> rows) {
  MultiViewBatch b;
  b.batch_size = rows.size();
  for (const auto& v : data.views) {
    b.views.emplace(v.name, gather_rows(data.arrays.at(v.name), rows));
    b.availability.emplace(v.name, true);
    auto l = data.lengths.find(v.name);
    if (l != data.lengths.end()) {
      std::vector<std::size_t> sub;
      for (auto r : rows) sub.push_back(l->second[r]);
      b.lengths.emplace(v.name, std::move(sub));
    }
  }
  return b;
}

inline std::vector<double> gather(const std::vector<double>& v, std::span<const std::size_t> rows) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(v.at(r));
  return out;
}

// ---------------------------------------------------------------------------
// One-hot

inline Tensor one_hot(std::span<const std::size_t> values, std::size_t cardinality) {
  if (cardinality == 0) throw ConfigError("one_hot: cardinality must be positive");
  if (values.empty()) throw ContractError("one_hot: no values");
  Tensor out(Shape{values.size(), cardinality});
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] >= cardinality) {
      throw IndexError("one_hot: category " + std::to_string(values[i]) + " outside [0, " + std::to_string(cardinality) + ")");
    }
    out(i, values[i]) = 1.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Z-score normalisation

/// Per-feature (and per-timestep) training statistics. Zero-variance features
/// get std 1, so they normalise to 0. One-hot columns pass through unchanged.
struct Normalizer {
  std::map<std::string, Tensor> mean;  // [width]
  std::map<std::string, Tensor> stddev;

  friend bool operator==(const Normalizer&, const Normalizer&) = default;
};

inline Normalizer zscore_fit(const MultiViewDataset& data, std::span<const std::size_t> rows) {
  if (rows.empty()) throw ContractError("zscore_fit: no training rows");
  Normalizer norm;
  for (const auto& v : data.views) {
    const auto& x = data.arrays.at(v.name);
    const std::size_t w = v.width();
    const std::size_t numeric = w - v.one_hot_columns;
    const std::vector<std::size_t>* len = nullptr;
    if (auto l = data.lengths.find(v.name); l != data.lengths.end()) len = &l->second;
    Tensor mu(Shape{w}, 0.0), sd(Shape{w}, 1.0);
    std::vector<double> count(w, 0.0);
    for (auto r : rows)
      for (std::size_t j = 0; j < numeric; ++j) {
        if (len && j % v.timesteps >= (*len)[r]) continue;
        mu[j] += x(r, j);
        count[j] += 1.0;
      }
    for (std::size_t j = 0; j < numeric; ++j) mu[j] = count[j] > 0 ? mu[j] / count[j] : 0.0;
    std::vector<double> var(w, 0.0);
    for (auto r : rows)
      for (std::size_t j = 0; j < numeric; ++j) {
        if (len && j % v.timesteps >= (*len)[r]) continue;
        var[j] += (x(r, j) - mu[j]) * (x(r, j) - mu[j]);
      }
    for (std::size_t j = 0; j < numeric; ++j) {
      const double pv = count[j] > 0 ? var[j] / count[j] : 0.0;  // population variance
      sd[j] = pv > 1e-24 ? std::sqrt(pv) : 1.0;
    }
    norm.mean.emplace(v.name, std::move(mu));
    norm.stddev.emplace(v.name, std::move(sd));
  }
  return norm;
}

/// Normalises every row with the given statistics; padded steps of
/// variable-length views are set to zero.
inline MultiViewDataset zscore_apply(const Normalizer& norm, const MultiViewDataset& data) {
  MultiViewDataset out = data;
  for (const auto& v : data.views) {
    auto m = norm.mean.find(v.name);
    if (m == norm.mean.end()) throw ConfigError("zscore_apply: normalizer has no statistics for view '" + v.name + "'");
    const auto& sd = norm.stddev.at(v.name);
    auto& x = out.arrays.at(v.name);
    if (x.extent(1) != m->second.size()) throw DimensionError("zscore_apply: width mismatch for view '" + v.name + "'");
    const std::vector<std::size_t>* len = nullptr;
    if (auto l = data.lengths.find(v.name); l != data.lengths.end()) len = &l->second;
    for (std::size_t i = 0; i < x.extent(0); ++i)
      for (std::size_t j = 0; j < x.extent(1); ++j) {
        if (len && j % v.timesteps >= (*len)[i]) {
          x(i, j) = 0.0;
          continue;
        }
        x(i, j) = (x(i, j) - m->second[j]) / sd[j];
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// K-fold split

struct FoldSplit {
  std::vector<std::vector<std::size_t>> folds;  // each sorted ascending

  std::size_t k() const { return folds.size(); }

  const std::vector<std::size_t>& validation(std::size_t f) const {
    if (f >= folds.size()) throw IndexError("fold index out of range");
    return folds[f];
  }

  /// Every row outside fold f, ascending.
  std::vector<std::size_t> training(std::size_t f) const {
    if (f >= folds.size()) throw IndexError("fold index out of range");
    std::vector<std::size_t> out;
    for (std::size_t g = 0; g < folds.size(); ++g)
      if (g != f) out.insert(out.end(), folds[g].begin(), folds[g].end());
    std::sort(out.begin(), out.end());
    return out;
  }
};

/// Seeded shuffle, then contiguous partition into k near-equal folds (the
/// first N mod k folds get one extra row).
inline FoldSplit kfold_split(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("kfold_split: need at least 2 folds");
  if (k > n) throw ConfigError("kfold_split: " + std::to_string(k) + " folds for " + std::to_string(n) + " samples");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  FoldSplit split;
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t sz = n / k + (f < n % k ? 1 : 0);
    std::vector<std::size_t> fold(idx.begin() + static_cast<std::ptrdiff_t>(pos), idx.begin() + static_cast<std::ptrdiff_t>(pos + sz));
    std::sort(fold.begin(), fold.end());
    split.folds.push_back(std::move(fold));
    pos += sz;
  }
  return split;
}

// ---------------------------------------------------------------------------
// Synthetic latent-factor data

enum class Preset { crop_binary_like, crop_multi_like, lfmc_like, yield_like };

inline std::string to_string(Preset p) {
  switch (p) {
    case Preset::crop_binary_like: return "crop-binary-like";
    case Preset::crop_multi_like: return "crop-multi-like";
    case Preset::lfmc_like: return "lfmc-like";
    case Preset::yield_like: return "yield-like";
  }
  return "?";
}

inline Preset parse_preset(const std::string& s) {
  for (auto p : {Preset::crop_binary_like, Preset::crop_multi_like, Preset::lfmc_like, Preset::yield_like})
    if (to_string(p) == s) return p;
  throw ConfigError("unknown preset '" + s + "'");
}

struct SyntheticConfig {
  Preset preset = Preset::crop_binary_like;
  std::size_t n = 2000;
  std::uint64_t seed = 0;
  std::size_t latent_dim = 8;
  double noise = 1.0;
  std::size_t folds = 10;
  std::map<std::string, std::pair<std::size_t, std::size_t>> overrides;  // view -> (channels, timesteps)
};

/// Generative recipe of one synthetic view.
struct SyntheticView {
  ViewSpec spec;
  double signal = 1.0;             // scale of the latent signal relative to noise
  std::vector<double> loading;     // per latent dimension emphasis
  std::size_t categories = 0;      // trailing categorical sub-view cardinality (static only)
};

namespace detail {

inline ViewSpec temporal_view(std::string name, std::size_t c, std::size_t t, bool variable = false) {
  ViewSpec v;
  v.name = std::move(name);
  v.kind = ViewKind::temporal;
  v.channels = c;
  v.timesteps = t;
  v.variable_length = variable;
  return v;
}

inline ViewSpec static_view(std::size_t width, std::size_t one_hot) {
  ViewSpec v;
  v.name = "static";
  v.kind = ViewKind::static_features;
  v.channels = width;
  v.timesteps = 1;
  v.one_hot_columns = one_hot;
  v.categorical = one_hot > 0;
  return v;
}

}  // namespace detail

/// Latent dimensions carried by optical and radar. The rest are context.
inline constexpr std::size_t kSharedDims = 6;

/// View recipes of a preset. Optical views carry the strongest signal.
inline std::vector<SyntheticView> preset_views(const SyntheticConfig& cfg) {
  const std::size_t L = cfg.latent_dim;
  std::vector<SyntheticView> out;
  // Optical and radar see the same latent block (radar more weakly); weather
  // and static features alone carry the remaining context dimensions.
  std::vector<double> shared(L, 0.05), context(L, 0.05);
  for (std::size_t l = 0; l < L; ++l) (l < kSharedDims ? shared : context)[l] = 1.0;
  switch (cfg.preset) {
    case Preset::crop_binary_like:
    case Preset::crop_multi_like:
      out.push_back({detail::temporal_view("optical", 10, 12), 0.3, shared, 0});
      out.push_back({detail::temporal_view("radar", 2, 12), 0.2, shared, 0});
      out.push_back({detail::temporal_view("weather", 5, 12), 0.25, context, 0});
      out.push_back({detail::static_view(8, 0), 0.25, context, 0});
      break;
    case Preset::lfmc_like:
      // Fewer features per view, so a stronger signal keeps R^2 well above zero.
      out.push_back({detail::temporal_view("optical", 8, 4), 1.0, shared, 0});
      out.push_back({detail::temporal_view("radar", 3, 4), 0.6, shared, 0});
      out.push_back({detail::static_view(12, 4), 1.0, context, 4});
      break;
    case Preset::yield_like:
      out.push_back({detail::temporal_view("optical", 6, 24, true), 1.0, shared, 0});
      out.push_back({detail::temporal_view("weather", 5, 24, true), 0.8, context, 0});
      break;
  }
  for (auto& v : out) {
    auto it = cfg.overrides.find(v.spec.name);
    if (it == cfg.overrides.end()) continue;
    v.spec.channels = it->second.first;
    v.spec.timesteps = it->second.second;
    if (v.spec.temporal() && v.spec.timesteps < 2) throw ConfigError("override: temporal view '" + v.spec.name + "' needs >= 2 timesteps");
    if (!v.spec.temporal() && v.spec.timesteps != 1) throw ConfigError("override: static view must keep 1 timestep");
    if (v.spec.one_hot_columns >= v.spec.channels) throw ConfigError("override: static view too narrow for its categorical block");
  }
  return out;
}

inline Task preset_task(Preset p) {
  switch (p) {
    case Preset::crop_binary_like: return Task::binary();
    case Preset::crop_multi_like: return Task::multiclass(10);
    case Preset::lfmc_like:
    case Preset::yield_like: return Task::regression();
  }
  return Task::binary();
}

/// Latent vectors and targets of a synthetic dataset (exposed for oracle checks).
struct SyntheticLatents {
  Tensor z;                       // [N x L]
  std::vector<double> targets;
  Tensor centers;                 // [C x L] (classification)
  std::vector<double> coefficients;  // regression functional
};

/// Latent-factor generator: z per sample (class-conditional Gaussian around
/// per-class centres, or standard normal for regression with y = beta . z);
/// each view is a view-specific random linear map of z, modulated over time
/// by smooth basis functions for temporal views, plus Gaussian noise.
inline MultiViewDataset generate_synthetic(const SyntheticConfig& cfg, SyntheticLatents* latents_out = nullptr) {
  if (cfg.latent_dim < 2) throw ConfigError("synthetic: latent_dim must be >= 2");
  if (cfg.folds < 2 || cfg.n < 10 * cfg.folds) throw ConfigError("synthetic: need n >= 10 * folds");
  if (!(cfg.noise > 0.0) || !std::isfinite(cfg.noise)) throw ConfigError("synthetic: noise must be positive");
  Rng rng(derive_seed(cfg.seed, "synthetic"));
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t N = cfg.n, L = cfg.latent_dim;

  MultiViewDataset data;
  data.preset = to_string(cfg.preset);
  data.task = preset_task(cfg.preset);
  data.temporal_encoder = cfg.preset == Preset::lfmc_like ? Architecture::gru : Architecture::tempcnn;

  SyntheticLatents lat;
  lat.z = Tensor(Shape{N, L});
  lat.targets.resize(N);
  if (data.task.classification()) {
    const std::size_t C = data.task.classes;
    lat.centers = Tensor(Shape{C, L});
    const double radius = C == 2 ? 2.0 : 4.0;
    // The shared block (dims < kSharedDims) and the context block each hold a
    // fixed half of the squared class separation, so the ancillary views are
    // worth the same to every seed.
    const std::size_t split = std::min(kSharedDims, L);
    for (std::size_t c = 0; c < C; ++c) {
      double norm[2] = {0.0, 0.0};
      for (std::size_t l = 0; l < L; ++l) {
        lat.centers(c, l) = normal(rng);
        norm[l >= split] += lat.centers(c, l) * lat.centers(c, l);
      }
      const double share = split < L ? 0.5 : 1.0;
      for (std::size_t l = 0; l < L; ++l)
        lat.centers(c, l) *= radius * std::sqrt((l < split ? share : 1.0 - share) / norm[l >= split]);
    }
    if (C == 2)
      for (std::size_t l = 0; l < L; ++l) lat.centers(1, l) = -lat.centers(0, l);
    std::vector<std::size_t> labels(N);
    for (std::size_t i = 0; i < N; ++i) labels[i] = i % C;
    std::shuffle(labels.begin(), labels.end(), rng);
    for (std::size_t i = 0; i < N; ++i) {
      lat.targets[i] = static_cast<double>(labels[i]);
      for (std::size_t l = 0; l < L; ++l) lat.z(i, l) = lat.centers(labels[i], l) + normal(rng);
    }
  } else {
    lat.coefficients.resize(L);
    double norm = 0.0;
    for (auto& b : lat.coefficients) {
      b = normal(rng);
      norm += b * b;
    }
    for (auto& b : lat.coefficients) b /= std::sqrt(norm);
    for (std::size_t i = 0; i < N; ++i) {
      double y = 0.0;
      for (std::size_t l = 0; l < L; ++l) {
        lat.z(i, l) = normal(rng);
        y += lat.coefficients[l] * lat.z(i, l);
      }
      lat.targets[i] = y + 0.1 * normal(rng);
    }
  }
  data.targets = lat.targets;

  std::vector<std::size_t> seq_len;
  const auto recipes = preset_views(cfg);
  for (const auto& r : recipes) {
    const auto& spec = r.spec;
    const std::size_t C = spec.channels, T = spec.timesteps;
    Tensor x(Shape{N, spec.width()});
    if (spec.temporal()) {
      // x[c, t] = signal * sum_k sum_l A[c, k, l] z_l phi_k(t) + noise
      constexpr std::size_t K = 3;
      std::vector<double> A(C * K * L);
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t l = 0; l < L; ++l) A[(c * K + k) * L + l] = normal(rng) * r.loading[l] / std::sqrt(static_cast<double>(K));
      std::vector<double> phase(C);
      std::uniform_real_distribution<double> unif(0.0, 2.0 * M_PI);
      for (auto& p : phase) p = unif(rng);
      const double pi = M_PI;
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t t = 0; t < T; ++t) {
            const double tau = static_cast<double>(t) / static_cast<double>(T - 1 > 0 ? T - 1 : 1);
            const double basis[K] = {1.0, std::cos(pi * tau + phase[c]), std::sin(2.0 * pi * tau + phase[c])};
            double s = 0.0;
            for (std::size_t k = 0; k < K; ++k)
              for (std::size_t l = 0; l < L; ++l) s += A[(c * K + k) * L + l] * lat.z(i, l) * basis[k];
            x(i, c * T + t) = r.signal * s + cfg.noise * normal(rng);
          }
      if (spec.variable_length) {
        if (seq_len.empty()) {
          std::uniform_int_distribution<std::size_t> len(std::max<std::size_t>(1, T / 2), T);
          seq_len.resize(N);
          for (auto& l : seq_len) l = len(rng);
        }
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t t = seq_len[i]; t < T; ++t) x(i, c * T + t) = 0.0;
        data.lengths.emplace(spec.name, seq_len);
      }
    } else {
      const std::size_t numeric = spec.width() - spec.one_hot_columns;
      std::vector<double> A(numeric * L);
      for (std::size_t j = 0; j < numeric; ++j)
        for (std::size_t l = 0; l < L; ++l) A[j * L + l] = normal(rng) * r.loading[l];
      std::vector<double> cat(r.categories * L);
      for (auto& a : cat) a = normal(rng);
      for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t j = 0; j < numeric; ++j) {
          double s = 0.0;
          for (std::size_t l = 0; l < L; ++l) s += A[j * L + l] * lat.z(i, l);
          x(i, j) = r.signal * s + cfg.noise * normal(rng);
        }
        if (r.categories > 0) {
          // Category: argmax of a noisy random projection of z.
          std::size_t best = 0;
          double best_s = -1e300;
          for (std::size_t c = 0; c < r.categories; ++c) {
            double s = cfg.noise * normal(rng);
            for (std::size_t l = 0; l < L; ++l) s += cat[c * L + l] * lat.z(i, l) * r.loading[l];
            if (s > best_s) {
              best_s = s;
              best = c;
            }
          }
          x(i, numeric + best) = 1.0;
        }
      }
    }
    data.views.push_back(spec);
    data.arrays.emplace(spec.name, std::move(x));
  }
  std::sort(data.views.begin(), data.views.end(), [](const ViewSpec& a, const ViewSpec& b) { return a.name < b.name; });
  data.validate();
  if (latents_out) *latents_out = std::move(lat);
  return data;
}

// ---------------------------------------------------------------------------
// CSV + JSON manifest

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

inline double parse_cell(const std::string& cell, const std::string& file, std::size_t line, const std::string& column) {
  if (cell.empty()) throw DataError(file + ":" + std::to_string(line) + ": empty cell in column '" + column + "'");
  char* end = nullptr;
  const double v = std::strtod(cell.c_str(), &end);
  if (end == cell.c_str() || *end != '\0' || !std::isfinite(v)) {
    throw DataError(file + ":" + std::to_string(line) + ": non-numeric cell '" + cell + "' in column '" + column + "'");
  }
  return v;
}

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path.string() + ": cannot open");
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ":1: missing header row");
  t.header = split_csv_line(line);
  std::size_t lineno = 1;
  const std::string file = path.filename().string();
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != t.header.size()) {
      throw DataError(file + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) + " cells, found " +
                      std::to_string(cells.size()));
    }
    std::vector<double> row(cells.size());
    for (std::size_t j = 0; j < cells.size(); ++j) row[j] = parse_cell(cells[j], file, lineno, t.header[j]);
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace detail

/// Writes manifest.json, one CSV per view, and target.csv into `dir`.
inline void save_csv(const MultiViewDataset& data, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError(dir.string() + ": cannot create directory: " + ec.message());
  nlohmann::ordered_json manifest;
  manifest["preset"] = data.preset;
  manifest["task"] = to_string(data.task.kind);
  manifest["classes"] = data.task.classes;
  manifest["temporal_encoder"] = to_string(data.temporal_encoder);
  manifest["target_file"] = "target.csv";
  manifest["views"] = nlohmann::ordered_json::array();
  for (const auto& v : data.views) {
    nlohmann::ordered_json jv;
    jv["name"] = v.name;
    jv["kind"] = v.temporal() ? "temporal" : "static";
    jv["channels"] = v.channels;
    jv["timesteps"] = v.timesteps;
    jv["categorical"] = v.categorical;
    if (v.one_hot_columns) jv["one_hot_columns"] = v.one_hot_columns;
    if (v.variable_length) jv["variable_length"] = true;
    if (!v.bands.empty()) jv["bands"] = v.bands;
    jv["file"] = v.name + ".csv";
    manifest["views"].push_back(jv);

    std::ofstream out(dir / (v.name + ".csv"));
    if (!out) throw DataError((dir / (v.name + ".csv")).string() + ": cannot write");
    std::vector<std::string> cols;
    if (v.variable_length) cols.push_back("length");
    for (std::size_t c = 0; c < v.channels; ++c)
      for (std::size_t t = 0; t < v.timesteps; ++t) cols.push_back(v.temporal() ? v.band(c) + "_t" + std::to_string(t) : v.band(c));
    for (std::size_t j = 0; j < cols.size(); ++j) out << (j ? "," : "") << cols[j];
    out << "\n";
    const auto& x = data.arrays.at(v.name);
    for (std::size_t i = 0; i < data.size(); ++i) {
      bool first = true;
      if (v.variable_length) {
        out << data.lengths.at(v.name)[i];
        first = false;
      }
      for (std::size_t j = 0; j < v.width(); ++j) {
        out << (first ? "" : ",") << detail::format_double(x(i, j));
        first = false;
      }
      out << "\n";
    }
  }
  std::ofstream tout(dir / "target.csv");
  tout << "target\n";
  for (double t : data.targets) tout << detail::format_double(t) << "\n";
  std::ofstream mout(dir / "manifest.json");
  mout << manifest.dump(2) << "\n";
}

/// Parses a manifest and its CSV files. Static sub-views are merged into one
/// view named "static" (numeric columns first, then one-hot blocks); views
/// with a `cardinality` hold one integer category column that is expanded.
inline MultiViewDataset load_csv(const std::filesystem::path& manifest_path) {
  using nlohmann::json;
  std::ifstream in(manifest_path);
  if (!in) throw DataError(manifest_path.string() + ": cannot open manifest");
  json m;
  try {
    in >> m;
  } catch (const json::exception& e) {
    throw DataError(manifest_path.string() + ": invalid JSON: " + e.what());
  }
  const auto dir = manifest_path.parent_path();
  auto need = [&](const json& j, const char* key) -> const json& {
    if (!j.contains(key)) throw DataError(manifest_path.filename().string() + ": missing field '" + key + "'");
    return j.at(key);
  };

  MultiViewDataset data;
  data.preset = m.value("preset", std::string("csv"));
  const std::string task = need(m, "task").get<std::string>();
  if (task == "binary") data.task = Task::binary();
  else if (task == "multiclass") data.task = Task::multiclass(need(m, "classes").get<std::size_t>());
  else if (task == "regression") data.task = Task::regression();
  else throw DataError("manifest: unknown task '" + task + "'");
  const std::string enc = m.value("temporal_encoder", std::string("tempcnn"));
  if (enc == "gru") data.temporal_encoder = Architecture::gru;
  else if (enc == "tempcnn") data.temporal_encoder = Architecture::tempcnn;
  else throw DataError("manifest: unknown temporal_encoder '" + enc + "'");

  // Targets.
  const std::string target_file = m.value("target_file", std::string("target.csv"));
  auto tt = detail::read_csv(dir / target_file);
  auto tcol = std::find(tt.header.begin(), tt.header.end(), "target");
  if (tcol == tt.header.end()) throw DataError(target_file + ":1: missing column 'target'");
  const auto tj = static_cast<std::size_t>(tcol - tt.header.begin());
  for (const auto& r : tt.rows) data.targets.push_back(r[tj]);
  const std::size_t n = data.targets.size();
  if (n == 0) throw DataError(target_file + ": no samples");

  struct StaticPart {
    std::string name;
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;
    std::size_t one_hot = 0;
  };
  std::vector<StaticPart> numeric_parts, onehot_parts;

  for (const auto& jv : need(m, "views")) {
    ViewSpec v;
    v.name = need(jv, "name").get<std::string>();
    const std::string kind = need(jv, "kind").get<std::string>();
    if (kind != "temporal" && kind != "static") throw DataError("manifest: view '" + v.name + "' has unknown kind '" + kind + "'");
    v.kind = kind == "temporal" ? ViewKind::temporal : ViewKind::static_features;
    v.channels = need(jv, "channels").get<std::size_t>();
    v.timesteps = jv.value("timesteps", std::size_t{1});
    v.variable_length = jv.value("variable_length", false);
    const bool categorical = jv.value("categorical", false);
    const std::size_t cardinality = jv.value("cardinality", std::size_t{0});
    const std::size_t one_hot_cols = jv.value("one_hot_columns", std::size_t{0});
    const std::string file = need(jv, "file").get<std::string>();
    auto table = detail::read_csv(dir / file);
    if (table.rows.size() != n) {
      throw DataError(file + ": " + std::to_string(table.rows.size()) + " rows but " + target_file + " has " + std::to_string(n));
    }

    if (v.kind == ViewKind::temporal) {
      const std::size_t lead = v.variable_length ? 1 : 0;
      if (lead && (table.header.empty() || table.header[0] != "length")) throw DataError(file + ":1: missing column 'length'");
      if (table.header.size() - lead != v.channels * v.timesteps) {
        throw CsvDimensionError(file + ": manifest declares " + std::to_string(v.channels) + "x" + std::to_string(v.timesteps) +
                                " = " + std::to_string(v.channels * v.timesteps) + " columns, file has " +
                                std::to_string(table.header.size() - lead));
      }
      for (std::size_t c = 0; c < v.channels; ++c) {
        const std::string& first = table.header[lead + c * v.timesteps];
        const auto pos = first.rfind("_t");
        if (pos == std::string::npos) throw DataError(file + ":1: column '" + first + "' is not named <band>_t<idx>");
        const std::string band = first.substr(0, pos);
        v.bands.push_back(band);
        for (std::size_t t = 0; t < v.timesteps; ++t) {
          const std::string expect = band + "_t" + std::to_string(t);
          if (table.header[lead + c * v.timesteps + t] != expect) throw DataError(file + ":1: missing column '" + expect + "'");
        }
      }
      Tensor x(Shape{n, v.width()});
      std::vector<std::size_t> lens;
      for (std::size_t i = 0; i < n; ++i) {
        if (lead) {
          const double l = table.rows[i][0];
          if (l < 1 || l > static_cast<double>(v.timesteps) || l != std::floor(l)) {
            throw DataError(file + ":" + std::to_string(i + 2) + ": length " + detail::format_double(l) + " outside [1, timesteps]");
          }
          lens.push_back(static_cast<std::size_t>(l));
        }
        for (std::size_t j = 0; j < v.width(); ++j) x(i, j) = table.rows[i][lead + j];
      }
      v.validate();
      if (lead) data.lengths.emplace(v.name, std::move(lens));
      data.arrays.emplace(v.name, std::move(x));
      data.views.push_back(std::move(v));
      continue;
    }

    if (v.timesteps != 1) throw CsvDimensionError(file + ": static view must have timesteps 1");
    if (table.header.size() != v.channels && !(cardinality > 0 && table.header.size() == 1)) {
      throw CsvDimensionError(file + ": manifest declares " + std::to_string(v.channels) + " columns, file has " +
                              std::to_string(table.header.size()));
    }
    StaticPart part;
    part.name = v.name;
    if (categorical && cardinality > 0) {
      if (table.header.size() != 1) throw CsvDimensionError(file + ": categorical view must have exactly one column");
      std::vector<std::size_t> cats;
      for (std::size_t i = 0; i < n; ++i) {
        const double c = table.rows[i][0];
        if (c < 0 || c != std::floor(c) || c >= static_cast<double>(cardinality)) {
          throw DataError(file + ":" + std::to_string(i + 2) + ": category " + detail::format_double(c) + " outside [0, " +
                          std::to_string(cardinality) + ")");
        }
        cats.push_back(static_cast<std::size_t>(c));
      }
      Tensor oh = one_hot(cats, cardinality);
      for (std::size_t c = 0; c < cardinality; ++c) part.columns.push_back(table.header[0] + "=" + std::to_string(c));
      for (std::size_t i = 0; i < n; ++i) part.rows.emplace_back(oh.data().begin() + static_cast<std::ptrdiff_t>(i * cardinality),
                                                                oh.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * cardinality));
      part.one_hot = cardinality;
      onehot_parts.push_back(std::move(part));
    } else {
      part.columns = table.header;
      part.rows = std::move(table.rows);
      part.one_hot = one_hot_cols;
      if (one_hot_cols > part.columns.size()) throw CsvDimensionError(file + ": one_hot_columns exceeds column count");
      numeric_parts.push_back(std::move(part));
    }
  }

  std::vector<StaticPart> parts = numeric_parts;
  parts.insert(parts.end(), onehot_parts.begin(), onehot_parts.end());
  if (!parts.empty()) {
    ViewSpec s;
    s.kind = ViewKind::static_features;
    s.timesteps = 1;
    s.name = parts.size() == 1 ? parts.front().name : "static";
    // Numeric columns first, then every one-hot block.
    std::vector<std::pair<std::size_t, std::size_t>> order;  // (part, column)
    for (std::size_t p = 0; p < parts.size(); ++p)
      for (std::size_t c = 0; c + parts[p].one_hot < parts[p].columns.size(); ++c) order.emplace_back(p, c);
    for (std::size_t p = 0; p < parts.size(); ++p)
      for (std::size_t c = parts[p].columns.size() - parts[p].one_hot; c < parts[p].columns.size(); ++c) {
        order.emplace_back(p, c);
        ++s.one_hot_columns;
      }
    s.channels = order.size();
    s.categorical = s.one_hot_columns > 0;
    Tensor x(Shape{n, s.channels});
    for (std::size_t k = 0; k < order.size(); ++k) {
      s.bands.push_back(parts[order[k].first].columns[order[k].second]);
      for (std::size_t i = 0; i < n; ++i) x(i, k) = parts[order[k].first].rows[i][order[k].second];
    }
    s.validate();
    data.arrays.emplace(s.name, std::move(x));
    data.views.push_back(std::move(s));
  }
  std::sort(data.views.begin(), data.views.end(), [](const ViewSpec& a, const ViewSpec& b) { return a.name < b.name; });
  for (std::size_t i = 1; i < data.views.size(); ++i)
    if (data.views[i].name == data.views[i - 1].name) throw DataError("manifest: duplicate view '" + data.views[i].name + "'");
  data.validate();
  return data;
}

}  // namespace mvfuse
