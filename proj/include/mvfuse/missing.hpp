#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "mvfuse/tensor.hpp"
#include "mvfuse/views.hpp"

namespace mvfuse {

enum class Degree { none, moderate, intermediate, extreme };

inline std::string to_string(Degree d) {
  switch (d) {
    case Degree::none: return "none";
    case Degree::moderate: return "moderate";
    case Degree::intermediate: return "intermediate";
    case Degree::extreme: return "extreme";
  }
  return "?";
}

inline Degree parse_degree(const std::string& s) {
  if (s == "none") return Degree::none;
  if (s == "moderate") return Degree::moderate;
  if (s == "intermediate") return Degree::intermediate;
  if (s == "extreme") return Degree::extreme;
  throw ConfigError("unknown missingness degree '" + s + "'");
}

/// Views declared unavailable at inference.
struct MissingScenario {
  std::string name = "no-miss";
  std::set<std::string> missing;
  Degree degree = Degree::none;

  bool empty() const { return missing.empty(); }
};

inline MissingScenario no_miss() { return {}; }

inline MissingScenario make_scenario(std::set<std::string> missing, Degree degree) {
  if (missing.empty()) return no_miss();
  std::string name = "miss-";
  bool first = true;
  for (const auto& v : missing) {
    if (!first) name += "+";
    name += v;
    first = false;
  }
  return {name, std::move(missing), degree};
}

/// Unknown view -> ConfigError; every view missing -> AvailabilityError.
inline void validate_scenario(const MissingScenario& s, const std::vector<ViewSpec>& views) {
  for (const auto& m : s.missing) {
    const bool known = std::any_of(views.begin(), views.end(), [&](const ViewSpec& v) { return v.name == m; });
    if (!known) throw ConfigError("scenario '" + s.name + "': unknown view '" + m + "'");
  }
  if (s.missing.size() >= views.size()) throw AvailabilityError("scenario '" + s.name + "': every view is missing");
}

/// The evaluation grid: no-miss; each of radar/optical missing (moderate);
/// everything but radar+optical missing (intermediate); single-view inference
/// with only optical or only radar (extreme). Two-view datasets get no-miss
/// plus each single view missing.
inline std::vector<MissingScenario> scenario_grid(const std::vector<ViewSpec>& views) {
  std::set<std::string> names;
  for (const auto& v : views) names.insert(v.name);
  if (!names.count("optical")) throw ConfigError("scenario grid: dataset has no 'optical' view");
  std::vector<MissingScenario> grid{no_miss()};
  if (names.size() == 2) {
    for (const auto& n : names) grid.push_back(make_scenario({n}, Degree::moderate));
    return grid;
  }
  if (!names.count("radar")) throw ConfigError("scenario grid: dataset has no 'radar' view");
  std::set<std::string> others;
  for (const auto& n : names)
    if (n != "optical" && n != "radar") others.insert(n);
  grid.push_back(make_scenario({"radar"}, Degree::moderate));
  grid.push_back(make_scenario({"optical"}, Degree::moderate));
  grid.push_back(make_scenario(others, Degree::intermediate));
  auto only = [&](const std::string& keep) {
    std::set<std::string> m;
    for (const auto& n : names)
      if (n != keep) m.insert(n);
    auto s = make_scenario(std::move(m), Degree::extreme);
    s.name = "only-" + keep;
    return s;
  };
  grid.push_back(only("optical"));
  grid.push_back(only("radar"));
  return grid;
}

// ---------------------------------------------------------------------------
// Mean imputation

/// Per-view elementwise means of the training rows, full raw view shape.
struct ImputeBank {
  std::map<std::string, Tensor> means;  // [width]

  friend bool operator==(const ImputeBank&, const ImputeBank&) = default;
};

inline ImputeBank compute_impute_bank(const std::map<std::string, Tensor>& arrays, std::span<const std::size_t> rows) {
  if (rows.empty()) throw ContractError("compute_impute_bank: empty training set");
  ImputeBank bank;
  for (const auto& [name, x] : arrays) {
    if (x.rank() != 2) throw DimensionError("compute_impute_bank: view '" + name + "' must be [N x width]");
    const std::size_t w = x.extent(1);
    Tensor mu(Shape{w});
    for (auto r : rows) {
      if (r >= x.extent(0)) throw IndexError("compute_impute_bank: row out of range");
      for (std::size_t j = 0; j < w; ++j) mu[j] += x(r, j);
    }
    for (auto& v : mu.data()) v /= static_cast<double>(rows.size());
    bank.means.emplace(name, std::move(mu));
  }
  return bank;
}

/// Replaces every missing view with the bank mean and marks it available for
/// fusion. Available views are left untouched.
inline MultiViewBatch apply_impute(const MultiViewBatch& batch, const MissingScenario& scenario, const ImputeBank& bank) {
  MultiViewBatch out = batch;
  for (const auto& v : scenario.missing) {
    auto it = bank.means.find(v);
    if (it == bank.means.end()) throw AvailabilityError("apply_impute: bank has no mean for view '" + v + "'");
    const auto& mu = it->second;
    Tensor filled(Shape{batch.batch_size, mu.size()});
    for (std::size_t i = 0; i < batch.batch_size; ++i)
      std::copy(mu.data().begin(), mu.data().end(), filled.data().begin() + static_cast<std::ptrdiff_t>(i * mu.size()));
    out.views[v] = std::move(filled);
    out.availability[v] = true;
    out.lengths.erase(v);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multi-view CCA

struct CCAModel {
  std::vector<std::string> views;             // canonical order
  std::map<std::string, Tensor> projections;  // [p_v x d]
  std::map<std::string, Tensor> means;        // [p_v]
  std::size_t d_shared = 0;
  double gamma = 0.0;
  std::vector<double> eigenvalues;            // top d, descending

  friend bool operator==(const CCAModel&, const CCAModel&) = default;
};

namespace detail {

inline Eigen::MatrixXd to_eigen(const Tensor& t) {
  return Eigen::MatrixXd(t.mat());
}

inline Tensor from_eigen(const Eigen::MatrixXd& m) {
  Tensor t(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  t.mat() = m;
  return t;
}

}  // namespace detail

/// Multi-view CCA as a regularised sum-of-correlations eigenproblem: each
/// view is whitened with (C_vv + gamma I)^{-1/2}, the stacked whitened
/// covariance is eigen-decomposed, and the top `d_shared` eigenvectors are
/// mapped back through each view's whitening. Each component's sign makes
/// its largest-magnitude stacked coefficient positive.
inline CCAModel fit_cca(const std::map<std::string, Tensor>& features, std::size_t d_shared, double gamma = 1e-3) {
  if (features.size() < 2) throw ConfigError("fit_cca: need at least two views");
  if (gamma < 0.0) throw ConfigError("fit_cca: gamma must be non-negative");
  const std::size_t n = features.begin()->second.extent(0);
  if (n <= d_shared) throw ContractError("fit_cca: need more samples than shared dimensions");
  if (d_shared == 0) throw ConfigError("fit_cca: d_shared must be positive");

  CCAModel model;
  model.d_shared = d_shared;
  model.gamma = gamma;
  std::vector<Eigen::MatrixXd> whitened;
  std::vector<Eigen::MatrixXd> whiteners;
  std::size_t total = 0;
  for (const auto& [name, x] : features) {
    if (x.rank() != 2 || x.extent(0) != n) throw DimensionError("fit_cca: view '" + name + "' row count differs");
    if (d_shared > x.extent(1)) throw ConfigError("fit_cca: d_shared exceeds feature width of '" + name + "'");
    Eigen::MatrixXd X = detail::to_eigen(x);
    Eigen::RowVectorXd mu = X.colwise().mean();
    X.rowwise() -= mu;
    Eigen::MatrixXd C = (X.transpose() * X) / static_cast<double>(n);
    C.diagonal().array() += gamma;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
    const auto& lam = es.eigenvalues();
    const double floor = 1e-12 * std::max(1.0, lam.maxCoeff());
    if (lam.minCoeff() <= floor) {
      throw NumericalError("fit_cca: covariance of view '" + name + "' is rank-deficient; use gamma > 0");
    }
    Eigen::MatrixXd W = es.eigenvectors() * lam.cwiseSqrt().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
    whitened.push_back(X * W);
    whiteners.push_back(std::move(W));
    model.views.push_back(name);
    Tensor m(Shape{mu.size() > 0 ? static_cast<std::size_t>(mu.size()) : 1});
    for (Eigen::Index j = 0; j < mu.size(); ++j) m[static_cast<std::size_t>(j)] = mu(j);
    model.means.emplace(name, std::move(m));
    total += x.extent(1);
  }

  Eigen::MatrixXd Y(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(total));
  Eigen::Index off = 0;
  for (const auto& w : whitened) {
    Y.middleCols(off, w.cols()) = w;
    off += w.cols();
  }
  Eigen::MatrixXd M = (Y.transpose() * Y) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
  // Eigen returns ascending eigenvalues.
  Eigen::MatrixXd U(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(d_shared));
  for (std::size_t k = 0; k < d_shared; ++k) {
    const auto col = static_cast<Eigen::Index>(total - 1 - k);
    U.col(static_cast<Eigen::Index>(k)) = es.eigenvectors().col(col);
    model.eigenvalues.push_back(es.eigenvalues()(col));
  }

  std::vector<Eigen::MatrixXd> proj;
  off = 0;
  for (std::size_t v = 0; v < whiteners.size(); ++v) {
    const auto p = whiteners[v].rows();
    proj.push_back(whiteners[v] * U.middleRows(off, p));
    off += p;
  }
  for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(d_shared); ++k) {
    double best = 0.0;
    for (const auto& P : proj)
      for (Eigen::Index i = 0; i < P.rows(); ++i)
        if (std::abs(P(i, k)) > std::abs(best)) best = P(i, k);
    if (best < 0.0)
      for (auto& P : proj) P.col(k) *= -1.0;
  }
  for (std::size_t v = 0; v < proj.size(); ++v) model.projections.emplace(model.views[v], detail::from_eigen(proj[v]));
  return model;
}

/// Centers and projects one view's features: [B x p] -> [B x d].
inline Tensor project_view(const CCAModel& model, const std::string& view, const Tensor& features) {
  auto pit = model.projections.find(view);
  if (pit == model.projections.end()) throw ConfigError("project_view: CCA model has no view '" + view + "'");
  const Tensor x = features.rank() == 1 ? features.reshaped({1, features.size()}) : features;
  const auto& mu = model.means.at(view);
  if (x.extent(1) != mu.size()) throw DimensionError("project_view: feature width mismatch for '" + view + "'");
  Tensor centered = x;
  for (std::size_t i = 0; i < x.extent(0); ++i)
    for (std::size_t j = 0; j < x.extent(1); ++j) centered(i, j) -= mu[j];
  Tensor out(Shape{x.extent(0), model.d_shared});
  out.mat().noalias() = centered.mat() * pit->second.mat();
  return out;
}

/// Mean of the centered projections of the available views. Accepts per-view
/// [p] vectors (returns [d]) or [B x p] batches (returns [B x d]).
inline Tensor project_shared(const std::map<std::string, Tensor>& features, const CCAModel& model) {
  if (features.empty()) throw AvailabilityError("project_shared: no available views");
  const bool single = features.begin()->second.rank() == 1;
  Tensor acc;
  bool first = true;
  for (const auto& [view, f] : features) {
    Tensor p = project_view(model, view, f);
    if (first) {
      acc = std::move(p);
      first = false;
    } else {
      if (p.shape() != acc.shape()) throw DimensionError("project_shared: batch sizes differ across views");
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p[i];
    }
  }
  for (auto& v : acc.data()) v /= static_cast<double>(features.size());
  return single ? acc.reshaped({model.d_shared}) : acc;
}

/// Mean pairwise Pearson correlation across views of each projected component.
inline std::vector<double> canonical_correlations(const CCAModel& model, const std::map<std::string, Tensor>& features) {
  std::vector<Tensor> proj;
  for (const auto& v : model.views) {
    auto it = features.find(v);
    if (it == features.end()) throw AvailabilityError("canonical_correlations: missing view '" + v + "'");
    proj.push_back(project_view(model, v, it->second));
  }
  const std::size_t n = proj.front().extent(0);
  std::vector<double> out(model.d_shared, 0.0);
  for (std::size_t k = 0; k < model.d_shared; ++k) {
    double acc = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < proj.size(); ++a)
      for (std::size_t b = a + 1; b < proj.size(); ++b) {
        double ma = 0, mb = 0;
        for (std::size_t i = 0; i < n; ++i) {
          ma += proj[a](i, k);
          mb += proj[b](i, k);
        }
        ma /= static_cast<double>(n);
        mb /= static_cast<double>(n);
        double sab = 0, saa = 0, sbb = 0;
        for (std::size_t i = 0; i < n; ++i) {
          const double da = proj[a](i, k) - ma, db = proj[b](i, k) - mb;
          sab += da * db;
          saa += da * da;
          sbb += db * db;
        }
        acc += (saa > 0 && sbb > 0) ? sab / std::sqrt(saa * sbb) : 0.0;
        ++pairs;
      }
    out[k] = acc / static_cast<double>(pairs);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exemplar retrieval

/// Row i of every store refers to training sample i.
struct ExemplarIndex {
  Tensor shared;                           // [N x d]
  std::map<std::string, Tensor> features;  // [N x p] per view

  std::size_t size() const { return features.empty() ? 0 : shared.extent(0); }
  friend bool operator==(const ExemplarIndex&, const ExemplarIndex&) = default;
};

inline ExemplarIndex build_exemplar_index(const CCAModel& model, const std::map<std::string, Tensor>& features) {
  ExemplarIndex index;
  index.shared = project_shared(features, model);
  index.features = features;
  return index;
}

/// Euclidean nearest neighbour in the shared space; ties go to the lowest index.
inline std::size_t nearest_exemplar(std::span<const double> query, const ExemplarIndex& index) {
  if (index.size() == 0) throw ContractError("nearest_exemplar: empty index");
  const std::size_t n = index.shared.extent(0), d = index.shared.extent(1);
  if (query.size() != d) throw DimensionError("nearest_exemplar: query dimension mismatch");
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = index.shared(i, j) - query[j];
      acc += diff * diff;
    }
    if (acc < best_d) {
      best_d = acc;
      best = i;
    }
  }
  return best;
}

/// The stored `view` feature of the training sample nearest to `query`.
inline Tensor retrieve_exemplar(const Tensor& query, const ExemplarIndex& index, const std::string& view) {
  auto it = index.features.find(view);
  if (it == index.features.end()) throw AvailabilityError("retrieve_exemplar: index stores no view '" + view + "'");
  const std::size_t row = nearest_exemplar(query.data(), index);
  const std::size_t p = it->second.extent(1);
  std::vector<double> out(it->second.data().begin() + static_cast<std::ptrdiff_t>(row * p),
                          it->second.data().begin() + static_cast<std::ptrdiff_t>((row + 1) * p));
  return Tensor::vector(std::move(out));
}

}  // namespace mvfuse
