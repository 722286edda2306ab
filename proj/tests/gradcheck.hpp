// Central finite-difference oracle shared by the gradient tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "mvfuse/autodiff.hpp"
#include "mvfuse/views.hpp"

namespace gradcheck {

using mvfuse::Graph;
using mvfuse::Tensor;
using mvfuse::Var;

// Builds a scalar loss from parameter leaves registered on `g`.
using LossFn = std::function<Var(Graph& g, const std::vector<Var>& params)>;

inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline double eval(const std::vector<Tensor>& params, const LossFn& f) {
  Graph g;
  std::vector<Var> vs;
  for (const auto& p : params) vs.push_back(g.constant(p));
  return f(g, vs).value().item();
}

struct Result {
  double max_rel = 0.0;
  std::size_t checked = 0;
  std::size_t kinks = 0;  // entries re-measured with a smaller step
};

/// Compares autodiff against central differences. With `per_tensor` > 0 only
/// that many randomly chosen entries of each tensor are perturbed.
///
/// Relu makes the loss piecewise smooth. When the left and right one-sided
/// slopes disagree, the step straddles a kink, so the entry is re-measured
/// with a step 100x smaller and the closer of the two measurements is kept.
inline Result check(std::vector<Tensor> params, const LossFn& f, std::size_t per_tensor = 0, std::uint64_t seed = 0,
                    double eps = 1e-5) {
  Graph g;
  std::vector<Var> vs;
  for (const auto& p : params) vs.push_back(g.parameter(p));
  Var loss = f(g, vs);
  g.backward(loss);
  std::vector<Tensor> grads;
  for (const auto& v : vs) grads.push_back(g.grad(v));

  mvfuse::Rng rng(seed);
  Result r;
  for (std::size_t t = 0; t < params.size(); ++t) {
    std::vector<std::size_t> idx(params[t].size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (per_tensor > 0 && per_tensor < idx.size()) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(per_tensor);
    }
    for (auto i : idx) {
      const double orig = params[t][i];
      double h = eps, err = std::numeric_limits<double>::infinity();
      for (int attempt = 0; attempt < 2; ++attempt, h /= 100) {
        params[t][i] = orig + h;
        const double up = eval(params, f);
        params[t][i] = orig - h;
        const double down = eval(params, f);
        params[t][i] = orig;
        err = std::min(err, relative_error(grads[t][i], (up - down) / (2 * h)));
        if (err < 1e-6 || attempt == 1) break;
        const double mid = eval(params, f);
        if (relative_error((up - mid) / h, (mid - down) / h) < 1e-3) break;
        ++r.kinks;
      }
      r.max_rel = std::max(r.max_rel, err);
      ++r.checked;
    }
  }
  return r;
}

inline Tensor uniform(mvfuse::Shape shape, mvfuse::Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

}  // namespace gradcheck
