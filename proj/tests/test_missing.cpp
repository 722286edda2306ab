#include <gtest/gtest.h>

#include <random>

#include "gradcheck.hpp"
#include "mvfuse/missing.hpp"

using namespace mvfuse;
using gradcheck::uniform;

namespace {

ViewSpec view(std::string name, std::size_t c = 2, std::size_t t = 3) {
  ViewSpec v;
  v.name = std::move(name);
  v.kind = t > 1 ? ViewKind::temporal : ViewKind::static_features;
  v.channels = c;
  v.timesteps = t;
  return v;
}

Tensor gaussian(Shape s, Rng& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

// Two views that are random linear maps of a shared latent plus noise.
std::map<std::string, Tensor> shared_latent_views(std::size_t n, std::size_t latent, double noise, Rng& rng) {
  Tensor z = gaussian({n, latent}, rng);
  std::map<std::string, Tensor> out;
  for (const char* name : {"a", "b"}) {
    Tensor A = gaussian({latent, 128}, rng);
    Tensor x(Shape{n, 128});
    x.mat() = z.mat() * A.mat();
    if (noise > 0)
      for (auto& v : x.data()) v += std::normal_distribution<double>(0.0, noise)(rng);
    out.emplace(name, std::move(x));
  }
  return out;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> r(n);
  for (std::size_t i = 0; i < n; ++i) r[i] = i;
  return r;
}

}  // namespace

// ---- scenarios -----------------------------------------------------------------

TEST(Scenario, FourViewGrid) {
  auto grid = scenario_grid({view("optical"), view("radar"), view("weather"), view("static", 4, 1)});
  ASSERT_EQ(grid.size(), 6u);
  EXPECT_EQ(grid[0].name, "no-miss");
  EXPECT_EQ(grid[1].missing, (std::set<std::string>{"radar"}));
  EXPECT_EQ(grid[2].missing, (std::set<std::string>{"optical"}));
  EXPECT_EQ(grid[3].missing, (std::set<std::string>{"static", "weather"}));
  EXPECT_EQ(grid[3].degree, Degree::intermediate);
  EXPECT_EQ(grid[4].name, "only-optical");
  EXPECT_EQ(grid[4].missing, (std::set<std::string>{"radar", "static", "weather"}));
  EXPECT_EQ(grid[5].name, "only-radar");
  EXPECT_EQ(grid[5].degree, Degree::extreme);
  for (const auto& s : grid) EXPECT_LT(s.missing.size(), 4u);
}

TEST(Scenario, TwoViewGrid) {
  auto grid = scenario_grid({view("weather"), view("optical")});
  ASSERT_EQ(grid.size(), 3u);
  EXPECT_EQ(grid[1].name, "miss-optical");
  EXPECT_EQ(grid[2].name, "miss-weather");
}

TEST(Scenario, Errors) {
  EXPECT_THROW(scenario_grid({view("radar"), view("weather")}), ConfigError);
  std::vector<ViewSpec> vs{view("optical"), view("radar")};
  EXPECT_THROW(validate_scenario(make_scenario({"lidar"}, Degree::moderate), vs), ConfigError);
  EXPECT_THROW(validate_scenario(make_scenario({"optical", "radar"}, Degree::extreme), vs), AvailabilityError);
  EXPECT_EQ(parse_degree("extreme"), Degree::extreme);
  EXPECT_THROW(parse_degree("severe"), ConfigError);
}

// ---- imputation ----------------------------------------------------------------

TEST(Impute, MeanExamples) {
  std::map<std::string, Tensor> a{{"v", Tensor::matrix({{1, 2}, {3, 4}})}};
  std::vector<std::size_t> both{0, 1}, one{1}, none;
  EXPECT_EQ(compute_impute_bank(a, both).means.at("v"), Tensor::vector({2, 3}));
  EXPECT_EQ(compute_impute_bank(a, one).means.at("v"), Tensor::vector({3, 4}));
  EXPECT_THROW(compute_impute_bank(a, none), ContractError);
}

TEST(Impute, ApplyReplacesOnlyMissingViews) {
  Rng rng(1);
  MultiViewBatch b;
  b.batch_size = 3;
  b.views = {{"optical", uniform({3, 6}, rng)}, {"radar", uniform({3, 6}, rng)}};
  b.availability = {{"optical", true}, {"radar", true}};
  ImputeBank bank{{{"optical", uniform({6}, rng)}, {"radar", uniform({6}, rng)}}};
  auto same = apply_impute(b, no_miss(), bank);
  EXPECT_EQ(same.views, b.views);
  auto out = apply_impute(b, make_scenario({"radar"}, Degree::moderate), bank);
  EXPECT_EQ(out.views.at("optical"), b.views.at("optical"));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(out.views.at("radar")(i, j), bank.means.at("radar")[j]);
  EXPECT_TRUE(out.available("radar"));
  ImputeBank partial{{{"optical", uniform({6}, rng)}}};
  EXPECT_THROW(apply_impute(b, make_scenario({"radar"}, Degree::moderate), partial), AvailabilityError);
}

// ---- CCA -----------------------------------------------------------------------

TEST(Cca, IdenticalViewsCorrelateFully) {
  Rng rng(2);
  Tensor x = gaussian({500, 128}, rng);
  std::map<std::string, Tensor> f{{"a", x}, {"b", x}};
  auto model = fit_cca(f, 32);
  auto corr = canonical_correlations(model, f);
  EXPECT_NEAR(corr[0], 1.0, 1e-6);
}

TEST(Cca, IndependentNoiseHasLowHeldOutCorrelation) {
  double mean_top = 0.0;
  const int seeds = 5;
  for (int s = 0; s < seeds; ++s) {
    Rng rng(100 + s);
    std::map<std::string, Tensor> train{{"a", gaussian({500, 128}, rng)}, {"b", gaussian({500, 128}, rng)}};
    std::map<std::string, Tensor> test{{"a", gaussian({500, 128}, rng)}, {"b", gaussian({500, 128}, rng)}};
    auto model = fit_cca(train, 32);
    mean_top += canonical_correlations(model, test)[0] / seeds;
  }
  EXPECT_LT(mean_top, 0.2);
}

TEST(Cca, SharedLatentRecovered) {
  Rng rng(3);
  auto f = shared_latent_views(500, 8, 0.1, rng);
  auto model = fit_cca(f, 32);
  auto corr = canonical_correlations(model, f);
  for (std::size_t k = 0; k < 8; ++k) EXPECT_GT(corr[k], 0.9) << "component " << k;
}

TEST(Cca, SignConventionAndDeterminism) {
  Rng rng(4);
  auto f = shared_latent_views(200, 4, 0.5, rng);
  auto m1 = fit_cca(f, 6), m2 = fit_cca(f, 6);
  EXPECT_EQ(m1, m2);
  for (std::size_t k = 0; k < 6; ++k) {
    double best = 0.0;
    for (const auto& [name, P] : m1.projections)
      for (std::size_t i = 0; i < P.extent(0); ++i)
        if (std::abs(P(i, k)) > std::abs(best)) best = P(i, k);
    EXPECT_GT(best, 0.0);
  }
}

TEST(Cca, Errors) {
  Rng rng(5);
  std::map<std::string, Tensor> one{{"a", gaussian({50, 4}, rng)}};
  EXPECT_THROW(fit_cca(one, 2), ConfigError);
  auto f = shared_latent_views(20, 3, 0.0, rng);
  EXPECT_THROW(fit_cca(f, 20), ContractError);
  EXPECT_THROW(fit_cca(f, 4, 0.0), NumericalError);
  EXPECT_NO_THROW(fit_cca(f, 4, 1e-3));
}

TEST(Cca, ProjectSharedAveragesViews) {
  Rng rng(6);
  auto f = shared_latent_views(100, 4, 0.3, rng);
  auto model = fit_cca(f, 4);
  Tensor qa = gaussian({128}, rng), qb = gaussian({128}, rng);
  auto pa = project_shared({{"a", qa}}, model);
  auto pb = project_shared({{"b", qb}}, model);
  auto both = project_shared({{"a", qa}, {"b", qb}}, model);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(both[k], (pa[k] + pb[k]) / 2, 1e-13);
  EXPECT_EQ(pa, project_view(model, "a", qa).reshaped({4}));
  EXPECT_THROW(project_shared({}, model), AvailabilityError);
}

// ---- exemplar index ---------------------------------------------------------------

TEST(Exemplar, ExactMatchAndSingleton) {
  Rng rng(7);
  auto f = shared_latent_views(60, 4, 0.3, rng);
  auto model = fit_cca(f, 4);
  auto index = build_exemplar_index(model, f);
  const std::size_t d = 4;
  std::vector<double> q(index.shared.data().begin() + 17 * d, index.shared.data().begin() + 18 * d);
  EXPECT_EQ(nearest_exemplar(q, index), 17u);
  auto got = retrieve_exemplar(Tensor::vector(q), index, "b");
  for (std::size_t j = 0; j < 128; ++j) EXPECT_EQ(got[j], f.at("b")(17, j));

  std::vector<std::size_t> first{0};
  ExemplarIndex single{gather_rows(index.shared, first), {{"b", gather_rows(f.at("b"), first)}}};
  for (int t = 0; t < 5; ++t) EXPECT_EQ(nearest_exemplar(gaussian({4}, rng).data(), single), 0u);
  EXPECT_THROW(nearest_exemplar(q, ExemplarIndex{}), ContractError);
  EXPECT_THROW(retrieve_exemplar(Tensor::vector(q), index, "c"), AvailabilityError);
}

TEST(Exemplar, TiesGoToLowestIndex) {
  ExemplarIndex idx{Tensor::matrix({{1, 0}, {0, 1}, {1, 0}}), {{"v", Tensor::matrix({{1}, {2}, {3}})}}};
  std::vector<double> q{1, 0};
  EXPECT_EQ(nearest_exemplar(q, idx), 0u);
  std::vector<double> mid{0.5, 0.5};
  EXPECT_EQ(nearest_exemplar(mid, idx), 0u);
}

TEST(Exemplar, RetrievedVectorExistsInStore) {
  Rng rng(8);
  auto f = shared_latent_views(80, 4, 0.5, rng);
  auto model = fit_cca(f, 4);
  auto index = build_exemplar_index(model, f);
  for (int t = 0; t < 20; ++t) {
    auto got = retrieve_exemplar(gaussian({4}, rng), index, "a");
    bool found = false;
    for (std::size_t i = 0; i < 80 && !found; ++i) {
      found = true;
      for (std::size_t j = 0; j < 128 && found; ++j) found = got[j] == f.at("a")(i, j);
    }
    EXPECT_TRUE(found);
  }
}

TEST(Exemplar, NoiseFreeSelfRetrieval) {
  Rng rng(9);
  auto f = shared_latent_views(500, 8, 0.0, rng);
  auto model = fit_cca(f, 8);
  auto index = build_exemplar_index(model, f);
  auto query = project_shared({{"a", f.at("a")}}, model);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < 500; ++i) hits += nearest_exemplar(std::span<const double>(query.data().data() + i * 8, 8), index) == i;
  EXPECT_GT(hits, 450u);
}

// ---- leakage -------------------------------------------------------------------------

TEST(Leakage, ArtifactsIgnoreValidationRows) {
  Rng rng(10);
  const std::size_t n = 120;
  auto f = shared_latent_views(n, 4, 0.5, rng);
  std::vector<std::size_t> train;
  for (std::size_t i = 0; i < n; ++i)
    if (i % 4 != 0) train.push_back(i);
  auto fit = [&](const std::map<std::string, Tensor>& data) {
    std::map<std::string, Tensor> tr;
    for (const auto& [k, v] : data) tr.emplace(k, gather_rows(v, train));
    auto model = fit_cca(tr, 4);
    return std::make_tuple(compute_impute_bank(data, train), model, build_exemplar_index(model, tr));
  };
  auto base = fit(f);
  // Shuffle the contents of validation rows among themselves.
  auto g = f;
  std::vector<std::size_t> val;
  for (std::size_t i = 0; i < n; i += 4) val.push_back(i);
  auto perm = val;
  std::shuffle(perm.begin(), perm.end(), rng);
  for (auto& [k, v] : g)
    for (std::size_t i = 0; i < val.size(); ++i)
      for (std::size_t j = 0; j < v.extent(1); ++j) v(val[i], j) = f.at(k)(perm[i], j) * 3.0 + 1.0;
  EXPECT_EQ(fit(g), base);
}
