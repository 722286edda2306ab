#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "mvfuse/fusion.hpp"

using namespace mvfuse;
using gradcheck::uniform;

namespace {

ViewSpec temporal(std::string name, std::size_t c, std::size_t t) {
  ViewSpec v;
  v.name = std::move(name);
  v.kind = ViewKind::temporal;
  v.channels = c;
  v.timesteps = t;
  return v;
}

ViewSpec flat(std::string name, std::size_t w) {
  ViewSpec v;
  v.name = std::move(name);
  v.kind = ViewKind::static_features;
  v.channels = w;
  v.timesteps = 1;
  return v;
}

std::vector<ViewSpec> four_views() {
  return {temporal("optical", 3, 4), temporal("radar", 2, 4), temporal("weather", 2, 4), flat("static", 5)};
}

MultiViewBatch random_batch(const std::vector<ViewSpec>& views, std::size_t B, Rng& rng) {
  MultiViewBatch b;
  b.batch_size = B;
  for (const auto& v : views) {
    b.views.emplace(v.name, uniform({B, v.width()}, rng));
    b.availability.emplace(v.name, true);
  }
  return b;
}

// Rebuilds a BoundNetwork from leaves registered in parameters() order.
BoundNetwork bound_from(const Network& net, const std::vector<Var>& p) {
  BoundNetwork b;
  std::size_t k = 0;
  for (const auto& e : net.encoders) {
    std::vector<Var> vs(p.begin() + static_cast<std::ptrdiff_t>(k), p.begin() + static_cast<std::ptrdiff_t>(k + e.tensors.size()));
    k += e.tensors.size();
    b.encoders.push_back(vs);
  }
  if (net.gate) {
    b.gate_weights = p[k++];
    b.gate_bias = p[k++];
  }
  b.head.assign(p.begin() + static_cast<std::ptrdiff_t>(k), p.end());
  b.all = p;
  return b;
}

std::map<std::string, bool> pattern(const std::vector<ViewSpec>& views, unsigned mask) {
  std::map<std::string, bool> a;
  for (std::size_t v = 0; v < views.size(); ++v) a[views[v].name] = (mask >> v) & 1u;
  return a;
}

}  // namespace

// ---- fusion rules ------------------------------------------------------------

TEST(InputConcat, Examples) {
  std::vector<ViewSpec> views{flat("a", 2), flat("b", 1)};
  MultiViewBatch b;
  b.batch_size = 1;
  b.views["a"] = Tensor::matrix({{1, 2}});
  b.views["b"] = Tensor::matrix({{3}});
  b.availability = {{"a", true}, {"b", true}};
  EXPECT_EQ(fuse_input_concat(b, views), Tensor::matrix({{1, 2, 3}}));
  std::vector<ViewSpec> permuted{views[1], views[0]};
  EXPECT_EQ(fuse_input_concat(b, permuted), Tensor::matrix({{1, 2, 3}}));
  b.availability["b"] = false;
  EXPECT_THROW(fuse_input_concat(b, views), AvailabilityError);
}

TEST(InputConcat, TotalWidthIsSumOfViewWidths) {
  Rng rng(1);
  auto views = four_views();
  EXPECT_EQ(total_width(views), 12u + 8u + 8u + 5u);
  EXPECT_EQ(fuse_input_concat(random_batch(views, 3, rng), views).extent(1), total_width(views));
}

TEST(FeatureConcat, WidthAndBlocks) {
  Rng rng(2);
  Graph g;
  std::vector<ViewSpec> views{flat("a", 1), flat("b", 1), flat("c", 1)};
  std::map<std::string, Var> f;
  for (const auto& v : views) f.emplace(v.name, g.constant(uniform({2, kFeatureWidth}, rng)));
  Var one = fuse_feature_concat({{"a", f.at("a")}}, {views[0]});
  EXPECT_EQ(one.value(), f.at("a").value());
  Var all = fuse_feature_concat(f, views);
  EXPECT_EQ(all.value().extent(1), 3 * kFeatureWidth);
  for (std::size_t v = 0; v < 3; ++v)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < kFeatureWidth; ++j) EXPECT_EQ(all.value()(i, v * kFeatureWidth + j), f.at(views[v].name).value()(i, j));
  f.erase("b");
  EXPECT_THROW(fuse_feature_concat(f, views), AvailabilityError);
}

TEST(FeatureAvg, Examples) {
  Graph g;
  Var a = g.constant(Tensor::matrix({{1, 3}})), b = g.constant(Tensor::matrix({{3, 5}}));
  EXPECT_EQ(fuse_feature_avg({{"a", a}, {"b", a}}, {{"a", true}, {"b", true}}).value(), a.value());
  EXPECT_EQ(fuse_feature_avg({{"a", a}, {"b", b}}, {{"a", true}, {"b", true}}).value(), Tensor::matrix({{2, 4}}));
  EXPECT_EQ(fuse_feature_avg({{"a", a}, {"b", b}}, {{"a", true}, {"b", false}}).value(), a.value());
  EXPECT_THROW(fuse_feature_avg({{"a", a}}, {{"a", false}}), AvailabilityError);
}

TEST(FeatureGated, HandExample) {
  // Scores ln 2 and 0 over features [1,0] and [0,1].
  Graph g;
  std::vector<ViewSpec> views{flat("a", 1), flat("b", 1)};
  Var gw = g.constant(Tensor::matrix({{std::log(2.0), 0}, {0, 0}}));
  Var gb = g.constant(Tensor(Shape{2}));
  auto r = fuse_feature_gated({{"a", g.constant(Tensor::matrix({{1, 0}}))}, {"b", g.constant(Tensor::matrix({{0, 1}}))}},
                              {{"a", true}, {"b", true}}, gw, gb, views);
  EXPECT_NEAR(r.fused.value()(0, 0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(r.fused.value()(0, 1), 1.0 / 3.0, 1e-15);
}

TEST(FeatureGated, EqualScoresMatchAverage) {
  Rng rng(3);
  Graph g;
  std::vector<ViewSpec> views{flat("a", 1), flat("b", 1), flat("c", 1)};
  std::map<std::string, Var> f;
  for (const auto& v : views) f.emplace(v.name, g.constant(uniform({4, kFeatureWidth}, rng)));
  std::map<std::string, bool> all{{"a", true}, {"b", true}, {"c", true}};
  auto r = fuse_feature_gated(f, all, g.constant(Tensor(Shape{3, kFeatureWidth})), g.constant(Tensor(Shape{3}, 0.7)), views);
  auto avg = fuse_feature_avg(f, all).value();
  for (std::size_t i = 0; i < avg.size(); ++i) EXPECT_NEAR(r.fused.value()[i], avg[i], 1e-14);
}

TEST(FeatureGated, SingleAvailableViewGetsWeightOne) {
  Rng rng(4);
  Graph g;
  std::vector<ViewSpec> views{flat("a", 1), flat("b", 1)};
  Var fa = g.constant(uniform({3, kFeatureWidth}, rng));
  auto r = fuse_feature_gated({{"a", fa}}, {{"a", true}, {"b", false}}, g.constant(uniform({2, kFeatureWidth}, rng)),
                              g.constant(uniform({2}, rng)), views);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(r.weights.value()(i, 0), 1.0);
    EXPECT_EQ(r.weights.value()(i, 1), 0.0);
  }
  EXPECT_EQ(r.fused.value(), fa.value());
  EXPECT_THROW(fuse_feature_gated({}, {{"a", false}, {"b", false}}, g.constant(uniform({2, kFeatureWidth}, rng)),
                                  g.constant(uniform({2}, rng)), views),
               AvailabilityError);
}

TEST(FeatureGated, RenormalisesOverEveryAvailabilityPattern) {
  Rng rng(5);
  auto views = four_views();
  for (unsigned mask = 1; mask < 16; ++mask) {
    Graph g;
    auto avail = pattern(views, mask);
    std::map<std::string, Var> f;
    for (const auto& v : views)
      if (avail[v.name]) f.emplace(v.name, g.constant(uniform({5, kFeatureWidth}, rng)));
    auto r = fuse_feature_gated(f, avail, g.constant(uniform({4, kFeatureWidth}, rng)), g.constant(uniform({4}, rng)), views);
    for (std::size_t i = 0; i < 5; ++i) {
      double s = 0.0;
      for (std::size_t v = 0; v < 4; ++v) {
        if (!avail[views[v].name]) EXPECT_EQ(r.weights.value()(i, v), 0.0);
        s += r.weights.value()(i, v);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Ensemble, Examples) {
  Task reg = Task::regression();
  std::map<std::string, Tensor> p{{"a", Tensor::vector({2.0})}, {"b", Tensor::vector({4.0})}};
  EXPECT_EQ(ensemble_predict(p, {{"a", true}, {"b", true}}, reg), Tensor::vector({3.0}));
  EXPECT_EQ(ensemble_predict(p, {{"a", true}, {"b", false}}, reg), Tensor::vector({2.0}));
  std::map<std::string, Tensor> c{{"a", Tensor::matrix({{1, 0}})}, {"b", Tensor::matrix({{0, 1}})}};
  EXPECT_EQ(ensemble_predict(c, {{"a", true}, {"b", true}}, Task::binary()), Tensor::matrix({{0.5, 0.5}}));
  EXPECT_THROW(ensemble_predict(c, {{"a", false}, {"b", false}}, Task::binary()), AvailabilityError);
}

TEST(Ensemble, EqualsBruteForceSubsetAverage) {
  Rng rng(6);
  auto views = four_views();
  Graph g;
  std::map<std::string, Tensor> probs;
  for (const auto& v : views) probs[v.name] = softmax(g.constant(uniform({6, 3}, rng, -3, 3))).value();
  for (unsigned mask = 1; mask < 16; ++mask) {
    auto avail = pattern(views, mask);
    auto out = ensemble_predict(probs, avail, Task::multiclass(3));
    // Independent recomputation: explicit per-entry sum in view order.
    for (std::size_t i = 0; i < 6; ++i) {
      double rowsum = 0.0;
      for (std::size_t j = 0; j < 3; ++j) {
        double s = 0.0;
        int n = 0;
        for (const auto& [name, p] : probs)
          if (avail[name]) {
            s += p(i, j);
            ++n;
          }
        EXPECT_EQ(out(i, j), s / n);
        rowsum += out(i, j);
      }
      EXPECT_NEAR(rowsum, 1.0, 1e-12);
    }
  }
}

// ---- models --------------------------------------------------------------------

TEST(Model, PairingEnforced) {
  Rng rng(7);
  EXPECT_THROW(make_model(Method::input_concat, Technique::ignore, Task::binary(), four_views(), Architecture::tempcnn, rng),
               ConfigError);
  EXPECT_THROW(make_model(Method::feature_gated, Technique::exemplar, Task::binary(), four_views(), Architecture::tempcnn, rng),
               ConfigError);
  for (auto m : all_methods()) EXPECT_NO_THROW(make_model(m, paired_technique(m), Task::binary(), four_views(), Architecture::tempcnn, rng));
  EXPECT_EQ(paired_technique(Method::input_concat), Technique::impute);
  EXPECT_EQ(paired_technique(Method::feature_concat), Technique::impute);
  EXPECT_EQ(paired_technique(Method::feature_cca), Technique::exemplar);
  EXPECT_EQ(paired_technique(Method::feature_avg), Technique::ignore);
  EXPECT_EQ(paired_technique(Method::feature_gated), Technique::ignore);
  EXPECT_EQ(paired_technique(Method::ensemble_avg), Technique::ignore);
  EXPECT_THROW(parse_method("decision-fusion"), ConfigError);
}

TEST(Model, ScenarioErrors) {
  Rng rng(8);
  auto views = four_views();
  auto model = make_model(Method::feature_avg, Task::binary(), views, Architecture::tempcnn, rng);
  auto b = random_batch(views, 2, rng);
  EXPECT_THROW(forward(model, b, make_scenario({"lidar"}, Degree::moderate)), ConfigError);
  EXPECT_THROW(forward(model, b, make_scenario({"optical", "radar", "static", "weather"}, Degree::extreme)), AvailabilityError);
}

TEST(Model, NoMissEqualsPlainInference) {
  Rng rng(9);
  auto views = four_views();
  for (auto m : {Method::feature_avg, Method::feature_gated, Method::input_concat, Method::ensemble_avg}) {
    auto model = make_model(m, Task::multiclass(3), views, Architecture::tempcnn, rng);
    auto b = random_batch(views, 3, rng);
    EXPECT_EQ(forward(model, b, no_miss()), predict(model, b));
  }
}

TEST(Model, IgnoreWithFullAvailabilityBitMatchesDirectPath) {
  Rng rng(10);
  auto views = four_views();
  for (auto m : {Method::feature_avg, Method::feature_gated}) {
    auto model = make_model(m, Task::binary(), views, Architecture::gru, rng);
    auto b = random_batch(views, 4, rng);
    Graph g;
    auto bound = bind(g, model.networks.front(), false);
    Tensor direct = softmax(network_logits(model.networks.front(), bound, b)).value();
    EXPECT_EQ(forward(model, b, no_miss()), direct);
  }
}

TEST(Model, GatedWeightsRenormalisedWhenOpticalMissing) {
  Rng rng(11);
  auto views = four_views();
  auto model = make_model(Method::feature_gated, Task::binary(), views, Architecture::tempcnn, rng);
  for (int trial = 0; trial < 5; ++trial) {
    auto r = forward_detailed(model, random_batch(views, 6, rng), make_scenario({"optical"}, Degree::moderate));
    ASSERT_TRUE(r.gate_weights);
    const auto opt = model.networks.front().view_index("optical");
    for (std::size_t i = 0; i < 6; ++i) {
      double s = 0.0;
      for (std::size_t v = 0; v < 4; ++v) s += (*r.gate_weights)(i, v);
      EXPECT_EQ((*r.gate_weights)(i, opt), 0.0);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Model, EnsembleDropsMissingViewPredictions) {
  Rng rng(12);
  auto views = four_views();
  auto model = make_model(Method::ensemble_avg, Task::regression(), views, Architecture::tempcnn, rng);
  model.target = {1.5, 2.0};
  auto b = random_batch(views, 3, rng);
  auto out = forward(model, b, make_scenario({"radar"}, Degree::moderate));
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0.0;
    for (const auto& net : model.networks) {
      if (net.views.front().name == "radar") continue;
      Graph g;
      auto bound = bind(g, net, false);
      s += network_logits(net, bound, b).value()(i, 0);
    }
    EXPECT_NEAR(out[i], s / 3.0 * 2.0 + 1.5, 1e-12);
  }
}

TEST(Model, ImputedViewContentDoesNotMatter) {
  Rng rng(13);
  auto views = four_views();
  auto model = make_model(Method::input_concat, Task::binary(), views, Architecture::tempcnn, rng);
  auto b = random_batch(views, 2, rng);
  std::map<std::string, Tensor> train;
  for (const auto& v : views) train[v.name] = uniform({10, v.width()}, rng);
  std::vector<std::size_t> rows{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  model.impute_bank = compute_impute_bank(train, rows);
  // Two samples identical except for radar.
  for (const auto& v : views)
    if (v.name != "radar")
      for (std::size_t j = 0; j < v.width(); ++j) b.views[v.name](1, j) = b.views[v.name](0, j);
  auto out = forward(model, b, make_scenario({"radar"}, Degree::moderate));
  EXPECT_EQ(out(0, 0), out(1, 0));
  EXPECT_EQ(out(0, 1), out(1, 1));
  auto full = forward(model, b, no_miss());
  EXPECT_NE(full(0, 0), full(1, 0));
}

TEST(Model, ImputeWithoutBankIsAStateError) {
  Rng rng(14);
  auto views = four_views();
  auto model = make_model(Method::feature_concat, Task::binary(), views, Architecture::tempcnn, rng);
  EXPECT_THROW(forward(model, random_batch(views, 2, rng), make_scenario({"radar"}, Degree::moderate)), StateError);
}

// ---- full-method gradients ---------------------------------------------------

class MethodGradient : public ::testing::TestWithParam<std::tuple<Method, int>> {};

TEST_P(MethodGradient, EveryNetworkMatchesFiniteDifferences) {
  const auto [method, seed] = GetParam();
  Rng rng(static_cast<std::uint64_t>(seed));
  std::vector<ViewSpec> views{temporal("optical", 2, 3), temporal("radar", 2, 3), flat("static", 3)};
  const Task task = seed % 2 ? Task::multiclass(3) : Task::regression();
  const Architecture arch = seed % 3 == 0 ? Architecture::gru : Architecture::tempcnn;
  auto model = make_model(method, task, views, arch, rng);
  const auto batch = random_batch(views, 4, rng);
  std::vector<double> targets{0, 2, 1, 2};
  if (!task.classification()) targets = {0.3, -1.2, 0.8, 0.1};
  for (auto& net : model.networks) {
    // Small random biases so relu units sit away from their kink.
    for (auto* p : net.parameters())
      if (p->rank() == 1)
        for (auto& v : p->data()) v = std::uniform_real_distribution<double>(-0.1, 0.1)(rng);
    auto r = gradcheck::check(net.parameter_values(), [&](Graph&, const std::vector<Var>& p) {
      return network_loss(net, bound_from(net, p), batch, task, targets);
    }, 5, static_cast<std::uint64_t>(seed));
    EXPECT_LT(r.max_rel, 1e-4) << to_string(method) << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(AllMethods, MethodGradient,
                         ::testing::Combine(::testing::ValuesIn(all_methods()), ::testing::Range(1, 21)),
                         [](const auto& info) {
                           auto name = to_string(std::get<0>(info.param));
                           std::replace(name.begin(), name.end(), '-', '_');
                           return name + "_" + std::to_string(std::get<1>(info.param));
                         });
