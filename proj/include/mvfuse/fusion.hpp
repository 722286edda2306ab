#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mvfuse/autodiff.hpp"
#include "mvfuse/encoders.hpp"
#include "mvfuse/missing.hpp"
#include "mvfuse/views.hpp"

namespace mvfuse {

enum class Method { input_concat, feature_concat, feature_cca, feature_avg, feature_gated, ensemble_avg };
enum class Technique { impute, exemplar, ignore };

inline const std::vector<Method>& all_methods() {
  static const std::vector<Method> m{Method::input_concat, Method::feature_concat, Method::feature_cca,
                                     Method::feature_avg,  Method::feature_gated,  Method::ensemble_avg};
  return m;
}

inline std::string to_string(Method m) {
  switch (m) {
    case Method::input_concat: return "input-concat";
    case Method::feature_concat: return "feature-concat";
    case Method::feature_cca: return "feature-cca";
    case Method::feature_avg: return "feature-avg";
    case Method::feature_gated: return "feature-gated";
    case Method::ensemble_avg: return "ensemble-avg";
  }
  return "?";
}

inline std::string to_string(Technique t) {
  switch (t) {
    case Technique::impute: return "impute";
    case Technique::exemplar: return "exemplar";
    case Technique::ignore: return "ignore";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (auto m : all_methods())
    if (to_string(m) == s) return m;
  throw ConfigError("unknown method '" + s + "'");
}

/// The technique each method is evaluated with.
inline Technique paired_technique(Method m) {
  switch (m) {
    case Method::input_concat:
    case Method::feature_concat: return Technique::impute;
    case Method::feature_cca: return Technique::exemplar;
    case Method::feature_avg:
    case Method::feature_gated:
    case Method::ensemble_avg: return Technique::ignore;
  }
  throw ConfigError("unknown method");
}

/// Where a single network merges its views.
enum class Merge { input_concat, concat, average, gated };

/// Scalar gate per view: score_v = weights[v] . h_v + bias[v].
struct GateParams {
  Tensor weights;  // [V x 128]
  Tensor bias;     // [V]
};

/// One trainable network: per-view encoders (or a single trunk over the
/// concatenated raw input), an optional gate, and a prediction head.
struct Network {
  Merge merge = Merge::concat;
  std::vector<ViewSpec> views;           // canonical order
  std::vector<EncoderParams> encoders;   // per view, or one trunk for input_concat
  HeadParams head;
  std::optional<GateParams> gate;

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& e : encoders)
      for (auto& t : e.tensors) out.push_back(&t);
    if (gate) {
      out.push_back(&gate->weights);
      out.push_back(&gate->bias);
    }
    for (auto& t : head.tensors) out.push_back(&t);
    return out;
  }

  std::vector<Tensor> parameter_values() const {
    auto* self = const_cast<Network*>(this);
    std::vector<Tensor> out;
    for (auto* p : self->parameters()) out.push_back(*p);
    return out;
  }

  void set_parameter_values(const std::vector<Tensor>& values) {
    auto ps = parameters();
    if (ps.size() != values.size()) throw DimensionError("network: parameter count mismatch");
    for (std::size_t i = 0; i < ps.size(); ++i) *ps[i] = values[i];
  }

  std::size_t view_index(const std::string& name) const {
    for (std::size_t i = 0; i < views.size(); ++i)
      if (views[i].name == name) return i;
    throw ConfigError("network: unknown view '" + name + "'");
  }
};

inline std::size_t total_width(const std::vector<ViewSpec>& views) {
  std::size_t w = 0;
  for (const auto& v : views) w += v.width();
  return w;
}

inline Network make_network(Merge merge, std::vector<ViewSpec> views, const Task& task, Architecture temporal_arch, Rng& rng) {
  if (views.empty()) throw ConfigError("network: no views");
  std::sort(views.begin(), views.end(), [](const ViewSpec& a, const ViewSpec& b) { return a.name < b.name; });
  Network net;
  net.merge = merge;
  net.views = std::move(views);
  if (merge == Merge::input_concat) {
    net.encoders.push_back(init_mlp_encoder(total_width(net.views), rng));
  } else {
    for (const auto& v : net.views) net.encoders.push_back(init_encoder(v.temporal() ? temporal_arch : Architecture::mlp, v, rng));
  }
  if (merge == Merge::gated) {
    const std::size_t V = net.views.size();
    net.gate = GateParams{glorot({V, kFeatureWidth}, kFeatureWidth, 1, rng), Tensor(Shape{V})};
  }
  const std::size_t head_in = merge == Merge::concat ? kFeatureWidth * net.views.size() : kFeatureWidth;
  net.head = init_head(head_in, task.outputs(), rng);
  return net;
}

/// A network's tensors registered on one graph, in parameters() order.
struct BoundNetwork {
  std::vector<std::vector<Var>> encoders;
  std::vector<Var> head;
  Var gate_weights, gate_bias;
  std::vector<Var> all;
};

inline BoundNetwork bind(Graph& g, const Network& net, bool trainable) {
  BoundNetwork b;
  auto reg = [&](const Tensor& t) {
    Var v = trainable ? g.parameter(t) : g.constant(t);
    b.all.push_back(v);
    return v;
  };
  for (const auto& e : net.encoders) {
    std::vector<Var> vs;
    for (const auto& t : e.tensors) vs.push_back(reg(t));
    b.encoders.push_back(std::move(vs));
  }
  if (net.gate) {
    b.gate_weights = reg(net.gate->weights);
    b.gate_bias = reg(net.gate->bias);
  }
  for (const auto& t : net.head.tensors) b.head.push_back(reg(t));
  return b;
}

// ---------------------------------------------------------------------------
// Fusion rules

/// Per-sample concatenation of raw views in canonical order: [B x sum(width)].
inline Tensor fuse_input_concat(const MultiViewBatch& batch, const std::vector<ViewSpec>& views) {
  std::vector<ViewSpec> order = views;
  std::sort(order.begin(), order.end(), [](const ViewSpec& a, const ViewSpec& b) { return a.name < b.name; });
  const std::size_t B = batch.batch_size;
  Tensor out(Shape{B, total_width(order)});
  std::size_t off = 0;
  for (const auto& v : order) {
    if (!batch.available(v.name)) throw AvailabilityError("input-concat: view '" + v.name + "' is unavailable and not imputed");
    const auto& x = batch.views.at(v.name);
    if (x.extent(0) != B || x.extent(1) != v.width()) throw DimensionError("input-concat: view '" + v.name + "' has wrong shape");
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t j = 0; j < v.width(); ++j) out(i, off + j) = x(i, j);
    off += v.width();
  }
  return out;
}

/// Concatenation of per-view features in canonical (map) order: [B x 128 V].
inline Var fuse_feature_concat(const std::map<std::string, Var>& features, const std::vector<ViewSpec>& views) {
  std::vector<Var> parts;
  for (const auto& v : views) {
    auto it = features.find(v.name);
    if (it == features.end()) throw AvailabilityError("feature-concat: no feature for view '" + v.name + "'");
    parts.push_back(it->second);
  }
  if (parts.size() == 1) return parts.front();
  return concat_cols(parts);
}

/// Elementwise mean over the available views' features.
inline Var fuse_feature_avg(const std::map<std::string, Var>& features, const std::map<std::string, bool>& availability) {
  std::vector<Var> parts;
  for (const auto& [name, f] : features) {
    auto it = availability.find(name);
    if (it != availability.end() && it->second) parts.push_back(f);
  }
  if (parts.empty()) throw AvailabilityError("feature-avg: no available views");
  Var acc = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  return parts.size() == 1 ? acc : scale(acc, 1.0 / static_cast<double>(parts.size()));
}

struct GatedFusion {
  Var fused;    // [B x 128]
  Var weights;  // [B x V], exactly zero for unavailable views
};

/// Gated fusion with weights renormalised over the available views only.
/// `views` fixes the gate row of each view (canonical order).
inline GatedFusion fuse_feature_gated(const std::map<std::string, Var>& features, const std::map<std::string, bool>& availability,
                                      Var gate_weights, Var gate_bias, const std::vector<ViewSpec>& views) {
  const std::size_t V = views.size();
  if (gate_weights.value().rank() != 2 || gate_weights.value().extent(0) != V || gate_bias.value().size() != V) {
    throw DimensionError("feature-gated: gate parameters do not match view count");
  }
  std::vector<bool> mask(V, false);
  std::size_t B = 0;
  for (std::size_t v = 0; v < V; ++v) {
    auto a = availability.find(views[v].name);
    mask[v] = a != availability.end() && a->second;
    if (mask[v]) {
      auto f = features.find(views[v].name);
      if (f == features.end()) throw AvailabilityError("feature-gated: no feature for available view '" + views[v].name + "'");
      B = f->second.value().extent(0);
    }
  }
  if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; })) throw AvailabilityError("feature-gated: no available views");

  Graph& g = gate_weights.graph();
  const std::size_t width = gate_weights.value().extent(1);
  std::vector<Var> scores;
  for (std::size_t v = 0; v < V; ++v) {
    if (!mask[v]) {
      scores.push_back(g.constant(Tensor(Shape{B, 1})));
      continue;
    }
    Var w = reshape(slice_cols(reshape(gate_weights, {1, V * width}), v * width, width), {width, 1});
    Var b = reshape(slice_cols(reshape(gate_bias, {1, V}), v, 1), {1});
    scores.push_back(add_bias(matmul(features.at(views[v].name), w), b));
  }
  Var weights = softmax(concat_cols(scores), mask);
  Var fused;
  for (std::size_t v = 0; v < V; ++v) {
    if (!mask[v]) continue;
    Var term = scale_rows(features.at(views[v].name), slice_cols(weights, v, 1));
    fused = fused.valid() ? add(fused, term) : term;
  }
  return {fused, weights};
}

/// Mean of per-view predictions over available views: probability vectors
/// [B x C] for classification, values [B] for regression.
inline Tensor ensemble_predict(const std::map<std::string, Tensor>& predictions, const std::map<std::string, bool>& availability,
                               const Task& task) {
  const Tensor* first = nullptr;
  std::size_t count = 0;
  Tensor acc;
  for (const auto& [name, p] : predictions) {
    auto it = availability.find(name);
    if (it == availability.end() || !it->second) continue;
    if (!first) {
      first = &p;
      acc = Tensor(p.shape(), 0.0);
    } else if (p.shape() != first->shape()) {
      throw DimensionError("ensemble: per-view predictions differ in shape");
    }
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p[i];
    ++count;
  }
  if (count == 0) throw AvailabilityError("ensemble: no available views");
  if (task.classification() && acc.rank() != 2) throw DimensionError("ensemble: classification expects [B x C] probabilities");
  for (auto& v : acc.data()) v /= static_cast<double>(count);
  return acc;
}

// ---------------------------------------------------------------------------
// Network evaluation on a graph

/// Encoder output [B x 128] for view `v` of the network.
inline Var view_feature(const Network& net, const BoundNetwork& bound, std::size_t v, const MultiViewBatch& batch) {
  const auto& spec = net.views.at(v);
  if (!batch.available(spec.name)) throw AvailabilityError("view '" + spec.name + "' is unavailable");
  Graph& g = bound.head.front().graph();
  Var raw = g.constant(batch.views.at(spec.name));
  return encode(net.encoders.at(v), bound.encoders.at(v), raw, spec, batch.length_of(spec.name));
}

/// Fused representation fed to the head. Average/gated merges skip
/// unavailable views; input/feature concatenation require every view.
inline Var fused_representation(const Network& net, const BoundNetwork& bound, const MultiViewBatch& batch,
                                Var* gate_weights_out = nullptr) {
  Graph& g = bound.head.front().graph();
  if (net.merge == Merge::input_concat) {
    Var x = g.constant(fuse_input_concat(batch, net.views));
    return encode_static_mlp(x, bound.encoders.front());
  }
  std::map<std::string, Var> features;
  for (std::size_t v = 0; v < net.views.size(); ++v) {
    const auto& name = net.views[v].name;
    if (batch.available(name)) features.emplace(name, view_feature(net, bound, v, batch));
  }
  switch (net.merge) {
    case Merge::concat: return fuse_feature_concat(features, net.views);
    case Merge::average: return fuse_feature_avg(features, batch.availability);
    case Merge::gated: {
      auto gf = fuse_feature_gated(features, batch.availability, bound.gate_weights, bound.gate_bias, net.views);
      if (gate_weights_out) *gate_weights_out = gf.weights;
      return gf.fused;
    }
    case Merge::input_concat: break;
  }
  throw ConfigError("unknown merge");
}

/// Raw head outputs [B x outputs].
inline Var network_logits(const Network& net, const BoundNetwork& bound, const MultiViewBatch& batch) {
  return predict_head(fused_representation(net, bound, batch), bound.head);
}

/// Training loss: cross-entropy on class indices or MSE on (scaled) targets.
inline Var network_loss(const Network& net, const BoundNetwork& bound, const MultiViewBatch& batch, const Task& task,
                        const std::vector<double>& targets) {
  Var logits = network_logits(net, bound, batch);
  if (targets.size() != batch.batch_size) throw DimensionError("network_loss: target count differs from batch");
  if (task.classification()) {
    std::vector<std::size_t> labels(targets.size());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::size_t>(targets[i]);
    return cross_entropy(logits, labels);
  }
  Graph& g = logits.graph();
  return mse(logits, g.constant(Tensor(Shape{targets.size(), 1}, targets)));
}

// ---------------------------------------------------------------------------
// Fusion models

/// Affine map from the training-scale regression target to the original one.
struct TargetScaling {
  double mean = 0.0;
  double scale = 1.0;
};

/// A trained method: its networks (one, or one per view for the ensemble)
/// plus the artifacts its missing-view technique needs.
struct FusionModel {
  Method method = Method::feature_concat;
  Technique technique = Technique::impute;
  Task task;
  std::vector<ViewSpec> views;
  std::vector<Network> networks;
  TargetScaling target;
  std::optional<ImputeBank> impute_bank;
  std::optional<CCAModel> cca;
  std::optional<ExemplarIndex> exemplars;
};

inline Merge merge_of(Method m) {
  switch (m) {
    case Method::input_concat: return Merge::input_concat;
    case Method::feature_concat:
    case Method::feature_cca:
    case Method::ensemble_avg: return Merge::concat;
    case Method::feature_avg: return Merge::average;
    case Method::feature_gated: return Merge::gated;
  }
  throw ConfigError("unknown method");
}

/// Builds an untrained model. Only the method/technique pairs of the
/// benchmark are accepted.
inline FusionModel make_model(Method method, Technique technique, const Task& task, std::vector<ViewSpec> views,
                              Architecture temporal_arch, Rng& rng) {
  if (paired_technique(method) != technique) {
    throw ConfigError("method " + to_string(method) + " is evaluated with " + to_string(paired_technique(method)) + ", not " +
                      to_string(technique));
  }
  for (const auto& v : views) v.validate();
  std::sort(views.begin(), views.end(), [](const ViewSpec& a, const ViewSpec& b) { return a.name < b.name; });
  for (std::size_t i = 1; i < views.size(); ++i)
    if (views[i].name == views[i - 1].name) throw ConfigError("duplicate view '" + views[i].name + "'");
  FusionModel model;
  model.method = method;
  model.technique = technique;
  model.task = task;
  model.views = views;
  if (method == Method::ensemble_avg) {
    for (const auto& v : views) model.networks.push_back(make_network(Merge::concat, {v}, task, temporal_arch, rng));
  } else {
    model.networks.push_back(make_network(merge_of(method), views, task, temporal_arch, rng));
  }
  return model;
}

inline FusionModel make_model(Method method, const Task& task, std::vector<ViewSpec> views, Architecture temporal_arch, Rng& rng) {
  return make_model(method, paired_technique(method), task, std::move(views), temporal_arch, rng);
}

struct ForwardResult {
  Tensor output;                      // probabilities [B x C] or values [B]
  std::optional<Tensor> gate_weights; // feature-gated only, [B x V]
};

namespace detail {

inline Tensor finish_output(const FusionModel& model, const Tensor& raw) {
  if (model.task.classification()) {
    Graph g;
    return softmax(g.constant(raw)).value();
  }
  Tensor out(Shape{raw.extent(0)});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = raw[i] * model.target.scale + model.target.mean;
  return out;
}

inline Tensor exemplar_logits(const FusionModel& model, const MultiViewBatch& batch, const MissingScenario& scenario) {
  const Network& net = model.networks.front();
  Graph g;
  BoundNetwork bound = bind(g, net, false);
  std::map<std::string, Var> features;
  std::map<std::string, Tensor> available;
  for (std::size_t v = 0; v < net.views.size(); ++v) {
    const auto& name = net.views[v].name;
    if (!batch.available(name)) continue;
    Var f = view_feature(net, bound, v, batch);
    features.emplace(name, f);
    available.emplace(name, f.value());
  }
  if (!scenario.missing.empty()) {
    if (!model.cca || !model.exemplars) throw StateError("feature-cca: CCA model and exemplar index are not fitted");
    const Tensor shared = project_shared(available, *model.cca);
    const std::size_t B = batch.batch_size, d = model.cca->d_shared;
    std::vector<std::size_t> nearest(B);
    for (std::size_t i = 0; i < B; ++i) {
      nearest[i] = nearest_exemplar(std::span<const double>(shared.data().data() + i * d, d), *model.exemplars);
    }
    for (const auto& m : scenario.missing) {
      auto it = model.exemplars->features.find(m);
      if (it == model.exemplars->features.end()) throw AvailabilityError("feature-cca: index stores no view '" + m + "'");
      features[m] = g.constant(gather_rows(it->second, nearest));
    }
  }
  return predict_head(fuse_feature_concat(features, net.views), bound.head).value();
}

}  // namespace detail

/// Inference under a missing-view scenario using the model's technique.
inline ForwardResult forward_detailed(const FusionModel& model, const MultiViewBatch& batch, const MissingScenario& scenario) {
  validate_scenario(scenario, model.views);
  MultiViewBatch b = batch;
  for (const auto& m : scenario.missing) {
    b.availability[m] = false;
    b.views.erase(m);
    b.lengths.erase(m);
  }
  for (const auto& v : model.views)
    if (!b.availability.count(v.name)) throw AvailabilityError("batch: no availability entry for view '" + v.name + "'");
  b.validate(model.views);
  for (const auto& v : model.views)
    if (!b.available(v.name) && !scenario.missing.count(v.name)) {
      throw AvailabilityError("view '" + v.name + "' is unavailable but not declared missing by the scenario");
    }

  ForwardResult result;
  switch (model.technique) {
    case Technique::impute: {
      if (!scenario.missing.empty() && !model.impute_bank) throw StateError(to_string(model.method) + ": impute bank is not fitted");
      const MultiViewBatch filled = scenario.missing.empty() ? b : apply_impute(b, scenario, *model.impute_bank);
      Graph g;
      auto bound = bind(g, model.networks.front(), false);
      result.output = detail::finish_output(model, network_logits(model.networks.front(), bound, filled).value());
      break;
    }
    case Technique::ignore: {
      if (model.method == Method::ensemble_avg) {
        std::map<std::string, Tensor> per_view;
        for (const auto& net : model.networks) {
          const auto& name = net.views.front().name;
          if (!b.available(name)) continue;
          Graph g;
          auto bound = bind(g, net, false);
          Tensor raw = network_logits(net, bound, b).value();
          per_view.emplace(name, model.task.classification() ? softmax(g.constant(raw)).value() : raw.reshaped({raw.extent(0)}));
        }
        Tensor avg = ensemble_predict(per_view, b.availability, model.task);
        if (model.task.classification()) {
          result.output = std::move(avg);
        } else {
          for (auto& v : avg.data()) v = v * model.target.scale + model.target.mean;
          result.output = std::move(avg);
        }
      } else {
        Graph g;
        auto bound = bind(g, model.networks.front(), false);
        Var gw;
        Var fused = fused_representation(model.networks.front(), bound, b, &gw);
        result.output = detail::finish_output(model, predict_head(fused, bound.head).value());
        if (gw.valid()) result.gate_weights = gw.value();
      }
      break;
    }
    case Technique::exemplar:
      result.output = detail::finish_output(model, detail::exemplar_logits(model, b, scenario));
      break;
  }
  return result;
}

inline Tensor forward(const FusionModel& model, const MultiViewBatch& batch, const MissingScenario& scenario) {
  return forward_detailed(model, batch, scenario).output;
}

/// Plain inference with every view present.
inline Tensor predict(const FusionModel& model, const MultiViewBatch& batch) { return forward(model, batch, no_miss()); }

}  // namespace mvfuse
