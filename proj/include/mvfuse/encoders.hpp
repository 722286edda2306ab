#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mvfuse/autodiff.hpp"
#include "mvfuse/views.hpp"

namespace mvfuse {

/// Width of every encoder hidden layer, encoder output, and head hidden layer.
inline constexpr std::size_t kFeatureWidth = 128;
inline constexpr std::size_t kConvKernel = 3;

enum class Architecture { mlp, tempcnn, gru };

inline std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::mlp: return "mlp";
    case Architecture::tempcnn: return "tempcnn";
    case Architecture::gru: return "gru";
  }
  return "?";
}

// Tensor layout per architecture:
//   mlp     : W1 [d x 128], b1, W2 [128 x 128], b2
//   tempcnn : K1 [128 x C x 3], c1, K2 [128 x 128 x 3], c2
//   gru     : per layer W [in x 384], U_zr [128 x 256], U_h [128 x 128], b [384]
struct EncoderParams {
  Architecture arch = Architecture::mlp;
  std::size_t input_channels = 0;
  std::vector<Tensor> tensors;
};

// W1 [in x 128], b1 [128], W2 [128 x out], b2 [out]
struct HeadParams {
  std::vector<Tensor> tensors;
  std::size_t outputs() const { return tensors.at(3).size(); }
  std::size_t inputs() const { return tensors.at(0).extent(0); }
};

// ---------------------------------------------------------------------------
// Initialisation: Glorot-uniform weights, zero biases.

inline Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

inline EncoderParams init_mlp_encoder(std::size_t in, Rng& rng) {
  const std::size_t H = kFeatureWidth;
  return {Architecture::mlp, in,
          {glorot({in, H}, in, H, rng), Tensor(Shape{H}), glorot({H, H}, H, H, rng), Tensor(Shape{H})}};
}

inline EncoderParams init_tempcnn_encoder(std::size_t channels, Rng& rng) {
  const std::size_t H = kFeatureWidth, K = kConvKernel;
  return {Architecture::tempcnn, channels,
          {glorot({H, channels, K}, channels * K, H * K, rng), Tensor(Shape{H}),
           glorot({H, H, K}, H * K, H * K, rng), Tensor(Shape{H})}};
}

inline EncoderParams init_gru_encoder(std::size_t channels, Rng& rng) {
  const std::size_t H = kFeatureWidth;
  EncoderParams p{Architecture::gru, channels, {}};
  for (std::size_t layer = 0; layer < 2; ++layer) {
    const std::size_t in = layer == 0 ? channels : H;
    p.tensors.push_back(glorot({in, 3 * H}, in, H, rng));
    p.tensors.push_back(glorot({H, 2 * H}, H, H, rng));
    p.tensors.push_back(glorot({H, H}, H, H, rng));
    p.tensors.emplace_back(Shape{3 * H});
  }
  return p;
}

inline EncoderParams init_encoder(Architecture arch, const ViewSpec& view, Rng& rng) {
  switch (arch) {
    case Architecture::mlp: return init_mlp_encoder(view.width(), rng);
    case Architecture::tempcnn: return init_tempcnn_encoder(view.channels, rng);
    case Architecture::gru: return init_gru_encoder(view.channels, rng);
  }
  throw ConfigError("unknown architecture");
}

inline HeadParams init_head(std::size_t in, std::size_t out, Rng& rng) {
  const std::size_t H = kFeatureWidth;
  return {{glorot({in, H}, in, H, rng), Tensor(Shape{H}), glorot({H, out}, H, out, rng), Tensor(Shape{out})}};
}

/// Registers tensors on a graph, as trainable leaves or as constants.
inline std::vector<Var> bind(Graph& g, const std::vector<Tensor>& tensors, bool trainable) {
  std::vector<Var> out;
  out.reserve(tensors.size());
  for (const auto& t : tensors) out.push_back(trainable ? g.parameter(t) : g.constant(t));
  return out;
}

// ---------------------------------------------------------------------------
// Building blocks

struct GruVars {
  Var w;     // [in x 3H]  (z | r | candidate)
  Var u_zr;  // [H x 2H]
  Var u_h;   // [H x H]
  Var b;     // [3H]
};

/// One GRU step over a batch: x [B x in], h_prev [B x H] -> [B x H].
///   z = sigmoid(W_z x + U_z h + b_z), r = sigmoid(W_r x + U_r h + b_r)
///   cand = tanh(W_h x + U_h (r * h) + b_h), h_t = (1 - z) * h_prev + z * cand
inline Var gru_cell(Var x, Var h_prev, const GruVars& p) {
  const auto& W = p.w.value();
  const auto& U = p.u_zr.value();
  const std::size_t H = p.u_h.value().extent(0);
  if (W.rank() != 2 || W.extent(1) != 3 * H || U.extent(0) != H || U.extent(1) != 2 * H || p.b.value().size() != 3 * H) {
    throw DimensionError("gru_cell: inconsistent weight shapes");
  }
  if (x.value().rank() != 2 || x.value().extent(1) != W.extent(0)) {
    throw DimensionError("gru_cell: input width " + shape_str(x.shape()) + " vs W " + shape_str(W.shape()));
  }
  if (h_prev.value().rank() != 2 || h_prev.value().extent(1) != H || h_prev.value().extent(0) != x.value().extent(0)) {
    throw DimensionError("gru_cell: hidden state shape " + shape_str(h_prev.shape()));
  }
  Var gx = linear(x, p.w, p.b);
  Var gh = matmul(h_prev, p.u_zr);
  Var z = sigmoid(add(slice_cols(gx, 0, H), slice_cols(gh, 0, H)));
  Var r = sigmoid(add(slice_cols(gx, H, H), slice_cols(gh, H, H)));
  Var cand = tanh(add(slice_cols(gx, 2 * H, H), matmul(mul(r, h_prev), p.u_h)));
  return add(h_prev, mul(z, sub(cand, h_prev)));
}

/// Single-sample convenience: x_t [in], h_prev [H], weights {W, U_zr, U_h, b}.
inline Tensor gru_cell(const Tensor& x_t, const Tensor& h_prev, const std::vector<Tensor>& weights) {
  if (weights.size() != 4) throw DimensionError("gru_cell: expected 4 weight tensors");
  Graph g;
  auto p = bind(g, weights, false);
  Var x = g.constant(x_t.reshaped({1, x_t.size()}));
  Var h = g.constant(h_prev.reshaped({1, h_prev.size()}));
  return gru_cell(x, h, GruVars{p[0], p[1], p[2], p[3]}).value().reshaped({h_prev.size()});
}

namespace detail {

inline void require_params(std::span<const Var> p, std::size_t n, const char* who) {
  if (p.size() != n) throw DimensionError(std::string(who) + ": expected " + std::to_string(n) + " parameter tensors");
}

// Row mask [B x H] with ones where step t is inside sample b's sequence.
inline Var step_mask(Graph& g, const std::vector<std::size_t>& lengths, std::size_t t, std::size_t H) {
  Tensor m(Shape{lengths.size(), H});
  for (std::size_t b = 0; b < lengths.size(); ++b)
    if (t < lengths[b])
      for (std::size_t j = 0; j < H; ++j) m(b, j) = 1.0;
  return g.constant(std::move(m));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Encoders (batched; x rows are samples)

/// Two dense layers of width 128, relu after each. x [B x d] -> [B x 128].
inline Var encode_static_mlp(Var x, std::span<const Var> p) {
  detail::require_params(p, 4, "encode_static_mlp");
  if (x.value().rank() != 2 || x.value().extent(1) != p[0].value().extent(0)) {
    throw DimensionError("encode_static_mlp: input " + shape_str(x.shape()) + " vs first layer " + shape_str(p[0].shape()));
  }
  return relu(linear(relu(linear(x, p[0], p[1])), p[2], p[3]));
}

/// Two same-padded conv layers (128 channels, kernel 3, relu) then mean over
/// time (masked by `lengths` when given). x [B x C x T] -> [B x 128].
inline Var encode_temporal_cnn(Var x, std::span<const Var> p, const std::vector<std::size_t>& lengths = {}) {
  detail::require_params(p, 4, "encode_temporal_cnn");
  if (x.value().rank() != 3) throw DimensionError("encode_temporal_cnn: input must be [B x C x T]");
  Var h = relu(conv1d(x, p[0], p[1]));
  h = relu(conv1d(h, p[2], p[3]));
  return mean_time(h, lengths);
}

/// Two stacked GRU layers of width 128 from a zero state; returns the top
/// layer's hidden state after each sample's last valid step.
inline Var encode_temporal_gru(Var x, std::span<const Var> p, const std::vector<std::size_t>& lengths = {}) {
  detail::require_params(p, 8, "encode_temporal_gru");
  const auto& X = x.value();
  if (X.rank() != 3) throw DimensionError("encode_temporal_gru: input must be [B x C x T]");
  const std::size_t B = X.extent(0), T = X.extent(2), H = p[2].value().extent(0);
  if (!lengths.empty() && lengths.size() != B) throw DimensionError("encode_temporal_gru: lengths size differs from batch");
  for (auto l : lengths)
    if (l == 0 || l > T) throw DimensionError("encode_temporal_gru: sequence length outside [1, T]");
  const bool masked = !lengths.empty() && std::any_of(lengths.begin(), lengths.end(), [T](auto l) { return l < T; });

  Graph& g = x.graph();
  const GruVars l1{p[0], p[1], p[2], p[3]};
  const GruVars l2{p[4], p[5], p[6], p[7]};
  Var h1 = g.constant(Tensor(Shape{B, H}));
  Var h2 = g.constant(Tensor(Shape{B, H}));
  for (std::size_t t = 0; t < T; ++t) {
    Var n1 = gru_cell(time_step(x, t), h1, l1);
    Var n2 = gru_cell(n1, h2, l2);
    if (masked) {
      Var m = detail::step_mask(g, lengths, t, H);
      h1 = add(h1, mul(m, sub(n1, h1)));
      h2 = add(h2, mul(m, sub(n2, h2)));
    } else {
      h1 = n1;
      h2 = n2;
    }
  }
  return h2;
}

/// Dispatches on architecture. `raw` is [B x width] in the flattened view layout.
inline Var encode(const EncoderParams& enc, std::span<const Var> p, Var raw, const ViewSpec& view,
                  const std::vector<std::size_t>& lengths = {}) {
  const std::size_t B = raw.value().extent(0);
  switch (enc.arch) {
    case Architecture::mlp: return encode_static_mlp(raw, p);
    case Architecture::tempcnn: return encode_temporal_cnn(reshape(raw, {B, view.channels, view.timesteps}), p, lengths);
    case Architecture::gru: return encode_temporal_gru(reshape(raw, {B, view.channels, view.timesteps}), p, lengths);
  }
  throw ConfigError("unknown architecture");
}

/// dense(128, relu) -> dense(outputs). z [B x D] -> [B x outputs] raw logits or values.
inline Var predict_head(Var z, std::span<const Var> p) {
  detail::require_params(p, 4, "predict_head");
  if (z.value().rank() != 2 || z.value().extent(1) != p[0].value().extent(0)) {
    throw DimensionError("predict_head: input " + shape_str(z.shape()) + " vs head " + shape_str(p[0].shape()));
  }
  return linear(relu(linear(z, p[0], p[1])), p[2], p[3]);
}

// ---------------------------------------------------------------------------
// Tensor-level conveniences for single samples ([d] or [C x T]) or batches.

inline Tensor encode_static_mlp(const Tensor& x, const EncoderParams& params) {
  Graph g;
  auto p = bind(g, params.tensors, false);
  const bool single = x.rank() == 1;
  Var in = g.constant(single ? x.reshaped({1, x.size()}) : x);
  Tensor out = encode_static_mlp(in, p).value();
  return single ? out.reshaped({kFeatureWidth}) : out;
}

inline Tensor encode_temporal(const Tensor& x, const EncoderParams& params, const std::vector<std::size_t>& lengths = {}) {
  Graph g;
  auto p = bind(g, params.tensors, false);
  const bool single = x.rank() == 2;
  Var in = g.constant(single ? x.reshaped({1, x.extent(0), x.extent(1)}) : x);
  Var out = params.arch == Architecture::gru ? encode_temporal_gru(in, p, lengths) : encode_temporal_cnn(in, p, lengths);
  return single ? out.value().reshaped({out.value().extent(1)}) : out.value();
}

inline Tensor predict_head(const Tensor& z, const HeadParams& params) {
  Graph g;
  auto p = bind(g, params.tensors, false);
  const bool single = z.rank() == 1;
  Var in = g.constant(single ? z.reshaped({1, z.size()}) : z);
  Tensor out = predict_head(in, p).value();
  return single ? out.reshaped({out.size()}) : out;
}

}  // namespace mvfuse
