#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "miso/attention.hpp"
#include "miso/numerics.hpp"
#include "miso/rng.hpp"

namespace miso {

using TokenId = std::int32_t;

struct ModelConfig {
  std::size_t vocab_size = 128;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t d_ff = 256;
  std::size_t max_position = 512;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (vocab_size == 0 || d_model == 0 || n_heads == 0 || n_layers == 0 || d_ff == 0 ||
        max_position == 0) {
      throw ConfigError("model config fields must be positive");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                        std::to_string(n_heads));
    }
    if (head_dim() % 2 != 0) {
      throw ConfigError("head dimension " + std::to_string(head_dim()) +
                        " must be even for rotary encoding");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                     {"n_heads", c.n_heads},       {"n_layers", c.n_layers},
                     {"d_ff", c.d_ff},             {"max_position", c.max_position}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  for (const auto& [key, _] : j.items()) {
    if (key != "vocab_size" && key != "d_model" && key != "n_heads" && key != "n_layers" &&
        key != "d_ff" && key != "max_position") {
      throw ConfigError("unknown model config field '" + key + "'");
    }
  }
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.max_position = j.value("max_position", c.max_position);
}

// Pre-norm block: RMSNorm -> attention -> residual, RMSNorm -> gated MLP -> residual.
// Projection matrices are [in x out]; y = x W.
struct LayerParams {
  Tensor attn_norm;
  Tensor wq;
  Tensor wk;
  Tensor wv;
  Tensor wo;
  Tensor mlp_norm;
  Tensor w_gate;
  Tensor w_up;
  Tensor w_down;
};

struct ModelParams {
  Tensor tok_emb;  // [vocab x d_model]
  std::vector<LayerParams> layers;
  Tensor final_norm;
  Tensor lm_head;  // [d_model x vocab]

  // Visits every tensor in a fixed declaration order (the checkpoint order).
  template <class Self, class F>
  static void visit_impl(Self& self, F&& fn) {
    fn(std::string("tok_emb"), self.tok_emb);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& L = self.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      fn(p + "attn_norm", L.attn_norm);
      fn(p + "wq", L.wq);
      fn(p + "wk", L.wk);
      fn(p + "wv", L.wv);
      fn(p + "wo", L.wo);
      fn(p + "mlp_norm", L.mlp_norm);
      fn(p + "w_gate", L.w_gate);
      fn(p + "w_up", L.w_up);
      fn(p + "w_down", L.w_down);
    }
    fn(std::string("final_norm"), self.final_norm);
    fn(std::string("lm_head"), self.lm_head);
  }
  template <class F>
  void visit(F&& fn) {
    visit_impl(*this, std::forward<F>(fn));
  }
  template <class F>
  void visit(F&& fn) const {
    visit_impl(*this, std::forward<F>(fn));
  }

  static ModelParams zeros(const ModelConfig& c) {
    ModelParams p;
    const std::size_t d = c.d_model;
    p.tok_emb = Tensor::matrix(c.vocab_size, d);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      p.layers.push_back({Tensor::vector(std::vector<double>(d, 0.0)), Tensor::matrix(d, d),
                          Tensor::matrix(d, d), Tensor::matrix(d, d), Tensor::matrix(d, d),
                          Tensor::vector(std::vector<double>(d, 0.0)),
                          Tensor::matrix(d, c.d_ff), Tensor::matrix(d, c.d_ff),
                          Tensor::matrix(c.d_ff, d)});
    }
    p.final_norm = Tensor::vector(std::vector<double>(d, 0.0));
    p.lm_head = Tensor::matrix(d, c.vocab_size);
    return p;
  }

  void set_zero() {
    visit([](const std::string&, Tensor& t) { t.fill(0.0); });
  }

  bool operator==(const ModelParams& other) const {
    bool eq = true;
    std::vector<const Tensor*> mine;
    visit([&](const std::string&, const Tensor& t) { mine.push_back(&t); });
    std::size_t i = 0;
    other.visit([&](const std::string&, const Tensor& t) {
      eq = eq && i < mine.size() && *mine[i] == t;
      ++i;
    });
    return eq && i == mine.size();
  }
};

inline ModelParams init_params(const ModelConfig& c, std::uint64_t seed, double stddev = 0.02) {
  c.validate();
  ModelParams p = ModelParams::zeros(c);
  Rng rng(seed);
  p.visit([&](const std::string& name, Tensor& t) {
    const bool norm = name.ends_with("norm");
    for (double& v : t.data()) v = norm ? 1.0 : rng.normal(0.0, stddev);
  });
  return p;
}

// One token sequence with its position ids.
struct TokenSegment {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> positions;

  std::size_t size() const { return tokens.size(); }
};

enum class PositionMode { para, succ };

inline std::string to_string(PositionMode m) { return m == PositionMode::para ? "para" : "succ"; }

struct MisoInstance {
  std::vector<TokenSegment> inputs;
  TokenSegment output;
  PositionMode mode = PositionMode::para;

  void validate() const {
    if (inputs.empty()) throw ArgumentError("MISO instance needs at least one input segment");
    for (const auto& s : inputs)
      if (s.tokens.size() != s.positions.size())
        throw DimensionError("segment tokens/positions length mismatch");
    if (output.tokens.size() != output.positions.size())
      throw DimensionError("output tokens/positions length mismatch");
  }
};

inline std::vector<std::size_t> iota_positions(std::size_t start, std::size_t count) {
  std::vector<std::size_t> p(count);
  for (std::size_t i = 0; i < count; ++i) p[i] = start + i;
  return p;
}

// Assigns position ids. para: every input restarts at 0 and the output starts at
// max_i len_i. succ: inputs continue one another and the output starts at sum_i len_i.
inline MisoInstance make_miso_instance(const std::vector<std::vector<TokenId>>& inputs,
                                       const std::vector<TokenId>& output, PositionMode mode) {
  if (inputs.empty()) throw ArgumentError("MISO instance needs at least one input segment");
  MisoInstance inst;
  inst.mode = mode;
  std::size_t next = 0;
  std::size_t longest = 0;
  for (const auto& toks : inputs) {
    if (toks.empty()) throw ArgumentError("empty input segment");
    const std::size_t start = mode == PositionMode::para ? 0 : next;
    inst.inputs.push_back({toks, iota_positions(start, toks.size())});
    next += toks.size();
    longest = std::max(longest, toks.size());
  }
  const std::size_t out_start = mode == PositionMode::para ? longest : next;
  inst.output = {output, iota_positions(out_start, output.size())};
  return inst;
}

namespace detail {

inline constexpr double kRmsEps = 1e-5;

struct NormCache {
  Tensor x;
  std::vector<double> inv_rms;
  Tensor y;
};

inline NormCache rms_norm(const Tensor& x, const Tensor& gain) {
  NormCache c{x, std::vector<double>(x.rows()), Tensor::matrix(x.rows(), x.cols())};
  const std::size_t d = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double* xr = x.row(r).data();
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + kRmsEps);
    c.inv_rms[r] = inv;
    double* yr = c.y.row(r).data();
    for (std::size_t j = 0; j < d; ++j) yr[j] = xr[j] * inv * gain[j];
  }
  return c;
}

// Adds dL/dx into dx and dL/dgain into dgain.
inline void rms_norm_backward(const NormCache& c, const Tensor& gain, const Tensor& dy,
                              Tensor& dx, Tensor& dgain) {
  const std::size_t d = c.x.cols();
  for (std::size_t r = 0; r < c.x.rows(); ++r) {
    const double* xr = c.x.row(r).data();
    const double* dyr = dy.row(r).data();
    double* dxr = dx.row(r).data();
    const double inv = c.inv_rms[r];
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dgain[j] += dyr[j] * xr[j] * inv;
      dot += dyr[j] * gain[j] * xr[j];
    }
    const double coef = inv * inv * inv * dot / static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) dxr[j] += dyr[j] * gain[j] * inv - xr[j] * coef;
  }
}

inline Tensor linear(const Tensor& x, const Tensor& w) {
  Tensor y = Tensor::matrix(x.rows(), w.cols());
  kernels::gemm(x.data().data(), w.data().data(), y.data().data(), x.rows(), x.cols(),
                w.cols());
  return y;
}

// dx += dy W^T ; dW += x^T dy
inline void linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor& dx,
                            Tensor& dw) {
  kernels::gemm_a_bt(dy.data().data(), w.data().data(), dx.data().data(), dy.rows(), dy.cols(),
                     w.rows(), true);
  kernels::gemm_at_b(x.data().data(), dy.data().data(), dw.data().data(), x.rows(), x.cols(),
                     dy.cols(), true);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Cached activations of one layer for one stream of rows.
struct LayerCache {
  NormCache norm1;
  Tensor q;  // rotated
  Tensor k;  // rotated
  Tensor v;
  std::vector<AttentionCache> self_heads;
  std::vector<MisoCache> miso_heads;
  Tensor attn;
  Tensor x_mid;
  NormCache norm2;
  Tensor gate;
  Tensor up;
  Tensor act;
};

}  // namespace detail

// Forward state of a token stream. A segment stream attends causally to itself;
// the output stream attends through MISO causal attention to every segment.
struct StreamState {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> positions;
  std::vector<detail::LayerCache> layers;
  detail::NormCache final_norm;
  bool has_final = false;

  std::size_t size() const { return tokens.size(); }
  const Tensor& keys(std::size_t layer) const { return layers[layer].k; }
  const Tensor& values(std::size_t layer) const { return layers[layer].v; }
};

namespace detail {

inline void check_tokens(const ModelConfig& c, std::span<const TokenId> tokens,
                         std::span<const std::size_t> positions) {
  if (tokens.size() != positions.size())
    throw DimensionError("tokens/positions length mismatch");
  for (TokenId t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size)
      throw ArgumentError("token id " + std::to_string(t) + " outside vocabulary");
  }
  for (std::size_t p : positions) {
    if (p >= c.max_position) {
      throw ConfigError("position id " + std::to_string(p) + " exceeds max_position " +
                        std::to_string(c.max_position));
    }
  }
}

inline Tensor embed(const ModelParams& p, std::span<const TokenId> tokens) {
  const std::size_t d = p.tok_emb.cols();
  Tensor x = Tensor::matrix(tokens.size(), d);
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    auto src = p.tok_emb.row(static_cast<std::size_t>(tokens[r]));
    std::copy(src.begin(), src.end(), x.row(r).begin());
  }
  return x;
}

inline void rope_heads(Tensor& x, std::span<const std::size_t> positions, std::size_t n_heads,
                       bool inverse) {
  const std::size_t hd = x.cols() / n_heads;
  for (std::size_t h = 0; h < n_heads; ++h) rope_inplace(x, positions, h * hd, hd, inverse);
}

inline Tensor mlp_forward(const LayerParams& L, LayerCache& lc) {
  lc.norm2 = rms_norm(lc.x_mid, L.mlp_norm);
  lc.gate = linear(lc.norm2.y, L.w_gate);
  lc.up = linear(lc.norm2.y, L.w_up);
  lc.act = Tensor::matrix(lc.gate.rows(), lc.gate.cols());
  for (std::size_t i = 0; i < lc.act.size(); ++i) {
    const double g = lc.gate[i];
    lc.act[i] = g * sigmoid(g) * lc.up[i];
  }
  Tensor x_out = linear(lc.act, L.w_down);
  add_into(x_out, lc.x_mid);
  return x_out;
}

// dx_mid += dL/dx_mid through the MLP residual branch (dx_out is dL/d(layer output)).
inline void mlp_backward(const LayerParams& L, const LayerCache& lc, const Tensor& dx_out,
                         LayerParams& G, Tensor& dx_mid) {
  Tensor d_act = Tensor::matrix(lc.act.rows(), lc.act.cols());
  linear_backward(lc.act, L.w_down, dx_out, d_act, G.w_down);
  Tensor d_gate = Tensor::matrix(d_act.rows(), d_act.cols());
  Tensor d_up = Tensor::matrix(d_act.rows(), d_act.cols());
  for (std::size_t i = 0; i < d_act.size(); ++i) {
    const double g = lc.gate[i];
    const double s = sigmoid(g);
    const double silu = g * s;
    d_up[i] = d_act[i] * silu;
    d_gate[i] = d_act[i] * lc.up[i] * s * (1.0 + g * (1.0 - s));
  }
  Tensor dh = Tensor::matrix(lc.x_mid.rows(), lc.x_mid.cols());
  linear_backward(lc.norm2.y, L.w_gate, d_gate, dh, G.w_gate);
  linear_backward(lc.norm2.y, L.w_up, d_up, dh, G.w_up);
  add_into(dx_mid, dx_out);
  rms_norm_backward(lc.norm2, L.mlp_norm, dh, dx_mid, G.mlp_norm);
}

inline void qkv_project(const ModelConfig& c, const LayerParams& L, const Tensor& x,
                        std::span<const std::size_t> positions, LayerCache& lc) {
  lc.norm1 = rms_norm(x, L.attn_norm);
  lc.q = linear(lc.norm1.y, L.wq);
  lc.k = linear(lc.norm1.y, L.wk);
  lc.v = linear(lc.norm1.y, L.wv);
  rope_heads(lc.q, positions, c.n_heads, false);
  rope_heads(lc.k, positions, c.n_heads, false);
}

// Backprop from dq/dk/dv (w.r.t. rotated q, k) into the block input.
inline void qkv_backward(const ModelConfig& c, const LayerParams& L, const LayerCache& lc,
                         std::span<const std::size_t> positions, Tensor dq, Tensor dk,
                         const Tensor& dv, LayerParams& G, Tensor& dx) {
  rope_heads(dq, positions, c.n_heads, true);
  rope_heads(dk, positions, c.n_heads, true);
  Tensor dh = Tensor::matrix(lc.norm1.y.rows(), lc.norm1.y.cols());
  linear_backward(lc.norm1.y, L.wq, dq, dh, G.wq);
  linear_backward(lc.norm1.y, L.wk, dk, dh, G.wk);
  linear_backward(lc.norm1.y, L.wv, dv, dh, G.wv);
  rms_norm_backward(lc.norm1, L.attn_norm, dh, dx, G.attn_norm);
}

}  // namespace detail

// Runs one input segment (or a whole standard sequence) through every layer with
// causal self-attention only. When with_final is set the final norm is computed
// so logits can be read from the stream.
inline StreamState run_segment(const ModelConfig& c, const ModelParams& p,
                               std::span<const TokenId> tokens,
                               std::span<const std::size_t> positions, bool with_final) {
  detail::check_tokens(c, tokens, positions);
  if (tokens.empty()) throw ArgumentError("cannot run an empty segment");
  StreamState s;
  s.tokens.assign(tokens.begin(), tokens.end());
  s.positions.assign(positions.begin(), positions.end());
  Tensor x = detail::embed(p, tokens);
  const std::size_t hd = c.head_dim();
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const LayerParams& L = p.layers[l];
    detail::LayerCache lc;
    detail::qkv_project(c, L, x, positions, lc);
    lc.attn = Tensor::matrix(x.rows(), c.d_model);
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      lc.self_heads.push_back(attention_forward(slice_cols(lc.q, h * hd, hd),
                                                slice_cols(lc.k, h * hd, hd),
                                                slice_cols(lc.v, h * hd, hd), CausalMask{0}));
      add_cols_into(lc.attn, lc.self_heads.back().out, h * hd);
    }
    lc.x_mid = detail::linear(lc.attn, L.wo);
    add_into(lc.x_mid, x);
    x = detail::mlp_forward(L, lc);
    s.layers.push_back(std::move(lc));
  }
  if (with_final) {
    s.final_norm = detail::rms_norm(x, p.final_norm);
    s.has_final = true;
  } else {
    s.final_norm.x = std::move(x);
  }
  return s;
}

inline std::vector<SegmentKV> segment_kv_for_head(std::span<const StreamState> segments,
                                                  std::size_t layer, std::size_t head,
                                                  std::size_t hd) {
  std::vector<SegmentKV> kv;
  kv.reserve(segments.size());
  for (const StreamState& s : segments) {
    kv.push_back({slice_cols(s.keys(layer), head * hd, hd),
                  slice_cols(s.values(layer), head * hd, hd), {}, SegmentRole::input});
  }
  return kv;
}

// Runs the output part: each layer's attention is MISO causal attention over all
// segment caches plus the output's own causal prefix.
inline StreamState run_output(const ModelConfig& c, const ModelParams& p,
                              std::span<const StreamState> segments,
                              std::span<const TokenId> tokens,
                              std::span<const std::size_t> positions, WeightingStrategy w) {
  detail::check_tokens(c, tokens, positions);
  if (segments.empty()) throw ArgumentError("output stream needs at least one input segment");
  if (tokens.empty()) throw ArgumentError("cannot run an empty output");
  StreamState s;
  s.tokens.assign(tokens.begin(), tokens.end());
  s.positions.assign(positions.begin(), positions.end());
  Tensor x = detail::embed(p, tokens);
  const std::size_t hd = c.head_dim();
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const LayerParams& L = p.layers[l];
    detail::LayerCache lc;
    detail::qkv_project(c, L, x, positions, lc);
    lc.attn = Tensor::matrix(x.rows(), c.d_model);
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      const std::vector<SegmentKV> inputs = segment_kv_for_head(segments, l, h, hd);
      const SegmentKV out_kv{slice_cols(lc.k, h * hd, hd), slice_cols(lc.v, h * hd, hd), {},
                             SegmentRole::output};
      lc.miso_heads.push_back(miso_forward(slice_cols(lc.q, h * hd, hd), inputs, out_kv, w));
      add_cols_into(lc.attn, lc.miso_heads.back().out, h * hd);
    }
    lc.x_mid = detail::linear(lc.attn, L.wo);
    add_into(lc.x_mid, x);
    x = detail::mlp_forward(L, lc);
    s.layers.push_back(std::move(lc));
  }
  s.final_norm = detail::rms_norm(x, p.final_norm);
  s.has_final = true;
  return s;
}

inline Tensor stream_logits(const ModelParams& p, const StreamState& s) {
  if (!s.has_final) throw InternalError("stream was run without its final norm");
  return detail::linear(s.final_norm.y, p.lm_head);
}

// Ordinary causal decoder forward with positions 0..len-1.
inline Tensor forward_standard(const ModelConfig& c, const ModelParams& p,
                               std::span<const TokenId> tokens) {
  if (tokens.size() > c.max_position) {
    throw ConfigError("sequence of length " + std::to_string(tokens.size()) +
                      " exceeds max_position " + std::to_string(c.max_position));
  }
  const auto pos = iota_positions(0, tokens.size());
  return stream_logits(p, run_segment(c, p, tokens, pos, true));
}

// Per-layer K (rotated) and V of one input segment.
struct SegmentCache {
  std::vector<std::size_t> positions;
  std::vector<Tensor> keys;
  std::vector<Tensor> values;

  bool operator==(const SegmentCache&) const = default;
};

inline SegmentCache to_segment_cache(StreamState s) {
  SegmentCache c;
  c.positions = std::move(s.positions);
  for (auto& lc : s.layers) {
    c.keys.push_back(std::move(lc.k));
    c.values.push_back(std::move(lc.v));
  }
  return c;
}

// Stage one: each input segment is encoded on its own; no cross-segment attention.
inline std::vector<SegmentCache> encode_inputs(const ModelConfig& c, const ModelParams& p,
                                               const MisoInstance& inst) {
  inst.validate();
  std::vector<SegmentCache> out;
  out.reserve(inst.inputs.size());
  for (const TokenSegment& seg : inst.inputs)
    out.push_back(to_segment_cache(run_segment(c, p, seg.tokens, seg.positions, false)));
  return out;
}

namespace detail {

inline std::vector<SegmentKV> cache_kv_for_head(std::span<const SegmentCache> caches,
                                                std::size_t layer, std::size_t head,
                                                std::size_t hd) {
  std::vector<SegmentKV> kv;
  kv.reserve(caches.size());
  for (const SegmentCache& s : caches) {
    kv.push_back({slice_cols(s.keys[layer], head * hd, hd),
                  slice_cols(s.values[layer], head * hd, hd), {}, SegmentRole::input});
  }
  return kv;
}

inline void check_caches(const ModelConfig& c, std::span<const SegmentCache> caches) {
  if (caches.empty()) throw ArgumentError("decode needs at least one input cache");
  for (const auto& s : caches) {
    if (s.keys.size() != c.n_layers || s.values.size() != c.n_layers)
      throw InternalError("segment cache layer count does not match the model config");
    for (std::size_t l = 0; l < c.n_layers; ++l)
      if (s.keys[l].cols() != c.d_model || s.values[l].cols() != c.d_model ||
          s.keys[l].rows() != s.positions.size())
        throw InternalError("segment cache shape does not match the model config");
  }
}

}  // namespace detail

// Incremental output-part decoder over fixed input caches. Appending rows one at a
// time gives the same logits as decoding the whole output at once.
class MisoDecoder {
 public:
  MisoDecoder(const ModelConfig& c, const ModelParams& p, std::vector<SegmentCache> caches,
              WeightingStrategy w)
      : config_(c), params_(&p), caches_(std::move(caches)), weighting_(w) {
    detail::check_caches(c, caches_);
    keys_.assign(c.n_layers, Tensor::matrix(0, c.d_model));
    values_.assign(c.n_layers, Tensor::matrix(0, c.d_model));
  }

  // Feeds output rows; returns their logits [rows x vocab].
  Tensor append(std::span<const TokenId> tokens, std::span<const std::size_t> positions) {
    detail::check_tokens(config_, tokens, positions);
    const ModelParams& p = *params_;
    const std::size_t hd = config_.head_dim();
    Tensor x = detail::embed(p, tokens);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      const LayerParams& L = p.layers[l];
      detail::LayerCache lc;
      detail::qkv_project(config_, L, x, positions, lc);
      keys_[l] = append_rows(keys_[l], lc.k);
      values_[l] = append_rows(values_[l], lc.v);
      Tensor attn = Tensor::matrix(x.rows(), config_.d_model);
      for (std::size_t h = 0; h < config_.n_heads; ++h) {
        const auto inputs = detail::cache_kv_for_head(caches_, l, h, hd);
        const SegmentKV out_kv{slice_cols(keys_[l], h * hd, hd),
                               slice_cols(values_[l], h * hd, hd), {}, SegmentRole::output};
        add_cols_into(attn, miso_forward(slice_cols(lc.q, h * hd, hd), inputs, out_kv,
                                         weighting_).out,
                      h * hd);
      }
      lc.x_mid = detail::linear(attn, L.wo);
      add_into(lc.x_mid, x);
      x = detail::mlp_forward(L, lc);
    }
    return detail::linear(detail::rms_norm(x, p.final_norm).y, p.lm_head);
  }

  std::size_t output_length() const { return keys_.empty() ? 0 : keys_.front().rows(); }

 private:
  static Tensor append_rows(const Tensor& a, const Tensor& b) {
    const Tensor* parts[] = {&a, &b};
    return vstack(parts, b.cols());
  }

  ModelConfig config_;
  const ModelParams* params_;
  std::vector<SegmentCache> caches_;
  WeightingStrategy weighting_;
  std::vector<Tensor> keys_;
  std::vector<Tensor> values_;
};

// Stage two: next-token logits for every output position.
inline Tensor decode_output(const ModelConfig& c, const ModelParams& p,
                            std::vector<SegmentCache> caches, const TokenSegment& output,
                            WeightingStrategy w) {
  if (output.tokens.empty()) throw ArgumentError("decode_output needs at least one token");
  MisoDecoder dec(c, p, std::move(caches), w);
  return dec.append(output.tokens, output.positions);
}

// Incremental standard decoder: one causal sequence with a growing KV cache.
class StandardDecoder {
 public:
  StandardDecoder(const ModelConfig& c, const ModelParams& p) : config_(c), params_(&p) {
    keys_.assign(c.n_layers, Tensor::matrix(0, c.d_model));
    values_.assign(c.n_layers, Tensor::matrix(0, c.d_model));
  }

  Tensor append(std::span<const TokenId> tokens) {
    const std::size_t start = length_;
    if (start + tokens.size() > config_.max_position) {
      throw ConfigError("sequence exceeds max_position " + std::to_string(config_.max_position));
    }
    const auto positions = iota_positions(start, tokens.size());
    detail::check_tokens(config_, tokens, positions);
    const ModelParams& p = *params_;
    const std::size_t hd = config_.head_dim();
    Tensor x = detail::embed(p, tokens);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      const LayerParams& L = p.layers[l];
      detail::LayerCache lc;
      detail::qkv_project(config_, L, x, positions, lc);
      const Tensor* kp[] = {&keys_[l], &lc.k};
      const Tensor* vp[] = {&values_[l], &lc.v};
      keys_[l] = vstack(kp, config_.d_model);
      values_[l] = vstack(vp, config_.d_model);
      Tensor attn = Tensor::matrix(x.rows(), config_.d_model);
      for (std::size_t h = 0; h < config_.n_heads; ++h) {
        add_cols_into(attn,
                      attention_forward(slice_cols(lc.q, h * hd, hd),
                                        slice_cols(keys_[l], h * hd, hd),
                                        slice_cols(values_[l], h * hd, hd), CausalMask{start})
                          .out,
                      h * hd);
      }
      lc.x_mid = detail::linear(attn, L.wo);
      add_into(lc.x_mid, x);
      x = detail::mlp_forward(L, lc);
    }
    length_ += tokens.size();
    return detail::linear(detail::rms_norm(x, p.final_norm).y, p.lm_head);
  }

  std::size_t length() const { return length_; }

 private:
  ModelConfig config_;
  const ModelParams* params_;
  std::vector<Tensor> keys_;
  std::vector<Tensor> values_;
  std::size_t length_ = 0;
};

// Lowest index among the maxima.
inline TokenId argmax_token(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[best]) best = i;
  return static_cast<TokenId>(best);
}

struct GenerateOptions {
  std::size_t max_new = 16;
  std::optional<TokenId> eos;
};

// Greedy continuation of a single standard sequence. Stops after emitting EOS
// (EOS is included in the result) or after max_new tokens.
inline std::vector<TokenId> generate(const ModelConfig& c, const ModelParams& p,
                                     std::span<const TokenId> prompt, GenerateOptions opt) {
  if (opt.max_new < 1) throw ArgumentError("generate requires max_new >= 1");
  if (prompt.empty()) throw ArgumentError("generate requires a nonempty prompt");
  StandardDecoder dec(c, p);
  Tensor logits = dec.append(prompt);
  std::vector<TokenId> out;
  while (out.size() < opt.max_new) {
    const TokenId next = argmax_token(logits.row(logits.rows() - 1));
    out.push_back(next);
    if (opt.eos && next == *opt.eos) break;
    if (out.size() == opt.max_new || dec.length() >= c.max_position) break;
    const TokenId step[] = {next};
    logits = dec.append(step);
  }
  return out;
}

// Greedy MISO-mode continuation: instance.output holds the already-known output
// prefix (at least one token, e.g. the separator); new tokens extend its positions.
inline std::vector<TokenId> generate_miso(const ModelConfig& c, const ModelParams& p,
                                          const MisoInstance& inst, WeightingStrategy w,
                                          GenerateOptions opt) {
  if (opt.max_new < 1) throw ArgumentError("generate requires max_new >= 1");
  if (inst.output.tokens.empty()) throw ArgumentError("MISO generation needs an output prefix");
  MisoDecoder dec(c, p, encode_inputs(c, p, inst), w);
  Tensor logits = dec.append(inst.output.tokens, inst.output.positions);
  std::size_t next_pos = inst.output.positions.back() + 1;
  std::vector<TokenId> out;
  while (out.size() < opt.max_new) {
    const TokenId next = argmax_token(logits.row(logits.rows() - 1));
    out.push_back(next);
    if (opt.eos && next == *opt.eos) break;
    if (out.size() == opt.max_new || next_pos >= c.max_position) break;
    const TokenId tok[] = {next};
    const std::size_t pos[] = {next_pos++};
    logits = dec.append(tok, pos);
  }
  return out;
}

// Full forward state of one training example: independent segments plus an
// optional output stream fused over them.
struct ForwardPass {
  std::vector<StreamState> segments;
  std::optional<StreamState> output;
  WeightingStrategy weighting;
};

// Backprop of dlogits into parameter gradients. seg_dlogits[i] (may be empty)
// applies to segment i's rows and requires that segment to carry its final norm.
inline void backward(const ModelConfig& c, const ModelParams& p, const ForwardPass& fp,
                     const Tensor* out_dlogits, std::span<const Tensor> seg_dlogits,
                     ModelParams& grads) {
  const std::size_t n_seg = fp.segments.size();
  const std::size_t hd = c.head_dim();
  const std::size_t d = c.d_model;

  auto final_backward = [&](const StreamState& s, const Tensor& dlogits) {
    Tensor dh = Tensor::matrix(s.size(), d);
    detail::linear_backward(s.final_norm.y, p.lm_head, dlogits, dh, grads.lm_head);
    Tensor dx = Tensor::matrix(s.size(), d);
    detail::rms_norm_backward(s.final_norm, p.final_norm, dh, dx, grads.final_norm);
    return dx;
  };

  std::vector<Tensor> dx_seg(n_seg);
  std::vector<bool> seg_live(n_seg, false);
  for (std::size_t i = 0; i < n_seg; ++i) {
    if (i < seg_dlogits.size() && !seg_dlogits[i].empty()) {
      if (!fp.segments[i].has_final) throw InternalError("segment logits without final norm");
      dx_seg[i] = final_backward(fp.segments[i], seg_dlogits[i]);
      seg_live[i] = true;
    } else {
      dx_seg[i] = Tensor::matrix(fp.segments[i].size(), d);
    }
  }
  Tensor dx_out;
  if (fp.output) {
    if (!out_dlogits) throw InternalError("output stream without output gradient");
    dx_out = final_backward(*fp.output, *out_dlogits);
  }

  for (std::size_t li = c.n_layers; li-- > 0;) {
    const LayerParams& L = p.layers[li];
    LayerParams& G = grads.layers[li];
    std::vector<Tensor> dk_extra(n_seg);
    std::vector<Tensor> dv_extra(n_seg);
    for (std::size_t i = 0; i < n_seg; ++i) {
      dk_extra[i] = Tensor::matrix(fp.segments[i].size(), d);
      dv_extra[i] = Tensor::matrix(fp.segments[i].size(), d);
    }

    if (fp.output) {
      const detail::LayerCache& lc = fp.output->layers[li];
      Tensor dx_mid = Tensor::matrix(fp.output->size(), d);
      detail::mlp_backward(L, lc, dx_out, G, dx_mid);
      Tensor d_attn = Tensor::matrix(fp.output->size(), d);
      detail::linear_backward(lc.attn, L.wo, dx_mid, d_attn, G.wo);
      Tensor dq = Tensor::matrix(fp.output->size(), d);
      Tensor dk = Tensor::matrix(fp.output->size(), d);
      Tensor dv = Tensor::matrix(fp.output->size(), d);
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        const MisoGrads mg = miso_attention_backward(slice_cols(d_attn, h * hd, hd),
                                                     lc.miso_heads[h]);
        add_cols_into(dq, mg.dq_out, h * hd);
        add_cols_into(dk, mg.dk_out, h * hd);
        add_cols_into(dv, mg.dv_out, h * hd);
        for (std::size_t i = 0; i < n_seg; ++i) {
          add_cols_into(dk_extra[i], mg.dk_inputs[i], h * hd);
          add_cols_into(dv_extra[i], mg.dv_inputs[i], h * hd);
        }
      }
      detail::qkv_backward(c, L, lc, fp.output->positions, std::move(dq), std::move(dk), dv, G,
                           dx_mid);
      dx_out = std::move(dx_mid);
    }

    for (std::size_t i = 0; i < n_seg; ++i) {
      const StreamState& s = fp.segments[i];
      const detail::LayerCache& lc = s.layers[li];
      Tensor dx_mid = Tensor::matrix(s.size(), d);
      Tensor dq = Tensor::matrix(s.size(), d);
      Tensor& dk = dk_extra[i];
      Tensor& dv = dv_extra[i];
      if (seg_live[i]) {
        detail::mlp_backward(L, lc, dx_seg[i], G, dx_mid);
        Tensor d_attn = Tensor::matrix(s.size(), d);
        detail::linear_backward(lc.attn, L.wo, dx_mid, d_attn, G.wo);
        for (std::size_t h = 0; h < c.n_heads; ++h) {
          const AttentionGrads ag =
              attention_backward(lc.self_heads[h], slice_cols(d_attn, h * hd, hd));
          add_cols_into(dq, ag.dq, h * hd);
          add_cols_into(dk, ag.dk, h * hd);
          add_cols_into(dv, ag.dv, h * hd);
        }
      }
      detail::qkv_backward(c, L, lc, s.positions, std::move(dq), dk, dv, G, dx_mid);
      dx_seg[i] = std::move(dx_mid);
      seg_live[i] = true;
    }
  }

  auto embed_backward = [&](const StreamState& s, const Tensor& dx) {
    for (std::size_t r = 0; r < s.size(); ++r) {
      auto dst = grads.tok_emb.row(static_cast<std::size_t>(s.tokens[r]));
      auto src = dx.row(r);
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  };
  for (std::size_t i = 0; i < n_seg; ++i) embed_backward(fp.segments[i], dx_seg[i]);
  if (fp.output) embed_backward(*fp.output, dx_out);
}

}  // namespace miso
