#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "miso/numerics.hpp"

namespace miso {

enum class SegmentRole { input, output };

// Keys/values of one sequence part. Keys are expected to already carry their
// rotary encoding; position_ids are kept for validation and bookkeeping.
struct SegmentKV {
  Tensor keys;
  Tensor values;
  std::vector<std::size_t> position_ids;
  SegmentRole role = SegmentRole::input;

  std::size_t length() const { return keys.rows(); }

  void validate() const {
    require_matrix(keys, "segment keys");
    require_matrix(values, "segment values");
    if (keys.rows() != values.rows()) {
      throw DimensionError("segment keys " + shape_string(keys) + " and values " +
                           shape_string(values) + " differ in length");
    }
    if (!position_ids.empty()) {
      if (position_ids.size() != keys.rows()) {
        throw DimensionError("segment has " + std::to_string(position_ids.size()) +
                             " position ids for " + std::to_string(keys.rows()) + " rows");
      }
      for (std::size_t i = 1; i < position_ids.size(); ++i) {
        if (position_ids[i] <= position_ids[i - 1]) {
          throw ArgumentError("segment position ids must be strictly increasing");
        }
      }
    }
  }
};

enum class WeightingKind { uniform, fid };

// per_row: every output query row gets its own fid weights.
// per_sequence: S terms are summed over all query rows before normalizing.
enum class FidGranularity { per_row, per_sequence };

struct WeightingStrategy {
  WeightingKind kind = WeightingKind::uniform;
  FidGranularity granularity = FidGranularity::per_row;

  static WeightingStrategy uniform() { return {}; }
  static WeightingStrategy fid(FidGranularity g = FidGranularity::per_row) {
    return {WeightingKind::fid, g};
  }
};

inline std::string to_string(WeightingKind k) {
  return k == WeightingKind::uniform ? "uniform" : "fid";
}

// Query row t may attend target rows [0, offset + t].
struct CausalMask {
  std::size_t offset = 0;
};

// Forward state of one masked softmax attention, kept for the backward pass.
struct AttentionCache {
  Tensor q;
  Tensor k;
  Tensor v;
  Tensor probs;             // [m x n], zero past each row's mask limit
  std::vector<double> lse;  // log of the per-row normalizer, in scaled-score units
  Tensor out;
  std::optional<CausalMask> mask;
  double scale = 1.0;

  std::size_t limit(std::size_t row) const {
    const std::size_t n = k.rows();
    return mask ? std::min(n, mask->offset + row + 1) : n;
  }
};

struct AttentionGrads {
  Tensor dq;
  Tensor dk;
  Tensor dv;
};

inline AttentionCache attention_forward(const Tensor& q, const Tensor& k, const Tensor& v,
                                        std::optional<CausalMask> mask = std::nullopt) {
  require_matrix(q, "attention query");
  require_matrix(k, "attention keys");
  require_matrix(v, "attention values");
  if (q.cols() != k.cols()) {
    throw DimensionError("query " + shape_string(q) + " and keys " + shape_string(k) +
                         " disagree on d_k");
  }
  if (k.rows() != v.rows()) {
    throw DimensionError("keys " + shape_string(k) + " and values " + shape_string(v) +
                         " disagree on target length");
  }
  if (k.rows() == 0) throw UndefinedAttentionError("attention over an empty target");

  AttentionCache c;
  c.q = q;
  c.k = k;
  c.v = v;
  c.mask = mask;
  c.scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));

  const std::size_t m = q.rows();
  const std::size_t n = k.rows();
  c.probs = Tensor::matrix(m, n);
  kernels::gemm_a_bt(q.data().data(), k.data().data(), c.probs.data().data(), m, q.cols(), n);
  c.lse.resize(m);
  for (std::size_t r = 0; r < m; ++r) {
    const std::size_t lim = c.limit(r);
    double* row = c.probs.row(r).data();
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < lim; ++j) {
      row[j] *= c.scale;
      mx = std::max(mx, row[j]);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < lim; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < lim; ++j) row[j] *= inv;
    for (std::size_t j = lim; j < n; ++j) row[j] = 0.0;
    c.lse[r] = mx + std::log(sum);
  }
  c.out = Tensor::matrix(m, v.cols());
  kernels::gemm(c.probs.data().data(), v.data().data(), c.out.data().data(), m, n, v.cols());
  return c;
}

// Gradients of the attention output (and optionally of the per-row lse) w.r.t. q, k, v.
inline AttentionGrads attention_backward(const AttentionCache& c, const Tensor& d_out,
                                         std::span<const double> d_lse = {}) {
  const std::size_t m = c.q.rows();
  const std::size_t n = c.k.rows();
  const std::size_t dk = c.q.cols();
  const std::size_t dv = c.v.cols();
  if (d_out.rows() != m || d_out.cols() != dv) {
    throw InternalError("attention upstream gradient " + shape_string(d_out) +
                        " does not match cached output " + shape_string(c.out));
  }
  if (!d_lse.empty() && d_lse.size() != m) {
    throw InternalError("attention lse gradient length mismatch");
  }
  AttentionGrads g{Tensor::matrix(m, dk), Tensor::matrix(n, dk), Tensor::matrix(n, dv)};
  kernels::gemm_at_b(c.probs.data().data(), d_out.data().data(), g.dv.data().data(), m, n, dv);

  Tensor ds = Tensor::matrix(m, n);
  kernels::gemm_a_bt(d_out.data().data(), c.v.data().data(), ds.data().data(), m, dv, n);
  for (std::size_t r = 0; r < m; ++r) {
    const std::size_t lim = c.limit(r);
    const double* p = c.probs.row(r).data();
    double* row = ds.row(r).data();
    double inner = 0.0;
    for (std::size_t j = 0; j < lim; ++j) inner += p[j] * row[j];
    const double extra = d_lse.empty() ? 0.0 : d_lse[r];
    for (std::size_t j = 0; j < lim; ++j) row[j] = p[j] * (row[j] - inner + extra) * c.scale;
    for (std::size_t j = lim; j < n; ++j) row[j] = 0.0;
  }
  kernels::gemm(ds.data().data(), c.k.data().data(), g.dq.data().data(), m, n, dk);
  kernels::gemm_at_b(ds.data().data(), c.q.data().data(), g.dk.data().data(), m, n, dk);
  return g;
}

// softmax(q k^T / sqrt(d_k)) v, masked positions removed before normalization.
inline Tensor qkv_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::optional<CausalMask> mask = std::nullopt) {
  Tensor out = attention_forward(q, k, v, mask).out;
  ensure_finite(out, "qkv_attention");
  return out;
}

struct KVChunk {
  Tensor keys;
  Tensor values;
};

// Attention over the concatenation of chunks, assembled from per-chunk
// attentions weighted by their normalizer ratios S_i / sum_j S_j.
inline Tensor chunked_attention(const Tensor& q, std::span<const KVChunk> chunks) {
  if (chunks.empty()) throw ArgumentError("chunked_attention needs at least one chunk");
  std::vector<AttentionCache> parts;
  parts.reserve(chunks.size());
  for (const KVChunk& ch : chunks) parts.push_back(attention_forward(q, ch.keys, ch.values));

  const std::size_t m = q.rows();
  const std::size_t dv = parts.front().out.cols();
  for (const auto& p : parts) {
    if (p.out.cols() != dv) throw DimensionError("chunks disagree on d_v");
  }
  Tensor out = Tensor::matrix(m, dv);
  std::vector<double> lse(parts.size());
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t i = 0; i < parts.size(); ++i) lse[i] = parts[i].lse[r];
    const double total = logsumexp(lse);
    auto orow = out.row(r);
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const double w = std::exp(lse[i] - total);
      auto prow = parts[i].out.row(r);
      for (std::size_t c = 0; c < dv; ++c) orow[c] += w * prow[c];
    }
  }
  ensure_finite(out, "chunked_attention");
  return out;
}

namespace detail {

inline void check_segments(const Tensor& q_out, std::span<const SegmentKV> inputs,
                           const SegmentKV& out_kv) {
  require_matrix(q_out, "output queries");
  if (out_kv.role != SegmentRole::output) {
    throw ArgumentError("out_kv must carry the output role");
  }
  out_kv.validate();
  if (q_out.rows() > out_kv.length()) {
    throw DimensionError("more output queries (" + std::to_string(q_out.rows()) +
                         ") than output keys (" + std::to_string(out_kv.length()) + ")");
  }
  for (const SegmentKV& s : inputs) {
    s.validate();
    if (s.role != SegmentRole::input) throw ArgumentError("input segment carries output role");
    if (s.keys.cols() != q_out.cols() || s.values.cols() != out_kv.values.cols()) {
      throw DimensionError("input segment " + shape_string(s.keys) + "/" +
                           shape_string(s.values) + " inconsistent with output part");
    }
  }
}

// Query row r of q_out sits at output index (out_len - q_rows + r).
inline std::size_t query_shift(const Tensor& q_out, const SegmentKV& out_kv) {
  return out_kv.length() - q_out.rows();
}

}  // namespace detail

struct VanillaAttentionResult {
  Tensor output;
  // S_out / (sum_i S_i + S_out) per query row.
  std::vector<double> a_out;
};

// Plain causal attention over [K_1..K_n, K_out]; the baseline MISO replaces.
inline VanillaAttentionResult vanilla_multi_input_attention(const Tensor& q_out,
                                                            std::span<const SegmentKV> inputs,
                                                            const SegmentKV& out_kv) {
  detail::check_segments(q_out, inputs, out_kv);
  std::vector<const Tensor*> ks;
  std::vector<const Tensor*> vs;
  std::size_t in_len = 0;
  for (const SegmentKV& s : inputs) {
    ks.push_back(&s.keys);
    vs.push_back(&s.values);
    in_len += s.length();
  }
  ks.push_back(&out_kv.keys);
  vs.push_back(&out_kv.values);
  const Tensor k = vstack(ks, q_out.cols());
  const Tensor v = vstack(vs, out_kv.values.cols());

  const AttentionCache c =
      attention_forward(q_out, k, v, CausalMask{in_len + detail::query_shift(q_out, out_kv)});
  VanillaAttentionResult res{c.out, std::vector<double>(q_out.rows())};
  for (std::size_t r = 0; r < q_out.rows(); ++r) {
    const auto p = c.probs.row(r);
    double share = 0.0;
    for (std::size_t j = in_len; j < p.size(); ++j) share += p[j];
    res.a_out[r] = share;
  }
  ensure_finite(res.output, "vanilla_multi_input_attention");
  return res;
}

// Forward state of MISO causal attention. terms[i] is the causal attention of
// the output queries over [K_i; K_out]; scores is [n x rows] with Score_i per row.
struct MisoCache {
  std::vector<AttentionCache> terms;
  Tensor scores;
  WeightingStrategy weighting;
  std::vector<std::size_t> input_lengths;
  Tensor out;

  std::size_t input_count() const { return terms.size(); }

  // A_out^i for one query row: share of term i's attention mass on output keys.
  double output_share(std::size_t i, std::size_t row) const {
    const auto p = terms[i].probs.row(row);
    double s = 0.0;
    for (std::size_t j = input_lengths[i]; j < p.size(); ++j) s += p[j];
    return s;
  }
};

inline MisoCache miso_forward(const Tensor& q_out, std::span<const SegmentKV> inputs,
                              const SegmentKV& out_kv, WeightingStrategy w) {
  if (inputs.empty()) throw ArgumentError("MISO attention needs at least one input segment");
  detail::check_segments(q_out, inputs, out_kv);
  const std::size_t n = inputs.size();
  const std::size_t m = q_out.rows();
  const std::size_t shift = detail::query_shift(q_out, out_kv);

  MisoCache c;
  c.weighting = w;
  c.terms.reserve(n);
  for (const SegmentKV& s : inputs) {
    const Tensor* kp[] = {&s.keys, &out_kv.keys};
    const Tensor* vp[] = {&s.values, &out_kv.values};
    c.terms.push_back(attention_forward(q_out, vstack(kp, q_out.cols()),
                                        vstack(vp, out_kv.values.cols()),
                                        CausalMask{s.length() + shift}));
    c.input_lengths.push_back(s.length());
  }

  c.scores = Tensor::matrix(n, m);
  if (w.kind == WeightingKind::uniform) {
    c.scores.fill(1.0 / static_cast<double>(n));
  } else if (w.granularity == FidGranularity::per_row) {
    // Score_i = (S_i + S_out) / sum_j (S_j + S_out); the term normalizer is S_i + S_out.
    std::vector<double> lse(n);
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t i = 0; i < n; ++i) lse[i] = c.terms[i].lse[r];
      const double total = logsumexp(lse);
      for (std::size_t i = 0; i < n; ++i) c.scores(i, r) = std::exp(lse[i] - total);
    }
  } else {
    std::vector<double> seq_lse(n);
    for (std::size_t i = 0; i < n; ++i) seq_lse[i] = logsumexp(c.terms[i].lse);
    const double total = logsumexp(seq_lse);
    for (std::size_t i = 0; i < n; ++i) {
      const double s = std::exp(seq_lse[i] - total);
      for (std::size_t r = 0; r < m; ++r) c.scores(i, r) = s;
    }
  }

  const std::size_t dv = out_kv.values.cols();
  c.out = Tensor::matrix(m, dv);
  // Fixed segment-index summation order keeps the result bit-reproducible.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < m; ++r) {
      const double s = c.scores(i, r);
      auto orow = c.out.row(r);
      auto trow = c.terms[i].out.row(r);
      for (std::size_t col = 0; col < dv; ++col) orow[col] += s * trow[col];
    }
  }
  return c;
}

// sum_i Score_i * CausalAttention(q_out, [K_i, K_out], [V_i, V_out]).
inline Tensor miso_causal_attention(const Tensor& q_out, std::span<const SegmentKV> inputs,
                                    const SegmentKV& out_kv, WeightingStrategy w) {
  Tensor out = miso_forward(q_out, inputs, out_kv, w).out;
  ensure_finite(out, "miso_causal_attention");
  return out;
}

struct MisoGrads {
  Tensor dq_out;
  std::vector<Tensor> dk_inputs;
  std::vector<Tensor> dv_inputs;
  Tensor dk_out;
  Tensor dv_out;
};

inline MisoGrads miso_attention_backward(const Tensor& d_out, const MisoCache& c) {
  const std::size_t n = c.input_count();
  if (n == 0) throw InternalError("empty MISO cache");
  const std::size_t m = c.out.rows();
  const std::size_t dv = c.out.cols();
  if (d_out.rows() != m || d_out.cols() != dv) {
    throw InternalError("MISO upstream gradient " + shape_string(d_out) +
                        " does not match cached output " + shape_string(c.out));
  }
  const std::size_t dk = c.terms.front().q.cols();
  const std::size_t out_len = c.terms.front().k.rows() - c.input_lengths.front();

  // dScore_i per row = <d_out_r, T_i,r>; only needed for fid.
  Tensor g;
  std::vector<std::vector<double>> d_lse(n);
  if (c.weighting.kind == WeightingKind::fid) {
    g = Tensor::matrix(n, m);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t r = 0; r < m; ++r)
        g(i, r) = kernels::dot(d_out.row(r).data(), c.terms[i].out.row(r).data(), dv);
    for (auto& v : d_lse) v.assign(m, 0.0);
    if (c.weighting.granularity == FidGranularity::per_row) {
      for (std::size_t r = 0; r < m; ++r) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += c.scores(i, r) * g(i, r);
        for (std::size_t i = 0; i < n; ++i) d_lse[i][r] = c.scores(i, r) * (g(i, r) - mean);
      }
    } else {
      std::vector<double> big_g(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < m; ++r) big_g[i] += g(i, r);
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += c.scores(i, 0) * big_g[i];
      for (std::size_t i = 0; i < n; ++i) {
        const double d_seq = c.scores(i, 0) * (big_g[i] - mean);
        const double seq_lse = logsumexp(c.terms[i].lse);
        for (std::size_t r = 0; r < m; ++r)
          d_lse[i][r] = d_seq * std::exp(c.terms[i].lse[r] - seq_lse);
      }
    }
  }

  MisoGrads out{Tensor::matrix(m, dk), {}, {}, Tensor::matrix(out_len, dk),
                Tensor::matrix(out_len, dv)};
  Tensor d_term = Tensor::matrix(m, dv);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < m; ++r) {
      const double s = c.scores(i, r);
      auto src = d_out.row(r);
      auto dst = d_term.row(r);
      for (std::size_t col = 0; col < dv; ++col) dst[col] = s * src[col];
    }
    const AttentionGrads tg = attention_backward(c.terms[i], d_term, d_lse[i]);
    add_into(out.dq_out, tg.dq);
    const std::size_t len = c.input_lengths[i];
    out.dk_inputs.push_back(slice_rows(tg.dk, 0, len));
    out.dv_inputs.push_back(slice_rows(tg.dv, 0, len));
    add_into(out.dk_out, slice_rows(tg.dk, len, len + out_len));
    add_into(out.dv_out, slice_rows(tg.dv, len, len + out_len));
  }
  return out;
}

namespace detail {

inline std::vector<double> rope_inv_freq(std::size_t width, double base) {
  std::vector<double> f(width / 2);
  for (std::size_t j = 0; j < width / 2; ++j)
    f[j] = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(width));
  return f;
}

// Rotates columns [col, col + width) of every row in place.
inline void rope_inplace(Tensor& x, std::span<const std::size_t> position_ids,
                         std::size_t col, std::size_t width, bool inverse,
                         double base = 10000.0) {
  const std::vector<double> inv_freq = rope_inv_freq(width, base);
  const double sign = inverse ? -1.0 : 1.0;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double pos = static_cast<double>(position_ids[r]);
    double* row = x.row(r).data() + col;
    for (std::size_t j = 0; j < width / 2; ++j) {
      const double theta = pos * inv_freq[j];
      const double cs = std::cos(theta);
      const double sn = sign * std::sin(theta);
      const double a = row[2 * j];
      const double b = row[2 * j + 1];
      row[2 * j] = a * cs - b * sn;
      row[2 * j + 1] = a * sn + b * cs;
    }
  }
}

}  // namespace detail

// Rotary position encoding over interleaved pairs (2j, 2j+1) with base 10000.
// inverse=true applies the transposed rotation (used by the backward pass).
inline Tensor rope_apply(const Tensor& x, std::span<const std::size_t> position_ids,
                         bool inverse = false, double base = 10000.0) {
  require_matrix(x, "rope input");
  const std::size_t d = x.cols();
  if (d % 2 != 0) {
    throw ConfigError("rotary encoding needs an even dimension, got " + std::to_string(d));
  }
  if (position_ids.size() != x.rows()) {
    throw DimensionError("rope: " + std::to_string(position_ids.size()) +
                         " positions for " + std::to_string(x.rows()) + " rows");
  }
  Tensor out = x;
  detail::rope_inplace(out, position_ids, 0, d, inverse, base);
  return out;
}

// log S for one segment: log sum_k exp(q k^T / sqrt(d_k)) per query row,
// restricted to the first (offset + row + 1) keys when a mask is given.
inline std::vector<double> segment_log_mass(const Tensor& q, const Tensor& keys,
                                            std::optional<CausalMask> mask = std::nullopt) {
  Tensor v = Tensor::matrix(keys.rows(), 1);
  return attention_forward(q, keys, v, mask).lse;
}

}  // namespace miso
