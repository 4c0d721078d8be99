#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "miso/attention.hpp"
#include "miso/rng.hpp"

namespace miso {

struct DilutionRecord {
  std::size_t n = 0;
  double a_out_vanilla = 0.0;
  double a_out_formula = 0.0;
  double miso_effective_share = 0.0;
  double harmonic_mean_share = 0.0;

  bool operator==(const DilutionRecord&) const = default;
};

// Every input shares the same score; a is the output share A_out^i of one pair.
struct IdenticalScores {
  double a = 0.5;
};

// Entries of q k^T / sqrt(d_k) approximately N(0, sigma^2): q ~ N(0, 1), k ~ N(0, sigma^2).
struct GaussianScores {
  double sigma = 1.0;
};

using ScoreModel = std::variant<IdenticalScores, GaussianScores>;

struct DilutionSample {
  Tensor q;
  std::vector<SegmentKV> inputs;
  SegmentKV out_kv;
};

namespace detail {

inline DilutionSample identical_sample(std::size_t n, double a) {
  if (!(a > 0.0 && a < 1.0)) throw ArgumentError("identical score model needs a in (0, 1)");
  // One key per input with score 0 and one output key with score logit(a), so
  // S_i = 1 and S_out = a / (1 - a).
  DilutionSample s;
  s.q = Tensor::from_rows({{1.0}});
  for (std::size_t i = 0; i < n; ++i)
    s.inputs.push_back({Tensor::from_rows({{0.0}}), Tensor::from_rows({{0.0}}), {}, SegmentRole::input});
  s.out_kv = {Tensor::from_rows({{std::log(a / (1.0 - a))}}), Tensor::from_rows({{1.0}}), {},
              SegmentRole::output};
  return s;
}

inline Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double sd) {
  Tensor t = Tensor::matrix(r, c);
  for (double& v : t.data()) v = rng.normal(0.0, sd);
  return t;
}

inline DilutionSample gaussian_sample(Rng& rng, std::size_t n, double sigma) {
  constexpr std::size_t kDk = 16;
  constexpr std::size_t kDv = 4;
  DilutionSample s;
  const auto out_len = static_cast<std::size_t>(rng.uniform_int(1, 4));
  s.q = random_matrix(rng, out_len, kDk, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto len = static_cast<std::size_t>(rng.uniform_int(1, 8));
    s.inputs.push_back({random_matrix(rng, len, kDk, sigma), random_matrix(rng, len, kDv, 1.0), {},
                        SegmentRole::input});
  }
  s.out_kv = {random_matrix(rng, out_len, kDk, sigma), random_matrix(rng, out_len, kDv, 1.0), {},
              SegmentRole::output};
  return s;
}

struct RowShares {
  double vanilla = 0.0;
  double formula = 0.0;
  double miso = 0.0;
  double harmonic = 0.0;
};

// Measures one sample: vanilla A_out from the concatenated attention, the
// harmonic-mean closed form from per-segment log masses, and the MISO uniform
// effective output share sum_i Score_i A_out^i from the MISO forward state.
inline RowShares measure(const DilutionSample& s) {
  const std::size_t n = s.inputs.size();
  const std::size_t m = s.q.rows();
  const VanillaAttentionResult van = vanilla_multi_input_attention(s.q, s.inputs, s.out_kv);
  const MisoCache miso = miso_forward(s.q, s.inputs, s.out_kv, WeightingStrategy::uniform());

  std::vector<std::vector<double>> log_s(n);
  for (std::size_t i = 0; i < n; ++i) log_s[i] = segment_log_mass(s.q, s.inputs[i].keys);
  const std::vector<double> log_out = segment_log_mass(s.q, s.out_kv.keys, CausalMask{0});

  RowShares acc;
  std::vector<double> lse(n);
  for (std::size_t r = 0; r < m; ++r) {
    double inv_sum = 0.0;
    double miso_share = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      // 1 / A_out^i = 1 + S_i / S_out
      inv_sum += 1.0 + std::exp(log_s[i][r] - log_out[r]);
      lse[i] = log_s[i][r];
      miso_share += miso.scores(i, r) * miso.output_share(i, r);
    }
    const double harmonic = static_cast<double>(n) / inv_sum;
    const double ratio = std::exp(log_out[r] - logsumexp(lse));  // S_out / sum_i S_i
    acc.vanilla += van.a_out[r];
    acc.formula += harmonic * (1.0 / static_cast<double>(n) + ratio) / (1.0 + ratio);
    acc.miso += miso_share;
    acc.harmonic += harmonic;
  }
  const double inv_m = 1.0 / static_cast<double>(m);
  acc.vanilla *= inv_m;
  acc.formula *= inv_m;
  acc.miso *= inv_m;
  acc.harmonic *= inv_m;
  return acc;
}

}  // namespace detail

// Output-part attention share as the number of inputs grows, averaged over
// query rows and trials. Trial t of size n uses seed derive_seed(seed, "dilution", n*2^20+t).
inline std::vector<DilutionRecord> dilution_sweep(std::span<const std::size_t> n_values,
                                                  const ScoreModel& model, std::size_t trials,
                                                  std::uint64_t seed) {
  if (trials == 0) throw ArgumentError("dilution_sweep needs at least one trial");
  std::vector<DilutionRecord> out;
  for (std::size_t n : n_values) {
    if (n == 0) throw ArgumentError("dilution_sweep input counts must be >= 1");
    detail::RowShares total;
    for (std::size_t t = 0; t < trials; ++t) {
      Rng rng(derive_seed(seed, "dilution", (static_cast<std::uint64_t>(n) << 20) + t));
      const DilutionSample s = std::holds_alternative<IdenticalScores>(model)
                                   ? detail::identical_sample(n, std::get<IdenticalScores>(model).a)
                                   : detail::gaussian_sample(rng, n, std::get<GaussianScores>(model).sigma);
      const detail::RowShares r = detail::measure(s);
      total.vanilla += r.vanilla;
      total.formula += r.formula;
      total.miso += r.miso;
      total.harmonic += r.harmonic;
    }
    const double inv = 1.0 / static_cast<double>(trials);
    out.push_back({n, total.vanilla * inv, total.formula * inv, total.miso * inv, total.harmonic * inv});
  }
  return out;
}

struct FlopReport {
  std::size_t n_i = 0;
  std::size_t n_o = 0;
  std::size_t k = 0;
  std::size_t d = 0;
  std::uint64_t input_input_full = 0;
  std::uint64_t input_input_chunked = 0;
  std::uint64_t attention_flops_full = 0;
  std::uint64_t attention_flops_chunked = 0;

  bool operator==(const FlopReport&) const = default;
};

// Multiply-accumulate counts of the QK and attention-V products:
// full d(n_i^2 + 2 n_i n_o + n_o^2), chunked d(sum_c len_c^2 + 2 n_i n_o + n_o^2),
// with chunk lengths from the same split used for successive inputs.
inline FlopReport flop_count(std::size_t n_i, std::size_t n_o, std::size_t k, std::size_t d) {
  if (n_i == 0 || k == 0) throw ArgumentError("flop_count needs n_i >= 1 and k >= 1");
  FlopReport r{n_i, n_o, std::min(k, n_i), d, 0, 0, 0, 0};
  const std::uint64_t base = n_i / r.k;
  const std::uint64_t extra = n_i % r.k;
  for (std::size_t c = 0; c < r.k; ++c) {
    const std::uint64_t len = base + (c < extra ? 1 : 0);
    r.input_input_chunked += len * len;
  }
  r.input_input_full = static_cast<std::uint64_t>(n_i) * n_i;
  const std::uint64_t rest = 2ULL * n_i * n_o + static_cast<std::uint64_t>(n_o) * n_o;
  r.attention_flops_full = d * (r.input_input_full + rest);
  r.attention_flops_chunked = d * (r.input_input_chunked + rest);
  return r;
}

// ---- CSV ----

inline constexpr const char* kDilutionHeader =
    "n,a_out_vanilla,a_out_formula,miso_effective_share,harmonic_mean_share";
inline constexpr const char* kFlopHeader =
    "n_i,n_o,k,d,input_input_full,input_input_chunked,attention_flops_full,attention_flops_chunked";

inline std::string to_csv(std::span<const DilutionRecord> records) {
  std::string out = std::string(kDilutionHeader) + "\n";
  char buf[256];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g\n", r.n, r.a_out_vanilla,
                  r.a_out_formula, r.miso_effective_share, r.harmonic_mean_share);
    out += buf;
  }
  return out;
}

inline std::string to_csv(std::span<const FlopReport> records) {
  std::string out = std::string(kFlopHeader) + "\n";
  for (const auto& r : records) {
    out += std::to_string(r.n_i) + "," + std::to_string(r.n_o) + "," + std::to_string(r.k) + "," +
           std::to_string(r.d) + "," + std::to_string(r.input_input_full) + "," +
           std::to_string(r.input_input_chunked) + "," + std::to_string(r.attention_flops_full) +
           "," + std::to_string(r.attention_flops_chunked) + "\n";
  }
  return out;
}

namespace detail {

inline std::vector<std::vector<std::string>> csv_rows(const std::string& text, const char* header) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != header) throw ValidationError("unexpected CSV header");
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace detail

inline std::vector<DilutionRecord> parse_dilution_csv(const std::string& text) {
  std::vector<DilutionRecord> out;
  for (const auto& c : detail::csv_rows(text, kDilutionHeader)) {
    if (c.size() != 5) throw ValidationError("dilution CSV row needs 5 fields");
    out.push_back({std::stoull(c[0]), std::stod(c[1]), std::stod(c[2]), std::stod(c[3]), std::stod(c[4])});
  }
  return out;
}

inline std::vector<FlopReport> parse_flop_csv(const std::string& text) {
  std::vector<FlopReport> out;
  for (const auto& c : detail::csv_rows(text, kFlopHeader)) {
    if (c.size() != 8) throw ValidationError("flop CSV row needs 8 fields");
    out.push_back({std::stoull(c[0]), std::stoull(c[1]), std::stoull(c[2]), std::stoull(c[3]),
                   std::stoull(c[4]), std::stoull(c[5]), std::stoull(c[6]), std::stoull(c[7])});
  }
  return out;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw IoError("failed writing: " + path.string());
}

template <class Record>
void export_csv(std::span<const Record> records, const std::filesystem::path& path) {
  write_text_file(path, to_csv(records));
}

}  // namespace miso
