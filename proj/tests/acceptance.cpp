// Acceptance suite: one PASS/FAIL line per criterion. With no arguments every
// criterion runs; "--only N" runs a single one. Exit status is nonzero when any
// selected criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "miso/miso.hpp"

namespace {

using namespace miso;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c) {
  Tensor t = Tensor::matrix(r, c);
  for (double& v : t.data()) v = rng.normal();
  return t;
}

std::size_t draw(Rng& rng, std::size_t lo, std::size_t hi) {
  return static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// 1. Chunked attention equals full attention.
Outcome chunked_identity() {
  const auto t0 = Clock::now();
  Rng rng(derive_seed(1, "acceptance"));
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n_tgt = draw(rng, 1, 64);
    const std::size_t d = draw(rng, 1, 16), dv = draw(rng, 1, 8), m = draw(rng, 1, 16);
    const Tensor q = random_tensor(rng, m, d), k = random_tensor(rng, n_tgt, d), v = random_tensor(rng, n_tgt, dv);
    // Random cut points give a partition into 1..min(8, n_tgt) nonempty chunks.
    const std::size_t n_chunks = draw(rng, 1, std::min<std::size_t>(8, n_tgt));
    std::vector<std::size_t> cuts(n_tgt - 1);
    std::iota(cuts.begin(), cuts.end(), std::size_t{1});
    rng.shuffle(cuts);
    cuts.resize(n_chunks - 1);
    std::sort(cuts.begin(), cuts.end());
    cuts.push_back(n_tgt);
    std::vector<KVChunk> chunks;
    std::size_t at = 0;
    for (std::size_t end : cuts) {
      chunks.push_back({slice_rows(k, at, end), slice_rows(v, at, end)});
      at = end;
    }
    worst = std::max(worst, max_abs_diff(chunked_attention(q, chunks), qkv_attention(q, k, v)));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-10 && secs < 10.0,
          "max abs err " + fmt("%.3g", worst) + " over 200 instances, " + fmt("%.2f", secs) + " s"};
}

// 2. One-input MISO equals causal attention over the concatenation.
Outcome miso_reduction() {
  Rng rng(derive_seed(2, "acceptance"));
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = draw(rng, 1, 16), dv = draw(rng, 1, 8);
    const std::size_t li = draw(rng, 1, 24), lo = draw(rng, 1, 24), m = draw(rng, 1, lo);
    const SegmentKV in{random_tensor(rng, li, d), random_tensor(rng, li, dv), {}, SegmentRole::input};
    const SegmentKV out{random_tensor(rng, lo, d), random_tensor(rng, lo, dv), {}, SegmentRole::output};
    const Tensor q = random_tensor(rng, m, d);
    const Tensor* ks[] = {&in.keys, &out.keys};
    const Tensor* vs[] = {&in.values, &out.values};
    const Tensor ref = qkv_attention(q, vstack(ks, d), vstack(vs, dv), CausalMask{li + lo - m});
    for (auto w : {WeightingStrategy::uniform(), WeightingStrategy::fid()})
      worst = std::max(worst, max_abs_diff(miso_causal_attention(q, std::span(&in, 1), out, w), ref));
  }
  return {worst <= 1e-12, "max abs err " + fmt("%.3g", worst) + " over 100 instances x 2 weightings"};
}

// 3. Dilution law.
Outcome dilution_law() {
  const std::vector<std::size_t> ns{1, 2, 4, 8, 16, 32, 64};
  double worst_formula = 0.0;
  for (const ScoreModel& model : {ScoreModel{IdenticalScores{0.5}}, ScoreModel{GaussianScores{1.0}}})
    for (const auto& r : dilution_sweep(ns, model, 8, 3))
      worst_formula = std::max(worst_formula, std::abs(r.a_out_vanilla - r.a_out_formula));
  const auto ident = dilution_sweep(ns, IdenticalScores{0.5}, 1, 3);
  double worst_share = 0.0;
  double a16 = 0.0;
  for (const auto& r : ident) {
    worst_share = std::max(worst_share, std::abs(r.miso_effective_share - 0.5));
    if (r.n == 16) a16 = r.a_out_vanilla;
  }
  const double exact16 = 0.5 / (16 * 0.5 + 0.5);
  const bool pass = worst_formula <= 1e-10 && std::abs(a16 - exact16) <= 1e-6 &&
                    std::abs(a16 - 0.0588) <= 5e-5 && worst_share <= 1e-12;
  return {pass, "formula err " + fmt("%.3g", worst_formula) + ", A_out(16) = " + fmt("%.7f", a16) +
                    " (closed form " + fmt("%.7f", exact16) + "), MISO share err " + fmt("%.3g", worst_share)};
}

// 4. Analytic gradients vs central finite differences.
double miso_grad_error(std::uint64_t seed, WeightingStrategy w) {
  Rng rng(seed);
  const std::size_t d = 4, dv = 3, n = 3;
  std::vector<SegmentKV> ins;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = draw(rng, 1, 6);
    ins.push_back({random_tensor(rng, len, d), random_tensor(rng, len, dv), {}, SegmentRole::input});
  }
  const std::size_t lo = draw(rng, 1, 6);
  SegmentKV out{random_tensor(rng, lo, d), random_tensor(rng, lo, dv), {}, SegmentRole::output};
  Tensor q = random_tensor(rng, lo, d);
  const Tensor up = random_tensor(rng, lo, dv);
  auto objective = [&] {
    const Tensor o = miso_causal_attention(q, ins, out, w);
    double s = 0.0;
    for (std::size_t i = 0; i < o.size(); ++i) s += o[i] * up[i];
    return s;
  };
  const MisoGrads g = miso_attention_backward(up, miso_forward(q, ins, out, w));
  std::vector<std::pair<Tensor*, const Tensor*>> pairs{{&q, &g.dq_out}, {&out.keys, &g.dk_out}, {&out.values, &g.dv_out}};
  for (std::size_t i = 0; i < n; ++i) {
    pairs.push_back({&ins[i].keys, &g.dk_inputs[i]});
    pairs.push_back({&ins[i].values, &g.dv_inputs[i]});
  }
  std::vector<double> analytic, numeric;
  for (auto& [x, gx] : pairs) {
    const Tensor fd = finite_diff_grad(
        [&](const Tensor& probe) {
          const Tensor saved = *x;
          *x = probe;
          const double f = objective();
          *x = saved;
          return f;
        },
        *x);
    analytic.insert(analytic.end(), gx->data().begin(), gx->data().end());
    numeric.insert(numeric.end(), fd.data().begin(), fd.data().end());
  }
  return relative_error(Tensor::vector(analytic), Tensor::vector(numeric));
}

// Finite differences on up to 48 sampled coordinates per parameter tensor.
double model_grad_error(std::uint64_t seed, const TrainingExample& ex) {
  const ModelConfig c;
  ModelParams p = init_params(c, seed, 0.1);
  ModelParams grads = ModelParams::zeros(c);
  example_loss(c, p, ex, &grads);
  Rng pick(seed ^ 0x5eed);
  std::vector<Tensor*> ps, gs;
  p.visit([&](const std::string&, Tensor& t) { ps.push_back(&t); });
  grads.visit([&](const std::string&, Tensor& t) { gs.push_back(&t); });
  std::vector<double> analytic, numeric;
  const double eps = 1e-6;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    for (int s = 0; s < 48; ++s) {
      const std::size_t j = draw(pick, 0, ps[i]->size() - 1);
      const double orig = (*ps[i])[j];
      (*ps[i])[j] = orig + eps;
      const double fp = example_loss(c, p, ex, nullptr).loss_sum;
      (*ps[i])[j] = orig - eps;
      const double fm = example_loss(c, p, ex, nullptr).loss_sum;
      (*ps[i])[j] = orig;
      numeric.push_back((fp - fm) / (2 * eps));
      analytic.push_back((*gs[i])[j]);
    }
  }
  return relative_error(Tensor::vector(analytic), Tensor::vector(numeric));
}

Outcome gradient_correctness() {
  double worst_attn = 0.0, worst_model = 0.0;
  for (std::uint64_t seed : {101, 202, 303}) {
    for (auto w : {WeightingStrategy::uniform(), WeightingStrategy::fid(),
                   WeightingStrategy::fid(FidGranularity::per_sequence)})
      worst_attn = std::max(worst_attn, miso_grad_error(seed, w));
    Rng rng(seed);
    const ConstraintInstance inst = gen_instance(rng, 2);
    worst_model = std::max(worst_model, model_grad_error(seed, MisoExample{build_parallel_inputs(inst, true),
                                                                           WeightingStrategy::uniform()}));
    worst_model = std::max(worst_model, model_grad_error(seed, MisoExample{build_successive_inputs(inst, 3),
                                                                           WeightingStrategy::fid()}));
    worst_model = std::max(worst_model, model_grad_error(seed, make_plain_example(frame_input(tokenize(full_instruction(inst))),
                                                                                  frame_output(tokenize(inst.output)))));
  }
  return {worst_attn <= 1e-4 && worst_model <= 1e-4,
          "attention rel err " + fmt("%.3g", worst_attn) + ", 2-layer model rel err " + fmt("%.3g", worst_model) +
              " (3 seeds)"};
}

// 5. MISO-trained checkpoints serve standard inference.
Outcome standard_inference() {
  const ModelConfig c;
  const auto train_set = gen_dataset(256, 1, 4, 5, "train");
  const auto prompts = gen_dataset(32, 1, 4, 5, "eval");
  double worst_row = 0.0, worst_k1 = 0.0;
  std::size_t rows = 0;
  for (TrainMode mode : {TrainMode::miso_para, TrainMode::miso_succ, TrainMode::miso_fid_para}) {
    TrainConfig t;
    t.mode = mode;
    t.epochs = 1;
    t.seed = 5;
    const TrainResult r = train(t, c, train_set);
    for (const auto& inst : prompts) {
      std::vector<TokenId> prompt = frame_input(tokenize(full_instruction(inst)));
      prompt.push_back(kSep);
      StandardDecoder dec(c, r.params);
      Tensor logits = dec.append(prompt);
      for (int step = 0; step < 16; ++step) {
        const Tensor probs = stable_softmax_rows(logits);
        for (std::size_t row = 0; row < probs.rows(); ++row) {
          double s = 0.0;
          bool finite = true;
          for (double v : probs.row(row)) {
            finite = finite && std::isfinite(v);
            s += v;
          }
          worst_row = std::max(worst_row, finite ? std::abs(s - 1.0) : 1.0);
          ++rows;
        }
        const TokenId next = argmax_token(logits.row(logits.rows() - 1));
        if (next == kEos) break;
        const TokenId tok[] = {next};
        logits = dec.append(tok);
      }
      const MisoInstance k1 = build_successive_inputs(inst, 1);
      std::vector<TokenId> all = k1.inputs[0].tokens;
      all.insert(all.end(), k1.output.tokens.begin(), k1.output.tokens.end());
      const Tensor full = forward_standard(c, r.params, all);
      const Tensor miso = decode_output(c, r.params, encode_inputs(c, r.params, k1), k1.output, WeightingStrategy::uniform());
      worst_k1 = std::max(worst_k1, max_abs_diff(miso, slice_rows(full, k1.inputs[0].size(), all.size())));
    }
  }
  return {worst_row <= 1e-12 && worst_k1 <= 1e-10,
          "row-sum err " + fmt("%.3g", worst_row) + " over " + std::to_string(rows) + " rows, succ k=1 logit err " +
              fmt("%.3g", worst_k1)};
}

// 6. Directional training result on the synthetic task.
Outcome training_direction() {
  const auto t0 = Clock::now();
  const ModelConfig c;
  const std::vector<TrainMode> modes{TrainMode::sft, TrainMode::miso_para, TrainMode::no_miso};
  std::map<TrainMode, double> mean_p;
  std::ostringstream log;
  for (std::uint64_t seed : {0, 1, 2}) {
    const auto train_set = gen_dataset(4096, 1, 4, seed, "train");
    const auto eval_set = gen_dataset(512, 1, 4, seed, "eval");
    for (TrainMode mode : modes) {
      TrainConfig t;
      t.mode = mode;
      t.seed = seed;
      const TrainResult r = train(t, c, train_set);
      const EvalReport rep = evaluate(c, r.params, eval_set);
      mean_p[mode] += rep.overall.prompt_level / 3.0;
      std::cout << "  seed " << seed << " " << to_string(mode) << ": P " << fmt("%.4f", rep.overall.prompt_level)
                << " I " << fmt("%.4f", rep.overall.instruction_level) << " flattened I "
                << fmt("%.4f", rep.flattened.instruction_level) << " final loss " << fmt("%.4f", r.curve.back().loss)
                << " (" << fmt("%.0f", seconds_since(t0)) << " s elapsed)" << std::endl;
    }
  }
  const double secs = seconds_since(t0);
  const double sft = mean_p[TrainMode::sft], para = mean_p[TrainMode::miso_para], flat = mean_p[TrainMode::no_miso];
  const bool pass = para >= sft && flat < para && secs <= 1800.0;
  return {pass, "mean prompt-level: miso-para " + fmt("%.4f", para) + ", sft " + fmt("%.4f", sft) + ", no-miso " +
                    fmt("%.4f", flat) + " (need miso-para >= sft and no-miso < miso-para), " + fmt("%.0f", secs) +
                    " s"};
}

// 7. Uniform k-chunking divides the input-input term by k.
Outcome complexity_accounting() {
  bool pass = true;
  std::ostringstream ratios;
  for (std::size_t k = 1; k <= 8; ++k) {
    const FlopReport r = flop_count(1024, 128, k, 64);
    const std::uint64_t rem = 1024 % k;
    // k * sum(len^2) - n^2 = rem * (k - rem) for the most even split; zero when k divides n.
    pass = pass && k * r.input_input_chunked == r.input_input_full + rem * (k - rem);
    if (rem == 0) pass = pass && r.input_input_full == k * r.input_input_chunked;
    ratios << (k > 1 ? " " : "") << fmt("%.4f", static_cast<double>(r.input_input_full) / r.input_input_chunked);
  }
  return {pass, "full/chunked input-input ratio for k=1..8: " + ratios.str()};
}

// 8. Chunk-count sampler distribution.
Outcome chunk_sampling() {
  Rng rng(derive_seed(8, "chunks"));
  const ChunkSampler s;
  std::array<double, 4> freq{};
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) freq[s.sample(rng) - 1] += 1.0 / draws;
  double tv = 0.0;
  for (std::size_t i = 0; i < 4; ++i) tv += 0.5 * std::abs(freq[i] - s.probabilities[i]);
  return {tv <= 0.02, "TV distance " + fmt("%.5f", tv) + ", P(1) = " + fmt("%.4f", freq[0])};
}

// 9. Checkpoint round trip.
Outcome checkpoint_round_trip() {
  const ModelConfig c;
  TrainConfig t;
  t.mode = TrainMode::miso_para;
  t.max_steps = 4;
  const TrainResult r = train(t, c, gen_dataset(64, 1, 4, 9));
  const auto dir = std::filesystem::temp_directory_path() / ("miso_accept_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  save_checkpoint(r.params, c, dir / "a.ckpt");
  const auto [params, config] = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(params, config, dir / "b.ckpt");
  auto bytes = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  };
  const bool same_bytes = bytes(dir / "a.ckpt") == bytes(dir / "b.ckpt");
  std::filesystem::remove_all(dir);
  const std::vector<TokenId> toks = frame_input(tokenize("Write about garden . Constraint : include rose ."));
  const bool same_logits = forward_standard(c, r.params, toks) == forward_standard(config, params, toks);
  return {same_bytes && same_logits, std::string("bytes ") + (same_bytes ? "identical" : "DIFFER") + ", logits " +
                                         (same_logits ? "bitwise identical" : "DIFFER")};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "chunked attention identity", chunked_identity},
      {2, "MISO single-input reduction", miso_reduction},
      {3, "attention dilution law", dilution_law},
      {4, "gradient correctness", gradient_correctness},
      {5, "standard-inference compatibility", standard_inference},
      {6, "directional training result", training_direction},
      {7, "complexity accounting", complexity_accounting},
      {8, "chunk sampling distribution", chunk_sampling},
      {9, "checkpoint round trip", checkpoint_round_trip},
  };
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      only = std::stoi(argv[++i]);
    } else {
      std::cerr << "usage: " << argv[0] << " [--only N]\n";
      return 2;
    }
  }
  int failures = 0;
  for (const Criterion& c : all) {
    if (only != 0 && c.id != only) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
