#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "miso/checkpoint.hpp"
#include "miso/datagen.hpp"
#include "miso/model.hpp"

namespace miso {

enum class TrainMode { sft, miso_para, miso_succ, miso_fid_para, no_miso };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::sft: return "sft";
    case TrainMode::miso_para: return "miso-para";
    case TrainMode::miso_succ: return "miso-succ";
    case TrainMode::miso_fid_para: return "miso-fid-para";
    case TrainMode::no_miso: return "no-miso";
  }
  return "?";
}

inline TrainMode train_mode_from_string(std::string_view s) {
  for (TrainMode m : {TrainMode::sft, TrainMode::miso_para, TrainMode::miso_succ,
                      TrainMode::miso_fid_para, TrainMode::no_miso})
    if (to_string(m) == s) return m;
  throw ArgumentError("unknown training mode '" + std::string(s) + "'");
}

struct TrainConfig {
  TrainMode mode = TrainMode::sft;
  bool include_full = true;
  double learning_rate = 3e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 3;
  std::uint64_t seed = 0;
  ChunkSampler chunk_probabilities;
  double warmup_ratio = 0.1;
  double init_stddev = 0.02;
  // Caps the number of optimizer steps when set (the schedule uses the capped count).
  std::optional<std::size_t> max_steps;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (warmup_ratio < 0.0 || warmup_ratio > 1.0) throw ConfigError("warmup_ratio must be in [0, 1]");
    chunk_probabilities.validate();
  }
};

// A training example is either one standard sequence with the loss starting at
// loss_from (the row predicting the first output token), or a MISO instance.
struct PlainExample {
  std::vector<TokenId> tokens;
  std::size_t loss_from = 0;
};

struct MisoExample {
  MisoInstance instance;
  WeightingStrategy weighting;
};

using TrainingExample = std::variant<PlainExample, MisoExample>;

inline PlainExample make_plain_example(const std::vector<TokenId>& framed_input,
                                       const std::vector<TokenId>& framed_output) {
  PlainExample ex{framed_input, framed_input.size()};
  ex.tokens.insert(ex.tokens.end(), framed_output.begin(), framed_output.end());
  return ex;
}

// Turns the dataset into mode-specific examples. no-miso flattens every
// para-mode segment into its own standard pair, so the example count grows.
inline std::vector<TrainingExample> build_examples(const TrainConfig& cfg,
                                                   std::span<const ConstraintInstance> data) {
  std::vector<TrainingExample> out;
  Rng chunk_rng(derive_seed(cfg.seed, "chunks"));
  for (const ConstraintInstance& inst : data) {
    const std::vector<TokenId> output = frame_output(tokenize(inst.output));
    switch (cfg.mode) {
      case TrainMode::sft:
        out.emplace_back(make_plain_example(frame_input(tokenize(full_instruction(inst))), output));
        break;
      case TrainMode::miso_para:
        out.emplace_back(MisoExample{build_parallel_inputs(inst, cfg.include_full),
                                     WeightingStrategy::uniform()});
        break;
      case TrainMode::miso_fid_para:
        out.emplace_back(MisoExample{build_parallel_inputs(inst, cfg.include_full),
                                     WeightingStrategy::fid()});
        break;
      case TrainMode::miso_succ:
        out.emplace_back(MisoExample{
            build_successive_inputs(inst, cfg.chunk_probabilities.sample(chunk_rng)),
            WeightingStrategy::uniform()});
        break;
      case TrainMode::no_miso: {
        const MisoInstance para = build_parallel_inputs(inst, cfg.include_full);
        for (const TokenSegment& seg : para.inputs)
          out.emplace_back(make_plain_example(seg.tokens, output));
        break;
      }
    }
  }
  return out;
}

struct LossResult {
  double loss_sum = 0.0;  // summed token cross-entropy
  std::size_t tokens = 0;
};

namespace detail {

// Cross-entropy of logits rows [from, rows-1) against the next token. Writes
// dL/dlogits (scaled by grad_scale) into dlogits.
inline LossResult next_token_xent(const Tensor& logits, std::span<const TokenId> tokens,
                                  std::size_t from, double grad_scale, Tensor* dlogits) {
  LossResult res;
  const std::size_t v = logits.cols();
  for (std::size_t r = from; r + 1 < tokens.size(); ++r) {
    const auto row = logits.row(r);
    const double lse = logsumexp(row);
    const auto target = static_cast<std::size_t>(tokens[r + 1]);
    res.loss_sum += lse - row[target];
    ++res.tokens;
    if (dlogits) {
      auto d = dlogits->row(r);
      for (std::size_t j = 0; j < v; ++j) d[j] = std::exp(row[j] - lse) * grad_scale;
      d[target] -= grad_scale;
    }
  }
  return res;
}

inline std::size_t loss_token_count(const TrainingExample& ex) {
  if (const auto* p = std::get_if<PlainExample>(&ex))
    return p->tokens.size() > p->loss_from + 1 ? p->tokens.size() - p->loss_from - 1 : 0;
  const auto& m = std::get<MisoExample>(ex);
  return m.instance.output.tokens.size() > 1 ? m.instance.output.tokens.size() - 1 : 0;
}

}  // namespace detail

// Summed next-token loss over output tokens of one example. When grads is set,
// adds grad_scale * dLoss/dparams into it.
inline LossResult example_loss(const ModelConfig& c, const ModelParams& p,
                               const TrainingExample& ex, ModelParams* grads,
                               double grad_scale = 1.0) {
  if (const auto* plain = std::get_if<PlainExample>(&ex)) {
    ForwardPass fp;
    const auto pos = iota_positions(0, plain->tokens.size());
    fp.segments.push_back(run_segment(c, p, plain->tokens, pos, true));
    const Tensor logits = stream_logits(p, fp.segments.front());
    Tensor dlogits;
    if (grads) dlogits = Tensor::matrix(logits.rows(), logits.cols());
    const LossResult res = detail::next_token_xent(logits, plain->tokens, plain->loss_from,
                                                   grad_scale, grads ? &dlogits : nullptr);
    if (grads) {
      const Tensor seg_d[] = {std::move(dlogits)};
      backward(c, p, fp, nullptr, seg_d, *grads);
    }
    return res;
  }
  const auto& m = std::get<MisoExample>(ex);
  m.instance.validate();
  ForwardPass fp;
  fp.weighting = m.weighting;
  for (const TokenSegment& seg : m.instance.inputs)
    fp.segments.push_back(run_segment(c, p, seg.tokens, seg.positions, false));
  fp.output = run_output(c, p, fp.segments, m.instance.output.tokens,
                         m.instance.output.positions, m.weighting);
  const Tensor logits = stream_logits(p, *fp.output);
  Tensor dlogits;
  if (grads) dlogits = Tensor::matrix(logits.rows(), logits.cols());
  const LossResult res = detail::next_token_xent(logits, m.instance.output.tokens, 0, grad_scale,
                                                 grads ? &dlogits : nullptr);
  if (grads) backward(c, p, fp, &dlogits, {}, *grads);
  return res;
}

struct BatchLoss {
  double loss = 0.0;  // mean over output tokens in the batch
  std::size_t tokens = 0;
  std::size_t skipped = 0;  // examples without any output token to predict
};

// Mean next-token cross-entropy over output positions of a batch; gradients of
// that mean are written into grads (overwritten) when given.
inline BatchLoss compute_loss(const ModelConfig& c, const ModelParams& p,
                              std::span<const TrainingExample* const> batch, ModelParams* grads) {
  BatchLoss out;
  for (const TrainingExample* ex : batch) {
    const std::size_t n = detail::loss_token_count(*ex);
    if (n == 0) ++out.skipped;
    out.tokens += n;
  }
  if (grads) grads->set_zero();
  if (out.tokens == 0) return out;
  const double scale = 1.0 / static_cast<double>(out.tokens);
  double sum = 0.0;
  for (const TrainingExample* ex : batch) {
    if (detail::loss_token_count(*ex) == 0) continue;
    sum += example_loss(c, p, *ex, grads, scale).loss_sum;
  }
  out.loss = sum * scale;
  return out;
}

// Linear warmup from 0 at step 0 to the base rate at the warmup boundary, then constant.
inline double learning_rate_at(std::size_t step, std::size_t total_steps, double base,
                               double warmup_ratio) {
  const auto warmup = static_cast<std::size_t>(
      std::llround(warmup_ratio * static_cast<double>(total_steps)));
  if (warmup == 0 || step >= warmup) return base;
  return base * static_cast<double>(step) / static_cast<double>(warmup);
}

class AdamOptimizer {
 public:
  AdamOptimizer(const ModelConfig& c, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : m_(ModelParams::zeros(c)), v_(ModelParams::zeros(c)), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ModelParams& params, const ModelParams& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::vector<Tensor*> ps, ms, vs;
    std::vector<const Tensor*> gs;
    params.visit([&](const std::string&, Tensor& t) { ps.push_back(&t); });
    m_.visit([&](const std::string&, Tensor& t) { ms.push_back(&t); });
    v_.visit([&](const std::string&, Tensor& t) { vs.push_back(&t); });
    grads.visit([&](const std::string&, const Tensor& t) { gs.push_back(&t); });
    for (std::size_t i = 0; i < ps.size(); ++i) {
      double* p = ps[i]->data().data();
      double* m = ms[i]->data().data();
      double* v = vs[i]->data().data();
      const double* g = gs[i]->data().data();
      for (std::size_t j = 0; j < ps[i]->size(); ++j) {
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
        p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
      }
    }
  }

 private:
  ModelParams m_;
  ModelParams v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

struct LossPoint {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  ModelParams params;
  ModelConfig model_config;
  std::vector<LossPoint> curve;
  std::size_t example_count = 0;
  std::size_t skipped = 0;
};

inline void write_loss_csv(const std::filesystem::path& path, TrainMode mode,
                           std::span<const LossPoint> curve) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open loss log: " + path.string());
  out << "step,mode,loss,lr\n";
  for (const LossPoint& p : curve) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g\n", p.step, to_string(mode).c_str(), p.loss, p.lr);
    out << buf;
  }
}

// Adam training with deterministic per-epoch shuffling from the run seed.
// Throws NumericError (with a dump of the batch) if the loss turns non-finite.
inline TrainResult train(const TrainConfig& cfg, const ModelConfig& model_cfg,
                         std::span<const ConstraintInstance> dataset,
                         std::optional<ModelParams> initial = std::nullopt) {
  cfg.validate();
  model_cfg.validate();
  if (dataset.empty()) throw ArgumentError("training dataset is empty");
  const std::vector<TrainingExample> examples = build_examples(cfg, dataset);

  TrainResult res;
  res.model_config = model_cfg;
  res.example_count = examples.size();
  res.params = initial ? std::move(*initial)
                       : init_params(model_cfg, derive_seed(cfg.seed, "init"), cfg.init_stddev);
  ModelParams grads = ModelParams::zeros(model_cfg);
  AdamOptimizer adam(model_cfg);

  const std::size_t per_epoch = (examples.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t total = per_epoch * cfg.epochs;
  if (cfg.max_steps) total = std::min(total, *cfg.max_steps);

  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  std::vector<std::size_t> order(examples.size());
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs && step < total; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_rng.shuffle(order);
    for (std::size_t b = 0; b < per_epoch && step < total; ++b, ++step) {
      std::vector<const TrainingExample*> batch;
      for (std::size_t i = b * cfg.batch_size; i < std::min(order.size(), (b + 1) * cfg.batch_size); ++i)
        batch.push_back(&examples[order[i]]);
      const BatchLoss bl = compute_loss(model_cfg, res.params, batch, &grads);
      res.skipped += bl.skipped;
      if (!std::isfinite(bl.loss)) {
        std::ostringstream dump;
        dump << "non-finite loss at step " << step << "; batch example indices:";
        for (std::size_t i = b * cfg.batch_size; i < std::min(order.size(), (b + 1) * cfg.batch_size); ++i)
          dump << ' ' << order[i];
        throw NumericError(dump.str());
      }
      const double lr = learning_rate_at(step, total, cfg.learning_rate, cfg.warmup_ratio);
      res.curve.push_back({step, bl.loss, lr});
      adam.step(res.params, grads, lr);
    }
  }
  return res;
}

// ---- evaluation ----

struct BucketAccuracy {
  std::size_t count = 0;
  double prompt_level = 0.0;
  double instruction_level = 0.0;
};

struct EvalReport {
  std::map<std::size_t, BucketAccuracy> by_constraint_count;
  BucketAccuracy overall;
  // Every n-constraint example decomposed into n single-constraint prompts.
  BucketAccuracy flattened;
};

inline nlohmann::json to_json_value(const BucketAccuracy& b) {
  return {{"count", b.count}, {"prompt_level", b.prompt_level}, {"instruction_level", b.instruction_level}};
}

inline nlohmann::json to_json_value(const EvalReport& r) {
  nlohmann::json buckets = nlohmann::json::object();
  for (const auto& [n, b] : r.by_constraint_count) buckets[std::to_string(n)] = to_json_value(b);
  return {{"overall", to_json_value(r.overall)},
          {"by_constraint_count", buckets},
          {"flattened_single_constraint", to_json_value(r.flattened)}};
}

// Greedy standard-path response to an instruction (without SEP/EOS).
inline std::string respond(const ModelConfig& c, const ModelParams& p, const std::string& instruction,
                           std::size_t max_new = 16) {
  std::vector<TokenId> prompt = frame_input(tokenize(instruction));
  prompt.push_back(kSep);
  std::vector<TokenId> out = generate(c, p, prompt, {max_new, kEos});
  if (!out.empty() && out.back() == kEos) out.pop_back();
  // Reserved symbols are not words of a response.
  std::erase_if(out, [](TokenId t) { return t == kPad || t == kBos || t == kSep; });
  return detokenize(out);
}

namespace detail {

struct BucketTally {
  std::size_t count = 0;
  std::size_t all_ok = 0;
  double fraction_sum = 0.0;

  void add(const std::vector<bool>& ok) {
    ++count;
    std::size_t good = 0;
    for (bool b : ok) good += b ? 1 : 0;
    if (good == ok.size()) ++all_ok;
    fraction_sum += ok.empty() ? 1.0 : static_cast<double>(good) / static_cast<double>(ok.size());
  }
  BucketAccuracy finish() const {
    if (count == 0) return {};
    return {count, static_cast<double>(all_ok) / static_cast<double>(count),
            fraction_sum / static_cast<double>(count)};
  }
};

}  // namespace detail

// Standard-inference evaluation. Instruction-level accuracy is the mean
// per-prompt fraction of satisfied constraints.
inline EvalReport evaluate(const ModelConfig& c, const ModelParams& p,
                           std::span<const ConstraintInstance> eval_set, std::size_t max_new = 16) {
  std::map<std::size_t, detail::BucketTally> buckets;
  detail::BucketTally overall;
  detail::BucketTally flat;
  for (const ConstraintInstance& inst : eval_set) {
    const std::string response = respond(c, p, full_instruction(inst), max_new);
    const std::vector<bool> ok = verify_constraints(response, inst.constraints);
    buckets[inst.constraints.size()].add(ok);
    overall.add(ok);
    for (const ConstraintSpec& spec : inst.constraints) {
      const std::span<const ConstraintSpec> one(&spec, 1);
      const std::string single = respond(c, p, render_instruction(inst.instruction, one), max_new);
      flat.add(verify_constraints(single, one));
    }
  }
  EvalReport r;
  for (const auto& [n, t] : buckets) r.by_constraint_count[n] = t.finish();
  r.overall = overall.finish();
  r.flattened = flat.finish();
  return r;
}

}  // namespace miso
