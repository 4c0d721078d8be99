#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "miso/model.hpp"
#include "miso/rng.hpp"
#include "miso/tokenizer.hpp"

namespace miso {

enum class ConstraintKind { must_include_token, must_start_with, exact_length, must_exclude_token };

inline std::string to_string(ConstraintKind k) {
  switch (k) {
    case ConstraintKind::must_include_token: return "must-include-token";
    case ConstraintKind::must_start_with: return "must-start-with";
    case ConstraintKind::exact_length: return "exact-length";
    case ConstraintKind::must_exclude_token: return "must-exclude-token";
  }
  return "?";
}

inline ConstraintKind constraint_kind_from_string(std::string_view s) {
  if (s == "must-include-token") return ConstraintKind::must_include_token;
  if (s == "must-start-with") return ConstraintKind::must_start_with;
  if (s == "exact-length") return ConstraintKind::exact_length;
  if (s == "must-exclude-token") return ConstraintKind::must_exclude_token;
  throw ValidationError("unknown constraint kind '" + std::string(s) + "'");
}

// word is the argument for token kinds; length for exact-length.
struct ConstraintSpec {
  ConstraintKind kind = ConstraintKind::must_include_token;
  std::string word;
  std::size_t length = 0;

  bool operator==(const ConstraintSpec&) const = default;
};

struct ConstraintInstance {
  std::string instruction;  // bare instruction x, no constraint clause
  std::vector<ConstraintSpec> constraints;
  std::string output;

  bool operator==(const ConstraintInstance&) const = default;
};

inline std::string render_rule(const ConstraintSpec& c) {
  switch (c.kind) {
    case ConstraintKind::must_include_token: return "include " + c.word;
    case ConstraintKind::must_start_with: return "start with " + c.word;
    case ConstraintKind::exact_length: return "use exactly " + std::to_string(c.length) + " words";
    case ConstraintKind::must_exclude_token: return "avoid " + c.word;
  }
  return {};
}

// "<instruction> Constraint : <rule> ." for every listed constraint.
inline std::string render_instruction(const std::string& instruction,
                                      std::span<const ConstraintSpec> constraints) {
  std::string out = instruction;
  for (const ConstraintSpec& c : constraints) out += " Constraint : " + render_rule(c) + " .";
  return out;
}

inline std::string full_instruction(const ConstraintInstance& inst) {
  return render_instruction(inst.instruction, inst.constraints);
}

inline std::vector<bool> verify_constraints(std::string_view output,
                                            std::span<const ConstraintSpec> constraints) {
  const std::vector<std::string> words = split_words(output);
  auto has = [&](const std::string& w) { return std::find(words.begin(), words.end(), w) != words.end(); };
  std::vector<bool> ok;
  ok.reserve(constraints.size());
  for (const ConstraintSpec& c : constraints) {
    switch (c.kind) {
      case ConstraintKind::must_include_token: ok.push_back(has(c.word)); break;
      case ConstraintKind::must_start_with: ok.push_back(!words.empty() && words.front() == c.word); break;
      case ConstraintKind::exact_length: ok.push_back(words.size() == c.length); break;
      case ConstraintKind::must_exclude_token: ok.push_back(!has(c.word)); break;
      default: throw ValidationError("unknown constraint kind");
    }
  }
  return ok;
}

inline bool all_satisfied(const std::vector<bool>& v) {
  return std::all_of(v.begin(), v.end(), [](bool b) { return b; });
}

inline constexpr std::size_t kMaxConstraints = 5;
inline constexpr std::size_t kDefaultOutputLength = 5;

// Draws n mutually satisfiable constraints on one topic and an output meeting all
// of them. topic selects a fixed topic index; otherwise it is drawn.
inline ConstraintInstance gen_instance(Rng& rng, std::size_t n_constraints,
                                       std::optional<std::size_t> topic = std::nullopt) {
  if (n_constraints > kMaxConstraints) {
    throw ArgumentError("at most " + std::to_string(kMaxConstraints) + " constraints supported");
  }
  if (topic && *topic >= kTopics.size()) throw ArgumentError("unknown topic index");
  constexpr int kRetries = 16;
  for (int attempt = 0; attempt < kRetries; ++attempt) {
    const Topic& t = kTopics[topic ? *topic
                                   : static_cast<std::size_t>(rng.uniform_int(0, kTopics.size() - 1))];
    std::vector<std::string> pool(t.words.begin(), t.words.end());
    rng.shuffle(pool);
    std::size_t next_word = 0;

    ConstraintInstance inst;
    inst.instruction = "Write about " + std::string(t.name) + " .";
    bool has_start = false;
    bool has_length = false;
    std::vector<std::string> includes;
    std::vector<std::string> excludes;
    std::string start;
    for (std::size_t i = 0; i < n_constraints; ++i) {
      std::vector<ConstraintKind> kinds{ConstraintKind::must_include_token,
                                        ConstraintKind::must_exclude_token};
      if (!has_start) kinds.push_back(ConstraintKind::must_start_with);
      if (!has_length) kinds.push_back(ConstraintKind::exact_length);
      const ConstraintKind k = kinds[static_cast<std::size_t>(rng.uniform_int(0, kinds.size() - 1))];
      ConstraintSpec c{k, {}, 0};
      switch (k) {
        case ConstraintKind::must_include_token:
          c.word = pool[next_word++];
          includes.push_back(c.word);
          break;
        case ConstraintKind::must_exclude_token:
          c.word = pool[next_word++];
          excludes.push_back(c.word);
          break;
        case ConstraintKind::must_start_with:
          c.word = pool[next_word++];
          start = c.word;
          has_start = true;
          break;
        case ConstraintKind::exact_length:
          has_length = true;
          break;
      }
      inst.constraints.push_back(c);
    }
    const std::size_t required = includes.size() + (has_start ? 1 : 0);
    std::size_t length = 0;
    if (has_length) {
      length = static_cast<std::size_t>(
          rng.uniform_int(static_cast<std::int64_t>(std::max(kMinLengthArg, required)),
                          static_cast<std::int64_t>(kMaxLengthArg)));
      for (auto& c : inst.constraints)
        if (c.kind == ConstraintKind::exact_length) c.length = length;
    } else {
      length = std::max(kDefaultOutputLength, required);
    }

    // The output is a function of the instruction: start word, included words
    // in constraint order, then unused topic words in canonical order.
    std::vector<std::string> words;
    if (has_start) words.push_back(start);
    words.insert(words.end(), includes.begin(), includes.end());
    std::vector<std::string> filler_pool;
    for (const auto& w : t.words) {
      const std::string word(w);
      if (std::find(excludes.begin(), excludes.end(), word) == excludes.end() &&
          std::find(words.begin(), words.end(), word) == words.end())
        filler_pool.push_back(word);
    }
    for (std::size_t f = 0; words.size() < length; ++f) words.push_back(filler_pool[f % filler_pool.size()]);
    for (std::size_t i = 0; i < words.size(); ++i) inst.output += (i ? " " : "") + words[i];

    if (all_satisfied(verify_constraints(inst.output, inst.constraints))) return inst;
  }
  throw GeneratorError("could not draw a satisfiable instance with " +
                       std::to_string(n_constraints) + " constraints");
}

// Instances drawn with per-index seeds derived from (seed, stream, index), so any
// subset can be regenerated independently.
inline std::vector<ConstraintInstance> gen_dataset(std::size_t count, std::size_t min_constraints,
                                                   std::size_t max_constraints, std::uint64_t seed,
                                                   std::string_view stream = "data") {
  if (min_constraints > max_constraints || max_constraints > kMaxConstraints) {
    throw ArgumentError("invalid constraint range [" + std::to_string(min_constraints) + ", " +
                        std::to_string(max_constraints) + "]");
  }
  std::vector<ConstraintInstance> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, stream, i));
    const auto n = static_cast<std::size_t>(rng.uniform_int(
        static_cast<std::int64_t>(min_constraints), static_cast<std::int64_t>(max_constraints)));
    out.push_back(gen_instance(rng, n));
  }
  return out;
}

// Parallel-structured inputs: [full (if include_full)], one single-constraint
// instruction per constraint, then the bare instruction. Positions restart at 0.
inline MisoInstance build_parallel_inputs(const ConstraintInstance& inst, bool include_full) {
  std::vector<std::vector<TokenId>> segs;
  if (inst.constraints.empty()) {
    segs.push_back(frame_input(tokenize(inst.instruction)));
  } else {
    if (include_full) segs.push_back(frame_input(tokenize(full_instruction(inst))));
    for (const ConstraintSpec& c : inst.constraints)
      segs.push_back(frame_input(tokenize(render_instruction(inst.instruction, std::span(&c, 1)))));
    segs.push_back(frame_input(tokenize(inst.instruction)));
  }
  return make_miso_instance(segs, frame_output(tokenize(inst.output)), PositionMode::para);
}

// Contiguous chunks whose sizes differ by at most one; the first (len mod k)
// chunks take the extra token. k is clamped to the token count.
inline std::vector<std::vector<TokenId>> split_chunks(std::span<const TokenId> tokens, std::size_t k) {
  if (k == 0) throw ArgumentError("split_chunks requires k >= 1");
  if (tokens.empty()) throw ArgumentError("split_chunks over an empty sequence");
  k = std::min(k, tokens.size());
  const std::size_t base = tokens.size() / k;
  const std::size_t extra = tokens.size() % k;
  std::vector<std::vector<TokenId>> out;
  std::size_t at = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t len = base + (i < extra ? 1 : 0);
    out.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(at),
                     tokens.begin() + static_cast<std::ptrdiff_t>(at + len));
    at += len;
  }
  return out;
}

// Successive-structured inputs: the framed full instruction split into k chunks
// with contiguous position ids.
inline MisoInstance build_successive_inputs(const ConstraintInstance& inst, std::size_t k) {
  const std::vector<TokenId> full = frame_input(tokenize(full_instruction(inst)));
  return make_miso_instance(split_chunks(full, k), frame_output(tokenize(inst.output)),
                            PositionMode::succ);
}

// Distribution over chunk counts 1..4.
struct ChunkSampler {
  std::array<double, 4> probabilities{0.55, 0.15, 0.15, 0.15};

  void validate() const {
    double s = 0.0;
    for (double p : probabilities) {
      if (!(p >= 0.0)) throw ArgumentError("chunk probabilities must be nonnegative");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-12) throw ArgumentError("chunk probabilities must sum to 1");
  }

  std::size_t sample(Rng& rng) const {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < probabilities.size(); ++i) {
      acc += probabilities[i];
      if (u < acc) return i + 1;
    }
    // u landed in the rounding gap above the last cumulative sum.
    for (std::size_t i = probabilities.size(); i-- > 0;)
      if (probabilities[i] > 0.0) return i + 1;
    return 1;
  }
};

inline std::size_t sample_chunk_count(Rng& rng, const ChunkSampler& s = {}) { return s.sample(rng); }

// ---- JSONL ----

inline nlohmann::json to_json_value(const ConstraintInstance& inst) {
  nlohmann::json cs = nlohmann::json::array();
  for (const ConstraintSpec& c : inst.constraints) {
    nlohmann::json j{{"kind", to_string(c.kind)}};
    if (c.kind == ConstraintKind::exact_length) j["argument"] = c.length;
    else j["argument"] = c.word;
    cs.push_back(j);
  }
  return {{"instruction", inst.instruction}, {"constraints", cs}, {"output", inst.output}};
}

inline ConstraintInstance instance_from_json(const nlohmann::json& j) {
  for (const auto& [key, _] : j.items())
    if (key != "instruction" && key != "constraints" && key != "output")
      throw ValidationError("unknown dataset field '" + key + "'");
  ConstraintInstance inst;
  inst.instruction = j.at("instruction").get<std::string>();
  inst.output = j.at("output").get<std::string>();
  for (const auto& c : j.at("constraints")) {
    ConstraintSpec spec;
    spec.kind = constraint_kind_from_string(c.at("kind").get<std::string>());
    if (spec.kind == ConstraintKind::exact_length) spec.length = c.at("argument").get<std::size_t>();
    else spec.word = c.at("argument").get<std::string>();
    inst.constraints.push_back(spec);
  }
  return inst;
}

inline void write_jsonl(const std::filesystem::path& path, std::span<const ConstraintInstance> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open dataset for writing: " + path.string());
  for (const auto& inst : data) out << to_json_value(inst).dump() << '\n';
  if (!out) throw IoError("failed writing dataset: " + path.string());
}

inline std::vector<ConstraintInstance> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset: " + path.string());
  std::vector<ConstraintInstance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(instance_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace miso
