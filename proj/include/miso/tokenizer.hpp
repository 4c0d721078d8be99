#pragma once

#include <array>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "miso/errors.hpp"
#include "miso/model.hpp"

namespace miso {

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kSep = 3;

inline constexpr std::size_t kVocabSize = 128;
inline constexpr std::size_t kTopicPoolSize = 12;

struct Topic {
  std::string_view name;
  std::array<std::string_view, kTopicPoolSize> words;
};

inline constexpr std::array<Topic, 8> kTopics{{
    {"music", {"piano", "drum", "guitar", "song", "melody", "rhythm", "violin", "chorus", "tempo",
               "note", "bass", "flute"}},
    {"ocean", {"wave", "tide", "coral", "whale", "shell", "reef", "salt", "boat", "current",
               "harbor", "shark", "foam"}},
    {"forest", {"tree", "moss", "fern", "oak", "pine", "trail", "owl", "leaf", "root", "bark",
                "deer", "creek"}},
    {"city", {"street", "tower", "bridge", "train", "market", "subway", "traffic", "alley",
              "plaza", "neon", "taxi", "crowd"}},
    {"space", {"star", "planet", "comet", "orbit", "moon", "rocket", "nebula", "galaxy", "meteor",
               "crater", "astronaut", "vacuum"}},
    {"kitchen", {"knife", "oven", "spoon", "bread", "pepper", "butter", "onion", "kettle",
                 "flour", "garlic", "skillet", "honey"}},
    {"garden", {"rose", "tulip", "soil", "seed", "hose", "bee", "daisy", "vine", "shovel",
                "sprout", "petal", "weed"}},
    {"sport", {"ball", "goal", "team", "coach", "match", "score", "whistle", "field", "jersey",
               "sprint", "medal", "racket"}},
}};

inline constexpr std::array<std::string_view, 4> kReservedWords{"<pad>", "<bos>", "<eos>",
                                                                "<sep>"};
inline constexpr std::array<std::string_view, 12> kTemplateWords{
    "Write", "about", ".", "Constraint", ":", "include", "start", "with", "use", "exactly",
    "words", "avoid"};
inline constexpr std::size_t kMinLengthArg = 2;
inline constexpr std::size_t kMaxLengthArg = 9;

// Word-level vocabulary over the synthetic corpus: reserved symbols, template
// words, length numerals, topic names, then each topic's content words.
class Vocabulary {
 public:
  static const Vocabulary& instance() {
    static const Vocabulary v;
    return v;
  }

  std::size_t size() const { return words_.size(); }
  const std::string& word(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size())
      throw TokenizeError("token id " + std::to_string(id) + " outside vocabulary");
    return words_[static_cast<std::size_t>(id)];
  }
  TokenId id(std::string_view w) const {
    auto it = ids_.find(std::string(w));
    if (it == ids_.end()) throw TokenizeError("out-of-vocabulary word '" + std::string(w) + "'");
    return it->second;
  }
  bool contains(std::string_view w) const { return ids_.count(std::string(w)) != 0; }

 private:
  Vocabulary() {
    for (auto w : kReservedWords) add(w);
    for (auto w : kTemplateWords) add(w);
    for (std::size_t n = kMinLengthArg; n <= kMaxLengthArg; ++n) add(std::to_string(n));
    for (const Topic& t : kTopics) add(t.name);
    for (const Topic& t : kTopics)
      for (auto w : t.words) add(w);
    if (words_.size() != kVocabSize) throw InternalError("vocabulary size drifted");
  }
  void add(std::string_view w) {
    if (!ids_.emplace(std::string(w), static_cast<TokenId>(words_.size())).second)
      throw InternalError("duplicate vocabulary word '" + std::string(w) + "'");
    words_.emplace_back(w);
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> ids_;
};

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream is{std::string(text)};
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

inline std::vector<TokenId> tokenize(std::string_view text) {
  const Vocabulary& v = Vocabulary::instance();
  std::vector<TokenId> ids;
  for (const std::string& w : split_words(text)) ids.push_back(v.id(w));
  return ids;
}

inline std::string detokenize(std::span<const TokenId> ids) {
  const Vocabulary& v = Vocabulary::instance();
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += v.word(ids[i]);
  }
  return out;
}

// Input segment framing: BOS + tokens.
inline std::vector<TokenId> frame_input(std::span<const TokenId> ids) {
  std::vector<TokenId> out{kBos};
  out.insert(out.end(), ids.begin(), ids.end());
  return out;
}

// Output framing: SEP + tokens + EOS. SEP is the row that predicts the first output token.
inline std::vector<TokenId> frame_output(std::span<const TokenId> ids) {
  std::vector<TokenId> out{kSep};
  out.insert(out.end(), ids.begin(), ids.end());
  out.push_back(kEos);
  return out;
}

}  // namespace miso
