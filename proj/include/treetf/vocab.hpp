#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace treetf {

/// Word-level vocabulary. Ids are dense from 0 and the first five are
/// reserved: [PAD]=0, [UNK]=1, [CLS]=2, [SEP]=3, [MASK]=4.
class Vocabulary {
 public:
  static constexpr std::int64_t kPad = 0;
  static constexpr std::int64_t kUnk = 1;
  static constexpr std::int64_t kCls = 2;
  static constexpr std::int64_t kSep = 3;
  static constexpr std::int64_t kMask = 4;
  static constexpr std::int64_t kNumSpecial = 5;

  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& words);

  std::int64_t add(const std::string& word);
  /// kUnk for out-of-vocabulary words.
  std::int64_t id(const std::string& word) const;
  bool contains(const std::string& word) const { return index_.count(word) != 0; }
  const std::string& token(std::int64_t id) const;
  std::int64_t size() const { return static_cast<std::int64_t>(tokens_.size()); }
  static bool is_special(std::int64_t id) { return id < kNumSpecial; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// [CLS] words [SEP], truncated to max_len and padded with [PAD] up to it.
  /// max_len == 0 means no padding or truncation. Throws on empty input.
  std::vector<std::int64_t> encode(std::span<const std::string> words, std::size_t max_len = 0) const;
  /// Word tokens of an encoded sequence; special ids are skipped.
  std::vector<std::string> decode(std::span<const std::int64_t> ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int64_t> index_;
};

inline constexpr std::int64_t kIgnoreIndex = -100;

struct MaskedSequence {
  std::vector<std::int64_t> ids;     // corrupted input
  std::vector<std::int64_t> labels;  // original id at selected positions, kIgnoreIndex elsewhere
};

/// BERT-style corruption: each non-special position is selected with
/// probability mask_rate; a selected token becomes [MASK] 80% of the time,
/// a random word 10%, and stays unchanged 10%.
MaskedSequence mask_for_mlm(std::span<const std::int64_t> ids, double mask_rate, std::int64_t vocab_size,
                            std::mt19937_64& rng);
MaskedSequence mask_for_mlm(std::span<const std::int64_t> ids, double mask_rate, std::int64_t vocab_size,
                            std::uint64_t seed);

}  // namespace treetf
