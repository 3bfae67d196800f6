#include "treetf/vocab.hpp"

namespace treetf {

Vocabulary::Vocabulary() {
  for (const char* s : {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"}) add(s);
}

Vocabulary::Vocabulary(const std::vector<std::string>& words) : Vocabulary() {
  for (const auto& w : words) add(w);
}

std::int64_t Vocabulary::add(const std::string& word) {
  auto it = index_.find(word);
  if (it != index_.end()) return it->second;
  const auto id = size();
  tokens_.push_back(word);
  index_.emplace(word, id);
  return id;
}

std::int64_t Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(std::int64_t id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id " + std::to_string(id) + " not in vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::int64_t> Vocabulary::encode(std::span<const std::string> words, std::size_t max_len) const {
  if (words.empty()) throw std::invalid_argument("cannot encode an empty token list");
  if (max_len != 0 && max_len < 2) throw std::invalid_argument("max_len must be at least 2");
  std::vector<std::int64_t> ids{kCls};
  const std::size_t room = max_len == 0 ? words.size() : std::min(words.size(), max_len - 2);
  for (std::size_t i = 0; i < room; ++i) ids.push_back(id(words[i]));
  ids.push_back(kSep);
  if (max_len != 0) ids.resize(max_len, kPad);
  return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const std::int64_t> ids) const {
  std::vector<std::string> out;
  for (auto i : ids) {
    if (i == kUnk || !is_special(i)) out.push_back(token(i));
  }
  return out;
}

MaskedSequence mask_for_mlm(std::span<const std::int64_t> ids, double mask_rate, std::int64_t vocab_size,
                            std::mt19937_64& rng) {
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw std::invalid_argument("mask_rate must lie in (0, 1)");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::int64_t> word(Vocabulary::kNumSpecial, vocab_size - 1);
  MaskedSequence m{std::vector<std::int64_t>(ids.begin(), ids.end()),
                   std::vector<std::int64_t>(ids.size(), kIgnoreIndex)};
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (Vocabulary::is_special(ids[i])) continue;
    if (u(rng) >= mask_rate) continue;
    m.labels[i] = ids[i];
    const double r = u(rng);
    if (r < 0.8) {
      m.ids[i] = Vocabulary::kMask;
    } else if (r < 0.9) {
      m.ids[i] = word(rng);
    }
  }
  return m;
}

MaskedSequence mask_for_mlm(std::span<const std::int64_t> ids, double mask_rate, std::int64_t vocab_size,
                            std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return mask_for_mlm(ids, mask_rate, vocab_size, rng);
}

}  // namespace treetf
