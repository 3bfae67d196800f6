#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "treetf/grammar.hpp"
#include "treetf/model.hpp"
#include "treetf/tree.hpp"

namespace treetf {

enum class Verdict { kDetN, kNVp, kDetAdj, kAdjN, kOther };
const char* verdict_name(Verdict v);

/// Det N V (NP): DET_N when [Det N] is a constituent, N_VP when the noun
/// opens a constituent that reaches into the verb, OTHER otherwise.
Verdict classify_det_merge(const ParseTree& tree, const Derivation& sentence);
/// Det Adj N V (NP): DET_ADJ for [Det Adj], ADJ_N for [Adj N], else OTHER.
Verdict classify_adj_merge(const ParseTree& tree, const Derivation& sentence);
/// True iff [begin, end) is an internal node of the tree.
bool relclause_constituent(const ParseTree& tree, std::pair<int, int> clause);

/// Two-sided exact binomial test of k successes in n trials against p=1/2:
/// min(1, 2 * min(P[X <= k], P[X >= k])).
double binomial_two_sided(std::int64_t k, std::int64_t n);

enum class SurveyPattern { kDet, kAdj, kRel };
const char* pattern_name(SurveyPattern p);
SurveyPattern parse_pattern(const std::string& s);
/// 5550, 5400 and 1882.
int default_survey_size(SurveyPattern p);

/// One sentence of a survey pattern. Row index: 0 sing/intrans,
/// 1 plur/intrans, 2 sing/trans, 3 plur/trans.
struct SurveyItem {
  Derivation sentence;
  int row = 0;
  std::pair<int, int> clause{-1, -1};  // relative clause span (kRel only)
};

SurveyItem make_survey_item(const Grammar& g, SurveyPattern pattern, int row, std::mt19937_64& rng);

struct SurveyRow {
  std::string label;
  std::int64_t first = 0;   // [Det N], [Det Adj] or [Rel.]
  std::int64_t second = 0;  // [N VP], [Adj N] or No [Rel.]
  std::int64_t other = 0;
  std::int64_t total() const { return first + second + other; }
  /// Binomial test of first vs second (OTHER excluded).
  double p_value() const { return binomial_two_sided(first, first + second); }
};

struct SurveyTable {
  SurveyPattern pattern = SurveyPattern::kDet;
  std::array<std::string, 2> columns;
  std::array<SurveyRow, 4> rows;
  std::int64_t total() const;
};

/// Generates sample_count pattern sentences (rows drawn uniformly) and
/// tallies the verdict for each tree returned by parse(words).
template <class ParseFn>
SurveyTable run_survey(const Grammar& g, SurveyPattern pattern, int sample_count, std::uint64_t seed, ParseFn parse);

/// Parses with an encoder: forward pass, ladder of the content tokens,
/// extraction at the given threshold.
SurveyTable run_survey(const Encoder& model, const Vocabulary& vocab, const Grammar& g, SurveyPattern pattern,
                       int sample_count, std::uint64_t seed, double threshold = 0.8, int batch_size = 64);

/// Columns: row, first category, second category, other, n, p_value.
void write_survey_csv(std::ostream& os, const SurveyTable& t);

struct LayerProfile {
  int layer = 0;  // 1-based
  double mean = 0.0, stddev = 0.0;
  double reference = 0.0;  // 1 - 2^-layer
  std::size_t count = 0;
};

std::vector<LayerProfile> breakpoint_profile(const std::vector<MergeLadder>& ladders);
std::vector<LayerProfile> breakpoint_profile(const Encoder& model, const Vocabulary& vocab,
                                             const std::vector<std::vector<std::string>>& corpus,
                                             int batch_size = 64);

/// Merge ladders of the content tokens of each sentence.
std::vector<MergeLadder> ladders(const Encoder& model, const Vocabulary& vocab,
                                 const std::vector<std::vector<std::string>>& corpus, int batch_size = 64);

// ---------------------------------------------------------------------------

namespace detail {
SurveyTable empty_table(SurveyPattern pattern);
void tally(SurveyTable& t, const SurveyItem& item, const ParseTree& tree);
}  // namespace detail

template <class ParseFn>
SurveyTable run_survey(const Grammar& g, SurveyPattern pattern, int sample_count, std::uint64_t seed, ParseFn parse) {
  SurveyTable t = detail::empty_table(pattern);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> row(0, 3);
  for (int i = 0; i < sample_count; ++i) {
    const SurveyItem item = make_survey_item(g, pattern, row(rng), rng);
    detail::tally(t, item, parse(item.sentence.words()));
  }
  return t;
}

}  // namespace treetf
