#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "treetf/grammar.hpp"

namespace treetf {

class AnnotationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Every verb agrees with the nearest noun or pronoun to its left.
bool linear_valid(const Derivation& d);
/// Every verb agrees with its governing subject.
bool hierarchical_valid(const Derivation& d);

enum class Setting { kId, kGen, kRecGen };
const char* setting_name(Setting s);  // "id", "gen", "rec-gen"
Setting parse_setting(const std::string& s);

struct SettingSpec {
  Setting setting = Setting::kId;
  std::size_t train_size = 2400;
  std::size_t eval_size = 800;
  std::size_t test_size = 800;
  /// Sampling for the test split (REC_GEN boosts embedding here).
  SampleOptions test_sampling;
  /// Draws allowed per requested sentence before giving up.
  std::size_t attempts_per_item = 2000;

  static SettingSpec defaults(Setting s);
};

/// Sampling options for deep test sentences: clause-embedding rules and the
/// transitive/common-noun routes that lead to them are strongly boosted.
SampleOptions rec_gen_sampling(const Grammar& g);

struct SplitStats {
  std::size_t size = 0, valid = 0, invalid = 0;
  double mean_depth = 0.0;
  int max_depth = 0;
  std::size_t draws = 0;         // derivations sampled
  double acceptance_rate = 0.0;  // kept / draws
  // Oracle audit: how often each oracle agrees with the label.
  std::size_t linear_agree = 0, hierarchical_agree = 0;
};

struct Dataset {
  Setting setting = Setting::kId;
  std::uint64_t seed = 0;
  std::vector<LabeledSentence> train, eval, test;
  SplitStats train_stats, eval_stats, test_stats;
};

class BudgetExhausted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Builds balanced, deduplicated train/eval/test splits for one setting.
Dataset build_dataset(const Grammar& g, const SettingSpec& spec, std::uint64_t seed);

SplitStats split_stats(const std::vector<LabeledSentence>& split);

/// Classification label: 1 means the sentence contains a violation.
inline int violation_label(const LabeledSentence& s) { return s.valid ? 0 : 1; }

/// One JSON object per line: text, label, valid, depth, swapped_verb_index
/// (null when uncorrupted) and per-token annotations.
void write_jsonl(std::ostream& os, const std::vector<LabeledSentence>& split);
std::vector<LabeledSentence> read_jsonl(std::istream& is);

/// Writes train/eval/test.jsonl and stats.json into dir (created if needed).
void write_dataset(const Dataset& ds, const std::string& dir);
/// Reads train/eval/test.jsonl from dir.
Dataset read_dataset(const std::string& dir);

}  // namespace treetf
