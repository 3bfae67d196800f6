#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace treetf {

/// Marker terminal that inflects the preceding stem.
inline constexpr const char* kInflect = "+s";

struct Symbol {
  std::string name;
  bool terminal = false;
  bool operator==(const Symbol&) const = default;
};

struct Production {
  std::string lhs;
  std::vector<Symbol> rhs;
  double raw_weight = 0.0;
  double weight = 0.0;  // normalized within lhs

  /// True when the right-hand side contains the terminal 'that'.
  bool embeds_clause() const;
};

class GrammarError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Weighted context-free grammar. Alternatives of each nonterminal keep
/// their textual order; weights are normalized per nonterminal at load.
class Grammar {
 public:
  /// Rule text: one `LHS -> alt [w] | alt [w] ...` per line, terminals in
  /// single quotes, '#' comments. A nonterminal may span several lines.
  static Grammar parse(const std::string& text);
  static Grammar builtin();

  const std::string& start() const { return start_; }
  const std::vector<Production>& productions() const { return productions_; }
  /// Production indices for lhs, in textual order. Throws for unknown lhs.
  const std::vector<std::size_t>& alternatives(const std::string& lhs) const;
  bool has_nonterminal(const std::string& name) const { return index_.count(name) != 0; }
  std::vector<std::string> nonterminals() const;

  /// Diagnostics: duplicate alternatives, nonterminals unreachable from the
  /// start symbol, and reachable nonterminals that cannot terminate.
  std::vector<std::string> validate() const;
  std::vector<std::string> unreachable() const;
  /// Every terminal word (without '+s'), sorted.
  std::vector<std::string> terminals() const;
  /// Terminals plus the inflected form of every word a '+s' can follow.
  std::vector<std::string> surface_vocabulary() const;

 private:
  std::string start_;
  std::vector<Production> productions_;
  std::map<std::string, std::vector<std::size_t>> index_;
};

const std::string& builtin_grammar_text();

/// Replacement raw weights keyed by nonterminal, one per alternative; they
/// are renormalized before use.
using WeightOverrides = std::map<std::string, std::vector<double>>;

/// Overrides that multiply every clause-embedding alternative by
/// embed_factor and, for each listed nonterminal, the alternative at the
/// given position by the given factor.
WeightOverrides embedding_overrides(const Grammar& g, double embed_factor,
                                    const std::map<std::string, std::pair<std::size_t, double>>& boosts = {});

enum class Pos { kDet, kAdj, kNoun, kPronoun, kVerb, kRelativizer, kConjunction };
enum class Number { kNone, kSg, kPl };

const char* pos_name(Pos p);
const char* number_name(Number n);

/// One realized token. Verbs link to the head of their clause's subject.
struct TokenInfo {
  std::string stem;
  std::string surface;
  Pos pos = Pos::kDet;
  Number number = Number::kNone;
  bool inflected = false;  // carries '+s'
  int subject = -1;        // token index, verbs only
};

struct Derivation {
  std::vector<TokenInfo> tokens;
  int depth = 0;
  /// Spans [begin, end) of every relative clause ('that' through the end
  /// of its verb phrase).
  std::vector<std::pair<int, int>> clauses;

  std::vector<std::string> words() const;
  std::string text() const;
  std::vector<int> verb_indices() const;
};

struct SampleOptions {
  WeightOverrides overrides;
  int max_depth_cap = 15;
  /// Derivations whose relative-clause depth is below this are rejected too.
  int min_depth = 0;
  /// Expansion budget per attempt; deeper derivations are rejected.
  int max_tokens = 120;
  int max_consecutive_rejections = 1000;
};

/// Draws one derivation by top-down weighted expansion from the start
/// symbol. Throws GrammarError after max_consecutive_rejections failures.
Derivation sample(const Grammar& g, std::mt19937_64& rng, const SampleOptions& opts = {});
Derivation sample(const Grammar& g, std::uint64_t seed, const SampleOptions& opts = {});

/// Same, rooted at an arbitrary nonterminal (used for pattern surveys).
Derivation sample_from(const Grammar& g, const std::string& root, std::mt19937_64& rng,
                       const SampleOptions& opts = {});

/// Attaches '+s' to a stem: sibilant endings take -es, consonant+y takes
/// -ies, everything else -s.
std::string inflect(const std::string& stem);

/// Re-renders surfaces from stems and inflection flags.
void realize(Derivation& d);

/// Flips the inflection of the verb at token index `verb`, updating number
/// and surface. Applying it twice restores the original.
void toggle_verb(Derivation& d, int verb);

struct LabeledSentence {
  Derivation derivation;
  bool valid = true;
  int swapped_verb = -1;  // token index, or -1 when uncorrupted

  std::vector<std::string> words() const { return derivation.words(); }
  std::string text() const { return derivation.text(); }
};

/// Toggles one uniformly chosen verb.
LabeledSentence corrupt(const Derivation& d, std::mt19937_64& rng);
LabeledSentence corrupt(const Derivation& d, std::uint64_t seed);

}  // namespace treetf
