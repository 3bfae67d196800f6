#include "treetf/grammar.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "treetf/util.hpp"

namespace treetf {

namespace {

const std::string kBuiltin = R"(S             -> NP_3Sg_nom VP_3Sg [0.5] | NP_nom VP [0.5]

VP_3Sg        -> VT '+s' NP_acc [0.475] | VI '+s' [0.475] | VP_3Sg 'and' VP_3Sg [0.05]
VP            -> VT      NP_acc [0.475] | VI      [0.475] | VP     'and' VP     [0.05]

NP_3Sg_nom    -> 'he' [0.25] | 'she' [0.25] | NP_common_Sg [0.5]
NP_common_Sg  -> Det_Sg N_bar_common_Sg [1]
Det_Sg        -> 'the' [0.5] | 'a' [0.5]

NP_nom        -> 'I' [0.125] | 'you' [0.125] | 'we' [0.125] | 'they' [0.125] | NP_common_Pl [0.5]
NP_common_Pl  -> Det_Pl N_bar_common_Pl [0.8] | NP_common_Pl 'and' NP_common_Pl [0.2]
Det_Pl        -> 'the' [0.333] | 'those' [0.333] | 'these' [0.333]

NP_acc        -> 'me' [0.075] | 'you' [0.075] | 'us' [0.075] | 'them' [0.075] | NP_common_Pl [0.35] | NP_common_Sg [0.35]

N_bar_common_Sg  -> Adj N_bar_common_Sg [0.2] | N_common 'that' VP_3Sg [0.2] | N_common [0.6]
N_bar_common_Pl  -> Adj N_bar_common_Pl [0.2] | N_common '+s' 'that' VP [0.15] | N_common '+s' [0.65]

N_common      -> 'girl' [0.0625] | 'boy' [0.0625] | 'cat' [0.0625] | 'turtle' [0.0625] | 'rutabaga' [0.0625] | 'duck' [0.0625] | 'cheese' [0.0625] | 'dude' [0.0625] | 'rabbit' [0.0625] | 'wug' [0.0625] | 'linguist' [0.0625] | 'physicist' [0.0625] | 'lady' [0.0625] | 'dog' [0.0625] | 'cat' [0.0625] | 'bird' [0.0625]

Rel_Sg         -> 'that' VP_3Sg [1]
Rel_Pl         -> 'that' VP [1]

VI            -> 'run' [0.2] | 'walk' [0.2] | 'think' [0.2] | 'laugh' [0.2] | 'ponder' [0.2]
VT            -> 'kick' [0.166] | 'kiss' [0.166] | 'hug' [0.166] | 'punch' [0.166] | 'fight' [0.166] | 'love' [0.166]

Adj           -> 'big' [0.125] | 'small' [0.125] | 'happy' [0.125] | 'mad' [0.125] | 'red' [0.125] | 'blue' [0.125] | 'sparkling' [0.125] | 'shiny' [0.125]
)";

bool starts_with(const std::string& s, const char* p) { return s.rfind(p, 0) == 0; }

bool is_verbal(const std::string& nt) { return starts_with(nt, "VP"); }

// Lexical class of a word emitted directly by a rule for `lhs`.
Pos lexical_pos(const std::string& lhs, const std::string& word) {
  if (word == "that") return Pos::kRelativizer;
  if (word == "and") return Pos::kConjunction;
  if (starts_with(lhs, "Det")) return Pos::kDet;
  if (starts_with(lhs, "Adj")) return Pos::kAdj;
  if (starts_with(lhs, "V") && !is_verbal(lhs)) return Pos::kVerb;
  if (starts_with(lhs, "NP")) return Pos::kPronoun;
  if (starts_with(lhs, "N")) return Pos::kNoun;
  throw GrammarError("cannot classify word '" + word + "' produced by " + lhs);
}

Number lexical_number(const std::string& lhs, Pos pos) {
  const bool sg = lhs.find("Sg") != std::string::npos;
  switch (pos) {
    case Pos::kDet:
    case Pos::kPronoun:
      return sg ? Number::kSg : Number::kPl;
    case Pos::kNoun:
      return Number::kSg;
    case Pos::kVerb:
      return Number::kPl;
    default:
      return Number::kNone;
  }
}

struct Rejected {};

class Sampler {
 public:
  Sampler(const Grammar& g, std::mt19937_64& rng, const SampleOptions& opts) : g_(g), rng_(rng), opts_(opts) {
    for (const auto& [lhs, w] : opts.overrides) {
      const auto& alts = g.alternatives(lhs);
      if (w.size() != alts.size()) {
        throw GrammarError("override for " + lhs + " has " + std::to_string(w.size()) + " weights, expected " +
                           std::to_string(alts.size()));
      }
      double total = 0.0;
      for (double x : w) {
        if (!(x >= 0.0) || !std::isfinite(x)) throw GrammarError("override for " + lhs + " has a negative weight");
        total += x;
      }
      if (total <= 0.0) throw GrammarError("override for " + lhs + " has zero total weight");
    }
  }

  Derivation run(const std::string& root) {
    d_ = Derivation{};
    expand(root, -1, 0);
    return std::move(d_);
  }

 private:
  std::size_t choose(const std::string& lhs) {
    const auto& alts = g_.alternatives(lhs);
    const auto it = opts_.overrides.find(lhs);
    std::vector<double> w(alts.size());
    for (std::size_t i = 0; i < alts.size(); ++i) {
      w[i] = it != opts_.overrides.end() ? it->second[i] : g_.productions()[alts[i]].weight;
    }
    std::discrete_distribution<std::size_t> dist(w.begin(), w.end());
    return alts[dist(rng_)];
  }

  int expand(const std::string& nt, int subject, int depth) {
    const Production& p = g_.productions()[choose(nt)];
    const bool embeds = p.embeds_clause();
    const int child_depth = depth + (embeds ? 1 : 0);
    if (child_depth > opts_.max_depth_cap) throw Rejected{};
    d_.depth = std::max(d_.depth, child_depth);
    int head = -1, last_nominal = -1, clause_begin = -1;
    for (const auto& sym : p.rhs) {
      if (sym.terminal && sym.name == kInflect) {
        if (d_.tokens.empty()) throw GrammarError("'+s' with no preceding stem in " + p.lhs);
        auto& t = d_.tokens.back();
        t.inflected = true;
        if (t.pos == Pos::kNoun) t.number = Number::kPl;
        if (t.pos == Pos::kVerb) t.number = Number::kSg;
        continue;
      }
      if (sym.terminal) {
        if (static_cast<int>(d_.tokens.size()) >= opts_.max_tokens) throw Rejected{};
        TokenInfo t;
        t.stem = sym.name;
        t.pos = lexical_pos(p.lhs, sym.name);
        t.number = lexical_number(p.lhs, t.pos);
        if (t.pos == Pos::kVerb) t.subject = subject;
        const int idx = static_cast<int>(d_.tokens.size());
        if (t.pos == Pos::kRelativizer && clause_begin < 0) clause_begin = idx;
        if ((t.pos == Pos::kNoun || t.pos == Pos::kPronoun)) {
          if (head < 0) head = idx;
          last_nominal = idx;
        }
        d_.tokens.push_back(std::move(t));
        continue;
      }
      if (is_verbal(sym.name)) {
        expand(sym.name, last_nominal >= 0 ? last_nominal : subject, child_depth);
      } else {
        const int h = expand(sym.name, subject, child_depth);
        if (h >= 0) {
          if (head < 0) head = h;
          last_nominal = h;
        }
      }
    }
    if (embeds && clause_begin >= 0) d_.clauses.emplace_back(clause_begin, static_cast<int>(d_.tokens.size()));
    return head;
  }

  const Grammar& g_;
  std::mt19937_64& rng_;
  const SampleOptions& opts_;
  Derivation d_;
};

}  // namespace

bool Production::embeds_clause() const {
  return std::any_of(rhs.begin(), rhs.end(), [](const Symbol& s) { return s.terminal && s.name == "that"; });
}

const std::string& builtin_grammar_text() { return kBuiltin; }

Grammar Grammar::builtin() { return parse(kBuiltin); }

Grammar Grammar::parse(const std::string& text) {
  Grammar g;
  std::istringstream is(text);
  std::string line, current;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    std::string body = trim(line);
    if (body.empty()) continue;
    const auto arrow = body.find("->");
    if (arrow != std::string::npos) {
      current = trim(body.substr(0, arrow));
      if (current.empty() || current.find_first_of(" \t'") != std::string::npos) {
        throw GrammarError("line " + std::to_string(lineno) + ": bad left-hand side");
      }
      if (g.start_.empty()) g.start_ = current;
      body = body.substr(arrow + 2);
    } else if (body[0] == '|' && !current.empty()) {
      body = body.substr(1);
    } else {
      throw GrammarError("line " + std::to_string(lineno) + ": expected 'LHS -> ...'");
    }

    Production prod;
    prod.lhs = current;
    bool have_weight = false;
    auto finish = [&]() {
      if (prod.rhs.empty()) throw GrammarError("line " + std::to_string(lineno) + ": empty alternative for " + current);
      if (!have_weight) throw GrammarError("line " + std::to_string(lineno) + ": alternative without [weight]");
      g.index_[current].push_back(g.productions_.size());
      g.productions_.push_back(prod);
      prod.rhs.clear();
      have_weight = false;
    };
    std::size_t i = 0;
    while (i < body.size()) {
      const char c = body[i];
      if (std::isspace(static_cast<unsigned char>(c))) {
        ++i;
      } else if (c == '|') {
        finish();
        ++i;
      } else if (c == '\'') {
        const auto close = body.find('\'', i + 1);
        if (close == std::string::npos) throw GrammarError("line " + std::to_string(lineno) + ": unterminated quote");
        prod.rhs.push_back({body.substr(i + 1, close - i - 1), true});
        i = close + 1;
      } else if (c == '[') {
        const auto close = body.find(']', i);
        if (close == std::string::npos) throw GrammarError("line " + std::to_string(lineno) + ": unterminated weight");
        prod.raw_weight = parse_double(trim(body.substr(i + 1, close - i - 1)), "weight");
        if (prod.raw_weight < 0) throw GrammarError("line " + std::to_string(lineno) + ": negative weight");
        have_weight = true;
        i = close + 1;
      } else {
        auto j = i;
        while (j < body.size() && !std::isspace(static_cast<unsigned char>(body[j])) && body[j] != '|' &&
               body[j] != '[' && body[j] != '\'') {
          ++j;
        }
        prod.rhs.push_back({body.substr(i, j - i), false});
        i = j;
      }
    }
    finish();
  }
  if (g.start_.empty()) throw GrammarError("grammar has no rules");

  for (auto& [lhs, alts] : g.index_) {
    double total = 0.0;
    for (auto a : alts) total += g.productions_[a].raw_weight;
    if (total <= 0.0) throw GrammarError(lhs + ": weights sum to zero");
    for (auto a : alts) g.productions_[a].weight = g.productions_[a].raw_weight / total;
  }
  for (const auto& p : g.productions_) {
    for (const auto& s : p.rhs) {
      if (!s.terminal && !g.index_.count(s.name)) throw GrammarError(p.lhs + " uses undefined nonterminal " + s.name);
    }
  }
  return g;
}

const std::vector<std::size_t>& Grammar::alternatives(const std::string& lhs) const {
  const auto it = index_.find(lhs);
  if (it == index_.end()) throw GrammarError("unknown nonterminal " + lhs);
  return it->second;
}

std::vector<std::string> Grammar::nonterminals() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : index_) out.push_back(k);
  return out;
}

std::vector<std::string> Grammar::unreachable() const {
  std::set<std::string> seen{start_};
  std::vector<std::string> stack{start_};
  while (!stack.empty()) {
    const auto nt = stack.back();
    stack.pop_back();
    for (auto a : index_.at(nt)) {
      for (const auto& s : productions_[a].rhs) {
        if (!s.terminal && seen.insert(s.name).second) stack.push_back(s.name);
      }
    }
  }
  std::vector<std::string> out;
  for (const auto& [k, v] : index_) {
    if (!seen.count(k)) out.push_back(k);
  }
  return out;
}

std::vector<std::string> Grammar::validate() const {
  std::vector<std::string> out;
  for (const auto& [lhs, alts] : index_) {
    for (std::size_t i = 0; i < alts.size(); ++i) {
      for (std::size_t j = 0; j < i; ++j) {
        const auto& a = productions_[alts[i]];
        const auto& b = productions_[alts[j]];
        if (a.rhs == b.rhs) {
          std::string rhs;
          for (const auto& s : a.rhs) rhs += (rhs.empty() ? "" : " ") + (s.terminal ? "'" + s.name + "'" : s.name);
          out.push_back(lhs + ": duplicate alternative " + rhs + " (effective weight " +
                        format_double(a.weight + b.weight) + ")");
        }
      }
    }
  }
  for (const auto& nt : unreachable()) out.push_back(nt + ": unreachable from " + start_);

  std::set<std::string> terminating;
  for (bool changed = true; changed;) {
    changed = false;
    for (const auto& p : productions_) {
      if (terminating.count(p.lhs)) continue;
      const bool ok = std::all_of(p.rhs.begin(), p.rhs.end(),
                                  [&](const Symbol& s) { return s.terminal || terminating.count(s.name); });
      if (ok) {
        terminating.insert(p.lhs);
        changed = true;
      }
    }
  }
  for (const auto& [k, v] : index_) {
    if (!terminating.count(k)) out.push_back(k + ": has no terminating derivation");
  }
  return out;
}

std::vector<std::string> Grammar::terminals() const {
  std::set<std::string> words;
  for (const auto& p : productions_) {
    for (const auto& s : p.rhs) {
      if (s.terminal && s.name != kInflect) words.insert(s.name);
    }
  }
  return {words.begin(), words.end()};
}

std::vector<std::string> Grammar::surface_vocabulary() const {
  const auto base = terminals();
  std::set<std::string> words(base.begin(), base.end());
  for (const auto& p : productions_) {
    for (std::size_t i = 0; i + 1 < p.rhs.size(); ++i) {
      const auto& s = p.rhs[i];
      if (p.rhs[i + 1].terminal && p.rhs[i + 1].name == kInflect) {
        if (s.terminal) {
          words.insert(inflect(s.name));
          continue;
        }
        for (auto a : index_.at(s.name)) {
          for (const auto& t : productions_[a].rhs) {
            if (t.terminal && t.name != kInflect) words.insert(inflect(t.name));
          }
        }
      }
    }
  }
  words.erase(kInflect);
  return {words.begin(), words.end()};
}

WeightOverrides embedding_overrides(const Grammar& g, double embed_factor,
                                    const std::map<std::string, std::pair<std::size_t, double>>& boosts) {
  WeightOverrides out;
  for (const auto& nt : g.nonterminals()) {
    const auto& alts = g.alternatives(nt);
    std::vector<double> w;
    bool touched = false;
    for (auto a : alts) {
      const auto& p = g.productions()[a];
      w.push_back(p.weight * (p.embeds_clause() ? embed_factor : 1.0));
      touched |= p.embeds_clause();
    }
    if (auto it = boosts.find(nt); it != boosts.end()) {
      if (it->second.first >= w.size()) throw GrammarError("boost index out of range for " + nt);
      w[it->second.first] *= it->second.second;
      touched = true;
    }
    if (touched) out[nt] = std::move(w);
  }
  for (const auto& [nt, b] : boosts) {
    if (!g.has_nonterminal(nt)) throw GrammarError("boost for unknown nonterminal " + nt);
  }
  return out;
}

const char* pos_name(Pos p) {
  switch (p) {
    case Pos::kDet: return "det";
    case Pos::kAdj: return "adj";
    case Pos::kNoun: return "noun";
    case Pos::kPronoun: return "pronoun";
    case Pos::kVerb: return "verb";
    case Pos::kRelativizer: return "relativizer";
    case Pos::kConjunction: return "conjunction";
  }
  return "?";
}

const char* number_name(Number n) {
  switch (n) {
    case Number::kNone: return "none";
    case Number::kSg: return "sg";
    case Number::kPl: return "pl";
  }
  return "?";
}

std::vector<std::string> Derivation::words() const {
  std::vector<std::string> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(t.surface);
  return out;
}

std::string Derivation::text() const { return join(words(), " "); }

std::vector<int> Derivation::verb_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i].pos == Pos::kVerb) out.push_back(static_cast<int>(i));
  }
  return out;
}

Derivation sample_from(const Grammar& g, const std::string& root, std::mt19937_64& rng, const SampleOptions& opts) {
  if (opts.max_depth_cap < 1) throw std::invalid_argument("max_depth_cap must be at least 1");
  Sampler s(g, rng, opts);
  for (int attempt = 0; attempt < opts.max_consecutive_rejections; ++attempt) {
    try {
      Derivation d = s.run(root);
      if (d.depth < opts.min_depth) continue;
      realize(d);
      return d;
    } catch (const Rejected&) {
    }
  }
  throw GrammarError(std::to_string(opts.max_consecutive_rejections) +
                     " consecutive rejections: depth cap " + std::to_string(opts.max_depth_cap) + ", floor " +
                     std::to_string(opts.min_depth) + " and token budget " + std::to_string(opts.max_tokens) +
                     " are infeasible under these weights");
}

Derivation sample(const Grammar& g, std::mt19937_64& rng, const SampleOptions& opts) {
  return sample_from(g, g.start(), rng, opts);
}

Derivation sample(const Grammar& g, std::uint64_t seed, const SampleOptions& opts) {
  std::mt19937_64 rng(seed);
  return sample(g, rng, opts);
}

std::string inflect(const std::string& stem) {
  if (stem.empty()) throw GrammarError("cannot inflect an empty stem");
  auto ends = [&](const char* suf) {
    const std::string s(suf);
    return stem.size() >= s.size() && stem.compare(stem.size() - s.size(), s.size(), s) == 0;
  };
  if (ends("s") || ends("x") || ends("z") || ends("ch") || ends("sh")) return stem + "es";
  if (stem.size() >= 2 && stem.back() == 'y' && std::string("aeiou").find(stem[stem.size() - 2]) == std::string::npos) {
    return stem.substr(0, stem.size() - 1) + "ies";
  }
  return stem + "s";
}

void realize(Derivation& d) {
  for (auto& t : d.tokens) t.surface = t.inflected ? inflect(t.stem) : t.stem;
}

void toggle_verb(Derivation& d, int verb) {
  if (verb < 0 || verb >= static_cast<int>(d.tokens.size()) || d.tokens[verb].pos != Pos::kVerb) {
    throw std::invalid_argument("token " + std::to_string(verb) + " is not a verb");
  }
  auto& t = d.tokens[verb];
  t.inflected = !t.inflected;
  t.number = t.inflected ? Number::kSg : Number::kPl;
  t.surface = t.inflected ? inflect(t.stem) : t.stem;
}

LabeledSentence corrupt(const Derivation& d, std::mt19937_64& rng) {
  const auto verbs = d.verb_indices();
  if (verbs.empty()) throw std::logic_error("corrupt: derivation has no verb");
  std::uniform_int_distribution<std::size_t> pick(0, verbs.size() - 1);
  LabeledSentence s{d, false, verbs[pick(rng)]};
  toggle_verb(s.derivation, s.swapped_verb);
  return s;
}

LabeledSentence corrupt(const Derivation& d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return corrupt(d, rng);
}

}  // namespace treetf
