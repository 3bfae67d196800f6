#include "treetf/structure.hpp"

#include <cmath>
#include <limits>
#include <ostream>

#include "treetf/util.hpp"

namespace treetf {

namespace {

int find_pos(const Derivation& d, Pos pos, int from = 0) {
  for (int i = from; i < static_cast<int>(d.tokens.size()); ++i) {
    if (d.tokens[i].pos == pos) return i;
  }
  return -1;
}

// log P[X = k] for X ~ Binomial(n, 1/2).
double log_pmf_half(std::int64_t k, std::int64_t n) {
  return std::lgamma(static_cast<double>(n) + 1) - std::lgamma(static_cast<double>(k) + 1) -
         std::lgamma(static_cast<double>(n - k) + 1) - static_cast<double>(n) * std::log(2.0);
}

// log P[X <= k].
double log_cdf_half(std::int64_t k, std::int64_t n) {
  double m = -std::numeric_limits<double>::infinity();
  std::vector<double> terms;
  terms.reserve(static_cast<std::size_t>(k + 1));
  for (std::int64_t i = 0; i <= k; ++i) {
    terms.push_back(log_pmf_half(i, n));
    m = std::max(m, terms.back());
  }
  double s = 0.0;
  for (double t : terms) s += std::exp(t - m);
  return m + std::log(s);
}

std::string lexical(const Grammar& g, const std::string& nt, std::mt19937_64& rng) {
  Derivation d = sample_from(g, nt, rng);
  if (d.tokens.size() != 1) throw GrammarError(nt + " is not a single-word category");
  return d.tokens.front().stem;
}

TokenInfo word(std::string stem, Pos pos, Number number, bool inflected = false) {
  TokenInfo t;
  t.stem = std::move(stem);
  t.pos = pos;
  t.number = number;
  t.inflected = inflected;
  return t;
}

// Appends Det N, singular or plural, and returns the noun index.
int noun_phrase(const Grammar& g, Derivation& d, bool plural, bool adjective, std::mt19937_64& rng) {
  d.tokens.push_back(word(lexical(g, plural ? "Det_Pl" : "Det_Sg", rng), Pos::kDet, plural ? Number::kPl : Number::kSg));
  if (adjective) d.tokens.push_back(word(lexical(g, "Adj", rng), Pos::kAdj, Number::kNone));
  d.tokens.push_back(word(lexical(g, "N_common", rng), Pos::kNoun, plural ? Number::kPl : Number::kSg, plural));
  return static_cast<int>(d.tokens.size()) - 1;
}

// Appends an agreeing verb phrase, with a singular or plural object when
// transitive.
void verb_phrase(const Grammar& g, Derivation& d, int subject, bool transitive, std::mt19937_64& rng) {
  const bool sg = d.tokens[subject].number == Number::kSg;
  auto v = word(lexical(g, transitive ? "VT" : "VI", rng), Pos::kVerb, sg ? Number::kSg : Number::kPl, sg);
  v.subject = subject;
  d.tokens.push_back(std::move(v));
  if (transitive) noun_phrase(g, d, std::bernoulli_distribution(0.5)(rng), false, rng);
}

}  // namespace

const char* verdict_name(Verdict v) {
  switch (v) {
    case Verdict::kDetN: return "DET_N";
    case Verdict::kNVp: return "N_VP";
    case Verdict::kDetAdj: return "DET_ADJ";
    case Verdict::kAdjN: return "ADJ_N";
    case Verdict::kOther: return "OTHER";
  }
  return "?";
}

Verdict classify_det_merge(const ParseTree& tree, const Derivation& s) {
  const int det = find_pos(s, Pos::kDet);
  const int verb = find_pos(s, Pos::kVerb);
  if (det < 0 || verb != det + 2 || s.tokens[det + 1].pos != Pos::kNoun) {
    throw std::invalid_argument("sentence does not match Det N V (NP): " + s.text());
  }
  const auto sp = spans(tree);
  if (sp.count({det, det + 2})) return Verdict::kDetN;
  for (const auto& [b, e] : sp) {
    if (b == det + 1 && e > verb) return Verdict::kNVp;
  }
  return Verdict::kOther;
}

Verdict classify_adj_merge(const ParseTree& tree, const Derivation& s) {
  const int det = find_pos(s, Pos::kDet);
  if (det < 0 || det + 2 >= static_cast<int>(s.tokens.size()) || s.tokens[det + 1].pos != Pos::kAdj ||
      s.tokens[det + 2].pos != Pos::kNoun) {
    throw std::invalid_argument("sentence does not match Det Adj N VP (NP): " + s.text());
  }
  const auto sp = spans(tree);
  if (sp.count({det, det + 2})) return Verdict::kDetAdj;
  if (sp.count({det + 1, det + 3})) return Verdict::kAdjN;
  return Verdict::kOther;
}

bool relclause_constituent(const ParseTree& tree, std::pair<int, int> clause) {
  if (clause.second - clause.first < 2) return false;
  return spans(tree).count(clause) != 0;
}

double binomial_two_sided(std::int64_t k, std::int64_t n) {
  if (n < 0 || k < 0 || k > n) throw std::invalid_argument("binomial test needs 0 <= k <= n");
  if (n == 0) return 1.0;
  const std::int64_t tail = std::min(k, n - k);  // symmetric null
  const double p = 2.0 * std::exp(log_cdf_half(tail, n));
  return std::min(1.0, p);
}

const char* pattern_name(SurveyPattern p) {
  switch (p) {
    case SurveyPattern::kDet: return "det";
    case SurveyPattern::kAdj: return "adj";
    case SurveyPattern::kRel: return "rel";
  }
  return "?";
}

SurveyPattern parse_pattern(const std::string& s) {
  if (s == "det") return SurveyPattern::kDet;
  if (s == "adj") return SurveyPattern::kAdj;
  if (s == "rel") return SurveyPattern::kRel;
  throw std::invalid_argument("unknown pattern '" + s + "' (expected det, adj or rel)");
}

int default_survey_size(SurveyPattern p) {
  switch (p) {
    case SurveyPattern::kDet: return 5550;
    case SurveyPattern::kAdj: return 5400;
    case SurveyPattern::kRel: return 1882;
  }
  return 0;
}

SurveyItem make_survey_item(const Grammar& g, SurveyPattern pattern, int row, std::mt19937_64& rng) {
  if (row < 0 || row > 3) throw std::out_of_range("survey row must be 0..3");
  const bool plural = row % 2 == 1;
  const bool transitive = row >= 2;
  SurveyItem item;
  item.row = row;
  Derivation& d = item.sentence;
  const int subject = noun_phrase(g, d, plural, pattern == SurveyPattern::kAdj, rng);
  if (pattern == SurveyPattern::kRel) {
    const int begin = static_cast<int>(d.tokens.size());
    d.tokens.push_back(word("that", Pos::kRelativizer, Number::kNone));
    verb_phrase(g, d, subject, std::bernoulli_distribution(0.5)(rng), rng);
    item.clause = {begin, static_cast<int>(d.tokens.size())};
    d.clauses.push_back(item.clause);
    d.depth = 1;
  }
  verb_phrase(g, d, subject, transitive, rng);
  realize(d);
  return item;
}

std::int64_t SurveyTable::total() const {
  std::int64_t n = 0;
  for (const auto& r : rows) n += r.total();
  return n;
}

namespace detail {

SurveyTable empty_table(SurveyPattern pattern) {
  SurveyTable t;
  t.pattern = pattern;
  switch (pattern) {
    case SurveyPattern::kDet: t.columns = {"[Det N]", "[N VP]"}; break;
    case SurveyPattern::kAdj: t.columns = {"[Det Adj]", "[Adj N]"}; break;
    case SurveyPattern::kRel: t.columns = {"[Rel.]", "No [Rel.]"}; break;
  }
  const char* labels[] = {"Sing. subject, intrans.", "Plur. subject, intrans.", "Sing. subject, trans.",
                          "Plur. subject, trans."};
  for (int i = 0; i < 4; ++i) t.rows[i].label = labels[i];
  return t;
}

void tally(SurveyTable& t, const SurveyItem& item, const ParseTree& tree) {
  SurveyRow& row = t.rows[item.row];
  switch (t.pattern) {
    case SurveyPattern::kDet: {
      const Verdict v = classify_det_merge(tree, item.sentence);
      (v == Verdict::kDetN ? row.first : v == Verdict::kNVp ? row.second : row.other)++;
      break;
    }
    case SurveyPattern::kAdj: {
      const Verdict v = classify_adj_merge(tree, item.sentence);
      (v == Verdict::kDetAdj ? row.first : v == Verdict::kAdjN ? row.second : row.other)++;
      break;
    }
    case SurveyPattern::kRel:
      (relclause_constituent(tree, item.clause) ? row.first : row.second)++;
      break;
  }
}

}  // namespace detail

std::vector<MergeLadder> ladders(const Encoder& model, const Vocabulary& vocab,
                                 const std::vector<std::vector<std::string>>& corpus, int batch_size) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  NoGradGuard no_grad;
  std::vector<MergeLadder> out;
  out.reserve(corpus.size());
  const auto max_len = static_cast<std::size_t>(model.config().max_seq_len);
  for (std::size_t start = 0; start < corpus.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto stop = std::min(corpus.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::vector<std::int64_t>> seqs;
    for (auto i = start; i < stop; ++i) {
      auto ids = vocab.encode(corpus[i]);
      if (ids.size() > max_len) ids.resize(max_len);
      seqs.push_back(std::move(ids));
    }
    const Batch batch = Batch::from_sequences(seqs);
    const EncoderOutput o = model.forward(batch);
    for (std::int64_t r = 0; r < batch.size; ++r) out.push_back(Encoder::ladder_for(o, r));
  }
  return out;
}

SurveyTable run_survey(const Encoder& model, const Vocabulary& vocab, const Grammar& g, SurveyPattern pattern,
                       int sample_count, std::uint64_t seed, double threshold, int batch_size) {
  if (model.config().gate_bypass) throw std::invalid_argument("a gate-bypass model has no merge ladder to survey");
  SurveyTable t = detail::empty_table(pattern);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> row(0, 3);
  std::vector<SurveyItem> items;
  std::vector<std::vector<std::string>> corpus;
  for (int i = 0; i < sample_count; ++i) {
    items.push_back(make_survey_item(g, pattern, row(rng), rng));
    corpus.push_back(items.back().sentence.words());
  }
  const auto ls = ladders(model, vocab, corpus, batch_size);
  for (std::size_t i = 0; i < items.size(); ++i) detail::tally(t, items[i], extract(ls[i], threshold));
  return t;
}

void write_survey_csv(std::ostream& os, const SurveyTable& t) {
  os << "row," << t.columns[0] << ',' << t.columns[1] << ",other,n,p_value\n";
  for (const auto& r : t.rows) {
    os << '"' << r.label << "\"," << r.first << ',' << r.second << ',' << r.other << ',' << r.total() << ','
       << format_double(r.p_value()) << '\n';
  }
}

std::vector<LayerProfile> breakpoint_profile(const std::vector<MergeLadder>& ls) {
  std::vector<LayerProfile> out;
  for (const auto& ladder : ls) {
    if (out.size() < ladder.layers.size()) out.resize(ladder.layers.size());
  }
  std::vector<double> sum(out.size(), 0.0), sq(out.size(), 0.0);
  for (const auto& ladder : ls) {
    for (std::size_t l = 0; l < ladder.layers.size(); ++l) {
      for (double a : ladder.layers[l]) {
        sum[l] += a;
        sq[l] += a * a;
        ++out[l].count;
      }
    }
  }
  for (std::size_t l = 0; l < out.size(); ++l) {
    auto& p = out[l];
    p.layer = static_cast<int>(l) + 1;
    p.reference = 1.0 - std::ldexp(1.0, -p.layer);
    if (p.count) {
      p.mean = sum[l] / static_cast<double>(p.count);
      p.stddev = std::sqrt(std::max(0.0, sq[l] / static_cast<double>(p.count) - p.mean * p.mean));
    }
  }
  return out;
}

std::vector<LayerProfile> breakpoint_profile(const Encoder& model, const Vocabulary& vocab,
                                             const std::vector<std::vector<std::string>>& corpus, int batch_size) {
  if (model.config().gate_bypass) throw std::invalid_argument("a gate-bypass model has no merge ladder to profile");
  return breakpoint_profile(ladders(model, vocab, corpus, batch_size));
}

}  // namespace treetf
