#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "treetf/harness.hpp"
#include "treetf/structure.hpp"

using namespace treetf;

namespace {

Derivation annotate(const std::vector<std::pair<std::string, Pos>>& words) {
  Derivation d;
  int subject = -1;
  for (const auto& [w, p] : words) {
    TokenInfo t;
    t.stem = t.surface = w;
    t.pos = p;
    if (p == Pos::kNoun && subject < 0) subject = static_cast<int>(d.tokens.size());
    if (p == Pos::kVerb) t.subject = subject;
    d.tokens.push_back(t);
  }
  return d;
}

ParseTree tree(const std::string& s) { return parse_bracketed(s).first; }

const Derivation& dogs_run() {
  static const Derivation d = annotate({{"the", Pos::kDet}, {"dogs", Pos::kNoun}, {"run", Pos::kVerb}});
  return d;
}

const Derivation& big_dog_runs() {
  static const Derivation d =
      annotate({{"the", Pos::kDet}, {"big", Pos::kAdj}, {"dog", Pos::kNoun}, {"runs", Pos::kVerb}});
  return d;
}

// Exact two-sided p-value by enumerating all outcomes at least as unlikely
// as the observed one under Binomial(n, 1/2).
double enumerate_binomial(int k, int n) {
  std::vector<double> pmf(n + 1);
  for (int i = 0; i <= n; ++i) pmf[i] = std::tgamma(n + 1.0) / (std::tgamma(i + 1.0) * std::tgamma(n - i + 1.0)) / std::pow(2.0, n);
  double p = 0.0;
  for (int i = 0; i <= n; ++i)
    if (pmf[i] <= pmf[k] * (1 + 1e-12)) p += pmf[i];
  return std::min(1.0, p);
}

}  // namespace

TEST(Classify, Determiners) {
  EXPECT_EQ(classify_det_merge(tree("[[the dogs] run]"), dogs_run()), Verdict::kDetN);
  EXPECT_EQ(classify_det_merge(tree("[the [dogs run]]"), dogs_run()), Verdict::kNVp);
  EXPECT_EQ(classify_det_merge(tree("[the dogs run]"), dogs_run()), Verdict::kOther);
  Derivation trans = annotate(
      {{"the", Pos::kDet}, {"dog", Pos::kNoun}, {"kicks", Pos::kVerb}, {"a", Pos::kDet}, {"cat", Pos::kNoun}});
  EXPECT_EQ(classify_det_merge(tree("[[the dog] [kicks [a cat]]]"), trans), Verdict::kDetN);
  EXPECT_EQ(classify_det_merge(tree("[the [[dog kicks] [a cat]]]"), trans), Verdict::kNVp);
  EXPECT_EQ(classify_det_merge(tree("[the [dog [kicks [a cat]]]]"), trans), Verdict::kNVp);
  EXPECT_EQ(classify_det_merge(tree("[[the dog kicks] [a cat]]"), trans), Verdict::kOther);
}

TEST(Classify, Adjectives) {
  EXPECT_EQ(classify_adj_merge(tree("[[[the big] dog] runs]"), big_dog_runs()), Verdict::kDetAdj);
  EXPECT_EQ(classify_adj_merge(tree("[[the [big dog]] runs]"), big_dog_runs()), Verdict::kAdjN);
  EXPECT_EQ(classify_adj_merge(tree("[[the big dog] runs]"), big_dog_runs()), Verdict::kOther);
}

TEST(Classify, RelativeClauses) {
  // dogs that chase the cat run
  ParseTree t = tree("[[dogs [that [chase [the cat]]]] run]");
  EXPECT_TRUE(relclause_constituent(t, {1, 5}));
  ParseTree split = tree("[[dogs that] [[chase [the cat]] run]]");
  EXPECT_FALSE(relclause_constituent(split, {1, 5}));
  EXPECT_FALSE(relclause_constituent(t, {1, 2}));
}

TEST(Classify, InvariantUnderRelabeling) {
  Grammar g = Grammar::builtin();
  std::mt19937_64 rng(4);
  for (int i = 0; i < 200; ++i) {
    SurveyItem item = make_survey_item(g, SurveyPattern::kDet, i % 4, rng);
    const int n = static_cast<int>(item.sentence.tokens.size());
    std::string right;
    for (int k = 0; k < n; ++k) right += (k + 1 < n ? "[" : "") + std::string("x") + (k + 1 < n ? " " : "");
    right += std::string(n - 1, ']');
    ParseTree rt = tree(right);
    Derivation other = item.sentence;
    for (auto& t : other.tokens) t.surface = t.stem = "z" + t.stem;
    EXPECT_EQ(classify_det_merge(rt, item.sentence), classify_det_merge(rt, other));
  }
}

TEST(Binomial, MatchesEnumeration) {
  for (int n = 0; n <= 20; ++n)
    for (int k = 0; k <= n; ++k) EXPECT_NEAR(binomial_two_sided(k, n), enumerate_binomial(k, n), 1e-12) << k << "/" << n;
}

TEST(Binomial, ExtremeTail) {
  EXPECT_LT(binomial_two_sided(68, 75), 1e-12);
  // Far below the smallest double.
  EXPECT_EQ(binomial_two_sided(5000, 5550), 0.0);
  EXPECT_EQ(binomial_two_sided(5550, 5550), binomial_two_sided(0, 5550));
  EXPECT_EQ(binomial_two_sided(0, 0), 1.0);
}

TEST(Survey, ItemsFollowTheirPattern) {
  Grammar g = Grammar::builtin();
  std::mt19937_64 rng(5);
  for (int row = 0; row < 4; ++row) {
    for (int i = 0; i < 50; ++i) {
      auto det = make_survey_item(g, SurveyPattern::kDet, row, rng);
      const auto& t = det.sentence.tokens;
      ASSERT_EQ(t[0].pos, Pos::kDet);
      ASSERT_EQ(t[1].pos, Pos::kNoun);
      ASSERT_EQ(t[2].pos, Pos::kVerb);
      ASSERT_EQ(t[1].number, row % 2 == 0 ? Number::kSg : Number::kPl);
      ASSERT_EQ(t.size() > 3, row >= 2);
      ASSERT_TRUE(hierarchical_valid(det.sentence));
      auto adj = make_survey_item(g, SurveyPattern::kAdj, row, rng);
      ASSERT_EQ(adj.sentence.tokens[1].pos, Pos::kAdj);
      ASSERT_EQ(adj.sentence.tokens[2].pos, Pos::kNoun);
      auto rel = make_survey_item(g, SurveyPattern::kRel, row, rng);
      ASSERT_GE(rel.clause.first, 0);
      ASSERT_EQ(rel.sentence.tokens[rel.clause.first].pos, Pos::kRelativizer);
    }
  }
}

TEST(Survey, PartitionAndSchema) {
  Grammar g = Grammar::builtin();
  std::mt19937_64 shape(1);
  // A parser that returns a random binary tree.
  auto parse = [&](const std::vector<std::string>& w) {
    std::vector<std::vector<double>> layer(1, std::vector<double>(w.size() - 1));
    std::uniform_real_distribution<double> u(0, 1);
    for (auto& a : layer[0]) a = u(shape);
    MergeLadder l{static_cast<std::int64_t>(w.size()), layer};
    return extract(l, 0.8);
  };
  for (SurveyPattern p : {SurveyPattern::kDet, SurveyPattern::kAdj, SurveyPattern::kRel}) {
    SurveyTable t = run_survey(g, p, 400, 9, parse);
    EXPECT_EQ(t.total(), 400);
    std::stringstream ss;
    write_survey_csv(ss, t);
    std::string header;
    std::getline(ss, header);
    EXPECT_EQ(header, "row," + t.columns[0] + "," + t.columns[1] + ",other,n,p_value");
    int lines = 0;
    for (std::string line; std::getline(ss, line);) ++lines;
    EXPECT_EQ(lines, 4);
    EXPECT_EQ(t.rows[0].label, "Sing. subject, intrans.");
  }
  EXPECT_EQ(default_survey_size(SurveyPattern::kDet), 5550);
  EXPECT_EQ(default_survey_size(SurveyPattern::kAdj), 5400);
  EXPECT_EQ(default_survey_size(SurveyPattern::kRel), 1882);
}

TEST(Survey, ModelSurveyIsDeterministic) {
  Grammar g = Grammar::builtin();
  Vocabulary v = grammar_vocabulary(g);
  ModelConfig c;
  c.num_layers = 2;
  c.hidden_size = 16;
  c.num_heads = 2;
  c.ffn_size = 32;
  c.vocab_size = v.size();
  Encoder m(c, 3);
  SurveyTable a = run_survey(m, v, g, SurveyPattern::kDet, 64, 4);
  SurveyTable b = run_survey(m, v, g, SurveyPattern::kDet, 64, 4);
  EXPECT_EQ(a.total(), 64);
  for (int r = 0; r < 4; ++r) {
    EXPECT_EQ(a.rows[r].first, b.rows[r].first);
    EXPECT_EQ(a.rows[r].second, b.rows[r].second);
  }
}

TEST(Profile, ReferenceAndMonotoneMeans) {
  MergeLadder l{4, {{0.5, 0.4, 0.6}, {0.75, 0.7, 0.8}, {0.9, 0.85, 0.9}}};
  auto prof = breakpoint_profile({l, l});
  ASSERT_EQ(prof.size(), 3u);
  EXPECT_NEAR(prof[0].mean, 0.5, 1e-15);
  EXPECT_NEAR(prof[1].mean, 0.75, 1e-15);
  EXPECT_DOUBLE_EQ(prof[0].reference, 0.5);
  EXPECT_DOUBLE_EQ(prof[2].reference, 0.875);
  EXPECT_EQ(prof[0].count, 6u);
  EXPECT_NEAR(prof[0].stddev, std::sqrt(2.0 / 300.0), 1e-12);
}

TEST(Profile, UntrainedModelStartsNearHalf) {
  Grammar g = Grammar::builtin();
  Vocabulary v = grammar_vocabulary(g);
  ModelConfig c;
  c.vocab_size = v.size();
  Encoder m(c, 3);
  std::mt19937_64 rng(2);
  std::vector<std::vector<std::string>> corpus;
  for (int i = 0; i < 64; ++i) corpus.push_back(sample(g, rng).words());
  auto prof = breakpoint_profile(m, v, corpus);
  ASSERT_EQ(prof.size(), 4u);
  // Near-equal scores give 1/2 per link, except that a sentence's first and
  // last words own a single link (probability 1), so their pairs start at
  // sqrt(1/2) and a two-word sentence at 1.
  double expected = 0.0, pairs = 0.0;
  for (const auto& s : corpus) {
    const double n = static_cast<double>(s.size());
    if (n == 2) expected += 1.0;
    else if (n > 2) expected += 2 * std::sqrt(0.5) + (n - 3) * 0.5;
    pairs += n - 1;
  }
  EXPECT_NEAR(prof[0].mean, expected / pairs, 0.03);
  auto lad = ladders(m, v, corpus);
  double interior = 0.0;
  std::size_t count = 0;
  for (const auto& l : lad)
    for (std::size_t k = 1; k + 1 < l.layers[0].size(); ++k, ++count)
      interior += l.layers[0][k];
  ASSERT_GT(count, 0u);
  EXPECT_NEAR(interior / count, 0.5, 0.03);
  for (std::size_t l = 1; l < prof.size(); ++l) EXPECT_GE(prof[l].mean, prof[l - 1].mean);
}
