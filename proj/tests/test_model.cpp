#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <map>

#include "reference.hpp"
#include "support.hpp"
#include "treetf/agreement.hpp"
#include "treetf/gradcheck.hpp"
#include "treetf/harness.hpp"
#include "treetf/model.hpp"
#include "treetf/vocab.hpp"

using namespace treetf;

namespace {

Vocabulary small_vocab() { return Vocabulary({"we", "kiss", "a", "duck", "the", "dogs", "run", "cat", "sleeps"}); }

ModelConfig small_config(int vocab, bool bypass = false) {
  ModelConfig c;
  c.num_layers = 2;
  c.hidden_size = 16;
  c.num_heads = 2;
  c.ffn_size = 32;
  c.max_seq_len = 16;
  c.vocab_size = vocab;
  c.gate_bypass = bypass;
  return c;
}

Batch encode_batch(const Vocabulary& v, const std::vector<std::vector<std::string>>& sents) {
  std::vector<std::vector<std::int64_t>> ids;
  for (const auto& s : sents) ids.push_back(v.encode(s));
  return Batch::from_sequences(ids);
}

}  // namespace

TEST(Vocabulary, EncodeExample) {
  Vocabulary v = small_vocab();
  std::vector<std::string> s{"we", "kiss", "a", "duck"};
  auto ids = v.encode(s, 8);
  ASSERT_EQ(ids.size(), 8u);
  EXPECT_EQ(ids[0], Vocabulary::kCls);
  EXPECT_EQ(v.token(ids[1]), "we");
  EXPECT_EQ(v.token(ids[4]), "duck");
  EXPECT_EQ(ids[5], Vocabulary::kSep);
  EXPECT_EQ(ids[6], Vocabulary::kPad);
  EXPECT_EQ(ids[7], Vocabulary::kPad);
  EXPECT_EQ(v.decode(ids), s);
  std::vector<std::string> unk{"we", "zebra"};
  EXPECT_EQ(v.encode(unk)[2], Vocabulary::kUnk);
  EXPECT_THROW(v.encode(std::vector<std::string>{}), std::invalid_argument);
}

TEST(Vocabulary, RoundTripOverGrammarVocabulary) {
  Grammar g = Grammar::builtin();
  Vocabulary v = grammar_vocabulary(g);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 500; ++i) {
    auto words = sample(g, rng).words();
    EXPECT_EQ(v.decode(v.encode(words)), words);
  }
}

TEST(Mlm, SelectionRate) {
  std::vector<std::int64_t> ids(10000);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = 5 + static_cast<std::int64_t>(i % 20);
  auto m = mask_for_mlm(ids, 0.15, 25, 3);
  int selected = 0, masked = 0, unchanged = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (m.labels[i] == kIgnoreIndex) {
      ASSERT_EQ(m.ids[i], ids[i]);
      continue;
    }
    ++selected;
    ASSERT_EQ(m.labels[i], ids[i]);
    if (m.ids[i] == Vocabulary::kMask) ++masked;
    if (m.ids[i] == ids[i]) ++unchanged;
  }
  EXPECT_NEAR(selected, 1500, 120);
  EXPECT_NEAR(double(masked) / selected, 0.8, 0.05);
  EXPECT_GT(unchanged, 0);
}

TEST(Mlm, SpecialsNeverSelectedAndDeterministic) {
  std::vector<std::int64_t> ids{Vocabulary::kCls, 5, 6, 7, Vocabulary::kSep, Vocabulary::kPad};
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto m = mask_for_mlm(ids, 0.5, 10, seed);
    EXPECT_EQ(m.labels[0], kIgnoreIndex);
    EXPECT_EQ(m.labels[4], kIgnoreIndex);
    EXPECT_EQ(m.labels[5], kIgnoreIndex);
    auto again = mask_for_mlm(ids, 0.5, 10, seed);
    EXPECT_EQ(m.ids, again.ids);
    EXPECT_EQ(m.labels, again.labels);
  }
  auto none = mask_for_mlm(ids, 1e-12, 10, 1);
  for (auto l : none.labels) EXPECT_EQ(l, kIgnoreIndex);
}

TEST(Encoder, ConfigValidation) {
  ModelConfig c = small_config(12);
  c.num_heads = 3;
  EXPECT_THROW(Encoder(c, 1), std::invalid_argument);
  EXPECT_THROW(Encoder(small_config(3), 1), std::invalid_argument);
}

TEST(Encoder, IdOutOfRange) {
  Encoder m(small_config(14), 1);
  Batch b = Batch::from_sequences({{Vocabulary::kCls, 20, Vocabulary::kSep}});
  EXPECT_THROW(m.forward(b), std::out_of_range);
}

TEST(Encoder, BypassMatchesPlainEncoderBitExactly) {
  Vocabulary v = small_vocab();
  Encoder bypass(small_config(v.size(), true), 42);
  Encoder gated(small_config(v.size(), false), 42);
  Batch b = encode_batch(v, {{"we", "kiss", "a", "duck"}, {"the", "dogs", "run"}});
  Tensor ours = bypass.forward(b).hidden;
  Tensor ref = treetf::testing::plain_reference(bypass, b);
  ASSERT_EQ(ours.shape(), ref.shape());
  for (std::int64_t i = 0; i < ref.numel(); ++i) ASSERT_EQ(ours[i], ref[i]);
  // Shared seeds give shared weights, so the gated model differs only through the gate.
  EXPECT_EQ(bypass.snapshot(), gated.snapshot());
  EXPECT_TRUE(bypass.forward(b).merge.empty());
  EXPECT_EQ(gated.forward(b).merge.size(), 2u);
}

TEST(Encoder, PaddingInvariance) {
  Vocabulary v = small_vocab();
  Encoder m(small_config(v.size()), 7);
  std::vector<std::int64_t> ids = v.encode(std::vector<std::string>{"the", "dogs", "run"});
  Tensor alone = m.forward(Batch::from_sequences({ids})).hidden;
  std::vector<std::int64_t> longer = v.encode(std::vector<std::string>{"we", "kiss", "a", "duck", "the", "cat"});
  auto out = m.forward(Batch::from_sequences({ids, longer}));
  const std::int64_t h = 16, T = out.hidden.dim(1);
  for (std::size_t t = 0; t < ids.size(); ++t)
    for (std::int64_t j = 0; j < h; ++j) ASSERT_NEAR(out.hidden[t * h + j], alone[t * h + j], 1e-10);
  auto ladder_alone = Encoder::ladder_for(m.forward(Batch::from_sequences({ids})), 0);
  auto ladder_padded = Encoder::ladder_for(out, 0);
  ASSERT_EQ(ladder_alone.tokens, 3);
  for (int l = 0; l < 2; ++l)
    for (int k = 0; k < 2; ++k) EXPECT_NEAR(ladder_alone.layers[l][k], ladder_padded.layers[l][k], 1e-10);
  (void)T;
}

TEST(Encoder, BatchPermutation) {
  Vocabulary v = small_vocab();
  Encoder m(small_config(v.size()), 9);
  std::vector<std::vector<std::string>> s{{"we", "kiss", "a", "duck"}, {"the", "dogs", "run"}, {"a", "cat", "sleeps"}};
  auto fwd = m.forward(encode_batch(v, s)).hidden;
  auto rev = m.forward(encode_batch(v, {s[2], s[1], s[0]})).hidden;
  const std::int64_t T = fwd.dim(1), h = 16;
  for (int i = 0; i < 3; ++i)
    for (std::int64_t j = 0; j < T * h; ++j) ASSERT_NEAR(fwd[i * T * h + j], rev[(2 - i) * T * h + j], 1e-12);
}

TEST(Encoder, LadderIsMonotoneAndDegenerateSpanIsEmpty) {
  Vocabulary v = small_vocab();
  ModelConfig c = small_config(v.size());
  c.num_layers = 4;
  c.init_std = 0.5;
  Encoder m(c, 11);
  auto out = m.forward(encode_batch(v, {{"we", "kiss", "a", "duck", "the", "cat"}, {"run"}}));
  auto ladder = Encoder::ladder_for(out, 0);
  ASSERT_EQ(ladder.layers.size(), 4u);
  for (std::size_t l = 1; l < 4; ++l)
    for (std::size_t k = 0; k < 5; ++k) EXPECT_GE(ladder.layers[l][k], ladder.layers[l - 1][k]);
  auto single = Encoder::ladder_for(out, 1);
  EXPECT_EQ(single.tokens, 1);
  for (const auto& layer : single.layers) EXPECT_TRUE(layer.empty());
}

TEST(Encoder, FullModelGradient) {
  Vocabulary v = small_vocab();
  ModelConfig c = small_config(v.size());
  c.max_seq_len = 8;
  c.init_std = 0.3;
  Encoder m(c, 5);
  Batch b = encode_batch(v, {{"we", "kiss", "a", "duck"}, {"the", "dogs", "run"}});
  // Key biases shift every score of a query row (and both links of a token)
  // equally, so their gradient is exactly zero and a relative error on them
  // only measures roundoff; they are checked for a zero gradient instead.
  std::vector<Tensor> params, key_biases;
  for (const auto& [n, t] : m.parameters()) (n.ends_with("k.bias") ? key_biases : params).push_back(t);
  std::function<Tensor()> f = [&] {
    auto out = m.forward(b);
    Tensor loss = cross_entropy(m.classify(out.hidden), std::vector<std::int64_t>{0, 1});
    return add(loss, scale(treetf::testing::weighted_sum(out.hidden, 3), 0.1));
  };
  EXPECT_LT(gradient_check(f, params, 1e-5), 1e-4);
  f().backward();
  for (const auto& t : key_biases)
    for (double g : t.grad()) EXPECT_LT(std::abs(g), 1e-12);
}

TEST(Encoder, UntrainedMlmLossIsNearLogVocab) {
  Grammar g = Grammar::builtin();
  Vocabulary v = grammar_vocabulary(g);
  ModelConfig c;
  c.vocab_size = v.size();
  Encoder m(c, 3);
  std::mt19937_64 rng(4);
  std::vector<std::vector<std::int64_t>> seqs;
  for (int i = 0; i < 16; ++i) seqs.push_back(v.encode(sample(g, rng).words()));
  Batch b = Batch::from_sequences(seqs);
  std::vector<std::int64_t> labels(b.ids.size(), kIgnoreIndex);
  for (std::size_t i = 0; i < b.ids.size(); ++i)
    if (!Vocabulary::is_special(b.ids[i])) labels[i] = b.ids[i];
  const double loss = m.mlm_loss(m.forward(b).hidden, labels).item();
  EXPECT_NEAR(loss, std::log(double(v.size())), 0.1 * std::log(double(v.size())));
}

TEST(Encoder, AllIgnoredLabelsGiveZeroLoss) {
  Vocabulary v = small_vocab();
  Encoder m(small_config(v.size()), 3);
  Batch b = encode_batch(v, {{"we", "kiss"}});
  std::vector<std::int64_t> labels(b.ids.size(), kIgnoreIndex);
  EXPECT_EQ(m.mlm_loss(m.forward(b).hidden, labels).item(), 0.0);
}

TEST(Encoder, PerfectPredictionHasTinyLoss) {
  Tensor logits = Tensor::from({2, 2}, {40.0, -40.0, -40.0, 40.0});
  EXPECT_LE(cross_entropy(logits, std::vector<std::int64_t>{0, 1}).item(), 1e-6);
}

TEST(Encoder, NullModelAccuracyOnBalancedSplit) {
  Grammar g = Grammar::builtin();
  Vocabulary v = grammar_vocabulary(g);
  auto ds = build_dataset(g, SettingSpec::defaults(Setting::kId), 5);
  ModelConfig c;
  c.vocab_size = v.size();
  Encoder m(c, 6);
  EXPECT_NEAR(evaluate(m, v, ds.test).accuracy(), 0.5, 0.05);
}

TEST(Encoder, DeterministicForwardWithDropout) {
  Vocabulary v = small_vocab();
  Encoder m(small_config(v.size()), 2);
  Batch b = encode_batch(v, {{"we", "kiss", "a", "duck"}});
  std::mt19937_64 r1(8), r2(8);
  Tensor x = m.forward(b, {true, &r1}).hidden, y = m.forward(b, {true, &r2}).hidden;
  for (std::int64_t i = 0; i < x.numel(); ++i) ASSERT_EQ(x[i], y[i]);
  EXPECT_THROW(m.forward(b, {true, nullptr}), std::invalid_argument);
}

TEST(Checkpoint, RoundTrip) {
  Vocabulary v = small_vocab();
  Encoder m(small_config(v.size()), 12);
  Checkpoint ck = m.to_checkpoint(v);
  Checkpoint back = decode_checkpoint(encode_checkpoint(ck));
  Vocabulary v2;
  Encoder m2 = Encoder::from_checkpoint(back, &v2);
  EXPECT_EQ(v2.tokens(), v.tokens());
  EXPECT_EQ(m2.snapshot(), m.snapshot());
  Batch b = encode_batch(v, {{"the", "dogs", "run"}});
  Tensor x = m.forward(b).hidden, y = m2.forward(b).hidden;
  for (std::int64_t i = 0; i < x.numel(); ++i) ASSERT_EQ(x[i], y[i]);
}

TEST(Checkpoint, CorruptInputIsRejected) {
  Vocabulary v = small_vocab();
  Encoder m(small_config(v.size()), 12);
  std::string bytes = encode_checkpoint(m.to_checkpoint(v));
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() / 2)), CheckpointError);
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), CheckpointError);
}
