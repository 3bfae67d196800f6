#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "support.hpp"
#include "treetf/constituent.hpp"
#include "treetf/gradcheck.hpp"

using namespace treetf;
using treetf::testing::random_tensor;
using treetf::testing::uniform;
using treetf::testing::weighted_sum;

TEST(LinkScores, Examples) {
  // Orthogonal query/key.
  std::vector<double> q{1, 0, 0, 1}, k{0, 1, 0, 1};
  auto s = link_scores(q, k, 2, 2, 2.0);
  ASSERT_EQ(s.right.size(), 1u);
  EXPECT_EQ(s.right[0], 0.0);

  std::vector<double> q64(2 * 64, 0.0), k64(2 * 64, 0.0);
  q64[0] = 1;
  k64[64] = 1;
  auto s64 = link_scores(q64, k64, 2, 64, 64.0);
  EXPECT_DOUBLE_EQ(s64.right[0], 1.0 / 64.0);

  std::vector<std::uint8_t> content{1, 0};
  auto masked = link_scores(q64, k64, 2, 64, 64.0, content);
  EXPECT_EQ(masked.right[0], kMaskSentinel);
  EXPECT_EQ(masked.left[0], kMaskSentinel);
}

TEST(LinkScores, TooShort) {
  std::vector<double> q{1, 2};
  EXPECT_THROW(link_scores(q, q, 1, 2, 1.0), SequenceTooShort);
  Tensor t = Tensor::zeros({1, 1, 2});
  EXPECT_THROW(link_scores(t, t, TokenMask::all_content(1, 1), 1.0), SequenceTooShort);
}

TEST(LinkProbs, Examples) {
  // Three tokens: token 1 has both links.
  LinkScores eq{{0.3, 0.0}, {0.0, 0.3}};
  auto p = link_probs(eq);
  EXPECT_DOUBLE_EQ(p.right[0], 1.0);  // token 0 has only a right link
  EXPECT_NEAR(p.right[1], 0.5, 1e-15);
  EXPECT_NEAR(p.left[0], 0.5, 1e-15);
  EXPECT_DOUBLE_EQ(p.left[1], 1.0);  // last token has only a left link

  LinkScores odds{{0.0, std::log(3.0)}, {0.0, 0.0}};
  auto q = link_probs(odds);
  EXPECT_NEAR(q.right[1], 0.75, 1e-15);
  EXPECT_NEAR(q.left[0], 0.25, 1e-15);
}

TEST(MergeProbs, Examples) {
  LinkProbs p{{1.0, 0.5, 0.9}, {1.0, 0.5, 0.4}};
  auto a = merge_probs(p);
  EXPECT_DOUBLE_EQ(a[0], 1.0);
  EXPECT_DOUBLE_EQ(a[1], 0.5);
  EXPECT_NEAR(a[2], 0.6, 1e-15);
}

TEST(MergeProbs, SameTokenIndexVariant) {
  // Literal variant pairs token k's right link with token k's left link.
  LinkProbs p{{0.8, 0.3}, {0.6, 0.9}};
  auto a = merge_probs(p, MergeIndex::kSameToken);
  // Token 0 has no left link, so its left probability is 0.
  EXPECT_EQ(a[0], 0.0);
  // Token 1: right 0.3, left p(1 -> 0) = 0.6.
  EXPECT_NEAR(a[1], std::sqrt(0.3 * 0.6), 1e-15);
}

TEST(ComposeLayers, Examples) {
  std::vector<double> hat{0.3, 0.9, 0.5};
  EXPECT_EQ(compose_layers(hat, {}), hat);
  std::vector<double> prev{0.0, 1.0, 0.5};
  auto a = compose_layers(hat, prev);
  EXPECT_DOUBLE_EQ(a[0], 0.3);
  EXPECT_DOUBLE_EQ(a[1], 1.0);
  EXPECT_DOUBLE_EQ(a[2], 0.75);
}

TEST(ConstituentPrior, Examples) {
  std::vector<double> a{0.5, 0.5};
  auto c = constituent_prior(a);
  ASSERT_EQ(c.size(), 9u);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(c[i * 3 + i], 1.0);
  EXPECT_EQ(c[0 * 3 + 1], 0.5);
  EXPECT_EQ(c[0 * 3 + 2], 0.25);
  EXPECT_EQ(c[2 * 3 + 0], 0.25);
}

TEST(ConstituentPrior, UnderflowFlushesToZero) {
  std::vector<double> a(400, 1e-2);
  auto c = constituent_prior(a);
  const std::size_t n = 401;
  EXPECT_EQ(c[0 * n + 400], 0.0);
  EXPECT_GT(c[0 * n + 10], 0.0);
}

// Pure-form invariants over 10k random configurations.
TEST(ConstituentInvariants, RandomConfigurations) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> len(2, 12), dim(1, 8);
  for (int trial = 0; trial < 10000; ++trial) {
    const int n = len(rng), d = dim(rng);
    const auto q = uniform(n * d, rng, -3, 3), k = uniform(n * d, rng, -3, 3);
    auto s = link_scores(q, k, n, d, d);
    auto p = link_probs(s);
    for (int i = 1; i + 1 < n; ++i) ASSERT_NEAR(p.right[i] + p.left[i - 1], 1.0, 1e-12);
    ASSERT_EQ(p.right[0], 1.0);
    ASSERT_EQ(p.left[n - 2], 1.0);
    auto hat = merge_probs(p);
    std::vector<double> prev = uniform(n - 1, rng, 0, 1);
    auto a = compose_layers(hat, prev);
    for (int i = 0; i + 1 < n; ++i) {
      ASSERT_GE(hat[i], 0.0);
      ASSERT_LE(hat[i], 1.0);
      ASSERT_GE(a[i], prev[i]);
      ASSERT_LE(a[i], 1.0);
    }
    auto c = constituent_prior(a);
    for (int i = 0; i < n; ++i) {
      ASSERT_EQ(c[i * n + i], 1.0);
      for (int j = 0; j < n; ++j) {
        ASSERT_GE(c[i * n + j], 0.0);
        ASSERT_LE(c[i * n + j], 1.0);
        ASSERT_EQ(c[i * n + j], c[j * n + i]);
      }
    }
    for (int i = 0; i < n; ++i)
      for (int j = i; j < n; ++j)
        for (int m = j; m < n; ++m) ASSERT_NEAR(c[i * n + m], c[i * n + j] * c[j * n + m], 1e-10);
  }
}

TEST(BatchedForms, AgreeWithPureForms) {
  std::mt19937_64 rng(5);
  const int b = 2, t = 6, d = 4;
  Tensor q = random_tensor({b, t, d}, rng, -2, 2), k = random_tensor({b, t, d}, rng, -2, 2);
  TokenMask mask = TokenMask::all_content(b, t);
  auto s = link_scores(q, k, mask, d);
  auto p = link_probs(s);
  Tensor hat = merge_probs(p);
  for (int row = 0; row < b; ++row) {
    std::span<const double> qs(q.data().data() + row * t * d, t * d), ks(k.data().data() + row * t * d, t * d);
    auto ref = merge_probs(link_probs(link_scores(qs, ks, t, d, d)));
    for (int i = 0; i + 1 < t; ++i) EXPECT_NEAR(hat[row * (t - 1) + i], ref[i], 1e-14);
  }
}

TEST(ConstituentGate, SpecialsAreUngated) {
  TokenMask mask = TokenMask::all_content(1, 5);
  mask.content[0] = 0;  // [CLS]
  mask.content[4] = 0;  // [SEP]
  Tensor merge = Tensor::from({1, 4}, {0.9, 0.5, 0.5, 0.9});
  Tensor gate = constituent_gate(merge, mask);
  ASSERT_EQ(gate.shape(), (Shape{1, 1, 5, 5}));
  auto at = [&](int i, int j) { return gate[i * 5 + j]; };
  for (int j = 0; j < 5; ++j) {
    EXPECT_EQ(at(0, j), 1.0);
    EXPECT_EQ(at(j, 4), 1.0);
  }
  EXPECT_EQ(at(1, 2), 0.5);
  EXPECT_EQ(at(1, 3), 0.25);
  EXPECT_EQ(at(3, 1), 0.25);
}

TEST(GatedAttention, AllOnesGateIsStandardAttention) {
  std::mt19937_64 rng(8);
  Tensor q = random_tensor({1, 2, 5, 4}, rng), k = random_tensor({1, 2, 5, 4}, rng), v = random_tensor({1, 2, 5, 4}, rng);
  TokenMask mask = TokenMask::all_content(1, 5);
  Tensor bias = padding_bias(mask);
  auto gated = gated_attention(q, k, v, Tensor::full({1, 1, 5, 5}, 1.0), bias, 2.0);
  auto plain = gated_attention(q, k, v, Tensor(), bias, 2.0);
  for (std::int64_t i = 0; i < plain.context.numel(); ++i) EXPECT_EQ(gated.context[i], plain.context[i]);
}

TEST(GatedAttention, IdentityGateCopiesValues) {
  std::mt19937_64 rng(9);
  const int t = 5;
  std::vector<double> eye(t * t, 0.0);
  for (int i = 0; i < t; ++i) eye[i * t + i] = 1.0;
  // Self scores of 1/1e-3 push the diagonal softmax weight to 1.
  Tensor qk = Tensor::from({1, 1, t, t}, eye);
  Tensor v = random_tensor({1, 1, t, t}, rng);
  auto r = gated_attention(qk, qk, v, Tensor::from({1, 1, t, t}, eye), padding_bias(TokenMask::all_content(1, t)), 1e-3);
  for (std::int64_t i = 0; i < v.numel(); ++i) EXPECT_NEAR(r.context[i], v[i], 1e-12);
}

TEST(GatedAttention, RowSumBounds) {
  std::mt19937_64 rng(10);
  const int t = 6, d = 16;
  for (int trial = 0; trial < 200; ++trial) {
    Tensor q = random_tensor({1, 1, t, d}, rng), k = random_tensor({1, 1, t, d}, rng), v = random_tensor({1, 1, t, d}, rng);
    auto a = uniform(t - 1, rng, 0, 1);
    auto c = constituent_prior(a);
    Tensor gate = Tensor::from({1, 1, t, t}, c);
    Tensor bias = padding_bias(TokenMask::all_content(1, t));
    auto gated = gated_attention(q, k, v, gate, bias, d);
    auto plain = gated_attention(q, k, v, Tensor(), bias, d);
    for (int i = 0; i < t; ++i) {
      double sum = 0.0, best = -1.0;
      int arg = 0;
      for (int j = 0; j < t; ++j) {
        sum += gated.probs[i * t + j];
        if (plain.probs[i * t + j] > best) best = plain.probs[i * t + j], arg = j;
      }
      ASSERT_LE(sum, 1.0 + 1e-12);
      ASSERT_GE(sum, c[i * t + arg] * best - 1e-15);
    }
  }
}

TEST(GatedAttention, PaddingGetsNoWeight) {
  std::mt19937_64 rng(11);
  TokenMask mask = TokenMask::all_content(1, 4);
  mask.pad[3] = 1;
  mask.content[3] = 0;
  Tensor q = random_tensor({1, 1, 4, 2}, rng), k = random_tensor({1, 1, 4, 2}, rng), v = random_tensor({1, 1, 4, 2}, rng);
  auto r = gated_attention(q, k, v, Tensor(), padding_bias(mask), 1.0);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(r.probs[i * 4 + 3], 0.0);
}

TEST(GatedAttention, HeadMismatch) {
  Tensor q = Tensor::zeros({1, 2, 3, 2}), k = Tensor::zeros({1, 3, 3, 2});
  EXPECT_THROW(gated_attention(q, k, q, Tensor(), padding_bias(TokenMask::all_content(1, 3)), 1.0), DimensionError);
}

// Gradient through link scores -> probs -> merge -> compose -> gate ->
// gated attention, checked against central differences.
TEST(GatedAttention, CompositeGradient) {
  std::mt19937_64 rng(12);
  const int t = 8, d = 32;
  TokenMask mask = TokenMask::all_content(1, t);
  mask.content[0] = 0;
  mask.content[t - 1] = 0;
  Tensor bias = padding_bias(mask);
  Tensor prev = Tensor::from({1, t - 1}, uniform(t - 1, rng, 0, 0.5));
  Tensor lq = random_tensor({1, t, d}, rng), lk = random_tensor({1, t, d}, rng);
  Tensor aq = random_tensor({1, 1, t, d}, rng), ak = random_tensor({1, 1, t, d}, rng), av = random_tensor({1, 1, t, d}, rng);
  auto f = [&](const Tensor& x) {
    Tensor q = add(reshape(x, {1, t, d}), lq);
    auto s = link_scores(q, lk, mask, std::sqrt(double(d)));
    Tensor merge = compose_layers(merge_probs(link_probs(s)), prev);
    Tensor gate = constituent_gate(merge, mask);
    auto r = gated_attention(add(aq, reshape(x, {1, 1, t, d})), ak, av, gate, bias, d);
    return weighted_sum(r.context, 77);
  };
  Tensor x = random_tensor({1, t, d}, rng, -0.5, 0.5);
  EXPECT_LT(gradient_check(f, x, 1e-5), 1e-4);
}

TEST(Ladder, TextRoundTrip) {
  std::mt19937_64 rng(13);
  std::stringstream ss;
  std::vector<MergeLadder> written;
  for (int r = 0; r < 5; ++r) {
    MergeLadder l;
    l.tokens = 3 + r;
    for (int layer = 0; layer < 4; ++layer) l.layers.push_back(uniform(l.tokens - 1, rng, 0, 1));
    write_ladder(ss, l);
    written.push_back(l);
  }
  MergeLadder back;
  for (const auto& l : written) {
    ASSERT_TRUE(read_ladder(ss, back));
    EXPECT_EQ(back.tokens, l.tokens);
    EXPECT_EQ(back.layers, l.layers);
  }
  EXPECT_FALSE(read_ladder(ss, back));
}

TEST(Ladder, StateFromLadder) {
  MergeLadder l{3, {{0.5, 0.2}, {0.5, 0.6}}};
  auto st = ConstituentState::from_ladder(l, 1);
  EXPECT_EQ(st.layer_index, 1);
  EXPECT_EQ(st.merge_probs, (std::vector<double>{0.5, 0.6}));
  EXPECT_DOUBLE_EQ(st.prior[0 * 3 + 2], 0.3);
}
