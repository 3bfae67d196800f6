#pragma once

// Constituent attention: neighbour link scores, two-way link softmax,
// geometric-mean merge probabilities, monotone composition across layers,
// the prefix-product constituent prior, and prior-gated attention.
//
// Indexing convention shared by the pure and the batched forms: pair k joins
// positions k and k+1, so per-pair vectors have length N-1.
//   scores.right[k] = q_k . k_{k+1} / d    (token k looking right)
//   scores.left[k]  = q_{k+1} . k_k / d    (token k+1 looking left)
//   probs.right[k]  = p(k -> k+1), normalized against p(k -> k-1)
//   probs.left[k]   = p(k+1 -> k), normalized against p(k+1 -> k+2)

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "treetf/ops.hpp"
#include "treetf/tensor.hpp"

namespace treetf {

/// Divisor applied to dot-product scores: d itself, or sqrt(d).
enum class ScaleMode { kLinear, kSqrt };

/// Which token's pair of link probabilities feeds the merge probability.
/// kAdjacent uses p(k -> k+1) and p(k+1 -> k); kSameToken uses
/// p(k -> k+1) and p(k -> k-1), the index pattern printed in some
/// write-ups of the mechanism.
enum class MergeIndex { kAdjacent, kSameToken };

/// Products below this magnitude are flushed to zero in the prior.
inline constexpr double kPriorFlush = 1e-300;

/// Word positions of a padded batch. Special tokens and padding are not
/// content; padding is additionally masked out of attention.
struct TokenMask {
  std::int64_t batch = 0;
  std::int64_t length = 0;
  std::vector<std::uint8_t> content;  // batch x length
  std::vector<std::uint8_t> pad;      // batch x length

  bool is_content(std::int64_t b, std::int64_t t) const { return content[b * length + t] != 0; }
  bool is_pad(std::int64_t b, std::int64_t t) const { return pad[b * length + t] != 0; }
  bool pair_is_content(std::int64_t b, std::int64_t k) const { return is_content(b, k) && is_content(b, k + 1); }

  /// Every position is content, no padding.
  static TokenMask all_content(std::int64_t batch, std::int64_t length);
};

class SequenceTooShort : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Pure single-sequence forms.

struct LinkScores {
  std::vector<double> right;
  std::vector<double> left;
};

struct LinkProbs {
  std::vector<double> right;
  std::vector<double> left;
};

/// q and k are N x d row-major. `content` (length N, or empty for all
/// content) marks words; any pair touching a non-word gets kMaskSentinel.
LinkScores link_scores(std::span<const double> q, std::span<const double> k, std::int64_t n, std::int64_t d,
                       double divisor, std::span<const std::uint8_t> content = {});

/// Two-way softmax per token over its existing links. A token with one
/// link gives it probability 1; a token with none gives both 0.
LinkProbs link_probs(const LinkScores& scores);

std::vector<double> merge_probs(const LinkProbs& probs, MergeIndex index = MergeIndex::kAdjacent);

/// a = prev + (1 - prev) * a_hat; an empty `prev` means the first layer.
std::vector<double> compose_layers(std::span<const double> a_hat, std::span<const double> prev);

/// C[i][j] = prod_{k=min(i,j)}^{max(i,j)-1} a_k as an N x N row-major
/// matrix, N = a.size() + 1.
std::vector<double> constituent_prior(std::span<const double> a);

/// Per-layer merge probabilities of one sequence's words.
struct MergeLadder {
  std::int64_t tokens = 0;                 // N
  std::vector<std::vector<double>> layers;  // layers[l] has N-1 entries
};

/// Merge probabilities and prior of one layer, for a single sequence.
struct ConstituentState {
  int layer_index = 0;
  std::vector<double> merge_probs;  // N-1
  std::vector<double> prior;        // N x N

  static ConstituentState from_ladder(const MergeLadder& ladder, int layer);
};

/// Text form: a header line "N L", then L lines of N-1 space-separated
/// values printed with 17 significant digits. Records are concatenated.
void write_ladder(std::ostream& os, const MergeLadder& ladder);
/// Reads the next record; returns false at end of input.
bool read_ladder(std::istream& is, MergeLadder& ladder);

// ---------------------------------------------------------------------------
// Batched differentiable forms. Per-pair tensors have shape [B, T-1].

struct LinkScoreTensors {
  Tensor right;
  Tensor left;
};

struct LinkProbTensors {
  Tensor right;
  Tensor left;
};

/// q, k: [B, T, d]. Throws SequenceTooShort when T < 2.
LinkScoreTensors link_scores(const Tensor& q, const Tensor& k, const TokenMask& mask, double divisor);
LinkProbTensors link_probs(const LinkScoreTensors& scores);
Tensor merge_probs(const LinkProbTensors& probs, MergeIndex index = MergeIndex::kAdjacent);
/// `prev` may be undefined for the first layer.
Tensor compose_layers(const Tensor& a_hat, const Tensor& prev);

/// Attention gate [B, 1, T, T]: the constituent prior between word
/// positions, 1 wherever a special token is involved.
Tensor constituent_gate(const Tensor& merge, const TokenMask& mask);

struct AttentionResult {
  Tensor context;  // [B, H, T, dh]
  Tensor probs;    // [B, H, T, T]
};

/// probs = gate * softmax(Q K^T / divisor + pad_bias); context = probs V.
/// Rows are not renormalized after gating. An undefined gate gives plain
/// attention. pad_bias is [B, 1, 1, T] holding 0 or kMaskSentinel.
AttentionResult gated_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& gate,
                                const Tensor& pad_bias, double divisor);

/// [B, 1, 1, T] additive attention bias masking padded keys.
Tensor padding_bias(const TokenMask& mask);

}  // namespace treetf
