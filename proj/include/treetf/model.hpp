#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "treetf/checkpoint.hpp"
#include "treetf/constituent.hpp"
#include "treetf/tensor.hpp"
#include "treetf/vocab.hpp"

namespace treetf {

struct ModelConfig {
  int num_layers = 4;
  int hidden_size = 128;
  int num_heads = 4;
  int ffn_size = 512;
  int max_seq_len = 128;
  int vocab_size = 0;
  double dropout_rate = 0.1;
  ScaleMode attention_scale_mode = ScaleMode::kLinear;
  bool tie_link_weights_across_layers = false;
  bool gate_bypass = false;
  MergeIndex merge_index = MergeIndex::kAdjacent;
  double init_std = 0.02;
  double layer_norm_eps = 1e-12;

  /// Throws std::invalid_argument when the configuration is unusable.
  void validate() const;

  /// 12 layers, hidden 768, 12 heads, 512 positions.
  static ModelConfig full_base(int vocab_size);
  /// 4 layers, hidden 128, 4 heads, sqrt(d_head) attention scaling.
  static ModelConfig desk(int vocab_size);

  std::map<std::string, std::string> to_kv() const;
  /// Unknown keys throw; missing keys keep the defaults.
  static ModelConfig from_kv(const std::map<std::string, std::string>& kv);
};

/// Id sequences padded to a common length.
struct Batch {
  std::int64_t size = 0;
  std::int64_t length = 0;
  std::vector<std::int64_t> ids;  // size x length

  /// Pads every sequence with [PAD] to the longest one.
  static Batch from_sequences(const std::vector<std::vector<std::int64_t>>& seqs);
  TokenMask mask() const;
};

struct ForwardOptions {
  bool train = false;
  std::mt19937_64* rng = nullptr;  // dropout stream; required when train
};

struct EncoderOutput {
  Tensor hidden;               // [B, T, h]
  std::vector<Tensor> merge;   // per layer [B, T-1]; empty under gate_bypass
  TokenMask mask;
};

/// BERT-style encoder whose self-attention is gated by the constituent
/// prior, with a masked-LM head and a [CLS] classification head.
class Encoder {
 public:
  Encoder(const ModelConfig& config, std::uint64_t seed);
  Encoder(const Encoder&) = delete;
  Encoder& operator=(const Encoder&) = delete;
  Encoder(Encoder&&) = default;
  Encoder& operator=(Encoder&&) = default;

  const ModelConfig& config() const { return config_; }

  EncoderOutput forward(const Batch& batch, const ForwardOptions& opts = {}) const;

  /// Logits over the vocabulary for the flattened positions listed.
  Tensor mlm_logits(const Tensor& hidden, std::span<const std::int64_t> positions) const;
  /// Mean cross-entropy over non-ignored labels (batch-major, like ids).
  /// Returns 0 and logs a warning when every label is ignored.
  Tensor mlm_loss(const Tensor& hidden, std::span<const std::int64_t> labels) const;
  /// [B, 2] logits from the [CLS] state through one affine layer.
  Tensor classify(const Tensor& hidden) const;

  std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  /// Deep copy of parameter values (for best-checkpoint restore).
  std::vector<std::vector<double>> snapshot() const;
  void restore(const std::vector<std::vector<double>>& values);

  Checkpoint to_checkpoint(const Vocabulary& vocab, const std::map<std::string, std::string>& extra = {}) const;
  /// Rebuilds the encoder and its vocabulary from a checkpoint.
  static Encoder from_checkpoint(const Checkpoint& ckpt, Vocabulary* vocab = nullptr);

  /// Merge probabilities of one sequence's words, sliced out of a forward
  /// pass (positions between [CLS] and [SEP]).
  static MergeLadder ladder_for(const EncoderOutput& out, std::int64_t row);

 private:
  struct Layer {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln1_g, ln1_b;
    Tensor w1, b1, w2, b2;
    Tensor ln2_g, ln2_b;
    Tensor link_wq, link_bq, link_wk, link_bk;
  };

  Tensor param(const std::string& name, Shape shape, double init, std::mt19937_64* rng);
  Tensor linear_proj(const Tensor& x, const Tensor& w, const Tensor& b) const;

  ModelConfig config_;
  std::vector<std::pair<std::string, Tensor>> params_;
  Tensor word_emb_, pos_emb_, emb_ln_g_, emb_ln_b_;
  std::vector<Layer> layers_;
  Tensor mlm_w_, mlm_b_, cls_w_, cls_b_;
};

}  // namespace treetf
