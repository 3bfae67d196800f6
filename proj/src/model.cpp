#include "treetf/model.hpp"

#include <cmath>
#include <iostream>
#include <sstream>

#include "treetf/ops.hpp"
#include "treetf/util.hpp"

namespace treetf {

namespace {

const char* scale_name(ScaleMode m) { return m == ScaleMode::kLinear ? "linear" : "sqrt"; }
const char* merge_name(MergeIndex m) { return m == MergeIndex::kAdjacent ? "adjacent" : "same_token"; }

Tensor split_heads(const Tensor& x, std::int64_t heads) {
  const auto B = x.dim(0), T = x.dim(1), h = x.dim(2);
  return transpose(reshape(x, {B, T, heads, h / heads}), 1, 2);
}

Tensor merge_heads(const Tensor& x) {
  const auto B = x.dim(0), H = x.dim(1), T = x.dim(2), dh = x.dim(3);
  return reshape(transpose(x, 1, 2), {B, T, H * dh});
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("ModelConfig: " + m); };
  if (num_layers < 1) fail("num_layers must be >= 1");
  if (hidden_size < 1 || num_heads < 1) fail("hidden_size and num_heads must be positive");
  if (hidden_size % num_heads != 0) fail("hidden_size must be divisible by num_heads");
  if (ffn_size < 1) fail("ffn_size must be positive");
  if (max_seq_len < 2) fail("max_seq_len must be >= 2");
  if (vocab_size <= Vocabulary::kNumSpecial) fail("vocab_size must exceed the reserved ids");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) fail("dropout_rate must lie in [0, 1)");
  if (init_std <= 0.0) fail("init_std must be positive");
}

ModelConfig ModelConfig::full_base(int vocab_size) {
  ModelConfig c;
  c.num_layers = 12;
  c.hidden_size = 768;
  c.num_heads = 12;
  c.ffn_size = 3072;
  c.max_seq_len = 512;
  c.vocab_size = vocab_size;
  return c;
}

ModelConfig ModelConfig::desk(int vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.attention_scale_mode = ScaleMode::kSqrt;
  return c;
}

std::map<std::string, std::string> ModelConfig::to_kv() const {
  std::map<std::string, std::string> kv;
  kv["num_layers"] = std::to_string(num_layers);
  kv["hidden_size"] = std::to_string(hidden_size);
  kv["num_heads"] = std::to_string(num_heads);
  kv["ffn_size"] = std::to_string(ffn_size);
  kv["max_seq_len"] = std::to_string(max_seq_len);
  kv["vocab_size"] = std::to_string(vocab_size);
  kv["dropout_rate"] = format_double(dropout_rate);
  kv["attention_scale_mode"] = scale_name(attention_scale_mode);
  kv["tie_link_weights_across_layers"] = tie_link_weights_across_layers ? "true" : "false";
  kv["gate_bypass"] = gate_bypass ? "true" : "false";
  kv["merge_index"] = merge_name(merge_index);
  kv["init_std"] = format_double(init_std);
  kv["layer_norm_eps"] = format_double(layer_norm_eps);
  return kv;
}

ModelConfig ModelConfig::from_kv(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  for (const auto& [k, v] : kv) {
    if (k == "num_layers") c.num_layers = parse_int(v, k);
    else if (k == "hidden_size") c.hidden_size = parse_int(v, k);
    else if (k == "num_heads") c.num_heads = parse_int(v, k);
    else if (k == "ffn_size") c.ffn_size = parse_int(v, k);
    else if (k == "max_seq_len") c.max_seq_len = parse_int(v, k);
    else if (k == "vocab_size") c.vocab_size = parse_int(v, k);
    else if (k == "dropout_rate") c.dropout_rate = parse_double(v, k);
    else if (k == "attention_scale_mode") {
      if (v == "linear") c.attention_scale_mode = ScaleMode::kLinear;
      else if (v == "sqrt") c.attention_scale_mode = ScaleMode::kSqrt;
      else throw std::invalid_argument("attention_scale_mode must be linear or sqrt");
    } else if (k == "tie_link_weights_across_layers") c.tie_link_weights_across_layers = parse_bool(v, k);
    else if (k == "gate_bypass") c.gate_bypass = parse_bool(v, k);
    else if (k == "merge_index") {
      if (v == "adjacent") c.merge_index = MergeIndex::kAdjacent;
      else if (v == "same_token") c.merge_index = MergeIndex::kSameToken;
      else throw std::invalid_argument("merge_index must be adjacent or same_token");
    } else if (k == "init_std") c.init_std = parse_double(v, k);
    else if (k == "layer_norm_eps") c.layer_norm_eps = parse_double(v, k);
    else throw std::invalid_argument("unknown model config key: " + k);
  }
  return c;
}

Batch Batch::from_sequences(const std::vector<std::vector<std::int64_t>>& seqs) {
  if (seqs.empty()) throw std::invalid_argument("empty batch");
  Batch b;
  b.size = static_cast<std::int64_t>(seqs.size());
  for (const auto& s : seqs) b.length = std::max<std::int64_t>(b.length, static_cast<std::int64_t>(s.size()));
  b.ids.assign(static_cast<std::size_t>(b.size * b.length), Vocabulary::kPad);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    std::copy(seqs[i].begin(), seqs[i].end(), b.ids.begin() + static_cast<std::ptrdiff_t>(i * b.length));
  }
  return b;
}

TokenMask Batch::mask() const {
  TokenMask m;
  m.batch = size;
  m.length = length;
  m.content.resize(ids.size());
  m.pad.resize(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto id = ids[i];
    m.content[i] = !Vocabulary::is_special(id) || id == Vocabulary::kUnk || id == Vocabulary::kMask;
    m.pad[i] = ids[i] == Vocabulary::kPad;
  }
  return m;
}

Tensor Encoder::param(const std::string& name, Shape shape, double init, std::mt19937_64* rng) {
  const auto n = static_cast<std::size_t>(numel_of(shape));
  std::vector<double> v(n, init);
  if (rng) {
    std::normal_distribution<double> dist(0.0, config_.init_std);
    for (auto& x : v) x = dist(*rng);
  }
  Tensor t = Tensor::from(std::move(shape), std::move(v), true);
  params_.emplace_back(name, t);
  return t;
}

Encoder::Encoder(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::int64_t h = config_.hidden_size, f = config_.ffn_size, V = config_.vocab_size;
  word_emb_ = param("embeddings.word", {V, h}, 0.0, &rng);
  pos_emb_ = param("embeddings.position", {config_.max_seq_len, h}, 0.0, &rng);
  emb_ln_g_ = param("embeddings.ln.gamma", {h}, 1.0, nullptr);
  emb_ln_b_ = param("embeddings.ln.beta", {h}, 0.0, nullptr);

  Tensor shared_q, shared_bq, shared_k, shared_bk;
  if (config_.tie_link_weights_across_layers) {
    shared_q = param("link.q.weight", {h, h}, 0.0, &rng);
    shared_bq = param("link.q.bias", {h}, 0.0, nullptr);
    shared_k = param("link.k.weight", {h, h}, 0.0, &rng);
    shared_bk = param("link.k.bias", {h}, 0.0, nullptr);
  }
  for (int l = 0; l < config_.num_layers; ++l) {
    const std::string p = "layer." + std::to_string(l) + ".";
    Layer L;
    L.wq = param(p + "attn.q.weight", {h, h}, 0.0, &rng);
    L.bq = param(p + "attn.q.bias", {h}, 0.0, nullptr);
    L.wk = param(p + "attn.k.weight", {h, h}, 0.0, &rng);
    L.bk = param(p + "attn.k.bias", {h}, 0.0, nullptr);
    L.wv = param(p + "attn.v.weight", {h, h}, 0.0, &rng);
    L.bv = param(p + "attn.v.bias", {h}, 0.0, nullptr);
    L.wo = param(p + "attn.out.weight", {h, h}, 0.0, &rng);
    L.bo = param(p + "attn.out.bias", {h}, 0.0, nullptr);
    L.ln1_g = param(p + "attn.ln.gamma", {h}, 1.0, nullptr);
    L.ln1_b = param(p + "attn.ln.beta", {h}, 0.0, nullptr);
    L.w1 = param(p + "ffn.in.weight", {h, f}, 0.0, &rng);
    L.b1 = param(p + "ffn.in.bias", {f}, 0.0, nullptr);
    L.w2 = param(p + "ffn.out.weight", {f, h}, 0.0, &rng);
    L.b2 = param(p + "ffn.out.bias", {h}, 0.0, nullptr);
    L.ln2_g = param(p + "ffn.ln.gamma", {h}, 1.0, nullptr);
    L.ln2_b = param(p + "ffn.ln.beta", {h}, 0.0, nullptr);
    if (config_.tie_link_weights_across_layers) {
      L.link_wq = shared_q;
      L.link_bq = shared_bq;
      L.link_wk = shared_k;
      L.link_bk = shared_bk;
    } else {
      L.link_wq = param(p + "link.q.weight", {h, h}, 0.0, &rng);
      L.link_bq = param(p + "link.q.bias", {h}, 0.0, nullptr);
      L.link_wk = param(p + "link.k.weight", {h, h}, 0.0, &rng);
      L.link_bk = param(p + "link.k.bias", {h}, 0.0, nullptr);
    }
    layers_.push_back(std::move(L));
  }
  mlm_w_ = param("mlm.weight", {h, V}, 0.0, &rng);
  mlm_b_ = param("mlm.bias", {V}, 0.0, nullptr);
  cls_w_ = param("cls.weight", {h, 2}, 0.0, &rng);
  cls_b_ = param("cls.bias", {2}, 0.0, nullptr);
}

Tensor Encoder::linear_proj(const Tensor& x, const Tensor& w, const Tensor& b) const { return add(matmul(x, w), b); }

EncoderOutput Encoder::forward(const Batch& batch, const ForwardOptions& opts) const {
  if (batch.length > config_.max_seq_len) {
    throw std::invalid_argument("sequence length " + std::to_string(batch.length) + " exceeds max_seq_len " +
                                std::to_string(config_.max_seq_len));
  }
  if (opts.train && config_.dropout_rate > 0.0 && !opts.rng) {
    throw std::invalid_argument("training forward needs a dropout rng");
  }
  const auto B = batch.size, T = batch.length;
  const std::int64_t h = config_.hidden_size, H = config_.num_heads;
  const double p_drop = opts.train ? config_.dropout_rate : 0.0;
  auto drop = [&](const Tensor& x) { return p_drop > 0.0 ? dropout(x, p_drop, *opts.rng) : x; };

  EncoderOutput out;
  out.mask = batch.mask();

  std::vector<std::int64_t> positions(static_cast<std::size_t>(T));
  for (std::int64_t t = 0; t < T; ++t) positions[t] = t;
  Tensor x = add(embedding(word_emb_, batch.ids, {B, T}), embedding(pos_emb_, positions, {T}));
  x = drop(layer_norm(x, emb_ln_g_, emb_ln_b_, config_.layer_norm_eps));

  const bool linear = config_.attention_scale_mode == ScaleMode::kLinear;
  const double attn_div = linear ? static_cast<double>(h) : std::sqrt(static_cast<double>(h / H));
  const double link_div = linear ? static_cast<double>(h) : std::sqrt(static_cast<double>(h));
  const Tensor pad_bias = padding_bias(out.mask);

  Tensor prev_merge;
  for (const auto& L : layers_) {
    Tensor gate;
    if (!config_.gate_bypass) {
      auto scores = link_scores(linear_proj(x, L.link_wq, L.link_bq), linear_proj(x, L.link_wk, L.link_bk),
                                out.mask, link_div);
      Tensor merge = compose_layers(merge_probs(link_probs(scores), config_.merge_index), prev_merge);
      gate = constituent_gate(merge, out.mask);
      out.merge.push_back(merge);
      prev_merge = merge;
    }
    auto attn = gated_attention(split_heads(linear_proj(x, L.wq, L.bq), H), split_heads(linear_proj(x, L.wk, L.bk), H),
                                split_heads(linear_proj(x, L.wv, L.bv), H), gate, pad_bias, attn_div);
    Tensor a = drop(linear_proj(merge_heads(attn.context), L.wo, L.bo));
    x = layer_norm(add(x, a), L.ln1_g, L.ln1_b, config_.layer_norm_eps);
    Tensor ff = drop(linear_proj(gelu(linear_proj(x, L.w1, L.b1)), L.w2, L.b2));
    x = layer_norm(add(x, ff), L.ln2_g, L.ln2_b, config_.layer_norm_eps);
  }
  out.hidden = x;
  return out;
}

Tensor Encoder::mlm_logits(const Tensor& hidden, std::span<const std::int64_t> positions) const {
  const auto rows = hidden.dim(0) * hidden.dim(1);
  Tensor flat = reshape(hidden, {rows, hidden.dim(2)});
  Tensor picked = embedding(flat, positions, {static_cast<std::int64_t>(positions.size())});
  return linear_proj(picked, mlm_w_, mlm_b_);
}

Tensor Encoder::mlm_loss(const Tensor& hidden, std::span<const std::int64_t> labels) const {
  std::vector<std::int64_t> positions, targets;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == kIgnoreIndex) continue;
    positions.push_back(static_cast<std::int64_t>(i));
    targets.push_back(labels[i]);
  }
  if (positions.empty()) {
    warn("mlm_loss: every label is ignored; loss defined as 0");
    return Tensor::scalar(0.0);
  }
  return cross_entropy(mlm_logits(hidden, positions), targets, kIgnoreIndex);
}

Tensor Encoder::classify(const Tensor& hidden) const { return linear_proj(select(hidden, 1, 0), cls_w_, cls_b_); }

std::size_t Encoder::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

std::vector<std::vector<double>> Encoder::snapshot() const {
  std::vector<std::vector<double>> s;
  for (const auto& [_, t] : params_) s.emplace_back(t.data().begin(), t.data().end());
  return s;
}

void Encoder::restore(const std::vector<std::vector<double>>& values) {
  if (values.size() != params_.size()) throw std::invalid_argument("restore: parameter count mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto d = params_[i].second.mutable_data();
    if (d.size() != values[i].size()) throw std::invalid_argument("restore: size mismatch for " + params_[i].first);
    std::copy(values[i].begin(), values[i].end(), d.begin());
  }
}

Checkpoint Encoder::to_checkpoint(const Vocabulary& vocab, const std::map<std::string, std::string>& extra) const {
  Checkpoint c;
  std::ostringstream meta;
  for (const auto& [k, v] : config_.to_kv()) meta << "model." << k << '=' << v << '\n';
  for (const auto& [k, v] : extra) meta << k << '=' << v << '\n';
  for (std::int64_t i = Vocabulary::kNumSpecial; i < vocab.size(); ++i) meta << "vocab=" << vocab.token(i) << '\n';
  c.metadata = meta.str();
  for (const auto& [name, t] : params_) c.tensors.emplace_back(name, t.detach());
  return c;
}

Encoder Encoder::from_checkpoint(const Checkpoint& ckpt, Vocabulary* vocab) {
  std::map<std::string, std::string> model_kv;
  Vocabulary v;
  std::istringstream meta(ckpt.metadata);
  std::string line;
  while (std::getline(meta, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const auto key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key.rfind("model.", 0) == 0) model_kv[key.substr(6)] = val;
    else if (key == "vocab") v.add(val);
  }
  Encoder enc(ModelConfig::from_kv(model_kv), 0);
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : ckpt.tensors) by_name[name] = &t;
  for (auto& [name, t] : enc.params_) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks tensor " + name);
    if (it->second->shape() != t.shape()) {
      throw CheckpointError("shape mismatch for " + name + ": " + shape_str(it->second->shape()) + " vs " +
                            shape_str(t.shape()));
    }
    std::copy(it->second->data().begin(), it->second->data().end(), t.mutable_data().begin());
  }
  if (vocab) *vocab = std::move(v);
  return enc;
}

MergeLadder Encoder::ladder_for(const EncoderOutput& out, std::int64_t row) {
  const auto T = out.mask.length;
  std::int64_t first = -1, last = -1;
  for (std::int64_t t = 0; t < T; ++t) {
    if (out.mask.is_content(row, t)) {
      if (first < 0) first = t;
      last = t;
    }
  }
  MergeLadder ladder;
  ladder.tokens = first < 0 ? 0 : last - first + 1;
  for (const auto& m : out.merge) {
    std::vector<double> a;
    for (std::int64_t p = first; p >= 0 && p < last; ++p) a.push_back(m[static_cast<std::size_t>(row * (T - 1) + p)]);
    ladder.layers.push_back(std::move(a));
  }
  return ladder;
}

}  // namespace treetf
