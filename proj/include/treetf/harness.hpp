#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "treetf/agreement.hpp"
#include "treetf/model.hpp"

namespace treetf {

struct TrainConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  double learning_rate = 2e-5;
  int batch_size = 192;
  int max_epochs = 100;
  int early_stop_patience = 3;
  int early_stop_delay_epochs = 50;
  std::uint64_t seed = 0;
  double mask_rate = 0.15;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 0.0;

  /// Full-scale fine-tuning: lr 2e-5, batch 192, 100 epochs, patience 3, delay 50.
  static TrainConfig full_finetune();
  /// Full-scale pretraining: 40 epochs, otherwise as fine-tuning.
  static TrainConfig full_pretrain();
  /// Settings that fit a single CPU core within minutes.
  static TrainConfig desk_finetune();
  static TrainConfig desk_pretrain();

  void validate() const;
  std::map<std::string, std::string> to_kv() const;
  /// Unknown keys throw; missing keys keep the current values.
  void apply_kv(const std::map<std::string, std::string>& kv);
};

/// Adam with decoupled weight decay. Rank-1 tensors (biases and layer-norm
/// parameters) are not decayed.
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Tensor>>& params, const TrainConfig& cfg);
  /// Applies one update from the current gradients, then clears them.
  /// Returns the global gradient norm before clipping.
  double step();
  std::int64_t steps() const { return t_; }

 private:
  std::vector<std::pair<std::string, Tensor>>& params_;
  TrainConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepRecord {
  std::int64_t step = 0;
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
};

/// Writes one JSON object per line.
void write_step_record(std::ostream& os, const StepRecord& r);

struct PretrainResult {
  std::vector<double> epoch_loss;  // mean MLM loss per epoch
  std::vector<StepRecord> steps;
};

/// Masked-LM training over tokenized lines. Aborts with DivergenceError when
/// the loss turns non-finite. `log` (optional) receives step records.
PretrainResult pretrain(Encoder& model, const Vocabulary& vocab, const std::vector<std::vector<std::string>>& corpus,
                        const TrainConfig& cfg, int epochs, std::ostream* log = nullptr);

/// Confusion counts with "contains a violation" as the positive class.
struct Metrics {
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  double precision() const;
  double recall() const;
  double f1() const;
  double accuracy() const;
  std::int64_t total() const { return tp + fp + tn + fn; }
};

Metrics score(const std::vector<int>& predicted, const std::vector<int>& gold);

/// Predicted violation labels for a split.
std::vector<int> predict(const Encoder& model, const Vocabulary& vocab, const std::vector<LabeledSentence>& split,
                         int batch_size = 64);
Metrics evaluate(const Encoder& model, const Vocabulary& vocab, const std::vector<LabeledSentence>& split,
                 int batch_size = 64);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  Metrics eval;
};

struct FinetuneResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_eval_f1 = -1.0;
  bool stopped_early = false;
};

/// Classification training with early stopping on eval F1: patience counts
/// epochs without improvement, stopping is allowed only once
/// early_stop_delay_epochs have completed, and the best-eval weights are
/// restored before returning.
FinetuneResult finetune(Encoder& model, const Vocabulary& vocab, const std::vector<LabeledSentence>& train,
                        const std::vector<LabeledSentence>& eval, const TrainConfig& cfg,
                        std::ostream* log = nullptr);

/// The early-stopping rule in isolation, fed one eval score per epoch.
class EarlyStopper {
 public:
  EarlyStopper(int patience, int delay_epochs) : patience_(patience), delay_(delay_epochs) {}
  /// Returns true when this epoch is the new best.
  bool observe(double score);
  bool should_stop() const { return epochs_ >= delay_ && stale_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  double best() const { return best_; }

 private:
  int patience_, delay_;
  int epochs_ = 0, stale_ = 0, best_epoch_ = 0;
  double best_ = -1.0;
};

enum class Variant { kPlain, kTree, kPlainPretrained, kTreePretrained };
const char* variant_name(Variant v);  // "plain", "tree", "plain+pretrain", "tree+pretrain"
Variant parse_variant(const std::string& s);
bool variant_gated(Variant v);
bool variant_pretrained(Variant v);

struct TrialReport {
  std::string setting;
  Variant variant = Variant::kPlain;
  std::vector<std::uint64_t> seeds;
  std::vector<Metrics> trials;

  double mean_precision() const;
  double mean_recall() const;
  double mean_f1() const;
  double std_f1() const;
  std::vector<double> f1s() const;
};

struct TrialSpec {
  ModelConfig model;  // gate_bypass is set per variant
  TrainConfig train;
  Variant variant = Variant::kTree;
  std::vector<std::uint64_t> seeds;
  /// Checkpoint to start from for pretrained variants.
  std::optional<Checkpoint> pretrained;
};

/// Trains one model per seed on ds.train/ds.eval and scores every named
/// test split. Plain and gated variants of a seed share initialization and
/// data order. Returns one report per test split, in the order given.
std::vector<TrialReport> run_trials(const TrialSpec& spec, const Vocabulary& vocab,
                                    const std::vector<LabeledSentence>& train,
                                    const std::vector<LabeledSentence>& eval,
                                    const std::vector<std::pair<std::string, const std::vector<LabeledSentence>*>>& tests,
                                    std::ostream* log = nullptr);

/// Two-sided permutation test on the difference of means: exact when both
/// samples have at most 10 entries, otherwise `rounds` random relabelings.
double permutation_test(const std::vector<double>& a, const std::vector<double>& b, std::uint64_t seed = 0,
                        int rounds = 100000);

void write_report_json(std::ostream& os, const std::vector<TrialReport>& reports,
                       const std::map<std::string, double>& p_values = {});
/// Rows "setting,variant,P,R,F1,F1_std,n".
void write_report_table(std::ostream& os, const std::vector<TrialReport>& reports);

/// Vocabulary over the grammar's surface forms.
Vocabulary grammar_vocabulary(const Grammar& g);

/// Sentences sampled from the grammar until at least min_tokens words.
std::vector<std::vector<std::string>> grammar_corpus(const Grammar& g, std::size_t min_tokens, std::uint64_t seed);

/// Version string baked in at build time (git describe).
const char* version();

/// Run-directory manifest: version, config hash, seeds, command line.
void write_manifest(const std::string& dir, const std::map<std::string, std::string>& config,
                    const std::vector<std::uint64_t>& seeds, const std::string& command);
std::string config_hash(const std::map<std::string, std::string>& config);

}  // namespace treetf
