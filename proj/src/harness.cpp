#include "treetf/harness.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>

#include "json.hpp"
#include "treetf/ops.hpp"
#include "treetf/util.hpp"

#ifndef TREETF_VERSION
#define TREETF_VERSION "unknown"
#endif

namespace treetf {

namespace {

using nlohmann::json;

std::vector<std::int64_t> clip_ids(std::vector<std::int64_t> ids, int max_len) {
  if (static_cast<int>(ids.size()) > max_len) {
    ids.resize(static_cast<std::size_t>(max_len));
    ids.back() = Vocabulary::kSep;
  }
  return ids;
}

Batch make_batch(const Vocabulary& vocab, const std::vector<LabeledSentence>& split,
                 std::span<const std::size_t> order, int max_len) {
  std::vector<std::vector<std::int64_t>> seqs;
  seqs.reserve(order.size());
  for (auto i : order) seqs.push_back(clip_ids(vocab.encode(split[i].words()), max_len));
  return Batch::from_sequences(seqs);
}

bool finite_all(const Tensor& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](double x) { return std::isfinite(x); });
}

double stddev(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

json metrics_json(const Metrics& m) {
  return {{"precision", m.precision()}, {"recall", m.recall()}, {"f1", m.f1()},      {"accuracy", m.accuracy()},
          {"tp", m.tp},                 {"fp", m.fp},           {"tn", m.tn},        {"fn", m.fn}};
}

}  // namespace

// ---------------------------------------------------------------------------

TrainConfig TrainConfig::full_finetune() { return TrainConfig{}; }

TrainConfig TrainConfig::full_pretrain() {
  TrainConfig c;
  c.max_epochs = 40;
  return c;
}

TrainConfig TrainConfig::desk_finetune() {
  TrainConfig c;
  c.learning_rate = 5e-4;
  c.batch_size = 32;
  c.max_epochs = 10;
  c.early_stop_patience = 2;
  c.early_stop_delay_epochs = 5;
  c.grad_clip = 1.0;
  return c;
}

TrainConfig TrainConfig::desk_pretrain() {
  TrainConfig c = desk_finetune();
  c.max_epochs = 3;
  return c;
}

void TrainConfig::validate() const {
  auto req = [](bool ok, const char* msg) {
    if (!ok) throw std::invalid_argument(msg);
  };
  req(beta1 >= 0 && beta1 < 1, "beta1 must lie in [0, 1)");
  req(beta2 >= 0 && beta2 < 1, "beta2 must lie in [0, 1)");
  req(epsilon > 0, "epsilon must be positive");
  req(weight_decay >= 0, "weight_decay must be non-negative");
  req(learning_rate > 0, "learning_rate must be positive");
  req(batch_size >= 1, "batch_size must be positive");
  req(max_epochs >= 1, "max_epochs must be positive");
  req(early_stop_patience >= 1, "early_stop_patience must be positive");
  req(early_stop_delay_epochs >= 0, "early_stop_delay_epochs must be non-negative");
  req(mask_rate > 0 && mask_rate < 1, "mask_rate must lie in (0, 1)");
  req(grad_clip >= 0, "grad_clip must be non-negative");
}

std::map<std::string, std::string> TrainConfig::to_kv() const {
  return {{"beta1", format_double(beta1)},
          {"beta2", format_double(beta2)},
          {"epsilon", format_double(epsilon)},
          {"weight_decay", format_double(weight_decay)},
          {"learning_rate", format_double(learning_rate)},
          {"batch_size", std::to_string(batch_size)},
          {"max_epochs", std::to_string(max_epochs)},
          {"early_stop_patience", std::to_string(early_stop_patience)},
          {"early_stop_delay_epochs", std::to_string(early_stop_delay_epochs)},
          {"seed", std::to_string(seed)},
          {"mask_rate", format_double(mask_rate)},
          {"grad_clip", format_double(grad_clip)}};
}

void TrainConfig::apply_kv(const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) {
    if (k == "beta1") beta1 = parse_double(v, k);
    else if (k == "beta2") beta2 = parse_double(v, k);
    else if (k == "epsilon") epsilon = parse_double(v, k);
    else if (k == "weight_decay") weight_decay = parse_double(v, k);
    else if (k == "learning_rate") learning_rate = parse_double(v, k);
    else if (k == "batch_size") batch_size = parse_int(v, k);
    else if (k == "max_epochs") max_epochs = parse_int(v, k);
    else if (k == "early_stop_patience") early_stop_patience = parse_int(v, k);
    else if (k == "early_stop_delay_epochs") early_stop_delay_epochs = parse_int(v, k);
    else if (k == "seed") seed = std::stoull(v);
    else if (k == "mask_rate") mask_rate = parse_double(v, k);
    else if (k == "grad_clip") grad_clip = parse_double(v, k);
    else throw std::invalid_argument("unknown training key '" + k + "'");
  }
}

// ---------------------------------------------------------------------------

AdamW::AdamW(std::vector<std::pair<std::string, Tensor>>& params, const TrainConfig& cfg)
    : params_(params), cfg_(cfg) {
  cfg_.validate();
  for (const auto& [_, p] : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

double AdamW::step() {
  double sq = 0.0;
  for (auto& [_, p] : params_) {
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw DivergenceError("gradient norm is not finite at step " + std::to_string(t_ + 1));
  const double clip = cfg_.grad_clip > 0 && norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const double lr = cfg_.learning_rate;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].second;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    const double decay = p.rank() >= 2 ? cfg_.weight_decay : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] * clip;
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.epsilon) + decay * w[j]);
    }
    p.zero_grad();
  }
  return norm;
}

void write_step_record(std::ostream& os, const StepRecord& r) {
  os << json{{"step", r.step}, {"epoch", r.epoch}, {"loss", r.loss}, {"lr", r.lr}}.dump() << '\n';
}

// ---------------------------------------------------------------------------

PretrainResult pretrain(Encoder& model, const Vocabulary& vocab, const std::vector<std::vector<std::string>>& corpus,
                        const TrainConfig& cfg, int epochs, std::ostream* log) {
  cfg.validate();
  if (corpus.empty()) throw std::invalid_argument("pretraining corpus is empty");
  if (epochs < 1) throw std::invalid_argument("epochs must be positive");
  const int max_len = model.config().max_seq_len;
  std::vector<std::vector<std::int64_t>> encoded;
  encoded.reserve(corpus.size());
  for (const auto& line : corpus) encoded.push_back(clip_ids(vocab.encode(line), max_len));

  std::mt19937_64 order_rng(cfg.seed ^ 0x5851f42d4c957f2dull);
  std::mt19937_64 mask_rng(cfg.seed ^ 0x14057b7ef767814full);
  std::mt19937_64 dropout_rng(cfg.seed ^ 0x2545f4914f6cdd1dull);
  AdamW opt(model.parameters(), cfg);
  PretrainResult res;
  std::vector<std::size_t> order(encoded.size());
  std::iota(order.begin(), order.end(), 0);
  double last_finite = std::nan("");
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double total = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const auto stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      Batch raw = [&] {
        std::vector<std::vector<std::int64_t>> seqs;
        for (auto i = start; i < stop; ++i) seqs.push_back(encoded[order[i]]);
        return Batch::from_sequences(seqs);
      }();
      const MaskedSequence ms = mask_for_mlm(raw.ids, cfg.mask_rate, vocab.size(), mask_rng);
      Batch batch = raw;
      batch.ids = ms.ids;
      std::vector<std::int64_t> labels = ms.labels;
      // Padding is never a prediction target.
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (raw.ids[i] == Vocabulary::kPad) labels[i] = kIgnoreIndex;
      }
      const bool any_label = std::any_of(labels.begin(), labels.end(), [](auto l) { return l != kIgnoreIndex; });
      if (!any_label) continue;
      const EncoderOutput out = model.forward(batch, {true, &dropout_rng});
      Tensor loss = model.mlm_loss(out.hidden, labels);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw DivergenceError("pretraining loss became " + format_double(value) + " at step " +
                              std::to_string(opt.steps() + 1) + " (epoch " + std::to_string(epoch) +
                              ", last finite loss " + format_double(last_finite) + ")");
      }
      last_finite = value;
      loss.backward();
      opt.step();
      StepRecord r{opt.steps(), epoch, value, cfg.learning_rate};
      res.steps.push_back(r);
      if (log) write_step_record(*log, r);
      total += value;
      ++batches;
    }
    res.epoch_loss.push_back(batches ? total / batches : 0.0);
  }
  return res;
}

// ---------------------------------------------------------------------------

double Metrics::precision() const { return tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0; }
double Metrics::recall() const { return tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0; }
double Metrics::f1() const {
  const double p = precision(), r = recall();
  return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
}
double Metrics::accuracy() const {
  return total() ? static_cast<double>(tp + tn) / static_cast<double>(total()) : 0.0;
}

Metrics score(const std::vector<int>& predicted, const std::vector<int>& gold) {
  if (predicted.size() != gold.size()) throw std::invalid_argument("score: prediction/gold size mismatch");
  Metrics m;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (predicted[i] == 1) (gold[i] == 1 ? m.tp : m.fp)++;
    else (gold[i] == 1 ? m.fn : m.tn)++;
  }
  return m;
}

std::vector<int> predict(const Encoder& model, const Vocabulary& vocab, const std::vector<LabeledSentence>& split,
                         int batch_size) {
  NoGradGuard no_grad;
  std::vector<int> out;
  out.reserve(split.size());
  std::vector<std::size_t> idx(split.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t start = 0; start < split.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto stop = std::min(split.size(), start + static_cast<std::size_t>(batch_size));
    const Batch b = make_batch(vocab, split, std::span(idx).subspan(start, stop - start), model.config().max_seq_len);
    const Tensor logits = model.classify(model.forward(b).hidden);
    for (std::int64_t r = 0; r < b.size; ++r) out.push_back(logits[r * 2 + 1] > logits[r * 2] ? 1 : 0);
  }
  return out;
}

Metrics evaluate(const Encoder& model, const Vocabulary& vocab, const std::vector<LabeledSentence>& split,
                 int batch_size) {
  std::vector<int> gold;
  gold.reserve(split.size());
  for (const auto& s : split) gold.push_back(violation_label(s));
  return score(predict(model, vocab, split, batch_size), gold);
}

bool EarlyStopper::observe(double score) {
  ++epochs_;
  if (score > best_) {
    best_ = score;
    best_epoch_ = epochs_;
    stale_ = 0;
    return true;
  }
  ++stale_;
  return false;
}

FinetuneResult finetune(Encoder& model, const Vocabulary& vocab, const std::vector<LabeledSentence>& train,
                        const std::vector<LabeledSentence>& eval, const TrainConfig& cfg, std::ostream* log) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("training split is empty");
  if (eval.empty()) throw std::invalid_argument("eval split is empty");
  std::mt19937_64 order_rng(cfg.seed ^ 0x5851f42d4c957f2dull);
  std::mt19937_64 dropout_rng(cfg.seed ^ 0x2545f4914f6cdd1dull);
  AdamW opt(model.parameters(), cfg);
  EarlyStopper stopper(cfg.early_stop_patience, cfg.early_stop_delay_epochs);
  FinetuneResult res;
  std::vector<std::vector<double>> best = model.snapshot();
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    double total = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const auto stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const auto slice = std::span(order).subspan(start, stop - start);
      const Batch b = make_batch(vocab, train, slice, model.config().max_seq_len);
      std::vector<std::int64_t> y;
      for (auto i : slice) y.push_back(violation_label(train[i]));
      const Tensor logits = model.classify(model.forward(b, {true, &dropout_rng}).hidden);
      Tensor loss = cross_entropy(logits, y);
      if (!finite_all(loss)) {
        throw DivergenceError("fine-tuning loss is not finite at epoch " + std::to_string(epoch) + ", step " +
                              std::to_string(opt.steps() + 1));
      }
      total += loss.item();
      ++batches;
      loss.backward();
      opt.step();
      if (log) write_step_record(*log, {opt.steps(), epoch, loss.item(), cfg.learning_rate});
    }
    EpochRecord rec{epoch, total / batches, evaluate(model, vocab, eval)};
    res.history.push_back(rec);
    if (stopper.observe(rec.eval.f1())) best = model.snapshot();
    if (stopper.should_stop()) {
      res.stopped_early = epoch < cfg.max_epochs;
      break;
    }
  }
  model.restore(best);
  res.best_epoch = stopper.best_epoch();
  res.best_eval_f1 = stopper.best();
  return res;
}

// ---------------------------------------------------------------------------

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kPlain: return "plain";
    case Variant::kTree: return "tree";
    case Variant::kPlainPretrained: return "plain+pretrain";
    case Variant::kTreePretrained: return "tree+pretrain";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::kPlain, Variant::kTree, Variant::kPlainPretrained, Variant::kTreePretrained}) {
    if (s == variant_name(v)) return v;
  }
  throw std::invalid_argument("unknown variant '" + s + "' (expected plain, tree, plain+pretrain or tree+pretrain)");
}

bool variant_gated(Variant v) { return v == Variant::kTree || v == Variant::kTreePretrained; }
bool variant_pretrained(Variant v) { return v == Variant::kPlainPretrained || v == Variant::kTreePretrained; }

std::vector<double> TrialReport::f1s() const {
  std::vector<double> out;
  for (const auto& m : trials) out.push_back(m.f1());
  return out;
}

namespace {
template <class F>
double mean_of(const std::vector<Metrics>& ms, F f) {
  if (ms.empty()) return 0.0;
  double s = 0.0;
  for (const auto& m : ms) s += f(m);
  return s / static_cast<double>(ms.size());
}
}  // namespace

double TrialReport::mean_precision() const { return mean_of(trials, [](const Metrics& m) { return m.precision(); }); }
double TrialReport::mean_recall() const { return mean_of(trials, [](const Metrics& m) { return m.recall(); }); }
double TrialReport::mean_f1() const { return mean_of(trials, [](const Metrics& m) { return m.f1(); }); }
double TrialReport::std_f1() const { return stddev(f1s()); }

std::vector<TrialReport> run_trials(const TrialSpec& spec, const Vocabulary& vocab,
                                    const std::vector<LabeledSentence>& train,
                                    const std::vector<LabeledSentence>& eval,
                                    const std::vector<std::pair<std::string, const std::vector<LabeledSentence>*>>& tests,
                                    std::ostream* log) {
  if (spec.seeds.empty()) throw std::invalid_argument("run_trials needs at least one seed");
  if (variant_pretrained(spec.variant) && !spec.pretrained) {
    throw std::invalid_argument(std::string("variant ") + variant_name(spec.variant) + " needs a pretrained checkpoint");
  }
  std::vector<TrialReport> reports;
  for (const auto& [name, _] : tests) {
    TrialReport r;
    r.setting = name;
    r.variant = spec.variant;
    r.seeds = spec.seeds;
    reports.push_back(std::move(r));
  }
  for (auto seed : spec.seeds) {
    ModelConfig mc = spec.model;
    mc.gate_bypass = !variant_gated(spec.variant);
    Encoder model = [&] {
      if (!spec.pretrained) return Encoder(mc, seed);
      Encoder m = Encoder::from_checkpoint(*spec.pretrained);
      if (m.config().gate_bypass != mc.gate_bypass) {
        throw std::invalid_argument("pretrained checkpoint gate setting does not match the variant");
      }
      return m;
    }();
    TrainConfig tc = spec.train;
    tc.seed = seed;
    const FinetuneResult fr = finetune(model, vocab, train, eval, tc);
    if (log) {
      *log << json{{"variant", variant_name(spec.variant)},
                   {"seed", seed},
                   {"best_epoch", fr.best_epoch},
                   {"best_eval_f1", fr.best_eval_f1},
                   {"epochs_run", fr.history.size()}}
                  .dump()
           << '\n';
    }
    for (std::size_t i = 0; i < tests.size(); ++i) reports[i].trials.push_back(evaluate(model, vocab, *tests[i].second));
  }
  return reports;
}

double permutation_test(const std::vector<double>& a, const std::vector<double>& b, std::uint64_t seed, int rounds) {
  if (a.empty() || b.empty()) throw std::invalid_argument("permutation test needs two non-empty samples");
  std::vector<double> pooled(a);
  pooled.insert(pooled.end(), b.begin(), b.end());
  const std::size_t na = a.size(), n = pooled.size();
  const double total = std::accumulate(pooled.begin(), pooled.end(), 0.0);
  auto stat = [&](double sum_a) {
    const double ma = sum_a / static_cast<double>(na);
    const double mb = (total - sum_a) / static_cast<double>(n - na);
    return std::abs(ma - mb);
  };
  const double observed = stat(std::accumulate(a.begin(), a.end(), 0.0));
  const double tol = 1e-12;
  std::int64_t extreme = 0, count = 0;
  if (a.size() <= 10 && b.size() <= 10) {
    // Every subset of size na of the pooled sample, via bitmask enumeration.
    for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
      if (static_cast<std::size_t>(std::popcount(mask)) != na) continue;
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (mask >> i & 1u) s += pooled[i];
      }
      ++count;
      extreme += stat(s) >= observed - tol;
    }
    return static_cast<double>(extreme) / static_cast<double>(count);
  }
  std::mt19937_64 rng(seed);
  for (int r = 0; r < rounds; ++r) {
    std::shuffle(pooled.begin(), pooled.end(), rng);
    const double s = std::accumulate(pooled.begin(), pooled.begin() + static_cast<std::ptrdiff_t>(na), 0.0);
    extreme += stat(s) >= observed - tol;
  }
  return static_cast<double>(extreme + 1) / static_cast<double>(rounds + 1);
}

void write_report_json(std::ostream& os, const std::vector<TrialReport>& reports,
                       const std::map<std::string, double>& p_values) {
  json rows = json::array();
  for (const auto& r : reports) {
    json trials = json::array();
    for (std::size_t i = 0; i < r.trials.size(); ++i) {
      json t = metrics_json(r.trials[i]);
      t["seed"] = i < r.seeds.size() ? r.seeds[i] : 0;
      trials.push_back(std::move(t));
    }
    rows.push_back({{"setting", r.setting},
                    {"variant", variant_name(r.variant)},
                    {"precision", r.mean_precision()},
                    {"recall", r.mean_recall()},
                    {"f1", r.mean_f1()},
                    {"f1_std", r.std_f1()},
                    {"trials", std::move(trials)}});
  }
  json out{{"reports", std::move(rows)}};
  if (!p_values.empty()) out["p_values"] = p_values;
  os << out.dump(2) << '\n';
}

void write_report_table(std::ostream& os, const std::vector<TrialReport>& reports) {
  os << "setting,variant,P,R,F1,F1_std,n\n";
  for (const auto& r : reports) {
    os << r.setting << ',' << variant_name(r.variant) << ',' << format_double(r.mean_precision()) << ','
       << format_double(r.mean_recall()) << ',' << format_double(r.mean_f1()) << ',' << format_double(r.std_f1())
       << ',' << r.trials.size() << '\n';
  }
}

Vocabulary grammar_vocabulary(const Grammar& g) { return Vocabulary(g.surface_vocabulary()); }

std::vector<std::vector<std::string>> grammar_corpus(const Grammar& g, std::size_t min_tokens, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::string>> corpus;
  std::size_t tokens = 0;
  while (tokens < min_tokens) {
    corpus.push_back(sample(g, rng).words());
    tokens += corpus.back().size();
  }
  return corpus;
}

const char* version() { return TREETF_VERSION; }

std::string config_hash(const std::map<std::string, std::string>& config) { return fnv1a_hex(format_kv(config)); }

void write_manifest(const std::string& dir, const std::map<std::string, std::string>& config,
                    const std::vector<std::uint64_t>& seeds, const std::string& command) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  json m{{"version", version()},
         {"config_hash", config_hash(config)},
         {"config", config},
         {"seeds", seeds},
         {"command", command}};
  std::ofstream f(fs::path(dir) / "manifest.json");
  if (!f) throw std::runtime_error("cannot write manifest in " + dir);
  f << m.dump(2) << '\n';
}

}  // namespace treetf
