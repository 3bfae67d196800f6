// treetf: data generation, training, evaluation and analysis driver.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "json.hpp"
#include "treetf/harness.hpp"
#include "treetf/structure.hpp"
#include "treetf/util.hpp"

using namespace treetf;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string command_line(int argc, char** argv) {
  std::vector<std::string> parts(argv, argv + argc);
  return join(parts, " ");
}

// Config keys are "model.<field>" and "train.<field>"; --set overrides the file.
struct RunConfig {
  std::string preset = "desk";
  std::string file;
  std::vector<std::string> sets;

  std::map<std::string, std::string> merged() const {
    std::map<std::string, std::string> kv;
    if (!file.empty()) kv = read_kv_file(file);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got " + s);
      kv[trim(s.substr(0, eq))] = trim(s.substr(eq + 1));
    }
    return kv;
  }

  static std::map<std::string, std::string> section(const std::map<std::string, std::string>& kv,
                                                    const std::string& prefix) {
    std::map<std::string, std::string> out;
    for (const auto& [k, v] : kv) {
      if (k.rfind(prefix, 0) == 0) out[k.substr(prefix.size())] = v;
      else if (k.rfind("model.", 0) != 0 && k.rfind("train.", 0) != 0) throw std::invalid_argument("unknown config key " + k);
    }
    return out;
  }

  ModelConfig model(int vocab_size) const {
    ModelConfig base = preset == "full" ? ModelConfig::full_base(vocab_size) : ModelConfig::desk(vocab_size);
    auto kv = base.to_kv();
    for (const auto& [k, v] : section(merged(), "model.")) {
      if (!kv.count(k)) throw std::invalid_argument("unknown model key " + k);
      kv[k] = v;
    }
    ModelConfig c = ModelConfig::from_kv(kv);
    c.vocab_size = vocab_size;
    c.validate();
    return c;
  }

  TrainConfig train(bool pretraining) const {
    TrainConfig c;
    if (preset == "full") c = pretraining ? TrainConfig::full_pretrain() : TrainConfig::full_finetune();
    else if (preset == "desk") c = pretraining ? TrainConfig::desk_pretrain() : TrainConfig::desk_finetune();
    else throw std::invalid_argument("unknown preset " + preset);
    c.apply_kv(section(merged(), "train."));
    c.validate();
    return c;
  }

  void attach(CLI::App* app) {
    app->add_option("--preset", preset, "Base settings: desk or full")->check(CLI::IsMember({"desk", "full"}));
    app->add_option("--config", file, "Key-value config file (model.* and train.* keys)")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "Override one config key, e.g. --set train.learning_rate=1e-4");
  }
};

std::map<std::string, std::string> flat_config(const ModelConfig& m, const TrainConfig& t) {
  std::map<std::string, std::string> kv;
  for (const auto& [k, v] : m.to_kv()) kv["model." + k] = v;
  for (const auto& [k, v] : t.to_kv()) kv["train." + k] = v;
  return kv;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  return f;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::vector<std::string> lines;
  auto consume = [&](std::istream& is) {
    for (std::string line; std::getline(is, line);)
      if (!trim(line).empty()) lines.push_back(trim(line));
  };
  if (path == "-") {
    consume(std::cin);
  } else {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read " + path);
    consume(f);
  }
  return lines;
}

json stats_json(const SplitStats& s) {
  return {{"size", s.size},
          {"valid", s.valid},
          {"invalid", s.invalid},
          {"mean_depth", s.mean_depth},
          {"max_depth", s.max_depth},
          {"draws", s.draws},
          {"acceptance_rate", s.acceptance_rate},
          {"linear_oracle_accuracy", s.size ? double(s.linear_agree) / s.size : 0.0},
          {"hierarchical_oracle_accuracy", s.size ? double(s.hierarchical_agree) / s.size : 0.0}};
}

json metrics_json(const Metrics& m) {
  return {{"precision", m.precision()}, {"recall", m.recall()}, {"f1", m.f1()}, {"accuracy", m.accuracy()},
          {"tp", m.tp},                 {"fp", m.fp},           {"tn", m.tn},   {"fn", m.fn}};
}

// Dataset from a gen-data directory, or generated in memory.
Dataset load_data(const std::string& dir, const std::string& setting, std::uint64_t seed) {
  if (!dir.empty()) return read_dataset(dir);
  return build_dataset(Grammar::builtin(), SettingSpec::defaults(parse_setting(setting)), seed);
}

const std::vector<LabeledSentence>& pick_split(const Dataset& ds, const std::string& name) {
  if (name == "train") return ds.train;
  if (name == "eval") return ds.eval;
  if (name == "test") return ds.test;
  throw std::invalid_argument("unknown split " + name);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tree Transformer workbench"};
  app.require_subcommand(1);
  const std::string cmd = command_line(argc, argv);

  // gen-data
  std::string setting = "id", out, data_dir, checkpoint, variant = "tree", split = "test";
  std::uint64_t seed = 1, data_seed = 1;
  auto* gen = app.add_subcommand("gen-data", "Generate train/eval/test splits for an agreement setting");
  gen->add_option("--setting", setting)->check(CLI::IsMember({"id", "gen", "rec-gen"}));
  gen->add_option("--seed", seed);
  gen->add_option("--out", out)->required();
  gen->callback([&] {
    Dataset ds = build_dataset(Grammar::builtin(), SettingSpec::defaults(parse_setting(setting)), seed);
    write_dataset(ds, out);
    write_manifest(out, {{"setting", setting}}, {seed}, cmd);
    json j{{"setting", setting},
           {"train", stats_json(ds.train_stats)},
           {"eval", stats_json(ds.eval_stats)},
           {"test", stats_json(ds.test_stats)}};
    std::cout << j.dump(2) << '\n';
  });

  // pretrain
  RunConfig pre_cfg;
  std::size_t corpus_tokens = 100000;
  std::string corpus_file;
  bool plain = false;
  auto* pre = app.add_subcommand("pretrain", "Masked-LM pretraining on grammar text plus optional user text");
  pre_cfg.attach(pre);
  pre->add_option("--seed", seed);
  pre->add_option("--tokens", corpus_tokens, "Grammar-generated corpus size in words");
  pre->add_option("--corpus", corpus_file, "Extra text, one sentence per line")->check(CLI::ExistingFile);
  pre->add_flag("--plain", plain, "Bypass the constituent gate");
  pre->add_option("--out", out)->required();
  pre->callback([&] {
    Grammar g = Grammar::builtin();
    Vocabulary vocab = grammar_vocabulary(g);
    auto corpus = grammar_corpus(g, corpus_tokens, seed);
    if (!corpus_file.empty())
      for (const auto& line : read_lines(corpus_file)) corpus.push_back(split_ws(line));
    ModelConfig mc = pre_cfg.model(static_cast<int>(vocab.size()));
    mc.gate_bypass = plain;
    TrainConfig tc = pre_cfg.train(true);
    tc.seed = seed;
    write_manifest(out, flat_config(mc, tc), {seed}, cmd);
    Encoder model(mc, seed);
    auto log = open_out(fs::path(out) / "steps.jsonl");
    PretrainResult r = pretrain(model, vocab, corpus, tc, tc.max_epochs, &log);
    save_checkpoint((fs::path(out) / "model.ckpt").string(), model.to_checkpoint(vocab, {{"stage", "pretrain"}}));
    for (std::size_t e = 0; e < r.epoch_loss.size(); ++e)
      std::cout << "epoch " << e + 1 << " mlm_loss " << format_double(r.epoch_loss[e]) << '\n';
  });

  // finetune
  RunConfig ft_cfg;
  auto* ft = app.add_subcommand("finetune", "Train the violation classifier with early stopping");
  ft_cfg.attach(ft);
  ft->add_option("--data", data_dir, "Dataset directory from gen-data")->check(CLI::ExistingDirectory);
  ft->add_option("--setting", setting, "Generate this setting when --data is absent")
      ->check(CLI::IsMember({"id", "gen", "rec-gen"}));
  ft->add_option("--data-seed", data_seed);
  ft->add_option("--variant", variant)->check(CLI::IsMember({"tree", "plain"}));
  ft->add_option("--init", checkpoint, "Start from a pretrained checkpoint")->check(CLI::ExistingFile);
  ft->add_option("--seed", seed);
  ft->add_option("--out", out)->required();
  ft->callback([&] {
    Dataset ds = load_data(data_dir, setting, data_seed);
    Vocabulary vocab = grammar_vocabulary(Grammar::builtin());
    TrainConfig tc = ft_cfg.train(false);
    tc.seed = seed;
    Encoder model = [&] {
      if (!checkpoint.empty()) return Encoder::from_checkpoint(load_checkpoint(checkpoint), &vocab);
      ModelConfig mc = ft_cfg.model(static_cast<int>(vocab.size()));
      mc.gate_bypass = variant == "plain";
      return Encoder(mc, seed);
    }();
    write_manifest(out, flat_config(model.config(), tc), {seed}, cmd);
    auto log = open_out(fs::path(out) / "epochs.jsonl");
    FinetuneResult r = finetune(model, vocab, ds.train, ds.eval, tc, &log);
    save_checkpoint((fs::path(out) / "model.ckpt").string(), model.to_checkpoint(vocab, {{"stage", "finetune"}}));
    json j{{"best_epoch", r.best_epoch},
           {"best_eval_f1", r.best_eval_f1},
           {"stopped_early", r.stopped_early},
           {"test", metrics_json(evaluate(model, vocab, ds.test))}};
    open_out(fs::path(out) / "metrics.json") << j.dump(2) << '\n';
    std::cout << j.dump(2) << '\n';
  });

  // eval
  auto* ev = app.add_subcommand("eval", "Score a fine-tuned checkpoint on one split");
  ev->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data_dir)->check(CLI::ExistingDirectory);
  ev->add_option("--setting", setting)->check(CLI::IsMember({"id", "gen", "rec-gen"}));
  ev->add_option("--data-seed", data_seed);
  ev->add_option("--split", split)->check(CLI::IsMember({"train", "eval", "test"}));
  ev->callback([&] {
    Vocabulary vocab;
    Encoder model = Encoder::from_checkpoint(load_checkpoint(checkpoint), &vocab);
    Dataset ds = load_data(data_dir, setting, data_seed);
    std::cout << metrics_json(evaluate(model, vocab, pick_split(ds, split))).dump(2) << '\n';
  });

  // trials
  RunConfig tr_cfg;
  std::vector<std::string> variants{"plain", "tree"};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string pre_tree, pre_plain;
  auto* tr = app.add_subcommand("trials", "Multi-seed comparison of variants with permutation tests");
  tr_cfg.attach(tr);
  tr->add_option("--setting", setting)->check(CLI::IsMember({"id", "gen", "rec-gen"}));
  tr->add_option("--data-seed", data_seed);
  tr->add_option("--variants", variants)->delimiter(',');
  tr->add_option("--seeds", seeds)->delimiter(',');
  tr->add_option("--pretrained-tree", pre_tree, "Checkpoint for tree+pretrain")->check(CLI::ExistingFile);
  tr->add_option("--pretrained-plain", pre_plain, "Checkpoint for plain+pretrain")->check(CLI::ExistingFile);
  tr->add_option("--out", out)->required();
  tr->callback([&] {
    Grammar g = Grammar::builtin();
    Vocabulary vocab = grammar_vocabulary(g);
    const Setting s = parse_setting(setting);
    Dataset ds = build_dataset(g, SettingSpec::defaults(s), data_seed);
    std::vector<std::pair<std::string, const std::vector<LabeledSentence>*>> tests{{setting, &ds.test}};
    // GEN and REC_GEN share train/eval, so one GEN run scores both test sets.
    Dataset rec;
    if (s == Setting::kGen) {
      rec = build_dataset(g, SettingSpec::defaults(Setting::kRecGen), data_seed);
      tests.emplace_back(setting_name(Setting::kRecGen), &rec.test);
    }
    TrialSpec spec;
    spec.model = tr_cfg.model(static_cast<int>(vocab.size()));
    spec.train = tr_cfg.train(false);
    spec.seeds = seeds;
    write_manifest(out, flat_config(spec.model, spec.train), seeds, cmd);
    auto log = open_out(fs::path(out) / "trials.jsonl");
    std::vector<TrialReport> reports;
    std::map<std::pair<std::string, Variant>, std::vector<double>> f1;
    for (const auto& name : variants) {
      spec.variant = parse_variant(name);
      spec.pretrained.reset();
      if (variant_pretrained(spec.variant)) {
        const std::string& path = variant_gated(spec.variant) ? pre_tree : pre_plain;
        if (path.empty()) throw std::invalid_argument(std::string("variant ") + name + " needs a pretrained checkpoint");
        spec.pretrained = load_checkpoint(path);
      }
      for (auto& r : run_trials(spec, vocab, ds.train, ds.eval, tests, &log)) {
        f1[{r.setting, r.variant}] = r.f1s();
        reports.push_back(std::move(r));
      }
    }
    std::map<std::string, double> p_values;
    for (const auto& [name, _] : tests) {
      for (auto [a, b] : {std::pair{Variant::kTree, Variant::kPlain},
                          std::pair{Variant::kTreePretrained, Variant::kPlainPretrained}}) {
        if (f1.count({name, a}) && f1.count({name, b}))
          p_values[name + ":" + variant_name(a) + "_vs_" + variant_name(b)] =
              permutation_test(f1[{name, a}], f1[{name, b}]);
      }
    }
    auto js = open_out(fs::path(out) / "report.json");
    write_report_json(js, reports, p_values);
    auto csv = open_out(fs::path(out) / "report.csv");
    write_report_table(csv, reports);
    write_report_table(std::cout, reports);
    for (const auto& [k, p] : p_values) std::cout << "p[" << k << "] = " << format_double(p) << '\n';
  });

  // parse
  double threshold = 0.8;
  std::string input = "-";
  bool dump_ladder = false;
  auto* ps = app.add_subcommand("parse", "Induce one bracketed tree per input line");
  ps->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  ps->add_option("--threshold", threshold)->check(CLI::Range(0.0, 1.0));
  ps->add_option("--input", input, "Text file, one sentence per line, or - for stdin");
  ps->add_flag("--dump-ladder", dump_ladder, "Print merge probabilities instead of trees");
  ps->callback([&] {
    Vocabulary vocab;
    Encoder model = Encoder::from_checkpoint(load_checkpoint(checkpoint), &vocab);
    std::vector<std::vector<std::string>> corpus;
    for (const auto& line : read_lines(input)) corpus.push_back(split_ws(line));
    for (const auto& w : corpus)
      for (const auto& tok : w)
        if (!vocab.contains(tok)) warn("out-of-vocabulary word '" + tok + "' read as [UNK]");
    auto lad = ladders(model, vocab, corpus);
    for (std::size_t i = 0; i < lad.size(); ++i) {
      if (dump_ladder) write_ladder(std::cout, lad[i]);
      else std::cout << to_bracketed(extract(lad[i], threshold), corpus[i]) << '\n';
    }
  });

  // analyze
  std::string pattern = "det", profile_out;
  int n = 0;
  auto* an = app.add_subcommand("analyze", "Merge-order survey tables and breakpoint profiles");
  an->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  an->add_option("--pattern", pattern)->check(CLI::IsMember({"det", "adj", "rel"}));
  an->add_option("--n", n, "Sentences to survey (default: the pattern's standard size)");
  an->add_option("--seed", seed);
  an->add_option("--threshold", threshold)->check(CLI::Range(0.0, 1.0));
  an->add_option("--out", out, "CSV path; stdout when absent");
  an->add_option("--profile", profile_out, "Also write the per-layer breakpoint profile as CSV");
  an->callback([&] {
    Grammar g = Grammar::builtin();
    Vocabulary vocab;
    Encoder model = Encoder::from_checkpoint(load_checkpoint(checkpoint), &vocab);
    const SurveyPattern p = parse_pattern(pattern);
    SurveyTable t = run_survey(model, vocab, g, p, n > 0 ? n : default_survey_size(p), seed, threshold);
    if (out.empty()) {
      write_survey_csv(std::cout, t);
    } else {
      auto f = open_out(out);
      write_survey_csv(f, t);
    }
    if (!profile_out.empty()) {
      auto f = open_out(profile_out);
      f << "layer,mean,stddev,reference,count\n";
      for (const auto& l : breakpoint_profile(model, vocab, grammar_corpus(g, 20000, seed)))
        f << l.layer << ',' << format_double(l.mean) << ',' << format_double(l.stddev) << ','
          << format_double(l.reference) << ',' << l.count << '\n';
    }
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
