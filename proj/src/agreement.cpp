#include "treetf/agreement.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <unordered_set>

#include "json.hpp"
#include "treetf/util.hpp"

namespace treetf {

namespace {

using nlohmann::json;

bool nominal(const TokenInfo& t) { return t.pos == Pos::kNoun || t.pos == Pos::kPronoun; }

Pos parse_pos(const std::string& s) {
  for (Pos p : {Pos::kDet, Pos::kAdj, Pos::kNoun, Pos::kPronoun, Pos::kVerb, Pos::kRelativizer, Pos::kConjunction}) {
    if (s == pos_name(p)) return p;
  }
  throw AnnotationError("unknown part of speech '" + s + "'");
}

Number parse_number(const std::string& s) {
  for (Number n : {Number::kNone, Number::kSg, Number::kPl}) {
    if (s == number_name(n)) return n;
  }
  throw AnnotationError("unknown number '" + s + "'");
}

using Filter = bool (*)(const Derivation&);

struct SplitFilter {
  Filter positive;  // applied to the valid derivation
  Filter negative;  // applied to the corrupted derivation
};

bool any(const Derivation&) { return true; }
bool linear_ok(const Derivation& d) { return linear_valid(d); }
bool both_bad(const Derivation& d) { return !hierarchical_valid(d) && !linear_valid(d); }
bool hier_only(const Derivation& d) { return hierarchical_valid(d) && !linear_valid(d); }
bool linear_only(const Derivation& d) { return !hierarchical_valid(d) && linear_valid(d); }

std::vector<LabeledSentence> build_split(const Grammar& g, std::size_t size, const SplitFilter& filter,
                                         const SampleOptions& sampling, std::size_t attempts_per_item,
                                         std::uint64_t seed, const std::unordered_set<std::string>& earlier,
                                         const char* split_name, SplitStats& stats) {
  if (size % 2 != 0) throw std::invalid_argument(std::string(split_name) + " size must be even to balance labels");
  std::mt19937_64 rng(seed);
  std::vector<LabeledSentence> pos, neg;
  const std::size_t half = size / 2;
  const std::size_t budget = std::max<std::size_t>(size, 1) * attempts_per_item;
  std::size_t draws = 0;
  while (pos.size() < half || neg.size() < half) {
    if (draws >= budget) {
      throw BudgetExhausted(std::string(split_name) + ": generation budget of " + std::to_string(budget) +
                            " draws exhausted with " + std::to_string(pos.size()) + "/" + std::to_string(half) +
                            " valid and " + std::to_string(neg.size()) + "/" + std::to_string(half) +
                            " invalid kept (acceptance rate " +
                            format_double(static_cast<double>(pos.size() + neg.size()) / draws) + ")");
    }
    ++draws;
    Derivation d = sample(g, rng, sampling);
    bool want_pos = pos.size() < half, want_neg = neg.size() < half;
    if (want_pos && want_neg) {
      const bool coin = std::bernoulli_distribution(0.5)(rng);
      want_pos = coin;
      want_neg = !coin;
    }
    if (want_pos) {
      if (!filter.positive(d)) continue;
      if (earlier.count(d.text())) continue;
      pos.push_back({std::move(d), true, -1});
    } else {
      LabeledSentence c = corrupt(d, rng);
      if (!filter.negative(c.derivation)) continue;
      if (earlier.count(c.text())) continue;
      neg.push_back(std::move(c));
    }
  }
  // Shuffle so the file is not sorted by label.
  std::vector<LabeledSentence> out;
  out.reserve(size);
  for (auto& s : pos) out.push_back(std::move(s));
  for (auto& s : neg) out.push_back(std::move(s));
  std::shuffle(out.begin(), out.end(), rng);
  stats = split_stats(out);
  stats.draws = draws;
  stats.acceptance_rate = draws ? static_cast<double>(out.size()) / draws : 0.0;
  return out;
}

json stats_json(const SplitStats& s) {
  return {{"size", s.size},
          {"valid", s.valid},
          {"invalid", s.invalid},
          {"mean_depth", s.mean_depth},
          {"max_depth", s.max_depth},
          {"draws", s.draws},
          {"acceptance_rate", s.acceptance_rate},
          {"linear_oracle_agreement", s.linear_agree},
          {"hierarchical_oracle_agreement", s.hierarchical_agree}};
}

}  // namespace

bool linear_valid(const Derivation& d) {
  int last = -1;
  for (std::size_t i = 0; i < d.tokens.size(); ++i) {
    const auto& t = d.tokens[i];
    if (t.pos == Pos::kVerb) {
      if (last < 0) throw AnnotationError("verb '" + t.surface + "' has no noun or pronoun to its left");
      if (t.number != d.tokens[last].number) return false;
    }
    if (nominal(t)) last = static_cast<int>(i);
  }
  return true;
}

bool hierarchical_valid(const Derivation& d) {
  for (const auto& t : d.tokens) {
    if (t.pos != Pos::kVerb) continue;
    if (t.subject < 0 || t.subject >= static_cast<int>(d.tokens.size()) || !nominal(d.tokens[t.subject])) {
      throw AnnotationError("verb '" + t.surface + "' has no governing subject");
    }
    if (t.number != d.tokens[t.subject].number) return false;
  }
  return true;
}

const char* setting_name(Setting s) {
  switch (s) {
    case Setting::kId: return "id";
    case Setting::kGen: return "gen";
    case Setting::kRecGen: return "rec-gen";
  }
  return "?";
}

Setting parse_setting(const std::string& s) {
  if (s == "id" || s == "ID") return Setting::kId;
  if (s == "gen" || s == "GEN") return Setting::kGen;
  if (s == "rec-gen" || s == "rec_gen" || s == "REC_GEN") return Setting::kRecGen;
  throw std::invalid_argument("unknown setting '" + s + "' (expected id, gen or rec-gen)");
}

SampleOptions rec_gen_sampling(const Grammar& g) {
  SampleOptions o;
  // VP -> VT NP_acc and NP_acc -> NP_common_* keep the embedding chain going.
  o.overrides = embedding_overrides(g, 40.0,
                                    {{"VP", {0, 6.0}}, {"VP_3Sg", {0, 6.0}}});
  auto& acc = o.overrides["NP_acc"];
  acc.clear();
  for (auto a : g.alternatives("NP_acc")) {
    const auto& p = g.productions()[a];
    acc.push_back(p.weight * (p.rhs.front().terminal ? 0.1 : 1.0));
  }
  o.max_depth_cap = 15;
  o.min_depth = 6;
  o.max_tokens = 120;
  return o;
}

SettingSpec SettingSpec::defaults(Setting s) {
  SettingSpec spec;
  spec.setting = s;
  if (s == Setting::kRecGen) spec.test_sampling = rec_gen_sampling(Grammar::builtin());
  return spec;
}

SplitStats split_stats(const std::vector<LabeledSentence>& split) {
  SplitStats st;
  st.size = split.size();
  double depth_sum = 0.0;
  for (const auto& s : split) {
    (s.valid ? st.valid : st.invalid)++;
    depth_sum += s.derivation.depth;
    st.max_depth = std::max(st.max_depth, s.derivation.depth);
    st.linear_agree += linear_valid(s.derivation) == s.valid;
    st.hierarchical_agree += hierarchical_valid(s.derivation) == s.valid;
  }
  st.mean_depth = split.empty() ? 0.0 : depth_sum / static_cast<double>(split.size());
  return st;
}

Dataset build_dataset(const Grammar& g, const SettingSpec& spec, std::uint64_t seed) {
  Dataset ds;
  ds.setting = spec.setting;
  ds.seed = seed;
  const SampleOptions plain;
  const SplitFilter id_filter{any, any};
  const SplitFilter ambiguous{linear_ok, both_bad};
  const SplitFilter diagnostic{hier_only, linear_only};
  const bool gen = spec.setting != Setting::kId;
  std::unordered_set<std::string> seen;
  // Distinct streams per split; train/eval are shared by GEN and REC_GEN.
  std::seed_seq base{seed, static_cast<std::uint64_t>(gen ? 1 : 0)};
  std::vector<std::uint64_t> streams(3);
  base.generate(streams.begin(), streams.end());
  auto remember = [&](const std::vector<LabeledSentence>& split) {
    for (const auto& s : split) seen.insert(s.text());
  };
  ds.train = build_split(g, spec.train_size, gen ? ambiguous : id_filter, plain, spec.attempts_per_item, streams[0],
                         seen, "train", ds.train_stats);
  remember(ds.train);
  ds.eval = build_split(g, spec.eval_size, gen ? ambiguous : id_filter, plain, spec.attempts_per_item, streams[1],
                        seen, "eval", ds.eval_stats);
  remember(ds.eval);
  const std::uint64_t test_stream = streams[2] + (spec.setting == Setting::kRecGen ? 0x9e3779b97f4a7c15ull : 0);
  ds.test = build_split(g, spec.test_size, gen ? diagnostic : id_filter, spec.test_sampling, spec.attempts_per_item,
                        test_stream, seen, "test", ds.test_stats);
  return ds;
}

void write_jsonl(std::ostream& os, const std::vector<LabeledSentence>& split) {
  for (const auto& s : split) {
    json ann = json::array();
    for (const auto& t : s.derivation.tokens) {
      json a{{"token", t.surface}, {"stem", t.stem}, {"pos", pos_name(t.pos)}, {"number", number_name(t.number)}};
      a["subject"] = t.subject >= 0 ? json(t.subject) : json(nullptr);
      ann.push_back(std::move(a));
    }
    json clauses = json::array();
    for (const auto& [b, e] : s.derivation.clauses) clauses.push_back({b, e});
    json row{{"text", s.text()},
             {"label", violation_label(s)},
             {"valid", s.valid},
             {"depth", s.derivation.depth},
             {"swapped_verb_index", s.swapped_verb >= 0 ? json(s.swapped_verb) : json(nullptr)},
             {"clauses", std::move(clauses)},
             {"annotations", std::move(ann)}};
    os << row.dump() << '\n';
  }
}

std::vector<LabeledSentence> read_jsonl(std::istream& is) {
  std::vector<LabeledSentence> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      const json row = json::parse(line);
      LabeledSentence s;
      s.valid = row.at("valid").get<bool>();
      s.derivation.depth = row.at("depth").get<int>();
      const auto& sv = row.at("swapped_verb_index");
      s.swapped_verb = sv.is_null() ? -1 : sv.get<int>();
      if (row.contains("clauses")) {
        for (const auto& c : row["clauses"]) s.derivation.clauses.emplace_back(c.at(0).get<int>(), c.at(1).get<int>());
      }
      for (const auto& a : row.at("annotations")) {
        TokenInfo t;
        t.surface = a.at("token").get<std::string>();
        t.stem = a.value("stem", t.surface);
        t.pos = parse_pos(a.at("pos").get<std::string>());
        t.number = parse_number(a.at("number").get<std::string>());
        t.inflected = t.surface != t.stem;
        t.subject = a.at("subject").is_null() ? -1 : a.at("subject").get<int>();
        s.derivation.tokens.push_back(std::move(t));
      }
      out.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw std::runtime_error("record " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::pair<const char*, const std::vector<LabeledSentence>*> splits[] = {
      {"train", &ds.train}, {"eval", &ds.eval}, {"test", &ds.test}};
  for (const auto& [name, split] : splits) {
    std::ofstream f(fs::path(dir) / (std::string(name) + ".jsonl"));
    if (!f) throw std::runtime_error("cannot write " + dir);
    write_jsonl(f, *split);
  }
  json stats{{"setting", setting_name(ds.setting)},
             {"seed", ds.seed},
             {"train", stats_json(ds.train_stats)},
             {"eval", stats_json(ds.eval_stats)},
             {"test", stats_json(ds.test_stats)}};
  std::ofstream f(fs::path(dir) / "stats.json");
  f << stats.dump(2) << '\n';
}

Dataset read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  Dataset ds;
  auto load = [&](const char* name) {
    std::ifstream f(fs::path(dir) / (std::string(name) + ".jsonl"));
    if (!f) throw std::runtime_error("missing " + (fs::path(dir) / (std::string(name) + ".jsonl")).string());
    return read_jsonl(f);
  };
  ds.train = load("train");
  ds.eval = load("eval");
  ds.test = load("test");
  ds.train_stats = split_stats(ds.train);
  ds.eval_stats = split_stats(ds.eval);
  ds.test_stats = split_stats(ds.test);
  if (std::ifstream sf(fs::path(dir) / "stats.json"); sf) {
    const json stats = json::parse(sf, nullptr, false);
    if (stats.is_object() && stats.contains("setting")) ds.setting = parse_setting(stats["setting"].get<std::string>());
    if (stats.is_object() && stats.contains("seed")) ds.seed = stats["seed"].get<std::uint64_t>();
  }
  return ds;
}

}  // namespace treetf
