#include "upton/game.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

#include "upton/errors.hpp"
#include "upton/metrics.hpp"
#include "upton/perturb.hpp"
#include "upton/rng.hpp"

namespace upton {
namespace {

using nlohmann::json;

TokenSequence tokens_of(const Document& doc) {
  return doc.tokens.empty() ? tokenize(doc.text) : doc.tokens;
}

std::string format_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw IoError("number formatting failed");
  return std::string(buf, end);
}

TrainConfig seeded(TrainConfig tc, std::uint64_t base, const std::string& name) {
  tc.seed = derive_seed(base, name);
  return tc;
}

Corpus header_like(const Corpus& corpus) {
  Corpus out;
  out.num_labels = corpus.num_labels;
  out.author_names = corpus.author_names;
  return out;
}

void append_docs(Corpus& dst, const Corpus& src) {
  dst.documents.insert(dst.documents.end(), src.documents.begin(),
                       src.documents.end());
}

void validate_config(const GameConfig& cfg) {
  if (cfg.budget < 0.0 || cfg.budget > 1.0)
    throw ConfigError("budget must be in [0, 1]");
  if (!(cfg.train_fraction > 0.0) || !(cfg.train_fraction < 1.0))
    throw ConfigError("train_fraction must be in (0, 1)");
  if (cfg.k_d < 1) throw ConfigError("k_d must be >= 1");
  if (cfg.m < 1) throw ConfigError("m must be >= 1");
  if (cfg.poisoned_to_clean_ratio < 0.0)
    throw ConfigError("poisoned_to_clean_ratio must be >= 0");
  if (cfg.poisoned_label_fraction < 0.0 || cfg.poisoned_label_fraction > 1.0)
    throw ConfigError("poisoned_label_fraction must be in [0, 1]");
  if (cfg.overlap_fraction < 0.0 || cfg.overlap_fraction > 1.0)
    throw ConfigError("overlap_fraction must be in [0, 1]");
  if (cfg.n_per_pair < 1) throw ConfigError("n_per_pair must be >= 1");
  if (cfg.jobs < 1) throw ConfigError("jobs must be >= 1");
}

// Class-wide success matrix that tolerates a short probe: the per-pair count
// is clamped to the smallest present label's document count, and labels
// absent from the probe keep an all-zero row, which assign_classwide demotes
// to the any-other fallback.
std::vector<std::vector<double>> classwide_matrix_lenient(
    const Model& model, const Featurizer& featurizer, const Corpus& probe,
    const SubstitutionLexicon& lexicon, double budget, int n_per_pair) {
  const int M = probe.num_labels;
  std::vector<std::vector<std::size_t>> by_label(M);
  for (std::size_t i = 0; i < probe.size(); ++i)
    by_label[probe.documents[i].author].push_back(i);
  std::size_t min_present = 0;
  for (const auto& bucket : by_label)
    if (!bucket.empty())
      min_present = min_present == 0 ? bucket.size()
                                     : std::min(min_present, bucket.size());
  if (min_present == 0) throw ConfigError("empty class-wide probe");
  const std::size_t n =
      std::min<std::size_t>(min_present, static_cast<std::size_t>(n_per_pair));

  std::vector matrix(M, std::vector<double>(M, 0.0));
  for (int i = 0; i < M; ++i) {
    matrix[i][i] = -1.0;
    if (by_label[i].empty()) continue;
    for (int j = 0; j < M; ++j) {
      if (j == i) continue;
      int flipped = 0;
      for (std::size_t s = 0; s < n; ++s) {
        const Document& doc = probe.documents[by_label[i][s]];
        if (budget == 0.0) {
          if (predict(model, featurizer.featurize(tokens_of(doc))).first == j)
            ++flipped;
          continue;
        }
        Termination term;
        term.kind = Termination::Kind::exact_target;
        term.target = j;
        if (greedy_attack(doc, model, featurizer, term, lexicon, budget)
                .success)
          ++flipped;
      }
      matrix[i][j] = static_cast<double>(flipped) / static_cast<double>(n);
    }
  }
  return matrix;
}

TargetAssignment build_assignment(const GameConfig& cfg,
                                  const Corpus& to_poison, const Corpus& probe,
                                  const Model& defender,
                                  const Featurizer& featurizer,
                                  const SubstitutionLexicon& lexicon) {
  switch (cfg.strategy) {
    case Strategy::non_target:
      return assign_nontarget(to_poison);
    case Strategy::sample_wide:
      return assign_samplewide(to_poison, derive_seed(cfg.seed, "samplewide"));
    case Strategy::class_wide: {
      auto matrix = classwide_matrix_lenient(defender, featurizer, probe,
                                             lexicon, cfg.budget,
                                             cfg.n_per_pair);
      return assign_classwide(to_poison, matrix);
    }
  }
  throw ConfigError("unknown strategy");
}

struct PoisonStats {
  double success_rate = -1.0;
  double mean_substitutions = -1.0;
};

PoisonStats stats_of(const std::vector<PerturbationResult>& results) {
  PoisonStats stats;
  if (results.empty()) return stats;
  long successes = 0, subs = 0;
  for (const auto& r : results) {
    successes += r.success ? 1 : 0;
    subs += static_cast<long>(r.substitutions.size());
  }
  stats.success_rate =
      static_cast<double>(successes) / static_cast<double>(results.size());
  stats.mean_substitutions =
      static_cast<double>(subs) / static_cast<double>(results.size());
  return stats;
}

void record_assignment(GameTrace& trace, const TargetAssignment& assignment) {
  if (assignment.class_map) trace.class_map = assignment.class_map;
  trace.fallback_labels = assignment.fallback_labels;
  trace.non_injective = assignment.non_injective;
}

json train_to_json(const TrainConfig& tc) {
  return json{{"learning_rate", tc.learning_rate},
              {"epochs", tc.epochs},
              {"batch_size", tc.batch_size},
              {"l2", tc.l2},
              {"seed", tc.seed}};
}

TrainConfig train_from_json(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  static const std::set<std::string> known{"learning_rate", "epochs",
                                           "batch_size", "l2", "seed"};
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!known.count(key))
      throw ConfigError("unknown key in " + where + ": " + key);
  }
  TrainConfig tc;
  try {
    if (j.contains("learning_rate")) tc.learning_rate = j["learning_rate"];
    if (j.contains("epochs")) tc.epochs = j["epochs"];
    if (j.contains("batch_size")) tc.batch_size = j["batch_size"];
    if (j.contains("l2")) tc.l2 = j["l2"];
    if (j.contains("seed")) tc.seed = j["seed"];
  } catch (const json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return tc;
}

}  // namespace

const char* scenario_name(Scenario scenario) {
  switch (scenario) {
    case Scenario::one_time: return "one_time";
    case Scenario::incremental: return "incremental";
    case Scenario::post_attack: return "post_attack";
    case Scenario::partial: return "partial";
  }
  throw ConfigError("unknown scenario");
}

Scenario scenario_from_name(const std::string& name) {
  if (name == "one_time") return Scenario::one_time;
  if (name == "incremental") return Scenario::incremental;
  if (name == "post_attack") return Scenario::post_attack;
  if (name == "partial") return Scenario::partial;
  throw ConfigError("unknown scenario: " + name);
}

std::string game_config_to_json(const GameConfig& cfg) {
  json doc{{"scenario", scenario_name(cfg.scenario)},
           {"strategy", strategy_name(cfg.strategy)},
           {"budget", cfg.budget},
           {"seed", cfg.seed},
           {"train_fraction", cfg.train_fraction},
           {"k_d", cfg.k_d},
           {"m", cfg.m},
           {"poisoned_to_clean_ratio", cfg.poisoned_to_clean_ratio},
           {"post_attack_incremental", cfg.post_attack_incremental},
           {"poisoned_label_fraction", cfg.poisoned_label_fraction},
           {"fractions", cfg.fractions},
           {"overlap_fraction", cfg.overlap_fraction},
           {"n_per_pair", cfg.n_per_pair},
           {"defender_family", family_name(cfg.defender_family)},
           {"attacker_family", family_name(cfg.attacker_family)},
           {"ngram_dim", cfg.ngram_dim},
           {"attacker_ngram_dim", cfg.attacker_ngram_dim},
           {"embed_dim", cfg.embed_dim},
           {"table_theta", cfg.table_theta},
           {"defender_train", train_to_json(cfg.defender_train)},
           {"attacker_train", train_to_json(cfg.attacker_train)},
           {"defender_finetune", train_to_json(cfg.defender_finetune)},
           {"attacker_finetune", train_to_json(cfg.attacker_finetune)},
           {"jobs", cfg.jobs},
           {"report_all_labels", cfg.report_all_labels}};
  return doc.dump();
}

GameConfig game_config_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> known{
      "scenario",      "strategy",       "budget",
      "seed",          "train_fraction", "k_d",
      "m",             "poisoned_to_clean_ratio",
      "post_attack_incremental",         "poisoned_label_fraction",
      "fractions",     "overlap_fraction",
      "n_per_pair",    "defender_family",
      "attacker_family",                 "ngram_dim",
      "attacker_ngram_dim",
      "embed_dim",     "table_theta",    "defender_train",
      "attacker_train",                  "defender_finetune",
      "attacker_finetune",               "jobs",
      "report_all_labels"};
  for (const auto& [key, value] : doc.items()) {
    (void)value;
    if (!known.count(key)) throw ConfigError("unknown config key: " + key);
  }
  GameConfig cfg;
  try {
    if (doc.contains("scenario"))
      cfg.scenario = scenario_from_name(doc["scenario"].get<std::string>());
    if (doc.contains("strategy"))
      cfg.strategy = strategy_from_name(doc["strategy"].get<std::string>());
    if (doc.contains("budget")) cfg.budget = doc["budget"];
    if (doc.contains("seed")) cfg.seed = doc["seed"];
    if (doc.contains("train_fraction"))
      cfg.train_fraction = doc["train_fraction"];
    if (doc.contains("k_d")) cfg.k_d = doc["k_d"];
    if (doc.contains("m")) cfg.m = doc["m"];
    if (doc.contains("poisoned_to_clean_ratio"))
      cfg.poisoned_to_clean_ratio = doc["poisoned_to_clean_ratio"];
    if (doc.contains("post_attack_incremental"))
      cfg.post_attack_incremental = doc["post_attack_incremental"];
    if (doc.contains("poisoned_label_fraction"))
      cfg.poisoned_label_fraction = doc["poisoned_label_fraction"];
    if (doc.contains("fractions")) {
      auto f = doc["fractions"].get<std::vector<double>>();
      if (f.size() != 3) throw ConfigError("fractions must have 3 entries");
      std::copy(f.begin(), f.end(), cfg.fractions.begin());
    }
    if (doc.contains("overlap_fraction"))
      cfg.overlap_fraction = doc["overlap_fraction"];
    if (doc.contains("n_per_pair")) cfg.n_per_pair = doc["n_per_pair"];
    if (doc.contains("defender_family"))
      cfg.defender_family =
          family_from_name(doc["defender_family"].get<std::string>());
    if (doc.contains("attacker_family"))
      cfg.attacker_family =
          family_from_name(doc["attacker_family"].get<std::string>());
    if (doc.contains("ngram_dim")) cfg.ngram_dim = doc["ngram_dim"];
    if (doc.contains("attacker_ngram_dim"))
      cfg.attacker_ngram_dim = doc["attacker_ngram_dim"];
    if (doc.contains("embed_dim")) cfg.embed_dim = doc["embed_dim"];
    if (doc.contains("table_theta")) cfg.table_theta = doc["table_theta"];
    if (doc.contains("defender_train"))
      cfg.defender_train = train_from_json(doc["defender_train"],
                                           "defender_train");
    if (doc.contains("attacker_train"))
      cfg.attacker_train = train_from_json(doc["attacker_train"],
                                           "attacker_train");
    if (doc.contains("defender_finetune"))
      cfg.defender_finetune = train_from_json(doc["defender_finetune"],
                                              "defender_finetune");
    if (doc.contains("attacker_finetune"))
      cfg.attacker_finetune = train_from_json(doc["attacker_finetune"],
                                              "attacker_finetune");
    if (doc.contains("jobs")) cfg.jobs = doc["jobs"];
    if (doc.contains("report_all_labels"))
      cfg.report_all_labels = doc["report_all_labels"];
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  validate_config(cfg);
  return cfg;
}

GameConfig load_game_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return game_config_from_json(text);
}

namespace {

json epoch_to_json(const EpochRecord& rec) {
  return json{{"epoch", rec.epoch},
              {"released_total", rec.released_total},
              {"defender_accuracy", rec.defender_accuracy},
              {"poison_success_rate", rec.poison_success_rate},
              {"mean_substitutions", rec.mean_substitutions},
              {"attacker_acted", rec.attacker_acted},
              {"attacker_update_saved", rec.attacker_update_saved},
              {"attacker_val_accuracy", rec.attacker_val_accuracy},
              {"attacker_val_baseline", rec.attacker_val_baseline},
              {"attacker_new_batch_accuracy", rec.attacker_new_batch_accuracy},
              {"attacker_accuracy", rec.attacker_accuracy},
              {"per_label_accuracy", rec.per_label_accuracy}};
}

EpochRecord epoch_from_json(const json& j) {
  EpochRecord rec;
  rec.epoch = j.at("epoch");
  rec.released_total = j.at("released_total");
  rec.defender_accuracy = j.at("defender_accuracy");
  rec.poison_success_rate = j.at("poison_success_rate");
  rec.mean_substitutions = j.at("mean_substitutions");
  rec.attacker_acted = j.at("attacker_acted");
  rec.attacker_update_saved = j.at("attacker_update_saved");
  rec.attacker_val_accuracy = j.at("attacker_val_accuracy");
  rec.attacker_val_baseline = j.at("attacker_val_baseline");
  rec.attacker_new_batch_accuracy = j.at("attacker_new_batch_accuracy");
  rec.attacker_accuracy = j.at("attacker_accuracy");
  rec.per_label_accuracy = j.at("per_label_accuracy").get<std::vector<double>>();
  return rec;
}

}  // namespace

void save_trace_json(const GameTrace& trace,
                     const std::filesystem::path& path) {
  json doc{{"format", "upton-trace"},
           {"version", 1},
           {"scenario", trace.scenario},
           {"strategy", trace.strategy},
           {"seed", trace.seed},
           {"config_json", trace.config_json},
           {"clean_reference_accuracy", trace.clean_reference_accuracy},
           {"final_attacker_accuracy", trace.final_attacker_accuracy},
           {"pre_defense_accuracy", trace.pre_defense_accuracy},
           {"poisoned_label_accuracy", trace.poisoned_label_accuracy},
           {"unpoisoned_label_accuracy", trace.unpoisoned_label_accuracy},
           {"clean_poisoned_label_accuracy",
            trace.clean_poisoned_label_accuracy},
           {"clean_unpoisoned_label_accuracy",
            trace.clean_unpoisoned_label_accuracy},
           {"poisoned_labels", trace.poisoned_labels},
           {"fallback_labels", trace.fallback_labels},
           {"non_injective", trace.non_injective},
           {"degenerate_model", trace.degenerate_model},
           {"poison_success_rate", trace.poison_success_rate},
           {"mean_substitutions", trace.mean_substitutions},
           {"poisoned_doc_ids", trace.poisoned_doc_ids},
           {"information_barrier", trace.information_barrier}};
  doc["class_map"] = trace.class_map ? json(*trace.class_map) : json(nullptr);
  json epochs = json::array();
  for (const auto& rec : trace.epochs) epochs.push_back(epoch_to_json(rec));
  doc["epochs"] = std::move(epochs);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

GameTrace load_trace_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ParseError(std::string("corrupt trace file: ") + e.what());
  }
  if (!doc.is_object() || doc.value("format", "") != "upton-trace" ||
      doc.value("version", 0) != 1)
    throw ParseError("not a trace file: " + path.string());
  GameTrace trace;
  try {
    trace.scenario = doc.at("scenario");
    trace.strategy = doc.at("strategy");
    trace.seed = doc.at("seed");
    trace.config_json = doc.at("config_json");
    trace.clean_reference_accuracy = doc.at("clean_reference_accuracy");
    trace.final_attacker_accuracy = doc.at("final_attacker_accuracy");
    trace.pre_defense_accuracy = doc.at("pre_defense_accuracy");
    trace.poisoned_label_accuracy = doc.at("poisoned_label_accuracy");
    trace.unpoisoned_label_accuracy = doc.at("unpoisoned_label_accuracy");
    trace.clean_poisoned_label_accuracy =
        doc.at("clean_poisoned_label_accuracy");
    trace.clean_unpoisoned_label_accuracy =
        doc.at("clean_unpoisoned_label_accuracy");
    trace.poisoned_labels = doc.at("poisoned_labels").get<std::vector<int>>();
    if (!doc.at("class_map").is_null())
      trace.class_map = doc.at("class_map").get<std::vector<int>>();
    trace.fallback_labels = doc.at("fallback_labels").get<std::vector<int>>();
    trace.non_injective = doc.at("non_injective");
    trace.degenerate_model = doc.at("degenerate_model");
    trace.poison_success_rate = doc.at("poison_success_rate");
    trace.mean_substitutions = doc.at("mean_substitutions");
    trace.poisoned_doc_ids =
        doc.at("poisoned_doc_ids").get<std::vector<std::string>>();
    trace.information_barrier = doc.at("information_barrier");
    for (const auto& rec : doc.at("epochs"))
      trace.epochs.push_back(epoch_from_json(rec));
  } catch (const json::exception& e) {
    throw ParseError(std::string("corrupt trace file: ") + e.what());
  }
  return trace;
}

void save_trace_csv(const GameTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "epoch,released_total,defender_accuracy,poison_success_rate,"
         "mean_substitutions,attacker_acted,attacker_update_saved,"
         "attacker_val_accuracy,attacker_val_baseline,"
         "attacker_new_batch_accuracy,attacker_accuracy,per_label_accuracy\n";
  for (const auto& rec : trace.epochs) {
    out << rec.epoch << ',' << rec.released_total << ','
        << format_double(rec.defender_accuracy) << ','
        << format_double(rec.poison_success_rate) << ','
        << format_double(rec.mean_substitutions) << ','
        << (rec.attacker_acted ? 1 : 0) << ','
        << (rec.attacker_update_saved ? 1 : 0) << ','
        << format_double(rec.attacker_val_accuracy) << ','
        << format_double(rec.attacker_val_baseline) << ','
        << format_double(rec.attacker_new_batch_accuracy) << ','
        << format_double(rec.attacker_accuracy) << ',';
    for (std::size_t i = 0; i < rec.per_label_accuracy.size(); ++i) {
      if (i) out << ';';
      out << format_double(rec.per_label_accuracy[i]);
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::shared_ptr<const EmbeddingTable> make_game_table(
    const GameConfig& cfg, const SubstitutionLexicon& lexicon,
    const Corpus& corpus) {
  std::set<std::string> seen;
  for (const auto& doc : corpus.documents)
    for (const auto& token : tokens_of(doc)) seen.insert(token);
  std::vector<std::string> extra(seen.begin(), seen.end());
  return std::make_shared<const EmbeddingTable>(
      make_default_table(lexicon, extra, cfg.embed_dim,
                         derive_seed(cfg.seed, "table"), cfg.table_theta));
}

std::shared_ptr<Featurizer> make_featurizer(
    Family family, const GameConfig& cfg,
    std::shared_ptr<const EmbeddingTable> table, int ngram_dim) {
  if (family == Family::ngram_hash)
    return std::make_shared<NgramFeaturizer>(
        ngram_dim > 0 ? ngram_dim : cfg.ngram_dim,
        derive_seed(cfg.seed, "ngram-features"));
  if (!table) throw ConfigError("mean_embedding featurizer requires a table");
  return std::make_shared<EmbeddingFeaturizer>(std::move(table));
}

namespace {

struct GameParts {
  Corpus all;
  Corpus train;
  Corpus test;
  GameOutcome out;
};

GameParts open_game(const GameConfig& cfg, const Corpus& corpus,
                    const SubstitutionLexicon& lexicon) {
  validate_config(cfg);
  lexicon.validate();
  GameParts parts;
  parts.all = corpus;
  tokenize_corpus(parts.all);
  auto [train_c, test_c] =
      split(parts.all, cfg.train_fraction, derive_seed(cfg.seed, "split"));
  parts.train = std::move(train_c);
  parts.test = std::move(test_c);
  parts.out.table = make_game_table(cfg, lexicon, parts.all);
  parts.out.defender_featurizer =
      make_featurizer(cfg.defender_family, cfg, parts.out.table);
  // The attacker does not share the defender's synonym metric: its
  // mean-embedding featurizer runs over a private token-identity table.
  std::shared_ptr<const EmbeddingTable> attacker_table = parts.out.table;
  if (cfg.attacker_family == Family::mean_embedding) {
    std::set<std::string> seen;
    for (const auto& doc : parts.all.documents)
      for (const auto& token : tokens_of(doc)) seen.insert(token);
    attacker_table = std::make_shared<const EmbeddingTable>(make_default_table(
        SubstitutionLexicon{}, {seen.begin(), seen.end()}, cfg.embed_dim,
        derive_seed(cfg.seed, "attacker-table"), cfg.table_theta));
  }
  parts.out.attacker_featurizer =
      make_featurizer(cfg.attacker_family, cfg, attacker_table,
                      cfg.attacker_ngram_dim);
  parts.out.trace.strategy = strategy_name(cfg.strategy);
  parts.out.trace.seed = cfg.seed;
  parts.out.trace.config_json = game_config_to_json(cfg);
  return parts;
}

}  // namespace

GameOutcome run_one_time(const GameConfig& cfg, const Corpus& corpus,
                         const SubstitutionLexicon& lexicon) {
  GameParts parts = open_game(cfg, corpus, lexicon);
  GameOutcome& out = parts.out;
  GameTrace& trace = out.trace;
  trace.scenario = scenario_name(Scenario::one_time);

  out.defender = train(parts.train, *out.defender_featurizer,
                       seeded(cfg.defender_train, cfg.seed, "defender-train"));
  TargetAssignment assignment =
      build_assignment(cfg, parts.train, parts.train, out.defender,
                       *out.defender_featurizer, lexicon);
  PoisonBatchResult batch =
      poison_batch(parts.train, out.defender, *out.defender_featurizer,
                   assignment, lexicon, cfg.budget, cfg.jobs);
  out.clean_train = std::move(parts.train);
  out.poisoned_train = std::move(batch.poisoned);

  out.attacker = train(out.poisoned_train, *out.attacker_featurizer,
                       seeded(cfg.attacker_train, cfg.seed, "attacker-train"));
  Model reference =
      train(out.clean_train, *out.attacker_featurizer,
            seeded(cfg.attacker_train, cfg.seed, "attacker-train"));

  trace.clean_reference_accuracy =
      accuracy(reference, parts.test, *out.attacker_featurizer);
  trace.final_attacker_accuracy =
      accuracy(out.attacker, parts.test, *out.attacker_featurizer);
  PoisonStats stats = stats_of(batch.results);
  trace.poison_success_rate = stats.success_rate;
  trace.mean_substitutions = stats.mean_substitutions;
  trace.degenerate_model = batch.degenerate_model;
  record_assignment(trace, assignment);
  for (const auto& doc : out.clean_train.documents)
    trace.poisoned_doc_ids.push_back(doc.id);

  EpochRecord rec;
  rec.epoch = 0;
  rec.released_total = static_cast<long>(out.poisoned_train.size());
  rec.defender_accuracy =
      accuracy(out.defender, parts.test, *out.defender_featurizer);
  rec.poison_success_rate = stats.success_rate;
  rec.mean_substitutions = stats.mean_substitutions;
  rec.attacker_acted = true;
  rec.attacker_update_saved = true;
  rec.attacker_accuracy = trace.final_attacker_accuracy;
  rec.per_label_accuracy =
      per_label_accuracy(out.attacker, parts.test, *out.attacker_featurizer);
  trace.epochs.push_back(std::move(rec));
  trace.information_barrier = true;
  return out;
}

GameOutcome run_incremental(const GameConfig& cfg, const Corpus& corpus,
                            const SubstitutionLexicon& lexicon) {
  GameParts parts = open_game(cfg, corpus, lexicon);
  GameOutcome& out = parts.out;
  GameTrace& trace = out.trace;
  trace.scenario = scenario_name(Scenario::incremental);

  const auto batches =
      batch_stream(parts.train, static_cast<std::size_t>(cfg.k_d),
                   derive_seed(cfg.seed, "stream"));

  Corpus defender_clean = header_like(parts.train);
  Corpus released = header_like(parts.train);
  Corpus pending = header_like(parts.train);
  Corpus val_pool = header_like(parts.train);
  Corpus collected = header_like(parts.train);
  Model defender, attacker;
  bool have_attacker = false;
  std::vector<PerturbationResult> all_results;
  long released_total = 0;
  int collections = 0;

  auto attacker_step = [&](EpochRecord& rec) {
    rec.attacker_acted = true;
    const std::size_t n = pending.size();
    const std::size_t v = n >= 2 ? std::max<std::size_t>(1, n / 10) : 0;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed,
                        "attacker-val-" + std::to_string(collections)));
    rng.shuffle(order);
    std::vector<std::size_t> val_idx(order.begin(), order.begin() + v);
    std::vector<std::size_t> train_idx(order.begin() + v, order.end());
    std::sort(val_idx.begin(), val_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
    for (std::size_t i : val_idx)
      val_pool.documents.push_back(pending.documents[i]);
    for (std::size_t i : train_idx)
      collected.documents.push_back(pending.documents[i]);

    // The attacker retains everything it has collected; a convex model
    // fine-tuned on the newest slice alone would converge to that slice's
    // optimum and forget the rest, so each update runs over the full
    // collection.
    if (!have_attacker) {
      attacker = train(collected, *out.attacker_featurizer,
                       seeded(cfg.attacker_train, cfg.seed, "attacker-train"));
      have_attacker = true;
      rec.attacker_update_saved = true;
      if (!val_pool.empty())
        rec.attacker_val_accuracy =
            accuracy(attacker, val_pool, *out.attacker_featurizer);
      rec.attacker_new_batch_accuracy =
          accuracy(attacker, pending, *out.attacker_featurizer);
    } else {
      Model candidate =
          collected.empty()
              ? attacker
              : fine_tune(attacker, collected, *out.attacker_featurizer,
                          seeded(cfg.attacker_finetune, cfg.seed,
                                 "attacker-finetune-" +
                                     std::to_string(collections)));
      rec.attacker_new_batch_accuracy =
          accuracy(candidate, pending, *out.attacker_featurizer);
      if (!val_pool.empty()) {
        rec.attacker_val_accuracy =
            accuracy(candidate, val_pool, *out.attacker_featurizer);
        rec.attacker_val_baseline =
            accuracy(attacker, val_pool, *out.attacker_featurizer);
        if (rec.attacker_val_accuracy > rec.attacker_val_baseline) {
          attacker = std::move(candidate);
          rec.attacker_update_saved = true;
        }
      } else {
        attacker = std::move(candidate);
        rec.attacker_update_saved = true;
      }
    }
    rec.attacker_accuracy =
        accuracy(attacker, parts.test, *out.attacker_featurizer);
    rec.per_label_accuracy =
        per_label_accuracy(attacker, parts.test, *out.attacker_featurizer);
    pending.documents.clear();
    ++collections;
  };

  for (std::size_t e = 0; e < batches.size(); ++e) {
    const Corpus& batch_corpus = batches[e];
    append_docs(defender_clean, batch_corpus);
    defender =
        e == 0 ? train(batch_corpus, *out.defender_featurizer,
                       seeded(cfg.defender_train, cfg.seed, "defender-train"))
               : fine_tune(defender, batch_corpus, *out.defender_featurizer,
                           seeded(cfg.defender_finetune, cfg.seed,
                                  "defender-finetune-" + std::to_string(e)));
    TargetAssignment assignment =
        build_assignment(cfg, batch_corpus, defender_clean, defender,
                         *out.defender_featurizer, lexicon);
    PoisonBatchResult pb =
        poison_batch(batch_corpus, defender, *out.defender_featurizer,
                     assignment, lexicon, cfg.budget, cfg.jobs);
    append_docs(released, pb.poisoned);
    append_docs(pending, pb.poisoned);
    for (auto& r : pb.results) all_results.push_back(std::move(r));
    trace.degenerate_model = trace.degenerate_model || pb.degenerate_model;
    record_assignment(trace, assignment);
    released_total += static_cast<long>(batch_corpus.size());

    EpochRecord rec;
    rec.epoch = static_cast<int>(e);
    rec.released_total = released_total;
    rec.defender_accuracy =
        accuracy(defender, parts.test, *out.defender_featurizer);
    PoisonStats stats = stats_of(pb.results);
    rec.poison_success_rate = stats.success_rate;
    rec.mean_substitutions = stats.mean_substitutions;
    if ((e + 1) % static_cast<std::size_t>(cfg.m) == 0) attacker_step(rec);
    trace.epochs.push_back(std::move(rec));
  }
  if (!pending.empty()) {
    EpochRecord rec;
    rec.epoch = static_cast<int>(batches.size());
    rec.released_total = released_total;
    rec.defender_accuracy =
        accuracy(defender, parts.test, *out.defender_featurizer);
    attacker_step(rec);
    trace.epochs.push_back(std::move(rec));
  }

  Model reference =
      train(parts.train, *out.attacker_featurizer,
            seeded(cfg.attacker_train, cfg.seed, "attacker-train"));
  trace.clean_reference_accuracy =
      accuracy(reference, parts.test, *out.attacker_featurizer);
  trace.final_attacker_accuracy =
      accuracy(attacker, parts.test, *out.attacker_featurizer);
  PoisonStats stats = stats_of(all_results);
  trace.poison_success_rate = stats.success_rate;
  trace.mean_substitutions = stats.mean_substitutions;
  for (const auto& doc : released.documents)
    trace.poisoned_doc_ids.push_back(doc.id);
  trace.information_barrier = true;

  out.clean_train = std::move(defender_clean);
  out.poisoned_train = std::move(released);
  out.defender = std::move(defender);
  out.attacker = std::move(attacker);
  return out;
}

GameOutcome run_post_attack(const GameConfig& cfg, const Corpus& corpus,
                            const SubstitutionLexicon& lexicon) {
  GameParts parts = open_game(cfg, corpus, lexicon);
  GameOutcome& out = parts.out;
  GameTrace& trace = out.trace;
  trace.scenario = scenario_name(Scenario::post_attack);

  auto three = partition_three(parts.train, cfg.fractions,
                               derive_seed(cfg.seed, "parts"),
                               cfg.overlap_fraction);

  out.defender = train(three[0], *out.defender_featurizer,
                       seeded(cfg.defender_train, cfg.seed, "defender-train"));
  Model attacker =
      train(three[1], *out.attacker_featurizer,
            seeded(cfg.attacker_train, cfg.seed, "attacker-train"));
  trace.pre_defense_accuracy =
      accuracy(attacker, parts.test, *out.attacker_featurizer);
  trace.clean_reference_accuracy = trace.pre_defense_accuracy;

  const long want = std::lround(cfg.poisoned_to_clean_ratio *
                                static_cast<double>(three[1].size()));
  const std::size_t take = std::min<std::size_t>(
      three[2].size(), static_cast<std::size_t>(std::max<long>(want, 0)));
  std::vector<std::size_t> order(three[2].size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(cfg.seed, "post-sample"));
  rng.shuffle(order);
  std::vector<std::size_t> chosen(order.begin(), order.begin() + take);
  std::sort(chosen.begin(), chosen.end());
  Corpus sub = header_like(three[2]);
  for (std::size_t i : chosen)
    sub.documents.push_back(three[2].documents[i]);

  std::vector<PerturbationResult> results;
  if (!sub.empty()) {
    TargetAssignment assignment = build_assignment(
        cfg, sub, three[0], out.defender, *out.defender_featurizer, lexicon);
    PoisonBatchResult batch =
        poison_batch(sub, out.defender, *out.defender_featurizer, assignment,
                     lexicon, cfg.budget, cfg.jobs);
    record_assignment(trace, assignment);
    trace.degenerate_model = batch.degenerate_model;
    results = std::move(batch.results);
    out.clean_train = std::move(sub);
    out.poisoned_train = std::move(batch.poisoned);
  } else {
    out.clean_train = header_like(three[2]);
    out.poisoned_train = header_like(three[2]);
  }

  for (const auto& doc : out.clean_train.documents)
    trace.poisoned_doc_ids.push_back(doc.id);
  PoisonStats stats = stats_of(results);
  trace.poison_success_rate = stats.success_rate;
  trace.mean_substitutions = stats.mean_substitutions;

  if (out.poisoned_train.empty()) {
    trace.final_attacker_accuracy = trace.pre_defense_accuracy;
  } else if (!cfg.post_attack_incremental) {
    attacker = fine_tune(attacker, out.poisoned_train,
                         *out.attacker_featurizer,
                         seeded(cfg.attacker_finetune, cfg.seed,
                                "attacker-finetune"));
    EpochRecord rec;
    rec.epoch = 0;
    rec.released_total = static_cast<long>(out.poisoned_train.size());
    rec.defender_accuracy =
        accuracy(out.defender, parts.test, *out.defender_featurizer);
    rec.poison_success_rate = stats.success_rate;
    rec.mean_substitutions = stats.mean_substitutions;
    rec.attacker_acted = true;
    rec.attacker_update_saved = true;
    rec.attacker_new_batch_accuracy =
        accuracy(attacker, out.poisoned_train, *out.attacker_featurizer);
    rec.attacker_accuracy =
        accuracy(attacker, parts.test, *out.attacker_featurizer);
    rec.per_label_accuracy =
        per_label_accuracy(attacker, parts.test, *out.attacker_featurizer);
    trace.final_attacker_accuracy = rec.attacker_accuracy;
    trace.epochs.push_back(std::move(rec));
  } else {
    const auto stream =
        batch_stream(out.poisoned_train, static_cast<std::size_t>(cfg.k_d),
                     derive_seed(cfg.seed, "post-stream"));
    Corpus val_pool = header_like(out.poisoned_train);
    long seen = 0;
    for (std::size_t e = 0; e < stream.size(); ++e) {
      const Corpus& uploads = stream[e];
      seen += static_cast<long>(uploads.size());
      const std::size_t n = uploads.size();
      const std::size_t v = n >= 2 ? std::max<std::size_t>(1, n / 10) : 0;
      std::vector<std::size_t> order2(n);
      std::iota(order2.begin(), order2.end(), 0);
      Rng slice_rng(derive_seed(cfg.seed, "post-val-" + std::to_string(e)));
      slice_rng.shuffle(order2);
      std::vector<std::size_t> val_idx(order2.begin(), order2.begin() + v);
      std::vector<std::size_t> train_idx(order2.begin() + v, order2.end());
      std::sort(val_idx.begin(), val_idx.end());
      std::sort(train_idx.begin(), train_idx.end());
      Corpus increment = header_like(uploads);
      for (std::size_t i : val_idx)
        val_pool.documents.push_back(uploads.documents[i]);
      for (std::size_t i : train_idx)
        increment.documents.push_back(uploads.documents[i]);

      EpochRecord rec;
      rec.epoch = static_cast<int>(e);
      rec.released_total = seen;
      rec.defender_accuracy =
          accuracy(out.defender, parts.test, *out.defender_featurizer);
      rec.attacker_acted = true;
      Model candidate =
          increment.empty()
              ? attacker
              : fine_tune(attacker, increment, *out.attacker_featurizer,
                          seeded(cfg.attacker_finetune, cfg.seed,
                                 "post-finetune-" + std::to_string(e)));
      rec.attacker_new_batch_accuracy =
          accuracy(candidate, uploads, *out.attacker_featurizer);
      if (!val_pool.empty()) {
        rec.attacker_val_accuracy =
            accuracy(candidate, val_pool, *out.attacker_featurizer);
        rec.attacker_val_baseline =
            accuracy(attacker, val_pool, *out.attacker_featurizer);
        if (rec.attacker_val_accuracy > rec.attacker_val_baseline) {
          attacker = std::move(candidate);
          rec.attacker_update_saved = true;
        }
      } else {
        attacker = std::move(candidate);
        rec.attacker_update_saved = true;
      }
      rec.attacker_accuracy =
          accuracy(attacker, parts.test, *out.attacker_featurizer);
      rec.per_label_accuracy =
          per_label_accuracy(attacker, parts.test, *out.attacker_featurizer);
      trace.epochs.push_back(std::move(rec));
    }
    trace.final_attacker_accuracy =
        accuracy(attacker, parts.test, *out.attacker_featurizer);
  }
  out.attacker = std::move(attacker);
  trace.information_barrier = true;
  return out;
}

GameOutcome run_partial(const GameConfig& cfg, const Corpus& corpus,
                        const SubstitutionLexicon& lexicon) {
  GameParts parts = open_game(cfg, corpus, lexicon);
  GameOutcome& out = parts.out;
  GameTrace& trace = out.trace;
  trace.scenario = scenario_name(Scenario::partial);

  const int M = parts.all.num_labels;
  int n_poison = static_cast<int>(
      std::ceil(cfg.poisoned_label_fraction * static_cast<double>(M)));
  n_poison = std::clamp(n_poison, 0, M);
  std::vector<int> label_order(M);
  std::iota(label_order.begin(), label_order.end(), 0);
  Rng rng(derive_seed(cfg.seed, "partial-labels"));
  rng.shuffle(label_order);
  std::vector<int> poisoned_labels(label_order.begin(),
                                   label_order.begin() + n_poison);
  std::sort(poisoned_labels.begin(), poisoned_labels.end());
  std::vector<int> clean_labels;
  {
    std::set<int> chosen(poisoned_labels.begin(), poisoned_labels.end());
    for (int l = 0; l < M; ++l)
      if (!chosen.count(l)) clean_labels.push_back(l);
  }
  trace.poisoned_labels = poisoned_labels;

  out.defender = train(parts.train, *out.defender_featurizer,
                       seeded(cfg.defender_train, cfg.seed, "defender-train"));
  Corpus subset = filter_labels(parts.train, poisoned_labels);

  Corpus poisoned_train = parts.train;
  std::vector<PerturbationResult> results;
  if (!subset.empty()) {
    TargetAssignment assignment =
        build_assignment(cfg, subset, parts.train, out.defender,
                         *out.defender_featurizer, lexicon);
    PoisonBatchResult batch =
        poison_batch(subset, out.defender, *out.defender_featurizer,
                     assignment, lexicon, cfg.budget, cfg.jobs);
    record_assignment(trace, assignment);
    trace.degenerate_model = batch.degenerate_model;
    results = std::move(batch.results);
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < poisoned_train.size(); ++i)
      index.emplace(poisoned_train.documents[i].id, i);
    for (auto& doc : batch.poisoned.documents)
      poisoned_train.documents[index.at(doc.id)] = std::move(doc);
    for (const auto& doc : subset.documents)
      trace.poisoned_doc_ids.push_back(doc.id);
  }

  out.attacker = train(poisoned_train, *out.attacker_featurizer,
                       seeded(cfg.attacker_train, cfg.seed, "attacker-train"));
  Model reference =
      train(parts.train, *out.attacker_featurizer,
            seeded(cfg.attacker_train, cfg.seed, "attacker-train"));

  trace.clean_reference_accuracy =
      accuracy(reference, parts.test, *out.attacker_featurizer);
  trace.final_attacker_accuracy =
      accuracy(out.attacker, parts.test, *out.attacker_featurizer);
  Corpus test_poisoned = filter_labels(parts.test, poisoned_labels);
  Corpus test_clean = filter_labels(parts.test, clean_labels);
  if (!test_poisoned.empty()) {
    trace.poisoned_label_accuracy =
        accuracy(out.attacker, test_poisoned, *out.attacker_featurizer);
    trace.clean_poisoned_label_accuracy =
        accuracy(reference, test_poisoned, *out.attacker_featurizer);
  }
  if (!test_clean.empty()) {
    trace.unpoisoned_label_accuracy =
        accuracy(out.attacker, test_clean, *out.attacker_featurizer);
    trace.clean_unpoisoned_label_accuracy =
        accuracy(reference, test_clean, *out.attacker_featurizer);
  }
  PoisonStats stats = stats_of(results);
  trace.poison_success_rate = stats.success_rate;
  trace.mean_substitutions = stats.mean_substitutions;

  EpochRecord rec;
  rec.epoch = 0;
  rec.released_total = static_cast<long>(poisoned_train.size());
  rec.defender_accuracy =
      accuracy(out.defender, parts.test, *out.defender_featurizer);
  rec.poison_success_rate = stats.success_rate;
  rec.mean_substitutions = stats.mean_substitutions;
  rec.attacker_acted = true;
  rec.attacker_update_saved = true;
  rec.attacker_accuracy = trace.final_attacker_accuracy;
  rec.per_label_accuracy =
      per_label_accuracy(out.attacker, parts.test, *out.attacker_featurizer);
  trace.epochs.push_back(std::move(rec));

  out.clean_train = std::move(parts.train);
  out.poisoned_train = std::move(poisoned_train);
  trace.information_barrier = true;
  return out;
}

GameOutcome run_game(const GameConfig& cfg, const Corpus& corpus,
                     const SubstitutionLexicon& lexicon) {
  switch (cfg.scenario) {
    case Scenario::one_time: return run_one_time(cfg, corpus, lexicon);
    case Scenario::incremental: return run_incremental(cfg, corpus, lexicon);
    case Scenario::post_attack: return run_post_attack(cfg, corpus, lexicon);
    case Scenario::partial: return run_partial(cfg, corpus, lexicon);
  }
  throw ConfigError("unknown scenario");
}

}  // namespace upton
