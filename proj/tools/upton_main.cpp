#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "upton/classifier.hpp"
#include "upton/corpus.hpp"
#include "upton/errors.hpp"
#include "upton/features.hpp"
#include "upton/game.hpp"
#include "upton/lexicon.hpp"
#include "upton/manifest.hpp"
#include "upton/metrics.hpp"
#include "upton/perturb.hpp"
#include "upton/rng.hpp"
#include "upton/targets.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string format_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw upton::IoError("number formatting failed");
  return std::string(buf, end);
}

// UPTON_OUT overrides --out, which overrides the working directory.
fs::path resolve_out(const std::string& flag_value) {
  if (const char* env = std::getenv("UPTON_OUT"); env && *env)
    return fs::path(env);
  return flag_value.empty() ? fs::path(".") : fs::path(flag_value);
}

upton::CorpusFormat resolve_format(const std::string& flag_value,
                                   const fs::path& corpus_path) {
  if (flag_value == "jsonl") return upton::CorpusFormat::jsonl;
  if (flag_value == "csv") return upton::CorpusFormat::csv;
  if (!flag_value.empty())
    throw upton::ConfigError("unknown corpus format: " + flag_value);
  return corpus_path.extension() == ".csv" ? upton::CorpusFormat::csv
                                           : upton::CorpusFormat::jsonl;
}

// Runs a command body and writes manifest.json afterwards — also when the
// body throws, with the error text as the status.
class ManifestWriter {
 public:
  ManifestWriter(std::string command, std::uint64_t seed, fs::path outdir)
      : outdir_(std::move(outdir)) {
    manifest_.command = std::move(command);
    manifest_.seed = seed;
    manifest_.out_dir = outdir_.string();
    std::error_code ec;
    fs::create_directories(outdir_, ec);
    if (ec)
      throw upton::IoError("cannot create output directory: " +
                           outdir_.string());
  }

  const fs::path& dir() const { return outdir_; }

  void input(const fs::path& path) {
    manifest_.inputs[path.string()] = upton::file_digest_hex(path);
  }

  void output(const std::string& relative) { outputs_.push_back(relative); }

  void run(const std::function<void()>& body) {
    try {
      body();
    } catch (const std::exception& e) {
      manifest_.status = e.what();
      digest_outputs();
      upton::save_manifest(manifest_, outdir_ / "manifest.json");
      throw;
    }
    digest_outputs();
    upton::save_manifest(manifest_, outdir_ / "manifest.json");
  }

 private:
  void digest_outputs() {
    for (const auto& relative : outputs_) {
      const fs::path path = outdir_ / relative;
      if (fs::exists(path))
        manifest_.outputs[relative] = upton::file_digest_hex(path);
    }
  }

  upton::RunManifest manifest_;
  fs::path outdir_;
  std::vector<std::string> outputs_;
};

json parse_json_file(const fs::path& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw upton::IoError("cannot open for reading: " + path.string());
  try {
    json doc;
    in >> doc;
    return doc;
  } catch (const json::exception& e) {
    throw upton::ParseError(std::string(what) + " is not valid JSON: " +
                            e.what());
  }
}

upton::SyntheticSpec parse_spec(const json& doc) {
  if (!doc.is_object())
    throw upton::ConfigError("spec must be a JSON object");
  static const std::set<std::string> known{
      "num_labels", "docs_per_label", "vocab_per_label", "shared_vocab",
      "doc_length", "style_bias",     "seed"};
  for (const auto& [key, value] : doc.items()) {
    (void)value;
    if (!known.count(key))
      throw upton::ConfigError("unknown spec key: " + key);
  }
  if (!doc.contains("seed"))
    throw upton::ConfigError("spec is missing the seed field");
  upton::SyntheticSpec spec;
  try {
    spec.seed = doc["seed"];
    if (doc.contains("num_labels")) spec.num_labels = doc["num_labels"];
    if (doc.contains("docs_per_label"))
      spec.docs_per_label = doc["docs_per_label"];
    if (doc.contains("vocab_per_label"))
      spec.vocab_per_label = doc["vocab_per_label"];
    if (doc.contains("shared_vocab")) spec.shared_vocab = doc["shared_vocab"];
    if (doc.contains("doc_length")) spec.doc_length = doc["doc_length"];
    if (doc.contains("style_bias")) spec.style_bias = doc["style_bias"];
  } catch (const json::exception& e) {
    throw upton::ConfigError(std::string("bad spec value: ") + e.what());
  }
  return spec;
}

upton::TrainConfig parse_train_config(const json& doc) {
  if (!doc.is_object())
    throw upton::ConfigError("training config must be a JSON object");
  static const std::set<std::string> known{"learning_rate", "epochs",
                                           "batch_size", "l2", "seed"};
  for (const auto& [key, value] : doc.items()) {
    (void)value;
    if (!known.count(key))
      throw upton::ConfigError("unknown training config key: " + key);
  }
  upton::TrainConfig tc;
  try {
    if (doc.contains("learning_rate")) tc.learning_rate = doc["learning_rate"];
    if (doc.contains("epochs")) tc.epochs = doc["epochs"];
    if (doc.contains("batch_size")) tc.batch_size = doc["batch_size"];
    if (doc.contains("l2")) tc.l2 = doc["l2"];
    if (doc.contains("seed")) tc.seed = doc["seed"];
  } catch (const json::exception& e) {
    throw upton::ConfigError(std::string("bad training config value: ") +
                             e.what());
  }
  return tc;
}

std::vector<std::string> corpus_tokens(const upton::Corpus& corpus) {
  std::set<std::string> seen;
  for (const auto& doc : corpus.documents)
    for (const auto& token : doc.tokens) seen.insert(token);
  return {seen.begin(), seen.end()};
}

std::shared_ptr<upton::Featurizer> featurizer_for_model(
    const upton::Model& model, const upton::SubstitutionLexicon& lexicon,
    const upton::Corpus& corpus, std::uint64_t seed, double theta) {
  if (model.family == upton::Family::ngram_hash)
    return std::make_shared<upton::NgramFeaturizer>(
        model.dim, upton::derive_seed(seed, "ngram-features"));
  auto table = std::make_shared<const upton::EmbeddingTable>(
      upton::make_default_table(lexicon, corpus_tokens(corpus), model.dim,
                                upton::derive_seed(seed, "table"), theta));
  return std::make_shared<upton::EmbeddingFeaturizer>(std::move(table));
}

void write_success_matrix_csv(const std::vector<std::vector<double>>& matrix,
                              const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw upton::IoError("cannot open for writing: " + path.string());
  out << "label";
  for (std::size_t j = 0; j < matrix.size(); ++j) out << ",target_" << j;
  out << '\n';
  for (std::size_t i = 0; i < matrix.size(); ++i) {
    out << i;
    for (double v : matrix[i]) out << ',' << format_double(v);
    out << '\n';
  }
  if (!out) throw upton::IoError("write failed: " + path.string());
}

void write_poisoned_jsonl(const upton::Corpus& poisoned,
                          const std::vector<upton::PerturbationResult>& results,
                          const fs::path& path) {
  if (poisoned.size() != results.size())
    throw upton::ConfigError("results do not match the poisoned corpus");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw upton::IoError("cannot open for writing: " + path.string());
  for (std::size_t i = 0; i < poisoned.size(); ++i) {
    const upton::Document& doc = poisoned.documents[i];
    json record{{"author", poisoned.author_names[doc.author]},
                {"id", doc.id},
                {"text", doc.text}};
    if (!results[i].substitutions.empty()) {
      json subs = json::array();
      for (const auto& sub : results[i].substitutions)
        subs.push_back(json{{"position", sub.position},
                            {"original", sub.original},
                            {"replacement", sub.replacement}});
      record["substitutions"] = std::move(subs);
    }
    out << record.dump() << '\n';
  }
  if (!out) throw upton::IoError("write failed: " + path.string());
}

void write_results_jsonl(const std::vector<upton::PerturbationResult>& results,
                         const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw upton::IoError("cannot open for writing: " + path.string());
  for (const auto& r : results) {
    json record{{"id", r.doc_id},
                {"success", r.success},
                {"original_label", r.original_label},
                {"achieved_label", r.achieved_label},
                {"queries", r.queries},
                {"substitutions", r.substitutions.size()}};
    if (r.term_used.kind == upton::Termination::Kind::exact_target)
      record["target"] = r.term_used.target;
    out << record.dump() << '\n';
  }
  if (!out) throw upton::IoError("write failed: " + path.string());
}

struct SynthArgs {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int tokens_per_pool = 2;
};

void cmd_synth(const SynthArgs& args) {
  upton::SyntheticSpec spec = parse_spec(
      parse_json_file(args.config, "spec"));
  if (args.seed_set) spec.seed = args.seed;
  ManifestWriter mw("synth", spec.seed, resolve_out(args.out));
  mw.input(args.config);
  mw.run([&] {
    upton::Corpus corpus = upton::synthesize(spec);
    upton::SyntheticVocab vocab = upton::synthetic_vocab(spec);
    upton::SubstitutionLexicon lexicon =
        upton::build_synthetic_lexicon(vocab, args.tokens_per_pool);
    upton::save_corpus(corpus, mw.dir() / "corpus.jsonl");
    mw.output("corpus.jsonl");
    upton::save_lexicon_tsv(lexicon, mw.dir() / "lexicon.tsv");
    mw.output("lexicon.tsv");
    upton::save_author_map(corpus, mw.dir() / "authors.json");
    mw.output("authors.json");
    std::cout << "documents " << corpus.size() << " labels "
              << corpus.num_labels << " lexicon_entries "
              << lexicon.entries.size() << '\n';
  });
}

struct TrainArgs {
  std::string corpus;
  std::string format;
  std::string config;
  std::string family = "ngram_hash";
  std::string lexicon;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int dim = 65536;
  int embed_dim = 64;
  double theta = 0.30;
  double train_fraction = 0.8;
};

void cmd_train(const TrainArgs& args) {
  upton::TrainConfig tc;
  if (!args.config.empty())
    tc = parse_train_config(parse_json_file(args.config, "training config"));
  const std::uint64_t base = args.seed_set ? args.seed : tc.seed;
  tc.seed = upton::derive_seed(base, "attacker-train");

  ManifestWriter mw("train", base, resolve_out(args.out));
  mw.input(args.corpus);
  if (!args.config.empty()) mw.input(args.config);
  if (!args.lexicon.empty()) mw.input(args.lexicon);
  mw.run([&] {
    upton::Corpus corpus =
        upton::load_corpus(args.corpus, resolve_format(args.format, args.corpus));
    upton::tokenize_corpus(corpus);
    auto [train_part, test_part] = upton::split(
        corpus, args.train_fraction, upton::derive_seed(base, "split"));

    std::shared_ptr<upton::Featurizer> featurizer;
    const upton::Family family = upton::family_from_name(args.family);
    if (family == upton::Family::ngram_hash) {
      featurizer = std::make_shared<upton::NgramFeaturizer>(
          args.dim, upton::derive_seed(base, "ngram-features"));
    } else {
      if (args.lexicon.empty())
        throw upton::ConfigError(
            "mean_embedding training needs --lexicon for the synonym table");
      upton::SubstitutionLexicon lexicon = upton::load_lexicon_tsv(args.lexicon);
      lexicon.validate();
      auto table = std::make_shared<const upton::EmbeddingTable>(
          upton::make_default_table(lexicon, corpus_tokens(corpus),
                                    args.embed_dim,
                                    upton::derive_seed(base, "table"),
                                    args.theta));
      featurizer = std::make_shared<upton::EmbeddingFeaturizer>(std::move(table));
    }

    upton::Model model = upton::train(train_part, *featurizer, tc);
    const double acc = upton::accuracy(model, test_part, *featurizer);
    upton::save_model(model, mw.dir() / "model.json");
    mw.output("model.json");
    json summary{{"held_out_accuracy", acc},
                 {"train_documents", train_part.size()},
                 {"test_documents", test_part.size()},
                 {"family", upton::family_name(model.family)},
                 {"dim", model.dim}};
    std::ofstream sum(mw.dir() / "train_summary.json", std::ios::binary);
    if (!sum) throw upton::IoError("cannot open for writing: train_summary.json");
    sum << summary.dump(2) << '\n';
    if (!sum) throw upton::IoError("write failed: train_summary.json");
    mw.output("train_summary.json");
    std::cout << "held_out_accuracy " << format_double(acc) << '\n';
  });
}

struct PoisonArgs {
  std::string corpus;
  std::string format;
  std::string model;
  std::string lexicon;
  std::string strategy = "class_wide";
  std::string out;
  double budget = 0.25;
  std::uint64_t seed = 0;
  int jobs = 1;
  int n_per_pair = 20;
  double theta = 0.30;
};

void cmd_poison(const PoisonArgs& args) {
  ManifestWriter mw("poison", args.seed, resolve_out(args.out));
  mw.input(args.corpus);
  mw.input(args.model);
  mw.input(args.lexicon);
  mw.run([&] {
    upton::Corpus corpus =
        upton::load_corpus(args.corpus, resolve_format(args.format, args.corpus));
    upton::tokenize_corpus(corpus);
    upton::Model model = upton::load_model(args.model);
    if (corpus.num_labels > model.num_labels)
      throw upton::ConfigError("corpus has more labels than the model");
    upton::SubstitutionLexicon lexicon = upton::load_lexicon_tsv(args.lexicon);
    lexicon.validate();
    auto featurizer =
        featurizer_for_model(model, lexicon, corpus, args.seed, args.theta);

    const upton::Strategy strategy = upton::strategy_from_name(args.strategy);
    upton::TargetAssignment assignment;
    if (strategy == upton::Strategy::non_target) {
      assignment = upton::assign_nontarget(corpus);
    } else if (strategy == upton::Strategy::sample_wide) {
      assignment = upton::assign_samplewide(
          corpus, upton::derive_seed(args.seed, "samplewide"));
    } else {
      auto matrix = upton::classwide_pre_experiment(
          model, *featurizer, corpus, lexicon, args.budget, args.n_per_pair);
      write_success_matrix_csv(matrix, mw.dir() / "success_matrix.csv");
      mw.output("success_matrix.csv");
      assignment = upton::assign_classwide(corpus, matrix);
      json cm{{"class_map", *assignment.class_map},
              {"fallback_labels", assignment.fallback_labels},
              {"non_injective", assignment.non_injective}};
      std::ofstream out(mw.dir() / "class_map.json", std::ios::binary);
      if (!out) throw upton::IoError("cannot open for writing: class_map.json");
      out << cm.dump(2) << '\n';
      if (!out) throw upton::IoError("write failed: class_map.json");
      mw.output("class_map.json");
    }

    upton::PoisonBatchResult batch =
        upton::poison_batch(corpus, model, *featurizer, assignment, lexicon,
                            args.budget, args.jobs);
    write_poisoned_jsonl(batch.poisoned, batch.results,
                         mw.dir() / "poisoned.jsonl");
    mw.output("poisoned.jsonl");
    write_results_jsonl(batch.results, mw.dir() / "results.jsonl");
    mw.output("results.jsonl");

    long successes = 0, subs = 0;
    for (const auto& r : batch.results) {
      successes += r.success ? 1 : 0;
      subs += static_cast<long>(r.substitutions.size());
    }
    const double n = static_cast<double>(batch.results.size());
    std::cout << "poison_success_rate "
              << format_double(n > 0 ? successes / n : -1.0)
              << " mean_substitutions " << format_double(n > 0 ? subs / n : -1.0)
              << " max_replacement_share "
              << format_double(
                     upton::max_replacement_share(batch.results, corpus))
              << (batch.degenerate_model ? " degenerate_model" : "") << '\n';
  });
}

struct GameArgs {
  std::string config;
  std::string corpus;
  std::string format;
  std::string lexicon;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int jobs = 0;
};

void cmd_game(const GameArgs& args) {
  upton::GameConfig cfg = upton::load_game_config(args.config);
  if (args.seed_set) cfg.seed = args.seed;
  if (args.jobs > 0) cfg.jobs = args.jobs;

  ManifestWriter mw("game", cfg.seed, resolve_out(args.out));
  mw.input(args.config);
  mw.input(args.corpus);
  mw.input(args.lexicon);
  mw.run([&] {
    upton::Corpus corpus =
        upton::load_corpus(args.corpus, resolve_format(args.format, args.corpus));
    upton::SubstitutionLexicon lexicon = upton::load_lexicon_tsv(args.lexicon);
    upton::GameOutcome outcome = upton::run_game(cfg, corpus, lexicon);
    upton::save_trace_json(outcome.trace, mw.dir() / "trace.json");
    mw.output("trace.json");
    upton::save_trace_csv(outcome.trace, mw.dir() / "trace.csv");
    mw.output("trace.csv");
    upton::build_report(outcome.trace, outcome.clean_train,
                        outcome.poisoned_train, outcome.defender,
                        *outcome.defender_featurizer, *outcome.table, mw.dir(),
                        cfg.report_all_labels);
    mw.output("report.json");
    mw.output("onetime_results.csv");
    mw.output("feature_stats.csv");
    mw.output("projection.csv");
    std::cout << "scenario " << outcome.trace.scenario << " strategy "
              << outcome.trace.strategy << " clean_reference_accuracy "
              << format_double(outcome.trace.clean_reference_accuracy)
              << " final_attacker_accuracy "
              << format_double(outcome.trace.final_attacker_accuracy) << '\n';
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"clean-label authorship poisoning workbench"};
  app.require_subcommand(1);

  SynthArgs synth_args;
  auto* synth = app.add_subcommand(
      "synth", "generate a synthetic corpus and its companion lexicon");
  synth->add_option("--config", synth_args.config, "synthesis spec JSON")
      ->required();
  synth->add_option("--out", synth_args.out, "output directory");
  synth->add_option("--seed", synth_args.seed, "override the spec seed");
  synth->add_option("--tokens-per-pool", synth_args.tokens_per_pool,
                    "synonym-group slots per author pool");
  synth->callback([&] {
    synth_args.seed_set = synth->count("--seed") > 0;
    cmd_synth(synth_args);
  });

  TrainArgs train_args;
  auto* train = app.add_subcommand(
      "train", "train an authorship classifier and print held-out accuracy");
  train->add_option("--corpus", train_args.corpus, "corpus file")->required();
  train->add_option("--format", train_args.format, "jsonl or csv");
  train->add_option("--config", train_args.config, "training config JSON");
  train->add_option("--family", train_args.family,
                    "ngram_hash or mean_embedding");
  train->add_option("--lexicon", train_args.lexicon,
                    "lexicon TSV (mean_embedding only)");
  train->add_option("--out", train_args.out, "output directory");
  train->add_option("--seed", train_args.seed, "master seed");
  train->add_option("--dim", train_args.dim, "hashed feature dimension");
  train->add_option("--embed-dim", train_args.embed_dim,
                    "embedding dimension (mean_embedding only)");
  train->add_option("--theta", train_args.theta, "synonym cone half-angle");
  train->add_option("--train-fraction", train_args.train_fraction,
                    "held-out split fraction");
  train->callback([&] {
    train_args.seed_set = train->count("--seed") > 0;
    cmd_train(train_args);
  });

  PoisonArgs poison_args;
  auto* poison = app.add_subcommand(
      "poison", "perturb a corpus against a trained classifier");
  poison->add_option("--corpus", poison_args.corpus, "corpus file")->required();
  poison->add_option("--format", poison_args.format, "jsonl or csv");
  poison->add_option("--model", poison_args.model, "model JSON")->required();
  poison->add_option("--lexicon", poison_args.lexicon, "lexicon TSV")
      ->required();
  poison->add_option("--strategy", poison_args.strategy,
                     "non_target, sample_wide, or class_wide");
  poison->add_option("--budget", poison_args.budget,
                     "max substituted token fraction per document");
  poison->add_option("--out", poison_args.out, "output directory");
  poison->add_option("--seed", poison_args.seed, "master seed");
  poison->add_option("--jobs", poison_args.jobs, "worker threads");
  poison->add_option("--n-per-pair", poison_args.n_per_pair,
                     "probe documents per label pair (class_wide)");
  poison->add_option("--theta", poison_args.theta, "synonym cone half-angle");
  poison->callback([&] { cmd_poison(poison_args); });

  GameArgs game_args;
  auto* game = app.add_subcommand(
      "game", "run a defender/attacker scenario and write trace and report");
  game->add_option("--config", game_args.config, "game config JSON")
      ->required();
  game->add_option("--corpus", game_args.corpus, "corpus file")->required();
  game->add_option("--format", game_args.format, "jsonl or csv");
  game->add_option("--lexicon", game_args.lexicon, "lexicon TSV")->required();
  game->add_option("--out", game_args.out, "output directory");
  game->add_option("--seed", game_args.seed, "override the config seed");
  game->add_option("--jobs", game_args.jobs, "override the config jobs");
  game->callback([&] {
    game_args.seed_set = game->count("--seed") > 0;
    cmd_game(game_args);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const upton::DivergenceError& e) {
    std::cerr << "divergence error: " << e.what() << '\n';
    return 4;
  } catch (const upton::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const upton::IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
