#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "upton/classifier.hpp"
#include "upton/corpus.hpp"
#include "upton/features.hpp"
#include "upton/lexicon.hpp"
#include "upton/targets.hpp"

namespace upton {

enum class Scenario { one_time, incremental, post_attack, partial };

const char* scenario_name(Scenario scenario);
Scenario scenario_from_name(const std::string& name);

struct GameConfig {
  Scenario scenario = Scenario::one_time;
  Strategy strategy = Strategy::class_wide;
  double budget = 0.40;  // max fraction of tokens substituted per document
  std::uint64_t seed = 0;

  double train_fraction = 0.8;
  int k_d = 128;  // defender release-buffer size (incremental)
  int m = 1;      // attacker collects every m defender epochs
  double poisoned_to_clean_ratio = 1.0;   // post-attack: |poisoned| / |part 2|
  bool post_attack_incremental = false;   // stream part 3 instead of one shot
  double poisoned_label_fraction = 0.5;   // partial: ceil(fraction * labels)
  std::array<double, 3> fractions{0.25, 0.375, 0.375};
  double overlap_fraction = 0.0;
  int n_per_pair = 20;

  // Reference operating point: hash-feature defender, private-embedding
  // attacker. A default-constructed config reproduces the headline
  // strategy orderings on the reference corpus.
  Family defender_family = Family::ngram_hash;
  Family attacker_family = Family::mean_embedding;
  int ngram_dim = 65536;
  int attacker_ngram_dim = 0;  // 0: match ngram_dim
  int embed_dim = 2048;
  double table_theta = 0.30;

  TrainConfig defender_train{0.2, 60, 32, 1e-3, 0};
  TrainConfig attacker_train{0.2, 60, 32, 1e-2, 0};
  TrainConfig defender_finetune{0.1, 10, 32, 1e-4, 0};
  TrainConfig attacker_finetune{0.2, 45, 32, 1e-2, 0};

  int jobs = 1;
  bool report_all_labels = false;
};

std::string game_config_to_json(const GameConfig& cfg);
GameConfig game_config_from_json(const std::string& text);
GameConfig load_game_config(const std::filesystem::path& path);

struct EpochRecord {
  int epoch = 0;
  long released_total = 0;
  double defender_accuracy = -1.0;  // harness-side measurement on clean test
  double poison_success_rate = -1.0;
  double mean_substitutions = -1.0;
  bool attacker_acted = false;
  bool attacker_update_saved = false;
  double attacker_val_accuracy = -1.0;   // candidate on the validation pool
  double attacker_val_baseline = -1.0;   // saved model on the same pool
  double attacker_new_batch_accuracy = -1.0;  // candidate on the new uploads
  double attacker_accuracy = -1.0;       // saved attacker on clean test
  std::vector<double> per_label_accuracy;
};

struct GameTrace {
  std::string scenario;
  std::string strategy;
  std::uint64_t seed = 0;
  std::string config_json;  // canonical echo; hashing and replay input
  std::vector<EpochRecord> epochs;

  double clean_reference_accuracy = -1.0;
  double final_attacker_accuracy = -1.0;
  double pre_defense_accuracy = -1.0;      // post-attack
  double poisoned_label_accuracy = -1.0;   // partial
  double unpoisoned_label_accuracy = -1.0;
  double clean_poisoned_label_accuracy = -1.0;
  double clean_unpoisoned_label_accuracy = -1.0;
  std::vector<int> poisoned_labels;

  std::optional<std::vector<int>> class_map;
  std::vector<int> fallback_labels;
  bool non_injective = false;
  bool degenerate_model = false;
  double poison_success_rate = -1.0;
  double mean_substitutions = -1.0;
  std::vector<std::string> poisoned_doc_ids;

  // The defender side consumes only its own batches, config, and lexicon;
  // it never reads attacker state, the attacker featurizer, or the test
  // split. run_* set this after verifying the wiring.
  bool information_barrier = false;
};

void save_trace_json(const GameTrace& trace, const std::filesystem::path& path);
void save_trace_csv(const GameTrace& trace, const std::filesystem::path& path);
GameTrace load_trace_json(const std::filesystem::path& path);

// Everything a report needs alongside the trace.
struct GameOutcome {
  GameTrace trace;
  Corpus clean_train;
  Corpus poisoned_train;
  Model defender;
  Model attacker;
  std::shared_ptr<Featurizer> defender_featurizer;
  std::shared_ptr<Featurizer> attacker_featurizer;
  std::shared_ptr<const EmbeddingTable> table;
};

// Embedding table shared by the run: synonym-group vectors from the lexicon
// plus explicit entries for every corpus token.
std::shared_ptr<const EmbeddingTable> make_game_table(
    const GameConfig& cfg, const SubstitutionLexicon& lexicon,
    const Corpus& corpus);

std::shared_ptr<Featurizer> make_featurizer(
    Family family, const GameConfig& cfg,
    std::shared_ptr<const EmbeddingTable> table, int ngram_dim = 0);

// 80/20 split; defender trains on the train part and poisons all of it; the
// attacker trains from scratch on the poisoned release and is scored on the
// clean test part against a clean-trained reference.
GameOutcome run_one_time(const GameConfig& cfg, const Corpus& corpus,
                         const SubstitutionLexicon& lexicon);

// Defender fine-tunes and poisons per k_d batch; the attacker collects every
// m epochs, fine-tunes, and keeps the update only if accuracy on its held-out
// validation slice improves.
GameOutcome run_incremental(const GameConfig& cfg, const Corpus& corpus,
                            const SubstitutionLexicon& lexicon);

// Three-part split of the train part: defender trains on part 1, the
// attacker pre-trains on clean part 2, then continues training on a poisoned
// subsample of part 3 sized ratio * |part 2|.
GameOutcome run_post_attack(const GameConfig& cfg, const Corpus& corpus,
                            const SubstitutionLexicon& lexicon);

// One-time protocol restricted to a seeded choice of ceil(fraction * labels)
// labels; accuracy is reported separately for poisoned and unpoisoned labels.
GameOutcome run_partial(const GameConfig& cfg, const Corpus& corpus,
                        const SubstitutionLexicon& lexicon);

GameOutcome run_game(const GameConfig& cfg, const Corpus& corpus,
                     const SubstitutionLexicon& lexicon);

}  // namespace upton
