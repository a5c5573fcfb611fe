#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "upton/classifier.hpp"
#include "upton/corpus.hpp"
#include "upton/features.hpp"
#include "upton/game.hpp"

namespace upton {

// Token-level similarity of a poisoned text to its original: the mean over
// poisoned tokens of the best cosine against any original token, negative
// cosines floored at zero. Asymmetric; the original is the reference side.
// Token weights are uniform. Empty sequences are an error.
double semantic_similarity(const TokenSequence& original,
                           const TokenSequence& poisoned,
                           const EmbeddingTable& table);

// L2 distance between the means of the two vector sets (mean variation
// distance). Both sets must be non-empty and share one family.
double mvd(const std::vector<FeatureVector>& clean,
           const std::vector<FeatureVector>& poisoned);

// Mean L2 distance of each vector to the set's mean (feature variation
// distance).
double fvd(const std::vector<FeatureVector>& vectors);

struct MetricsReport {
  std::string scenario;
  std::string strategy;
  double clean_accuracy = -1.0;
  double poisoned_accuracy = -1.0;
  double mean_similarity = -1.0;
  std::map<int, double> mvd_per_label;
  std::map<int, double> fvd_clean_per_label;
  std::map<int, double> fvd_poisoned_per_label;
  std::map<int, std::pair<long, long>> sample_counts;  // label -> (p, q)
  std::string projection_csv;  // file name relative to the report directory
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  std::string similarity_note;  // records the uniform-weight surrogate
};

// Aggregates a finished run: accuracies from the trace, mean similarity over
// the documents that were subject to poisoning, per-label MVD/FVD in the
// defender model's feature space, and a 2-D projection of a seeded sample
// (<= 20 clean documents per label plus the poisoned label-0 documents).
// Writes report.json, onetime_results.csv, feature_stats.csv, and
// projection.csv into outdir. Clean and poisoned corpora must hold the same
// ids with the same labels.
MetricsReport build_report(const GameTrace& trace, const Corpus& clean_train,
                           const Corpus& poisoned_train, const Model& defender,
                           const Featurizer& defender_featurizer,
                           const EmbeddingTable& table,
                           const std::filesystem::path& outdir,
                           bool all_labels = false);

}  // namespace upton
