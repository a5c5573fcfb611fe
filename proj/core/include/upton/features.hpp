#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "upton/corpus.hpp"
#include "upton/lexicon.hpp"

namespace upton {

using TokenSequence = std::vector<std::string>;

// Lowercases, splits on whitespace, and makes each of . , ! ? ; : ' " ( )
// a standalone token. Raises ParseError if no tokens remain.
TokenSequence tokenize(const std::string& text);

// Joins with single spaces; tokenize(detokenize(t)) == t.
std::string detokenize(const TokenSequence& tokens);

// Fills Document::tokens for every document (idempotent).
void tokenize_corpus(Corpus& corpus);

enum class Family { ngram_hash, mean_embedding };

const char* family_name(Family family);
Family family_from_name(const std::string& name);

struct FeatureVector {
  Family family = Family::ngram_hash;
  std::vector<double> values;
};

// Counts of word unigrams and per-token padded character 3-grams, signed-hash
// folded into d buckets, then L2-normalized. d must be >= 256.
FeatureVector featurize_ngram(const TokenSequence& tokens, int d,
                              std::uint64_t seed);

// Hash units (bucket, sign) contributed by one token: its unigram plus the
// 3-grams of "^token$". Exposed for delta-evaluation and bucket-set tests.
std::vector<std::pair<int, double>> token_hash_units(const std::string& token,
                                                     int d,
                                                     std::uint64_t seed);

// Token embeddings with a deterministic fallback: tokens missing from the
// table get a pseudo-random unit vector seeded by their hash.
struct EmbeddingTable {
  int dim = 64;
  std::uint64_t fallback_seed = 0;
  std::map<std::string, std::vector<double>> vectors;

  std::vector<double> lookup(const std::string& token) const;
};

// Unit vectors seeded per token, except that the synonym groups implied by
// the lexicon share a base direction: every member is
// cos(theta)*base + sin(theta)*noise with per-member unit noise orthogonal to
// the base, which guarantees pairwise cosine >= cos(2*theta) within a group
// (>= 0.8 at the default theta).
EmbeddingTable make_default_table(const SubstitutionLexicon& lexicon,
                                  const std::vector<std::string>& extra_tokens,
                                  int dim, std::uint64_t seed,
                                  double theta = 0.30);

// TSV: token, TAB, space-separated components.
EmbeddingTable load_table_tsv(const std::filesystem::path& path);
void save_table_tsv(const EmbeddingTable& table,
                    const std::filesystem::path& path);

// Mean of the token embeddings, L2-normalized.
FeatureVector featurize_embed(const TokenSequence& tokens,
                              const EmbeddingTable& table);

// Featurization strategy handed to training, attacks, and reports.
class Featurizer {
 public:
  virtual ~Featurizer() = default;
  virtual FeatureVector featurize(const TokenSequence& tokens) const = 0;
  virtual Family family() const = 0;
  virtual int dim() const = 0;
};

class NgramFeaturizer final : public Featurizer {
 public:
  NgramFeaturizer(int d, std::uint64_t seed) : d_(d), seed_(seed) {}
  FeatureVector featurize(const TokenSequence& tokens) const override {
    return featurize_ngram(tokens, d_, seed_);
  }
  Family family() const override { return Family::ngram_hash; }
  int dim() const override { return d_; }
  std::uint64_t seed() const { return seed_; }

 private:
  int d_;
  std::uint64_t seed_;
};

class EmbeddingFeaturizer final : public Featurizer {
 public:
  explicit EmbeddingFeaturizer(std::shared_ptr<const EmbeddingTable> table)
      : table_(std::move(table)) {}
  FeatureVector featurize(const TokenSequence& tokens) const override {
    return featurize_embed(tokens, *table_);
  }
  Family family() const override { return Family::mean_embedding; }
  int dim() const override { return table_->dim; }
  const EmbeddingTable& table() const { return *table_; }

 private:
  std::shared_ptr<const EmbeddingTable> table_;
};

struct PcaResult {
  int k = 0;                        // components actually extracted
  bool rank_deficient = false;      // fewer than requested
  std::vector<std::vector<double>> points;     // n x k
  std::vector<std::vector<double>> axes;       // k x d, unit, sign-canonical
  std::vector<double> explained_variance;      // per component
  double total_variance = 0.0;
};

// Principal components by power iteration with deflation (fixed iteration
// and tolerance budget). All vectors must share a family; requires at least
// k + 1 vectors. Axis signs are canonicalized so the largest-magnitude
// coordinate is positive.
PcaResult pca_project(const std::vector<FeatureVector>& vectors, int k,
                      int iterations = 200, double tol = 1e-9,
                      std::uint64_t seed = 0x9c0ffee);

}  // namespace upton
