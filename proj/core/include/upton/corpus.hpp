#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace upton {

struct Document {
  std::string id;
  int author = 0;               // dense label in [0, num_labels)
  std::string text;             // non-empty
  std::vector<std::string> tokens;  // filled by tokenize_corpus, cached
};

struct Corpus {
  std::vector<Document> documents;
  int num_labels = 0;
  std::vector<std::string> author_names;  // dense label -> original name

  std::size_t size() const { return documents.size(); }
  bool empty() const { return documents.empty(); }
};

enum class CorpusFormat { jsonl, csv };

// JSONL: one {"id","author","text"} object per line.
// CSV: RFC-4180 with header id,author,text.
// Author names are re-indexed densely in order of first appearance; the
// original names are kept in Corpus::author_names. Malformed records raise
// ParseError naming the line, an empty file raises ConfigError.
Corpus load_corpus(const std::filesystem::path& path, CorpusFormat format);
void save_corpus(const Corpus& corpus, const std::filesystem::path& path,
                 CorpusFormat format = CorpusFormat::jsonl);

// Side map {dense_id: original_name} as JSON.
void save_author_map(const Corpus& corpus, const std::filesystem::path& path);

// Stratified split: per label a seeded shuffle, then round(fraction * n)
// documents into the train part, clamped so both parts keep at least one
// document per label. Requires at least 2 documents per label.
std::pair<Corpus, Corpus> split(const Corpus& corpus, double train_fraction,
                                std::uint64_t seed);

// Stratified three-way partition via largest-remainder apportionment: per
// label each part's size differs from fractions[p] * n by at most 1.
// Fractions must be positive and sum to 1 (tolerance 1e-9). Parts are
// disjoint by default; overlap_fraction > 0 additionally copies that seeded
// fraction of part 1 into parts 2 and 3 (shared training texts).
std::array<Corpus, 3> partition_three(const Corpus& corpus,
                                      const std::array<double, 3>& fractions,
                                      std::uint64_t seed,
                                      double overlap_fraction = 0.0);

// Seeded shuffle of the corpus cut into batches of k documents (last batch
// may be short); concatenating the batches reproduces the shuffle. k > size
// yields a single batch.
std::vector<Corpus> batch_stream(const Corpus& corpus, std::size_t k,
                                 std::uint64_t seed);

struct SyntheticSpec {
  int num_labels = 8;
  int docs_per_label = 200;
  int vocab_per_label = 2240;
  int shared_vocab = 300;
  int doc_length = 40;
  double style_bias = 0.7;  // probability a token comes from the author pool
  std::uint64_t seed = 0;
};

struct SyntheticVocab {
  std::vector<std::vector<std::string>> pools;  // one pool per label, disjoint
  std::vector<std::string> shared;              // includes "." and ","
  // Slots [0, signature_slots) of every pool are the author's habitual
  // markers; they have no cross-author synonym equivalents.
  int signature_slots = 0;
};

// Vocabulary underlying synthesize(); deterministic per spec, pools disjoint.
SyntheticVocab synthetic_vocab(const SyntheticSpec& spec);

// Per-author token pools plus a shared pool; each document's tokens drawn
// i.i.d. (author pool with probability style_bias, shared pool otherwise).
// Identical spec -> byte-identical corpus.
Corpus synthesize(const SyntheticSpec& spec);

// Sub-corpus of the documents whose label is in `labels`.
Corpus filter_labels(const Corpus& corpus, const std::vector<int>& labels);

}  // namespace upton
