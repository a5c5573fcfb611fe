#include "upton/targets.hpp"

#include <algorithm>

#include "upton/errors.hpp"
#include "upton/perturb.hpp"
#include "upton/rng.hpp"

namespace upton {
namespace {

TokenSequence tokens_of(const Document& doc) {
  return doc.tokens.empty() ? tokenize(doc.text) : doc.tokens;
}

// idx-th label in ascending order, skipping the excluded ones.
int nth_label_excluding(int idx, int num_labels, int skip_a, int skip_b) {
  for (int label = 0; label < num_labels; ++label) {
    if (label == skip_a || label == skip_b) continue;
    if (idx == 0) return label;
    --idx;
  }
  throw ConfigError("label draw out of range");
}

}  // namespace

const char* strategy_name(Strategy strategy) {
  switch (strategy) {
    case Strategy::non_target: return "non_target";
    case Strategy::sample_wide: return "sample_wide";
    case Strategy::class_wide: return "class_wide";
  }
  throw ConfigError("unknown strategy");
}

Strategy strategy_from_name(const std::string& name) {
  if (name == "non_target") return Strategy::non_target;
  if (name == "sample_wide") return Strategy::sample_wide;
  if (name == "class_wide") return Strategy::class_wide;
  throw ConfigError("unknown strategy: " + name);
}

TargetAssignment assign_nontarget(const Corpus& corpus) {
  TargetAssignment assignment;
  assignment.strategy = Strategy::non_target;
  for (const auto& doc : corpus.documents)
    assignment.per_doc.emplace(doc.id, Termination{});
  return assignment;
}

TargetAssignment assign_samplewide(const Corpus& corpus, std::uint64_t seed) {
  if (corpus.num_labels < 2) throw ConfigError("need at least 2 labels");
  const int M = corpus.num_labels;
  TargetAssignment assignment;
  assignment.strategy = Strategy::sample_wide;
  for (const auto& doc : corpus.documents) {
    Rng rng(derive_seed(seed, doc.id));
    Termination term;
    term.kind = Termination::Kind::exact_target;
    term.target = nth_label_excluding(static_cast<int>(rng.below(M - 1)), M,
                                      doc.author, -1);
    if (M >= 3)
      term.retry_target = nth_label_excluding(
          static_cast<int>(rng.below(M - 2)), M, doc.author, term.target);
    assignment.per_doc.emplace(doc.id, term);
  }
  return assignment;
}

std::vector<std::vector<double>> classwide_pre_experiment(
    const Model& model, const Featurizer& featurizer, const Corpus& probe,
    const SubstitutionLexicon& lexicon, double budget, int n_per_pair) {
  if (n_per_pair < 1) throw ConfigError("n_per_pair must be >= 1");
  if (budget < 0.0) throw ConfigError("budget must be >= 0");
  const int M = probe.num_labels;
  if (M < 2) throw ConfigError("need at least 2 labels");

  std::vector<std::vector<std::size_t>> by_label(M);
  for (std::size_t i = 0; i < probe.size(); ++i) {
    auto& bucket = by_label[probe.documents[i].author];
    if (static_cast<int>(bucket.size()) < n_per_pair) bucket.push_back(i);
  }
  for (int i = 0; i < M; ++i)
    if (static_cast<int>(by_label[i].size()) < n_per_pair)
      throw ConfigError("label " + std::to_string(i) + " has fewer than " +
                        std::to_string(n_per_pair) + " probe documents");

  std::vector matrix(M, std::vector<double>(M, -1.0));
  for (int i = 0; i < M; ++i) {
    for (int j = 0; j < M; ++j) {
      if (j == i) continue;
      int flipped = 0;
      for (std::size_t idx : by_label[i]) {
        const Document& doc = probe.documents[idx];
        if (budget == 0.0) {
          auto [label, probs] =
              predict(model, featurizer.featurize(tokens_of(doc)));
          (void)probs;
          if (label == j) ++flipped;
          continue;
        }
        Termination term;
        term.kind = Termination::Kind::exact_target;
        term.target = j;
        if (greedy_attack(doc, model, featurizer, term, lexicon, budget)
                .success)
          ++flipped;
      }
      matrix[i][j] = static_cast<double>(flipped) / n_per_pair;
    }
  }
  return matrix;
}

TargetAssignment assign_classwide(
    const Corpus& corpus, const std::vector<std::vector<double>>& matrix) {
  const int M = corpus.num_labels;
  if (M < 2) throw ConfigError("need at least 2 labels");
  if (static_cast<int>(matrix.size()) != M)
    throw ConfigError("success matrix size does not match the label count");
  for (const auto& row : matrix)
    if (static_cast<int>(row.size()) != M)
      throw ConfigError("success matrix must be square");

  TargetAssignment assignment;
  assignment.strategy = Strategy::class_wide;
  assignment.success_matrix = matrix;
  std::vector<int> class_map(M, -1), retry_map(M, -1);
  for (int i = 0; i < M; ++i) {
    int best = -1, runner = -1;
    for (int j = 0; j < M; ++j) {
      if (j == i) continue;
      if (best < 0 || matrix[i][j] > matrix[i][best]) {
        runner = best;
        best = j;
      } else if (runner < 0 || matrix[i][j] > matrix[i][runner]) {
        runner = j;
      }
    }
    if (matrix[i][best] <= 0.0) {
      assignment.fallback_labels.push_back(i);
      continue;
    }
    class_map[i] = best;
    retry_map[i] = runner;
  }
  for (int a = 0; a < M; ++a)
    for (int b = a + 1; b < M; ++b)
      if (class_map[a] >= 0 && class_map[a] == class_map[b])
        assignment.non_injective = true;
  assignment.class_map = class_map;

  for (const auto& doc : corpus.documents) {
    if (doc.author < 0 || doc.author >= M)
      throw ConfigError("label out of range on document " + doc.id);
    Termination term;
    if (class_map[doc.author] >= 0) {
      term.kind = Termination::Kind::exact_target;
      term.target = class_map[doc.author];
      term.retry_target = retry_map[doc.author];
    }
    assignment.per_doc.emplace(doc.id, term);
  }
  return assignment;
}

}  // namespace upton
