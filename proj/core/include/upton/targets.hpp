#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "upton/classifier.hpp"
#include "upton/corpus.hpp"
#include "upton/lexicon.hpp"

namespace upton {

enum class Strategy { non_target, sample_wide, class_wide };

const char* strategy_name(Strategy strategy);
Strategy strategy_from_name(const std::string& name);

// Stopping condition for one attack. any_other succeeds as soon as the
// predicted label differs from the true one; exact_target requires the
// predicted label to equal `target`. retry_target, when >= 0, is the
// second-choice target used for one retry after an exact_target failure.
struct Termination {
  enum class Kind { any_other, exact_target };
  Kind kind = Kind::any_other;
  int target = -1;
  int retry_target = -1;

  bool satisfied(int predicted, int original) const {
    return kind == Kind::any_other ? predicted != original
                                   : predicted == target;
  }
};

struct TargetAssignment {
  Strategy strategy = Strategy::non_target;
  std::map<std::string, Termination> per_doc;  // doc id -> condition
  std::optional<std::vector<int>> class_map;   // class-wide: label -> target
  std::optional<std::vector<std::vector<double>>> success_matrix;
  std::vector<int> fallback_labels;  // all-zero rows demoted to any-other
  bool non_injective = false;        // two labels share a class-wide target
};

// Every document gets the any_other condition.
TargetAssignment assign_nontarget(const Corpus& corpus);

// Per-document uniform target among the other labels, seeded by the document
// id; with >= 3 labels a distinct second draw becomes the retry target.
// Requires num_labels >= 2.
TargetAssignment assign_samplewide(const Corpus& corpus, std::uint64_t seed);

// S[i][j] = fraction of the first n_per_pair label-i probe documents that an
// exact_target-j attack on `model` flips within `budget`. Diagonal entries
// are -1. Requires n_per_pair probe documents for every label. budget == 0
// degenerates to checking whether documents already classify as the target.
std::vector<std::vector<double>> classwide_pre_experiment(
    const Model& model, const Featurizer& featurizer, const Corpus& probe,
    const SubstitutionLexicon& lexicon, double budget, int n_per_pair);

// class_map[i] = argmax_j S[i][j] (ties toward the smaller j); the runner-up
// becomes the retry target. All-zero rows fall back to any-other and are
// recorded in fallback_labels. The map is not forced to be injective;
// collisions only set the non_injective flag.
TargetAssignment assign_classwide(
    const Corpus& corpus, const std::vector<std::vector<double>>& matrix);

}  // namespace upton
