#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "upton/classifier.hpp"
#include "upton/corpus.hpp"
#include "upton/lexicon.hpp"
#include "upton/targets.hpp"

namespace upton {

struct Substitution {
  std::size_t position = 0;
  std::string original;
  std::string replacement;
};

struct PerturbationResult {
  std::string doc_id;
  std::vector<Substitution> substitutions;
  bool success = false;
  int original_label = 0;
  int achieved_label = 0;  // model's prediction on the released text
  long queries = 0;        // loss/predict evaluations performed
  Termination term_used;   // condition of the final attempt
};

// Greedy importance-then-substitute search. One pass: positions are ranked
// by the objective gain of deleting their token (ties toward the earlier
// position), then each position in rank order tries every lexicon candidate
// and applies the best strictly-improving one (ties toward the earlier
// candidate). For any_other the objective is the true-label loss (maximized);
// for exact_target it is the target loss (minimized). Stops as soon as the
// prediction satisfies `term` (confirmed with a fresh evaluation) or after
// ceil(budget * tokens) substitutions; on failure the partial substitutions
// are retained. budget must be > 0.
PerturbationResult greedy_attack(const Document& doc, const Model& model,
                                 const Featurizer& featurizer,
                                 const Termination& term,
                                 const SubstitutionLexicon& lexicon,
                                 double budget);

struct PoisonBatchResult {
  std::vector<PerturbationResult> results;  // input order
  Corpus poisoned;                          // same ids and labels, new texts
  bool degenerate_model = false;  // near-uniform model; successes vacuous
};

// Applies greedy_attack per document under its assigned condition; a failed
// exact_target attack is retried once from the original text against the
// retry target, and if that fails too the retry's partial perturbation is
// released with success=false. Documents without substitutions keep their
// original text byte-for-byte; budget == 0 short-circuits to a no-op copy.
// Workers only affect scheduling, never results.
PoisonBatchResult poison_batch(const Corpus& corpus, const Model& model,
                               const Featurizer& featurizer,
                               const TargetAssignment& assignment,
                               const SubstitutionLexicon& lexicon,
                               double budget, int jobs = 1);

// Highest per-label share of any single replacement token: share of label-l
// poisoned documents in which that token appears as a replacement. Guards
// against accidental trigger-word behavior (expected <= 0.2).
double max_replacement_share(const std::vector<PerturbationResult>& results,
                             const Corpus& corpus);

}  // namespace upton
