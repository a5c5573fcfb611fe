#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "upton/corpus.hpp"

namespace upton {

// Substitution candidates per source token. Candidate lists are ordered and
// never contain the source token itself; candidate order is the tie-break
// order of the search, so it is part of the contract.
struct SubstitutionLexicon {
  std::map<std::string, std::vector<std::string>> entries;

  // Empty vector for tokens without an entry.
  const std::vector<std::string>& candidates(const std::string& token) const;

  // Raises ConfigError if any candidate list contains its source token or a
  // duplicate candidate.
  void validate() const;
};

// TSV: source token, TAB, comma-separated candidates.
SubstitutionLexicon load_lexicon_tsv(const std::filesystem::path& path);
void save_lexicon_tsv(const SubstitutionLexicon& lexicon,
                      const std::filesystem::path& path);

// Companion lexicon for a synthetic vocabulary: pool tokens are grouped into
// cross-pool synonym groups (tokens_per_pool consecutive tokens from every
// pool form one group; every group member lists all other members, ordered by
// pool then slot). Shared tokens are paired into two-token groups, and the
// straight/typewriter quote swap is always present.
SubstitutionLexicon build_synthetic_lexicon(const SyntheticVocab& vocab,
                                            int tokens_per_pool = 2);

}  // namespace upton
