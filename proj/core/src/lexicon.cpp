#include "upton/lexicon.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "upton/errors.hpp"

namespace upton {

const std::vector<std::string>& SubstitutionLexicon::candidates(
    const std::string& token) const {
  static const std::vector<std::string> none;
  auto it = entries.find(token);
  return it == entries.end() ? none : it->second;
}

void SubstitutionLexicon::validate() const {
  for (const auto& [source, cands] : entries) {
    if (source.empty()) throw ConfigError("lexicon: empty source token");
    std::set<std::string> seen;
    for (const auto& c : cands) {
      if (c.empty())
        throw ConfigError("lexicon: empty candidate for '" + source + "'");
      if (c == source)
        throw ConfigError("lexicon: '" + source + "' lists itself");
      if (!seen.insert(c).second)
        throw ConfigError("lexicon: duplicate candidate '" + c + "' for '" +
                          source + "'");
    }
  }
}

SubstitutionLexicon load_lexicon_tsv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  SubstitutionLexicon lexicon;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0)
      throw ParseError("line " + std::to_string(line_no) +
                       ": expected token TAB candidates");
    std::string source = line.substr(0, tab);
    std::vector<std::string> cands;
    std::stringstream rest(line.substr(tab + 1));
    std::string c;
    while (std::getline(rest, c, ','))
      if (!c.empty()) cands.push_back(c);
    if (cands.empty())
      throw ParseError("line " + std::to_string(line_no) +
                       ": no candidates for '" + source + "'");
    if (!lexicon.entries.emplace(std::move(source), std::move(cands)).second)
      throw ParseError("line " + std::to_string(line_no) + ": duplicate source");
  }
  lexicon.validate();
  return lexicon;
}

void save_lexicon_tsv(const SubstitutionLexicon& lexicon,
                      const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  for (const auto& [source, cands] : lexicon.entries) {
    out << source << '\t';
    for (std::size_t i = 0; i < cands.size(); ++i) {
      if (i) out << ',';
      out << cands[i];
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

SubstitutionLexicon build_synthetic_lexicon(const SyntheticVocab& vocab,
                                            int tokens_per_pool) {
  if (tokens_per_pool < 1) throw ConfigError("tokens_per_pool must be >= 1");
  if (vocab.pools.empty()) throw ConfigError("vocabulary has no pools");
  SubstitutionLexicon lexicon;

  // Cross-pool synonym groups: slots [g*tpp, (g+1)*tpp) of every pool.
  // Signature slots stay out: an author's habitual markers have no
  // cross-author equivalents, so they are never substitution candidates.
  std::size_t pool_size = vocab.pools.front().size();
  for (const auto& pool : vocab.pools)
    if (pool.size() != pool_size)
      throw ConfigError("pools must share one size");
  const std::size_t first_slot = std::min(
      pool_size, static_cast<std::size_t>(std::max(vocab.signature_slots, 0)));
  for (std::size_t start = first_slot; start < pool_size;
       start += tokens_per_pool) {
    std::size_t stop = std::min(pool_size, start + tokens_per_pool);
    std::vector<std::string> group;
    for (const auto& pool : vocab.pools)
      for (std::size_t s = start; s < stop; ++s) group.push_back(pool[s]);
    for (const auto& member : group) {
      auto& cands = lexicon.entries[member];
      for (const auto& other : group)
        if (other != member) cands.push_back(other);
    }
  }

  // Shared tokens stay substitution-free: they carry no label signal, so a
  // swap among them spends budget without moving any decision boundary.
  lexicon.validate();
  return lexicon;
}

}  // namespace upton
