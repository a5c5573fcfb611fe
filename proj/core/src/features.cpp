#include "upton/features.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string_view>

#include "upton/errors.hpp"
#include "upton/rng.hpp"

namespace upton {
namespace {

constexpr const char* kStandalone = ".,!?;:'\"()";

bool is_standalone(char c) {
  for (const char* p = kStandalone; *p; ++p)
    if (*p == c) return true;
  return false;
}

// Hash of one feature key mixed with the featurizer seed; bucket from the
// low bits, sign from bit 63 (post-mix, so the two are decorrelated).
std::pair<int, double> hash_unit(std::string_view key, int d,
                                 std::uint64_t seed) {
  std::uint64_t h = mix64(fnv1a64(key) ^ seed);
  int bucket = static_cast<int>(h % static_cast<std::uint64_t>(d));
  double sign = (h >> 63) ? 1.0 : -1.0;
  return {bucket, sign};
}

void check_tokens(const TokenSequence& tokens) {
  if (tokens.empty()) throw ConfigError("empty token sequence");
  for (const auto& t : tokens)
    if (t.empty()) throw ConfigError("empty token in sequence");
}

double l2_normalize(std::vector<double>& values) {
  double norm2 = 0.0;
  for (double v : values) norm2 += v * v;
  if (norm2 > 0.0) {
    double inv = 1.0 / std::sqrt(norm2);
    for (double& v : values) v *= inv;
  }
  return norm2;
}

}  // namespace

TokenSequence tokenize(const std::string& text) {
  TokenSequence tokens;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) {
      tokens.push_back(std::move(word));
      word.clear();
    }
  };
  for (char raw : text) {
    unsigned char c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (is_standalone(raw)) {
      flush();
      tokens.emplace_back(1, raw);
    } else {
      word.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  if (tokens.empty()) throw ParseError("text produced no tokens");
  return tokens;
}

std::string detokenize(const TokenSequence& tokens) {
  check_tokens(tokens);
  std::string text;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) text += ' ';
    text += tokens[i];
  }
  return text;
}

void tokenize_corpus(Corpus& corpus) {
  for (auto& doc : corpus.documents)
    if (doc.tokens.empty()) doc.tokens = tokenize(doc.text);
}

const char* family_name(Family family) {
  return family == Family::ngram_hash ? "ngram_hash" : "mean_embedding";
}

Family family_from_name(const std::string& name) {
  if (name == "ngram_hash") return Family::ngram_hash;
  if (name == "mean_embedding") return Family::mean_embedding;
  throw ConfigError("unknown featurizer family: " + name);
}

std::vector<std::pair<int, double>> token_hash_units(const std::string& token,
                                                     int d,
                                                     std::uint64_t seed) {
  std::vector<std::pair<int, double>> units;
  units.push_back(hash_unit("u\x1f" + token, d, seed));
  std::string padded = "^" + token + "$";
  for (std::size_t i = 0; i + 3 <= padded.size(); ++i)
    units.push_back(hash_unit("c\x1f" + padded.substr(i, 3), d, seed));
  return units;
}

FeatureVector featurize_ngram(const TokenSequence& tokens, int d,
                              std::uint64_t seed) {
  if (d < 256) throw ConfigError("feature dimension must be >= 256");
  check_tokens(tokens);
  FeatureVector fv;
  fv.family = Family::ngram_hash;
  fv.values.assign(d, 0.0);
  for (const auto& token : tokens)
    for (auto [bucket, sign] : token_hash_units(token, d, seed))
      fv.values[bucket] += sign;
  l2_normalize(fv.values);
  return fv;
}

std::vector<double> EmbeddingTable::lookup(const std::string& token) const {
  auto it = vectors.find(token);
  if (it != vectors.end()) return it->second;
  return unit_vector(dim, mix64(fnv1a64(token) ^ fallback_seed));
}

EmbeddingTable make_default_table(const SubstitutionLexicon& lexicon,
                                  const std::vector<std::string>& extra_tokens,
                                  int dim, std::uint64_t seed, double theta) {
  if (dim < 2) throw ConfigError("embedding dimension must be >= 2");
  if (!(theta > 0.0) || theta >= 0.7853981633974483)
    throw ConfigError("theta must be in (0, pi/4)");
  EmbeddingTable table;
  table.dim = dim;
  table.fallback_seed = seed;

  // Union synonym groups from the lexicon edges; each group shares a base
  // direction keyed by its lexicographically smallest member.
  std::map<std::string, std::string> parent;
  std::function<std::string(const std::string&)> find =
      [&](const std::string& x) -> std::string {
    auto it = parent.find(x);
    if (it == parent.end() || it->second == x) return x;
    std::string root = find(it->second);
    parent[x] = root;
    return root;
  };
  auto unite = [&](const std::string& a, const std::string& b) {
    std::string ra = find(a), rb = find(b);
    if (ra == rb) return;
    if (rb < ra) std::swap(ra, rb);
    parent[rb] = ra;
  };
  for (const auto& [source, cands] : lexicon.entries) {
    parent.try_emplace(source, source);
    for (const auto& c : cands) {
      parent.try_emplace(c, c);
      unite(source, c);
    }
  }

  const double cos_t = std::cos(theta);
  const double sin_t = std::sin(theta);
  auto member_vector = [&](const std::string& token) {
    std::string root = find(token);
    auto base = unit_vector(dim, mix64(fnv1a64("base\x1f" + root) ^ seed));
    auto noise = unit_vector(dim, mix64(fnv1a64("member\x1f" + token) ^ seed));
    // Orthogonalize the noise against the base so each member is exactly
    // cos(theta) from the base and >= cos(2*theta) from any other member.
    double dot = 0.0;
    for (int i = 0; i < dim; ++i) dot += base[i] * noise[i];
    double norm2 = 0.0;
    for (int i = 0; i < dim; ++i) {
      noise[i] -= dot * base[i];
      norm2 += noise[i] * noise[i];
    }
    std::vector<double> v(dim);
    if (norm2 <= 1e-30) return base;
    double inv = 1.0 / std::sqrt(norm2);
    for (int i = 0; i < dim; ++i) v[i] = cos_t * base[i] + sin_t * inv * noise[i];
    return v;
  };

  for (const auto& [token, root] : parent) {
    (void)root;
    table.vectors[token] = member_vector(token);
  }
  for (const auto& token : extra_tokens)
    if (!table.vectors.count(token))
      table.vectors[token] = unit_vector(dim, mix64(fnv1a64(token) ^ seed));
  return table;
}

EmbeddingTable load_table_tsv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  EmbeddingTable table;
  table.dim = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0)
      throw ParseError("line " + std::to_string(line_no) +
                       ": expected token TAB components");
    std::string token = line.substr(0, tab);
    std::vector<double> v;
    std::stringstream rest(line.substr(tab + 1));
    std::string part;
    while (rest >> part) {
      double x = 0.0;
      auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), x);
      if (ec != std::errc() || p != part.data() + part.size())
        throw ParseError("line " + std::to_string(line_no) +
                         ": bad component '" + part + "'");
      v.push_back(x);
    }
    if (v.empty())
      throw ParseError("line " + std::to_string(line_no) + ": no components");
    if (table.dim == 0)
      table.dim = static_cast<int>(v.size());
    else if (table.dim != static_cast<int>(v.size()))
      throw ParseError("line " + std::to_string(line_no) +
                       ": inconsistent dimension");
    table.vectors[std::move(token)] = std::move(v);
  }
  if (table.vectors.empty())
    throw ConfigError("empty embedding table: " + path.string());
  return table;
}

void save_table_tsv(const EmbeddingTable& table,
                    const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  char buf[64];
  for (const auto& [token, v] : table.vectors) {
    out << token << '\t';
    for (std::size_t i = 0; i < v.size(); ++i) {
      auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v[i]);
      (void)ec;
      if (i) out << ' ';
      out.write(buf, p - buf);
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

FeatureVector featurize_embed(const TokenSequence& tokens,
                              const EmbeddingTable& table) {
  check_tokens(tokens);
  FeatureVector fv;
  fv.family = Family::mean_embedding;
  fv.values.assign(table.dim, 0.0);
  for (const auto& token : tokens) {
    auto e = table.lookup(token);
    for (int i = 0; i < table.dim; ++i) fv.values[i] += e[i];
  }
  double inv_n = 1.0 / static_cast<double>(tokens.size());
  for (double& v : fv.values) v *= inv_n;
  l2_normalize(fv.values);
  return fv;
}

PcaResult pca_project(const std::vector<FeatureVector>& vectors, int k,
                      int iterations, double tol, std::uint64_t seed) {
  if (k < 1) throw ConfigError("k must be >= 1");
  if (vectors.size() < static_cast<std::size_t>(k) + 1)
    throw ConfigError("need at least k + 1 vectors");
  const Family family = vectors.front().family;
  const std::size_t d = vectors.front().values.size();
  for (const auto& v : vectors)
    if (v.family != family || v.values.size() != d)
      throw ConfigError("vectors must share one family and dimension");

  const std::size_t n = vectors.size();
  std::vector<double> mean(d, 0.0);
  for (const auto& v : vectors)
    for (std::size_t j = 0; j < d; ++j) mean[j] += v.values[j];
  for (double& m : mean) m /= static_cast<double>(n);
  // Centered data, deflated in place after each extracted component.
  std::vector<std::vector<double>> X(n, std::vector<double>(d));
  double total_variance = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      X[i][j] = vectors[i].values[j] - mean[j];
      total_variance += X[i][j] * X[i][j];
    }
  total_variance /= static_cast<double>(n - 1);

  PcaResult result;
  result.total_variance = total_variance;
  std::vector<double> scores(n);
  for (int comp = 0; comp < k; ++comp) {
    auto axis = unit_vector(static_cast<int>(d),
                            derive_seed(seed, "axis-" + std::to_string(comp)));
    double eigen = 0.0;
    for (int it = 0; it < iterations; ++it) {
      // v <- X^T X v, normalized.
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += X[i][j] * axis[j];
        scores[i] = s;
      }
      std::vector<double> next(d, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) next[j] += scores[i] * X[i][j];
      double norm2 = 0.0;
      for (double v : next) norm2 += v * v;
      double norm = std::sqrt(norm2);
      if (norm <= 1e-300) {
        eigen = 0.0;
        break;
      }
      double delta = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        double nv = next[j] / norm;
        delta += std::abs(nv - axis[j]);
        axis[j] = nv;
      }
      eigen = norm / static_cast<double>(n - 1);
      if (delta <= tol) break;
    }
    if (eigen <= 1e-12 * std::max(total_variance, 1e-300)) {
      result.rank_deficient = true;
      break;
    }
    // Canonical sign: largest-magnitude coordinate positive.
    std::size_t arg = 0;
    for (std::size_t j = 1; j < d; ++j)
      if (std::abs(axis[j]) > std::abs(axis[arg])) arg = j;
    if (axis[arg] < 0.0)
      for (double& v : axis) v = -v;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += X[i][j] * axis[j];
      scores[i] = s;
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) X[i][j] -= scores[i] * axis[j];
    result.axes.push_back(axis);
    result.explained_variance.push_back(eigen);
    ++result.k;
  }
  result.points.assign(n, std::vector<double>(result.k, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < result.k; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j)
        s += (vectors[i].values[j] - mean[j]) * result.axes[c][j];
      result.points[i][c] = s;
    }
  return result;
}

}  // namespace upton
