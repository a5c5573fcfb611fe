#include "upton/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "upton/errors.hpp"
#include "upton/rng.hpp"

namespace upton {
namespace {

using nlohmann::json;

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  return in;
}

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  return out;
}

class AuthorIndex {
 public:
  int id_for(const std::string& name) {
    auto [it, inserted] = ids_.try_emplace(name, static_cast<int>(names_.size()));
    if (inserted) names_.push_back(name);
    return it->second;
  }
  std::vector<std::string> names() && { return std::move(names_); }
  int count() const { return static_cast<int>(names_.size()); }

 private:
  std::map<std::string, int> ids_;
  std::vector<std::string> names_;
};

void append_record(Corpus& corpus, AuthorIndex& authors, std::string id,
                   const std::string& author, std::string text,
                   std::size_t line) {
  if (id.empty())
    throw ParseError("line " + std::to_string(line) + ": empty id");
  if (text.empty())
    throw ParseError("line " + std::to_string(line) + ": empty text");
  Document doc;
  doc.id = std::move(id);
  doc.author = authors.id_for(author);
  doc.text = std::move(text);
  corpus.documents.push_back(std::move(doc));
}

Corpus load_jsonl(const std::filesystem::path& path) {
  auto in = open_input(path);
  Corpus corpus;
  AuthorIndex authors;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json record;
    try {
      record = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!record.is_object() || !record.contains("id") ||
        !record.contains("author") || !record.contains("text"))
      throw ParseError("line " + std::to_string(line_no) +
                       ": record needs id, author, text");
    std::string author;
    if (record["author"].is_string())
      author = record["author"].get<std::string>();
    else if (record["author"].is_number_integer())
      author = std::to_string(record["author"].get<long long>());
    else
      throw ParseError("line " + std::to_string(line_no) + ": bad author");
    if (!record["id"].is_string() || !record["text"].is_string())
      throw ParseError("line " + std::to_string(line_no) +
                       ": id and text must be strings");
    append_record(corpus, authors, record["id"].get<std::string>(), author,
                  record["text"].get<std::string>(), line_no);
  }
  corpus.author_names = std::move(authors).names();
  corpus.num_labels = static_cast<int>(corpus.author_names.size());
  if (corpus.documents.empty())
    throw ConfigError("empty corpus: " + path.string());
  return corpus;
}

// RFC-4180: quoted fields may contain commas, newlines, and doubled quotes.
std::vector<std::vector<std::string>> parse_csv(std::istream& in,
                                                std::size_t& line_no) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  line_no = 1;
  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_row = [&] {
    end_field();
    rows.push_back(std::move(row));
    row.clear();
  };
  char c;
  while (in.get(c)) {
    if (in_quotes) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get(c);
          field.push_back('"');
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line_no;
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        if (field.empty() && !field_started) {
          in_quotes = true;
          field_started = true;
        } else {
          field.push_back(c);
        }
        break;
      case ',':
        end_field();
        field_started = false;
        break;
      case '\r':
        break;
      case '\n':
        end_row();
        ++line_no;
        break;
      default:
        field.push_back(c);
        field_started = true;
    }
  }
  if (in_quotes) throw ParseError("unterminated quoted field");
  if (field_started || !field.empty() || !row.empty()) end_row();
  return rows;
}

Corpus load_csv(const std::filesystem::path& path) {
  auto in = open_input(path);
  std::size_t last_line = 0;
  auto rows = parse_csv(in, last_line);
  if (rows.empty()) throw ConfigError("empty corpus: " + path.string());
  const auto& header = rows.front();
  if (header.size() != 3 || header[0] != "id" || header[1] != "author" ||
      header[2] != "text")
    throw ParseError("line 1: expected header id,author,text");
  Corpus corpus;
  AuthorIndex authors;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != 3)
      throw ParseError("record " + std::to_string(r + 1) + ": expected 3 fields, got " +
                       std::to_string(rows[r].size()));
    append_record(corpus, authors, rows[r][0], rows[r][1], rows[r][2], r + 1);
  }
  corpus.author_names = std::move(authors).names();
  corpus.num_labels = static_cast<int>(corpus.author_names.size());
  if (corpus.documents.empty())
    throw ConfigError("empty corpus: " + path.string());
  return corpus;
}

std::string csv_quote(const std::string& field) {
  if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

const std::string& author_name(const Corpus& corpus, int label) {
  static const std::string unknown = "?";
  if (label >= 0 && label < static_cast<int>(corpus.author_names.size()))
    return corpus.author_names[label];
  return unknown;
}

// Per-label document indices in corpus order.
std::vector<std::vector<std::size_t>> indices_by_label(const Corpus& corpus) {
  std::vector<std::vector<std::size_t>> by_label(
      std::max(corpus.num_labels, 1));
  for (std::size_t i = 0; i < corpus.documents.size(); ++i) {
    int label = corpus.documents[i].author;
    if (label < 0 || label >= corpus.num_labels)
      throw ConfigError("document label out of range: " +
                        corpus.documents[i].id);
    by_label[label].push_back(i);
  }
  return by_label;
}

Corpus gather(const Corpus& corpus, std::vector<std::size_t> indices,
              bool keep_corpus_order = true) {
  if (keep_corpus_order) std::sort(indices.begin(), indices.end());
  Corpus out;
  out.num_labels = corpus.num_labels;
  out.author_names = corpus.author_names;
  out.documents.reserve(indices.size());
  for (std::size_t i : indices) out.documents.push_back(corpus.documents[i]);
  return out;
}

}  // namespace

Corpus load_corpus(const std::filesystem::path& path, CorpusFormat format) {
  if (!std::filesystem::exists(path))
    throw IoError("no such file: " + path.string());
  return format == CorpusFormat::jsonl ? load_jsonl(path) : load_csv(path);
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path,
                 CorpusFormat format) {
  auto out = open_output(path);
  if (format == CorpusFormat::jsonl) {
    for (const auto& doc : corpus.documents) {
      json record{{"author", author_name(corpus, doc.author)},
                  {"id", doc.id},
                  {"text", doc.text}};
      out << record.dump() << '\n';
    }
  } else {
    out << "id,author,text\n";
    for (const auto& doc : corpus.documents)
      out << csv_quote(doc.id) << ',' << csv_quote(author_name(corpus, doc.author))
          << ',' << csv_quote(doc.text) << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

void save_author_map(const Corpus& corpus, const std::filesystem::path& path) {
  json map = json::object();
  for (int i = 0; i < corpus.num_labels; ++i)
    map[std::to_string(i)] = corpus.author_names[i];
  auto out = open_output(path);
  out << map.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::pair<Corpus, Corpus> split(const Corpus& corpus, double train_fraction,
                                std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ConfigError("train_fraction must be in (0, 1)");
  if (corpus.empty()) throw ConfigError("cannot split an empty corpus");
  std::vector<std::size_t> train_idx, test_idx;
  auto by_label = indices_by_label(corpus);
  for (int label = 0; label < corpus.num_labels; ++label) {
    auto& idx = by_label[label];
    std::size_t n = idx.size();
    if (n < 2)
      throw ConfigError("label " + std::to_string(label) +
                        " has fewer than 2 documents");
    Rng rng(derive_seed(seed, "split-label-" + std::to_string(label)));
    rng.shuffle(idx);
    auto want = static_cast<std::size_t>(
        std::floor(train_fraction * static_cast<double>(n) + 0.5));
    want = std::clamp<std::size_t>(want, 1, n - 1);
    train_idx.insert(train_idx.end(), idx.begin(), idx.begin() + want);
    test_idx.insert(test_idx.end(), idx.begin() + want, idx.end());
  }
  return {gather(corpus, std::move(train_idx)),
          gather(corpus, std::move(test_idx))};
}

std::array<Corpus, 3> partition_three(const Corpus& corpus,
                                      const std::array<double, 3>& fractions,
                                      std::uint64_t seed,
                                      double overlap_fraction) {
  double sum = fractions[0] + fractions[1] + fractions[2];
  for (double f : fractions)
    if (!(f > 0.0)) throw ConfigError("partition fractions must be positive");
  if (std::abs(sum - 1.0) > 1e-9)
    throw ConfigError("partition fractions must sum to 1");
  if (overlap_fraction < 0.0 || overlap_fraction >= 1.0)
    throw ConfigError("overlap_fraction must be in [0, 1)");
  if (corpus.empty()) throw ConfigError("cannot partition an empty corpus");

  std::array<std::vector<std::size_t>, 3> parts;
  auto by_label = indices_by_label(corpus);
  for (int label = 0; label < corpus.num_labels; ++label) {
    auto& idx = by_label[label];
    std::size_t n = idx.size();
    if (n < 3)
      throw ConfigError("label " + std::to_string(label) +
                        " has fewer than 3 documents");
    Rng rng(derive_seed(seed, "partition-label-" + std::to_string(label)));
    rng.shuffle(idx);
    // Largest-remainder apportionment keeps every part within 1 of f*n.
    std::array<std::size_t, 3> sizes{};
    std::array<double, 3> remainders{};
    std::size_t assigned = 0;
    for (int p = 0; p < 3; ++p) {
      double exact = fractions[p] * static_cast<double>(n);
      sizes[p] = static_cast<std::size_t>(std::floor(exact));
      remainders[p] = exact - std::floor(exact);
      assigned += sizes[p];
    }
    while (assigned < n) {
      int best = 0;
      for (int p = 1; p < 3; ++p)
        if (remainders[p] > remainders[best]) best = p;
      ++sizes[best];
      remainders[best] = -1.0;
      ++assigned;
    }
    std::size_t offset = 0;
    for (int p = 0; p < 3; ++p) {
      parts[p].insert(parts[p].end(), idx.begin() + offset,
                      idx.begin() + offset + sizes[p]);
      offset += sizes[p];
    }
  }

  std::array<Corpus, 3> out{gather(corpus, std::move(parts[0])),
                            gather(corpus, std::move(parts[1])),
                            gather(corpus, std::move(parts[2]))};
  if (overlap_fraction > 0.0) {
    for (int p = 1; p < 3; ++p) {
      std::vector<std::size_t> pool(out[0].size());
      for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
      Rng rng(derive_seed(seed, "overlap-" + std::to_string(p)));
      rng.shuffle(pool);
      auto extra = static_cast<std::size_t>(std::floor(
          overlap_fraction * static_cast<double>(out[0].size()) + 0.5));
      for (std::size_t i = 0; i < extra; ++i)
        out[p].documents.push_back(out[0].documents[pool[i]]);
    }
  }
  return out;
}

std::vector<Corpus> batch_stream(const Corpus& corpus, std::size_t k,
                                 std::uint64_t seed) {
  if (k == 0) throw ConfigError("batch size must be positive");
  if (corpus.empty()) throw ConfigError("cannot stream an empty corpus");
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<Corpus> batches;
  for (std::size_t start = 0; start < order.size(); start += k) {
    std::size_t end = std::min(order.size(), start + k);
    batches.push_back(gather(
        corpus, {order.begin() + start, order.begin() + end},
        /*keep_corpus_order=*/false));
  }
  return batches;
}

int signature_slot_count(const SyntheticSpec& spec) {
  return std::max(2, spec.vocab_per_label / 56);
}

SyntheticVocab synthetic_vocab(const SyntheticSpec& spec) {
  if (spec.num_labels < 2) throw ConfigError("num_labels must be >= 2");
  if (spec.docs_per_label < 1 || spec.vocab_per_label < 1 ||
      spec.shared_vocab < 1 || spec.doc_length < 1)
    throw ConfigError("synthetic counts must be positive");
  if (spec.style_bias < 0.0 || spec.style_bias > 1.0)
    throw ConfigError("style_bias must be in [0, 1]");

  Rng rng(derive_seed(spec.seed, "vocab"));
  std::set<std::string> used;
  auto fresh_token = [&](std::size_t len, int alphabet) {
    for (;;) {
      std::string t(len, 'a');
      for (auto& c : t)
        c = static_cast<char>('a' + rng.below(static_cast<std::size_t>(alphabet)));
      if (used.insert(t).second) return t;
    }
  };
  SyntheticVocab vocab;
  vocab.pools.resize(spec.num_labels);
  // Each pool opens with a small signature block of 11..13-char tokens that
  // synthesize() draws an order of magnitude more often than the rest: the
  // few habitual markers of an author. The tail holds 4-char tokens built
  // from a 2-char stylistic prefix plus a 2-char filler; prefixes come from
  // per-author zones arranged on a ring; a pool spreads its draws over a
  // five-zone window (10/30/20/30/10 from two back to two ahead), so zone
  // profiles of ring neighbours overlap heavily while opposite authors
  // barely share mass. A tail token's leading character 3-grams are zone
  // evidence; the 2-char filler comes from a narrow alphabet, so filler
  // 3-grams recur across a zone instead of marking one author; the whole
  // token, like every signature token, stays author-unique but is too rare
  // to train on.
  const int signature = signature_slot_count(spec);
  vocab.signature_slots = signature;
  const int zone_width = 40;
  auto zoned_token = [&](int zone) {
    for (;;) {
      int p = zone * zone_width + static_cast<int>(rng.below(zone_width));
      std::string t{static_cast<char>('a' + p / 26),
                    static_cast<char>('a' + p % 26)};
      t.push_back(static_cast<char>('a' + rng.below(8)));
      t.push_back(static_cast<char>('a' + rng.below(8)));
      if (used.insert(t).second) return t;
    }
  };
  for (int label = 0; label < spec.num_labels; ++label) {
    auto& pool = vocab.pools[label];
    pool.reserve(spec.vocab_per_label);
    for (int s = 0; s < spec.vocab_per_label; ++s) {
      if (s < signature) {
        pool.push_back(fresh_token(11 + static_cast<std::size_t>(s % 3), 26));
      } else {
        const int tail = s - signature;
        const int span = std::max(1, spec.vocab_per_label - signature);
        const int pct = tail * 100 / span;
        const int off =
            pct < 10 ? -2 : (pct < 40 ? -1 : (pct < 60 ? 0 : (pct < 90 ? 1 : 2)));
        pool.push_back(zoned_token(
            ((label + off) % spec.num_labels + spec.num_labels) %
            spec.num_labels));
      }
    }
  }
  vocab.shared.reserve(spec.shared_vocab + 2);
  for (int i = 0; i < spec.shared_vocab; ++i)
    vocab.shared.push_back(fresh_token(5 + static_cast<std::size_t>(i % 3), 22));
  vocab.shared.push_back(".");
  vocab.shared.push_back(",");
  return vocab;
}


Corpus synthesize(const SyntheticSpec& spec) {
  SyntheticVocab vocab = synthetic_vocab(spec);
  Corpus corpus;
  corpus.num_labels = spec.num_labels;
  for (int label = 0; label < spec.num_labels; ++label)
    corpus.author_names.push_back("author_" + std::to_string(label));
  Rng rng(derive_seed(spec.seed, "docs"));
  for (int label = 0; label < spec.num_labels; ++label) {
    const auto& pool = vocab.pools[label];
    for (int d = 0; d < spec.docs_per_label; ++d) {
      Document doc;
      doc.id = "a" + std::to_string(label) + "-d" + std::to_string(d);
      doc.author = label;
      doc.tokens.reserve(spec.doc_length);
      const std::size_t signature =
          static_cast<std::size_t>(signature_slot_count(spec));
      for (int t = 0; t < spec.doc_length; ++t) {
        const bool styled = rng.real() < spec.style_bias;
        if (!styled) {
          doc.tokens.push_back(vocab.shared[rng.below(vocab.shared.size())]);
        } else if (signature < pool.size() && rng.real() < 1.0 / 28.0) {
          doc.tokens.push_back(pool[rng.below(signature)]);
        } else if (signature < pool.size()) {
          doc.tokens.push_back(
              pool[signature + rng.below(pool.size() - signature)]);
        } else {
          doc.tokens.push_back(pool[rng.below(pool.size())]);
        }
      }
      for (std::size_t t = 0; t < doc.tokens.size(); ++t) {
        if (t) doc.text += ' ';
        doc.text += doc.tokens[t];
      }
      corpus.documents.push_back(std::move(doc));
    }
  }
  return corpus;
}

Corpus filter_labels(const Corpus& corpus, const std::vector<int>& labels) {
  std::set<int> wanted(labels.begin(), labels.end());
  Corpus out;
  out.num_labels = corpus.num_labels;
  out.author_names = corpus.author_names;
  for (const auto& doc : corpus.documents)
    if (wanted.count(doc.author)) out.documents.push_back(doc);
  return out;
}

}  // namespace upton
