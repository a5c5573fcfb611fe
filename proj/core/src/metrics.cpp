#include "upton/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <unordered_map>

#include <json.hpp>

#include "upton/errors.hpp"
#include "upton/rng.hpp"

namespace upton {
namespace {

using nlohmann::json;

TokenSequence tokens_of(const Document& doc) {
  return doc.tokens.empty() ? tokenize(doc.text) : doc.tokens;
}

std::string format_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw IoError("number formatting failed");
  return std::string(buf, end);
}

void check_family(const std::vector<FeatureVector>& vectors) {
  if (vectors.empty()) throw ConfigError("empty vector set");
  const Family family = vectors.front().family;
  const std::size_t dim = vectors.front().values.size();
  for (const auto& v : vectors)
    if (v.family != family || v.values.size() != dim)
      throw ConfigError("mixed families or dimensions in vector set");
}

std::vector<double> mean_of(const std::vector<FeatureVector>& vectors) {
  std::vector<double> mean(vectors.front().values.size(), 0.0);
  for (const auto& v : vectors)
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += v.values[j];
  for (double& m : mean) m /= static_cast<double>(vectors.size());
  return mean;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  return out;
}

}  // namespace

double semantic_similarity(const TokenSequence& original,
                           const TokenSequence& poisoned,
                           const EmbeddingTable& table) {
  if (original.empty() || poisoned.empty())
    throw ConfigError("similarity of an empty token sequence is undefined");

  std::unordered_map<std::string, std::pair<std::vector<double>, double>> cache;
  auto vec_of = [&](const std::string& token)
      -> const std::pair<std::vector<double>, double>& {
    auto it = cache.find(token);
    if (it == cache.end()) {
      auto v = table.lookup(token);
      double norm2 = 0.0;
      for (double x : v) norm2 += x * x;
      it = cache.emplace(token, std::make_pair(std::move(v), std::sqrt(norm2)))
               .first;
    }
    return it->second;
  };

  double total = 0.0;
  for (const auto& p_token : poisoned) {
    const auto& [pv, pn] = vec_of(p_token);
    double best = 0.0;  // negative cosines floored at zero
    for (const auto& o_token : original) {
      const auto& [ov, on] = vec_of(o_token);
      if (pn == 0.0 || on == 0.0) continue;
      double dot = 0.0;
      for (std::size_t j = 0; j < pv.size(); ++j) dot += pv[j] * ov[j];
      best = std::max(best, dot / (pn * on));
    }
    total += best;
  }
  return total / static_cast<double>(poisoned.size());
}

double mvd(const std::vector<FeatureVector>& clean,
           const std::vector<FeatureVector>& poisoned) {
  check_family(clean);
  check_family(poisoned);
  if (clean.front().family != poisoned.front().family ||
      clean.front().values.size() != poisoned.front().values.size())
    throw ConfigError("clean and poisoned sets use different features");
  auto mc = mean_of(clean), mp = mean_of(poisoned);
  double d2 = 0.0;
  for (std::size_t j = 0; j < mc.size(); ++j)
    d2 += (mc[j] - mp[j]) * (mc[j] - mp[j]);
  return std::sqrt(d2);
}

double fvd(const std::vector<FeatureVector>& vectors) {
  check_family(vectors);
  auto mean = mean_of(vectors);
  double total = 0.0;
  for (const auto& v : vectors) {
    double d2 = 0.0;
    for (std::size_t j = 0; j < mean.size(); ++j)
      d2 += (v.values[j] - mean[j]) * (v.values[j] - mean[j]);
    total += std::sqrt(d2);
  }
  return total / static_cast<double>(vectors.size());
}

MetricsReport build_report(const GameTrace& trace, const Corpus& clean_train,
                           const Corpus& poisoned_train, const Model& defender,
                           const Featurizer& defender_featurizer,
                           const EmbeddingTable& table,
                           const std::filesystem::path& outdir,
                           bool all_labels) {
  if (clean_train.size() != poisoned_train.size())
    throw ConfigError("clean and poisoned corpora differ in size");
  std::unordered_map<std::string, std::size_t> clean_index;
  for (std::size_t i = 0; i < clean_train.size(); ++i)
    clean_index.emplace(clean_train.documents[i].id, i);
  for (const auto& doc : poisoned_train.documents) {
    auto it = clean_index.find(doc.id);
    if (it == clean_index.end() ||
        clean_train.documents[it->second].author != doc.author)
      throw ConfigError("poisoned corpus does not mirror the clean ids: " +
                        doc.id);
  }

  MetricsReport report;
  report.scenario = trace.scenario;
  report.strategy = trace.strategy;
  report.clean_accuracy = trace.clean_reference_accuracy;
  report.poisoned_accuracy = trace.final_attacker_accuracy;
  report.config_hash = fnv1a64(trace.config_json);
  report.seed = trace.seed;
  report.similarity_note =
      "token-embedding surrogate: uniform token weights, clean text as "
      "reference, negative cosines floored at zero";

  if (!trace.poisoned_doc_ids.empty()) {
    double total = 0.0;
    for (const auto& id : trace.poisoned_doc_ids) {
      auto it = clean_index.find(id);
      if (it == clean_index.end())
        throw ConfigError("poisoned doc id missing from the corpus: " + id);
      total += semantic_similarity(
          tokens_of(clean_train.documents[it->second]),
          tokens_of(poisoned_train.documents[it->second]), table);
    }
    report.mean_similarity =
        total / static_cast<double>(trace.poisoned_doc_ids.size());
  }

  std::set<int> labels;
  for (const auto& doc : clean_train.documents) labels.insert(doc.author);
  std::map<int, std::vector<FeatureVector>> clean_by, poisoned_by;
  for (const auto& doc : clean_train.documents)
    clean_by[doc.author].push_back(
        defender_featurizer.featurize(tokens_of(doc)));
  for (const auto& doc : poisoned_train.documents)
    poisoned_by[doc.author].push_back(
        defender_featurizer.featurize(tokens_of(doc)));
  for (int label : labels) {
    report.mvd_per_label[label] = mvd(clean_by[label], poisoned_by[label]);
    report.fvd_clean_per_label[label] = fvd(clean_by[label]);
    report.fvd_poisoned_per_label[label] = fvd(poisoned_by[label]);
    report.sample_counts[label] = {
        static_cast<long>(clean_by[label].size()),
        static_cast<long>(poisoned_by[label].size())};
  }

  // 2-D projection of a seeded clean sample plus the poisoned documents of
  // the focus labels, in the defender's feature space.
  std::vector<FeatureVector> proj_vectors;
  std::vector<std::string> proj_ids;
  std::vector<int> proj_labels;
  std::vector<std::string> proj_kinds;
  std::map<int, std::vector<std::size_t>> docs_by_label;
  for (std::size_t i = 0; i < clean_train.size(); ++i)
    docs_by_label[clean_train.documents[i].author].push_back(i);
  for (auto& [label, indices] : docs_by_label) {
    Rng rng(derive_seed(trace.seed, "projection-" + std::to_string(label)));
    rng.shuffle(indices);
    const std::size_t take = std::min<std::size_t>(indices.size(), 20);
    std::vector<std::size_t> sample(indices.begin(), indices.begin() + take);
    std::sort(sample.begin(), sample.end());
    for (std::size_t i : sample) {
      proj_vectors.push_back(
          defender_featurizer.featurize(tokens_of(clean_train.documents[i])));
      proj_ids.push_back(clean_train.documents[i].id);
      proj_labels.push_back(label);
      proj_kinds.push_back("clean");
    }
  }
  const int focus_label = labels.empty() ? -1 : *labels.begin();
  std::set<std::string> poisoned_ids(trace.poisoned_doc_ids.begin(),
                                     trace.poisoned_doc_ids.end());
  for (std::size_t i = 0; i < poisoned_train.size(); ++i) {
    const Document& doc = poisoned_train.documents[i];
    if (!all_labels && doc.author != focus_label) continue;
    if (!poisoned_ids.count(doc.id)) continue;
    proj_vectors.push_back(defender_featurizer.featurize(tokens_of(doc)));
    proj_ids.push_back(doc.id);
    proj_labels.push_back(doc.author);
    proj_kinds.push_back("poisoned");
  }

  std::filesystem::create_directories(outdir);
  report.projection_csv = "projection.csv";
  {
    auto out = open_out(outdir / report.projection_csv);
    out << "id,label,kind,x,y\n";
    if (proj_vectors.size() >= 3) {
      PcaResult pca = pca_project(proj_vectors, 2);
      for (std::size_t i = 0; i < proj_vectors.size(); ++i) {
        out << proj_ids[i] << ',' << proj_labels[i] << ',' << proj_kinds[i]
            << ',' << format_double(pca.points[i][0]) << ','
            << format_double(pca.k > 1 ? pca.points[i][1] : 0.0) << '\n';
      }
    }
    if (!out) throw IoError("write failed: projection.csv");
  }
  {
    auto out = open_out(outdir / "onetime_results.csv");
    out << "scenario,strategy,seed,clean_accuracy,poisoned_accuracy,"
           "mean_similarity,poison_success_rate,mean_substitutions\n";
    out << report.scenario << ',' << report.strategy << ',' << trace.seed
        << ',' << format_double(report.clean_accuracy) << ','
        << format_double(report.poisoned_accuracy) << ','
        << format_double(report.mean_similarity) << ','
        << format_double(trace.poison_success_rate) << ','
        << format_double(trace.mean_substitutions) << '\n';
    if (!out) throw IoError("write failed: onetime_results.csv");
  }
  {
    auto out = open_out(outdir / "feature_stats.csv");
    out << "label,clean_count,poisoned_count,mvd,fvd_clean,fvd_poisoned\n";
    for (int label : labels) {
      auto [p, q] = report.sample_counts[label];
      out << label << ',' << p << ',' << q << ','
          << format_double(report.mvd_per_label[label]) << ','
          << format_double(report.fvd_clean_per_label[label]) << ','
          << format_double(report.fvd_poisoned_per_label[label]) << '\n';
    }
    if (!out) throw IoError("write failed: feature_stats.csv");
  }
  {
    json doc{{"scenario", report.scenario},
             {"strategy", report.strategy},
             {"clean_accuracy", report.clean_accuracy},
             {"poisoned_accuracy", report.poisoned_accuracy},
             {"mean_similarity", report.mean_similarity},
             {"projection_csv", report.projection_csv},
             {"config_hash", report.config_hash},
             {"seed", report.seed},
             {"similarity_note", report.similarity_note}};
    json per_label = json::object();
    for (int label : labels) {
      auto [p, q] = report.sample_counts[label];
      per_label[std::to_string(label)] = {
          {"mvd", report.mvd_per_label[label]},
          {"fvd_clean", report.fvd_clean_per_label[label]},
          {"fvd_poisoned", report.fvd_poisoned_per_label[label]},
          {"clean_count", p},
          {"poisoned_count", q}};
    }
    doc["per_label"] = std::move(per_label);
    auto out = open_out(outdir / "report.json");
    out << doc.dump(2) << '\n';
    if (!out) throw IoError("write failed: report.json");
  }
  return report;
}

}  // namespace upton
