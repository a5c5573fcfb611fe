#include "upton/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "upton/errors.hpp"
#include "upton/rng.hpp"

namespace upton {
namespace {

using nlohmann::json;

constexpr double kProbFloor = 1e-12;

TokenSequence tokens_of(const Document& doc) {
  return doc.tokens.empty() ? tokenize(doc.text) : doc.tokens;
}

struct SparseVec {
  std::vector<std::pair<int, double>> nz;
};

SparseVec to_sparse(const FeatureVector& fv) {
  SparseVec s;
  for (int j = 0; j < static_cast<int>(fv.values.size()); ++j)
    if (fv.values[j] != 0.0) s.nz.emplace_back(j, fv.values[j]);
  return s;
}

void check_compatible(const Model& model, const Featurizer& featurizer) {
  if (model.family != featurizer.family())
    throw ConfigError("featurizer family does not match the model");
  if (model.dim != featurizer.dim())
    throw ConfigError("featurizer dimension does not match the model");
}

void check_features(const Model& model, const FeatureVector& fv) {
  if (fv.family != model.family)
    throw ConfigError("feature family does not match the model");
  if (static_cast<int>(fv.values.size()) != model.dim)
    throw ConfigError("feature dimension does not match the model");
}

// Max-subtracted softmax over the given logits.
std::vector<double> softmax(std::vector<double> logits) {
  double max_logit = logits[0];
  for (double l : logits) max_logit = std::max(max_logit, l);
  double sum = 0.0;
  for (double& l : logits) {
    l = std::exp(l - max_logit);
    sum += l;
  }
  for (double& l : logits) l /= sum;
  return logits;
}

std::vector<double> sparse_probabilities(const Model& model,
                                         const SparseVec& x) {
  std::vector<double> logits(model.bias);
  for (auto [j, v] : x.nz) {
    const double* col = model.weights.data() + j;
    for (int k = 0; k < model.num_labels; ++k)
      logits[k] += col[static_cast<std::size_t>(k) * model.dim] * v;
  }
  return softmax(std::move(logits));
}

int argmax_label(const std::vector<double>& probs) {
  int best = 0;
  for (int k = 1; k < static_cast<int>(probs.size()); ++k)
    if (probs[k] > probs[best]) best = k;
  return best;
}

void check_labels(const Corpus& corpus, int num_labels) {
  for (const auto& doc : corpus.documents)
    if (doc.author < 0 || doc.author >= num_labels)
      throw ConfigError("label out of model range on document " + doc.id);
}

// Shared mini-batch loop for train and fine_tune; epoch numbering continues
// from `first_epoch`.
void run_epochs(Model& model, const std::vector<SparseVec>& features,
                const std::vector<int>& labels, const TrainConfig& cfg,
                int first_epoch) {
  if (cfg.learning_rate <= 0.0) throw ConfigError("learning_rate must be > 0");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (cfg.l2 < 0.0) throw ConfigError("l2 must be >= 0");

  const std::size_t n = features.size();
  const int M = model.num_labels;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::vector<double> batch_coef;  // per-document softmax residuals
  for (int e = 0; e < cfg.epochs; ++e) {
    const int epoch = first_epoch + e;
    Rng rng(derive_seed(cfg.seed, "epoch-" + std::to_string(epoch)));
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop =
          std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      const std::size_t b = stop - start;
      batch_coef.assign(b * M, 0.0);
      // Forward the whole batch against the current weights first.
      for (std::size_t i = start; i < stop; ++i) {
        const auto& x = features[order[i]];
        auto probs = sparse_probabilities(model, x);
        loss_sum += -std::log(std::max(probs[labels[order[i]]], kProbFloor));
        double* coef = batch_coef.data() + (i - start) * M;
        for (int k = 0; k < M; ++k) coef[k] = probs[k];
        coef[labels[order[i]]] -= 1.0;
      }
      const double scale = cfg.learning_rate / static_cast<double>(b);
      if (cfg.l2 > 0.0) {
        const double decay = 1.0 - cfg.learning_rate * cfg.l2;
        for (double& w : model.weights) w *= decay;
      }
      for (std::size_t i = start; i < stop; ++i) {
        const auto& x = features[order[i]];
        const double* coef = batch_coef.data() + (i - start) * M;
        for (int k = 0; k < M; ++k) {
          double* row = model.weights.data() +
                        static_cast<std::size_t>(k) * model.dim;
          const double step = scale * coef[k];
          if (step == 0.0) continue;
          for (auto [j, v] : x.nz) row[j] -= step * v;
          model.bias[k] -= step;
        }
      }
    }
    const double mean_loss = loss_sum / static_cast<double>(n);
    bool finite = std::isfinite(mean_loss);
    for (std::size_t w = 0; finite && w < model.weights.size(); ++w)
      finite = std::isfinite(model.weights[w]);
    if (!finite)
      throw DivergenceError("training diverged at epoch " +
                            std::to_string(epoch));
    model.training_log.emplace_back(epoch, mean_loss);
  }
}

std::vector<SparseVec> featurize_all(const Corpus& corpus,
                                     const Featurizer& featurizer) {
  std::vector<SparseVec> features;
  features.reserve(corpus.size());
  for (const auto& doc : corpus.documents)
    features.push_back(to_sparse(featurizer.featurize(tokens_of(doc))));
  return features;
}

}  // namespace

Model init_model(Family family, int num_labels, int dim, std::uint64_t seed) {
  if (num_labels < 2) throw ConfigError("need at least 2 labels");
  if (dim < 1) throw ConfigError("dimension must be >= 1");
  Model model;
  model.family = family;
  model.num_labels = num_labels;
  model.dim = dim;
  model.weights.resize(static_cast<std::size_t>(num_labels) * dim);
  model.bias.assign(num_labels, 0.0);
  Rng rng(derive_seed(seed, "init"));
  for (double& w : model.weights) w = 0.02 * rng.real() - 0.01;
  return model;
}

Model train(const Corpus& corpus, const Featurizer& featurizer,
            const TrainConfig& cfg) {
  if (corpus.empty()) throw ConfigError("cannot train on an empty corpus");
  if (corpus.num_labels < 2) throw ConfigError("need at least 2 labels");
  check_labels(corpus, corpus.num_labels);
  Model model = init_model(featurizer.family(), corpus.num_labels,
                           featurizer.dim(), cfg.seed);
  auto features = featurize_all(corpus, featurizer);
  std::vector<int> labels(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i)
    labels[i] = corpus.documents[i].author;
  run_epochs(model, features, labels, cfg, 0);
  return model;
}

Model fine_tune(const Model& model, const Corpus& corpus,
                const Featurizer& featurizer, const TrainConfig& cfg) {
  check_compatible(model, featurizer);
  if (corpus.empty()) throw ConfigError("cannot fine-tune on an empty corpus");
  check_labels(corpus, model.num_labels);
  Model tuned = model;
  if (cfg.epochs == 0) return tuned;
  auto features = featurize_all(corpus, featurizer);
  std::vector<int> labels(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i)
    labels[i] = corpus.documents[i].author;
  const int first_epoch =
      tuned.training_log.empty() ? 0 : tuned.training_log.back().first + 1;
  run_epochs(tuned, features, labels, cfg, first_epoch);
  return tuned;
}

std::pair<int, std::vector<double>> predict(const Model& model,
                                            const FeatureVector& features) {
  check_features(model, features);
  std::vector<double> logits(model.bias);
  for (int k = 0; k < model.num_labels; ++k) {
    const double* row =
        model.weights.data() + static_cast<std::size_t>(k) * model.dim;
    double s = 0.0;
    for (int j = 0; j < model.dim; ++j) s += row[j] * features.values[j];
    logits[k] += s;
  }
  auto probs = softmax(std::move(logits));
  return {argmax_label(probs), std::move(probs)};
}

double loss(const Model& model, const FeatureVector& features, int label) {
  if (label < 0 || label >= model.num_labels)
    throw ConfigError("label out of model range");
  auto [arg, probs] = predict(model, features);
  (void)arg;
  return -std::log(std::max(probs[label], kProbFloor));
}

void loss_gradient(const Model& model, const FeatureVector& features,
                   int label, std::vector<double>& grad_weights,
                   std::vector<double>& grad_bias) {
  if (label < 0 || label >= model.num_labels)
    throw ConfigError("label out of model range");
  auto [arg, probs] = predict(model, features);
  (void)arg;
  grad_weights.assign(model.weights.size(), 0.0);
  grad_bias.assign(model.num_labels, 0.0);
  for (int k = 0; k < model.num_labels; ++k) {
    double coef = probs[k] - (k == label ? 1.0 : 0.0);
    grad_bias[k] = coef;
    double* row = grad_weights.data() + static_cast<std::size_t>(k) * model.dim;
    for (int j = 0; j < model.dim; ++j) row[j] = coef * features.values[j];
  }
}

double accuracy(const Model& model, const Corpus& corpus,
                const Featurizer& featurizer) {
  check_compatible(model, featurizer);
  if (corpus.empty())
    throw ConfigError("accuracy over an empty corpus is undefined");
  check_labels(corpus, model.num_labels);
  std::size_t correct = 0;
  for (const auto& doc : corpus.documents) {
    auto [label, probs] = predict(model, featurizer.featurize(tokens_of(doc)));
    (void)probs;
    if (label == doc.author) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(corpus.size());
}

std::vector<double> per_label_accuracy(const Model& model, const Corpus& corpus,
                                       const Featurizer& featurizer) {
  check_compatible(model, featurizer);
  if (corpus.empty())
    throw ConfigError("accuracy over an empty corpus is undefined");
  check_labels(corpus, model.num_labels);
  std::vector<long> total(model.num_labels, 0), correct(model.num_labels, 0);
  for (const auto& doc : corpus.documents) {
    auto [label, probs] = predict(model, featurizer.featurize(tokens_of(doc)));
    (void)probs;
    ++total[doc.author];
    if (label == doc.author) ++correct[doc.author];
  }
  std::vector<double> acc(model.num_labels, -1.0);
  for (int k = 0; k < model.num_labels; ++k)
    if (total[k] > 0)
      acc[k] = static_cast<double>(correct[k]) / static_cast<double>(total[k]);
  return acc;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  json doc{{"format", "upton-model"},
           {"version", 1},
           {"family", family_name(model.family)},
           {"num_labels", model.num_labels},
           {"dim", model.dim},
           {"weights", model.weights},
           {"bias", model.bias}};
  json log = json::array();
  for (auto [epoch, l] : model.training_log) log.push_back(json::array({epoch, l}));
  doc["training_log"] = std::move(log);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << doc.dump() << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ParseError(std::string("corrupt model file: ") + e.what());
  }
  if (!doc.is_object() || doc.value("format", "") != "upton-model" ||
      doc.value("version", 0) != 1)
    throw ParseError("not a model file: " + path.string());
  Model model;
  try {
    model.family = family_from_name(doc.at("family").get<std::string>());
    model.num_labels = doc.at("num_labels").get<int>();
    model.dim = doc.at("dim").get<int>();
    model.weights = doc.at("weights").get<std::vector<double>>();
    model.bias = doc.at("bias").get<std::vector<double>>();
    for (const auto& entry : doc.at("training_log"))
      model.training_log.emplace_back(entry.at(0).get<int>(),
                                      entry.at(1).get<double>());
  } catch (const json::exception& e) {
    throw ParseError(std::string("corrupt model file: ") + e.what());
  }
  if (model.num_labels < 2 || model.dim < 1 ||
      model.weights.size() !=
          static_cast<std::size_t>(model.num_labels) * model.dim ||
      model.bias.size() != static_cast<std::size_t>(model.num_labels))
    throw ParseError("inconsistent model file: " + path.string());
  return model;
}

bool is_degenerate(const Model& model, const Corpus& corpus,
                   const Featurizer& featurizer) {
  check_compatible(model, featurizer);
  if (corpus.empty()) return true;
  const std::size_t sample = std::min<std::size_t>(corpus.size(), 32);
  double spread_sum = 0.0;
  for (std::size_t i = 0; i < sample; ++i) {
    auto [label, probs] =
        predict(model, featurizer.featurize(tokens_of(corpus.documents[i])));
    (void)label;
    auto [lo, hi] = std::minmax_element(probs.begin(), probs.end());
    spread_sum += *hi - *lo;
  }
  return spread_sum / static_cast<double>(sample) < 0.01;
}

}  // namespace upton
