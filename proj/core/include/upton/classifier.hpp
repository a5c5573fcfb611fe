#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "upton/corpus.hpp"
#include "upton/features.hpp"

namespace upton {

struct TrainConfig {
  double learning_rate = 0.1;
  int epochs = 30;
  int batch_size = 32;
  double l2 = 1e-4;  // penalty (l2/2)*||W||^2; bias is not regularized
  std::uint64_t seed = 0;
};

// Multinomial logistic regression over a fixed featurization.
struct Model {
  Family family = Family::ngram_hash;
  int num_labels = 0;
  int dim = 0;
  std::vector<double> weights;  // num_labels x dim, row-major
  std::vector<double> bias;     // num_labels
  std::vector<std::pair<int, double>> training_log;  // (epoch, mean CE loss)

  double weight(int label, int j) const { return weights[label * dim + j]; }
};

// Seeded weights uniform in [-0.01, 0.01], zero bias, empty log.
Model init_model(Family family, int num_labels, int dim, std::uint64_t seed);

// Mini-batch gradient descent on mean cross-entropy plus the l2 penalty.
// Deterministic: seeded init and per-epoch shuffles, fixed batch order.
// Raises DivergenceError naming the epoch if loss or weights go non-finite.
Model train(const Corpus& corpus, const Featurizer& featurizer,
            const TrainConfig& cfg);

// Same loop continued from an existing model; training_log entries are
// appended with epoch numbers continuing from the last entry. Zero epochs
// returns the model unchanged. Requires matching family/dim and corpus
// labels within the model's range.
Model fine_tune(const Model& model, const Corpus& corpus,
                const Featurizer& featurizer, const TrainConfig& cfg);

// Label probabilities (softmax, max-subtracted) and the argmax with ties
// broken toward the smallest index.
std::pair<int, std::vector<double>> predict(const Model& model,
                                            const FeatureVector& features);

// Cross-entropy of the true label, probabilities floored at 1e-12.
double loss(const Model& model, const FeatureVector& features, int label);

// Analytic gradient of loss() w.r.t. weights and bias (the same expression
// the trainer uses): d/dlogit_k = p_k - [k == label], outer product with the
// feature vector.
void loss_gradient(const Model& model, const FeatureVector& features,
                   int label, std::vector<double>& grad_weights,
                   std::vector<double>& grad_bias);

// Fraction of documents predicted correctly; empty corpus is an error.
double accuracy(const Model& model, const Corpus& corpus,
                const Featurizer& featurizer);

// Per-label accuracy; labels absent from the corpus get -1.
std::vector<double> per_label_accuracy(const Model& model, const Corpus& corpus,
                                       const Featurizer& featurizer);

// Versioned JSON container; doubles round-trip exactly.
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

// True when the model's label probabilities are near-uniform on the given
// documents (mean top-to-bottom probability spread < 0.01), e.g. a model
// that was initialized but never trained.
bool is_degenerate(const Model& model, const Corpus& corpus,
                   const Featurizer& featurizer);

}  // namespace upton
