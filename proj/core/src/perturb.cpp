#include "upton/perturb.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include "upton/errors.hpp"
#include "upton/features.hpp"

namespace upton {
namespace {

TokenSequence tokens_of(const Document& doc) {
  return doc.tokens.empty() ? tokenize(doc.text) : doc.tokens;
}

double logsumexp(const std::vector<double>& logits) {
  double max_logit = logits[0];
  for (double l : logits) max_logit = std::max(max_logit, l);
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - max_logit);
  return max_logit + std::log(sum);
}

int argmax_label(const std::vector<double>& logits) {
  int best = 0;
  for (int k = 1; k < static_cast<int>(logits.size()); ++k)
    if (logits[k] > logits[best]) best = k;
  return best;
}

// Incremental document evaluator. Keeps the unnormalized feature
// accumulation plus the raw (bias-free, unnormalized) logits so that a
// single-token substitution is evaluated without refeaturizing the document.
// Trials are pure: they derive delta logits without touching stored state,
// so reverted candidates leave no floating-point residue. Mirrors the
// normalization of the public featurize paths exactly, including the
// all-zero-feature case where the logits reduce to the bias.
class DocState {
 public:
  DocState(const Model& model, const Featurizer& featurizer,
           const TokenSequence& tokens)
      : model_(model) {
    if (model.family != featurizer.family() || model.dim != featurizer.dim())
      throw ConfigError("featurizer does not match the model");
    raw_logits_.assign(model.num_labels, 0.0);
    if (model.family == Family::ngram_hash) {
      const auto& ng = dynamic_cast<const NgramFeaturizer&>(featurizer);
      d_ = ng.dim();
      seed_ = ng.seed();
      counts_.assign(d_, 0.0);
      for (const auto& token : tokens)
        for (auto [bucket, sign] : token_hash_units(token, d_, seed_))
          counts_[bucket] += sign;
      norm2_ = 0.0;
      for (int b = 0; b < d_; ++b) {
        if (counts_[b] == 0.0) continue;
        norm2_ += counts_[b] * counts_[b];
        for (int k = 0; k < model.num_labels; ++k)
          raw_logits_[k] += model.weight(k, b) * counts_[b];
      }
    } else {
      const auto& ef = dynamic_cast<const EmbeddingFeaturizer&>(featurizer);
      table_ = &ef.table();
      rawsum_.assign(table_->dim, 0.0);
      for (const auto& token : tokens) {
        auto v = table_->lookup(token);
        for (int j = 0; j < table_->dim; ++j) rawsum_[j] += v[j];
      }
      norm2_ = 0.0;
      for (int j = 0; j < table_->dim; ++j) {
        norm2_ += rawsum_[j] * rawsum_[j];
        for (int k = 0; k < model.num_labels; ++k)
          raw_logits_[k] += model.weight(k, j) * rawsum_[j];
      }
    }
  }

  // Logits with `removed` deleted and, when non-null, `added` inserted.
  // Either pointer may be null; stored state is never modified.
  std::vector<double> trial_logits(const std::string* removed,
                                   const std::string* added) const {
    if (model_.family == Family::ngram_hash) {
      std::map<int, double> delta;
      if (removed)
        for (auto [bucket, sign] : token_hash_units(*removed, d_, seed_))
          delta[bucket] -= sign;
      if (added)
        for (auto [bucket, sign] : token_hash_units(*added, d_, seed_))
          delta[bucket] += sign;
      double norm2 = norm2_;
      std::vector<double> raw(raw_logits_);
      for (auto [bucket, dv] : delta) {
        if (dv == 0.0) continue;
        double before = counts_[bucket], after = before + dv;
        norm2 += after * after - before * before;
        for (int k = 0; k < model_.num_labels; ++k)
          raw[k] += model_.weight(k, bucket) * dv;
      }
      return finish(raw, norm2);
    }
    std::vector<double> sum(rawsum_);
    if (removed) {
      auto v = table_->lookup(*removed);
      for (int j = 0; j < table_->dim; ++j) sum[j] -= v[j];
    }
    if (added) {
      auto v = table_->lookup(*added);
      for (int j = 0; j < table_->dim; ++j) sum[j] += v[j];
    }
    double norm2 = 0.0;
    std::vector<double> raw(model_.num_labels, 0.0);
    for (int j = 0; j < table_->dim; ++j) {
      norm2 += sum[j] * sum[j];
      for (int k = 0; k < model_.num_labels; ++k)
        raw[k] += model_.weight(k, j) * sum[j];
    }
    return finish(raw, norm2);
  }

  std::vector<double> current_logits() const {
    return finish(raw_logits_, norm2_);
  }

  void commit(const std::string& removed, const std::string& added) {
    if (model_.family == Family::ngram_hash) {
      std::map<int, double> delta;
      for (auto [bucket, sign] : token_hash_units(removed, d_, seed_))
        delta[bucket] -= sign;
      for (auto [bucket, sign] : token_hash_units(added, d_, seed_))
        delta[bucket] += sign;
      for (auto [bucket, dv] : delta) {
        if (dv == 0.0) continue;
        double before = counts_[bucket], after = before + dv;
        norm2_ += after * after - before * before;
        counts_[bucket] = after;
        for (int k = 0; k < model_.num_labels; ++k)
          raw_logits_[k] += model_.weight(k, bucket) * dv;
      }
      return;
    }
    auto v_rm = table_->lookup(removed);
    auto v_ad = table_->lookup(added);
    norm2_ = 0.0;
    for (int j = 0; j < table_->dim; ++j) {
      rawsum_[j] += v_ad[j] - v_rm[j];
      norm2_ += rawsum_[j] * rawsum_[j];
    }
    for (int k = 0; k < model_.num_labels; ++k) {
      double d = 0.0;
      for (int j = 0; j < table_->dim; ++j)
        d += model_.weight(k, j) * (v_ad[j] - v_rm[j]);
      raw_logits_[k] += d;
    }
  }

 private:
  std::vector<double> finish(const std::vector<double>& raw,
                             double norm2) const {
    std::vector<double> logits(model_.bias);
    if (norm2 > 0.0) {
      const double inv = 1.0 / std::sqrt(norm2);
      for (int k = 0; k < model_.num_labels; ++k) logits[k] += raw[k] * inv;
    }
    return logits;
  }

  const Model& model_;
  int d_ = 0;
  std::uint64_t seed_ = 0;
  const EmbeddingTable* table_ = nullptr;
  std::vector<double> counts_;   // ngram: signed bucket sums (exact integers)
  std::vector<double> rawsum_;   // embedding: unnormalized token-vector sum
  double norm2_ = 0.0;
  std::vector<double> raw_logits_;
};

// Objective maximized by the greedy search: the true-label loss for
// any_other, the negated target loss for exact_target.
double attack_score(const std::vector<double>& logits, const Termination& term,
                    int original) {
  const double lse = logsumexp(logits);
  if (term.kind == Termination::Kind::any_other) return lse - logits[original];
  return logits[term.target] - lse;
}

}  // namespace

PerturbationResult greedy_attack(const Document& doc, const Model& model,
                                 const Featurizer& featurizer,
                                 const Termination& term,
                                 const SubstitutionLexicon& lexicon,
                                 double budget) {
  if (!(budget > 0.0)) throw ConfigError("budget must be > 0");
  if (doc.author < 0 || doc.author >= model.num_labels)
    throw ConfigError("label out of model range on document " + doc.id);
  if (term.kind == Termination::Kind::exact_target &&
      (term.target < 0 || term.target >= model.num_labels))
    throw ConfigError("attack target out of model range");

  PerturbationResult res;
  res.doc_id = doc.id;
  res.original_label = doc.author;
  res.term_used = term;

  TokenSequence tokens = tokens_of(doc);
  const std::size_t n = tokens.size();
  const std::size_t max_subs = static_cast<std::size_t>(
      std::ceil(budget * static_cast<double>(n)));

  auto fresh_predict = [&] {
    ++res.queries;
    return predict(model, featurizer.featurize(tokens)).first;
  };

  int predicted = fresh_predict();
  if (term.satisfied(predicted, res.original_label)) {
    res.success = true;
    res.achieved_label = predicted;
    return res;
  }

  DocState state(model, featurizer, tokens);
  double score = attack_score(state.current_logits(), term, res.original_label);

  std::vector<std::pair<double, std::size_t>> ranking;
  ranking.reserve(n);
  for (std::size_t p = 0; p < n; ++p) {
    auto logits = state.trial_logits(&tokens[p], nullptr);
    ++res.queries;
    ranking.emplace_back(attack_score(logits, term, res.original_label) - score,
                         p);
  }
  std::stable_sort(ranking.begin(), ranking.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });

  for (const auto& [gain, p] : ranking) {
    (void)gain;
    if (res.substitutions.size() >= max_subs) break;
    const auto& candidates = lexicon.candidates(tokens[p]);
    if (candidates.empty()) continue;
    double best_score = score;
    const std::string* best = nullptr;
    std::vector<double> best_logits;
    for (const auto& candidate : candidates) {
      auto logits = state.trial_logits(&tokens[p], &candidate);
      ++res.queries;
      double s = attack_score(logits, term, res.original_label);
      if (s > best_score) {
        best_score = s;
        best = &candidate;
        best_logits = std::move(logits);
      }
    }
    if (!best) continue;
    state.commit(tokens[p], *best);
    res.substitutions.push_back({p, tokens[p], *best});
    tokens[p] = *best;
    score = best_score;
    if (term.satisfied(argmax_label(best_logits), res.original_label)) {
      predicted = fresh_predict();
      if (term.satisfied(predicted, res.original_label)) {
        res.success = true;
        res.achieved_label = predicted;
        return res;
      }
    }
  }

  predicted = fresh_predict();
  res.achieved_label = predicted;
  res.success = term.satisfied(predicted, res.original_label);
  return res;
}

PoisonBatchResult poison_batch(const Corpus& corpus, const Model& model,
                               const Featurizer& featurizer,
                               const TargetAssignment& assignment,
                               const SubstitutionLexicon& lexicon,
                               double budget, int jobs) {
  if (budget < 0.0) throw ConfigError("budget must be >= 0");
  for (const auto& doc : corpus.documents)
    if (!assignment.per_doc.count(doc.id))
      throw ConfigError("no termination assigned for document " + doc.id);

  PoisonBatchResult out;
  out.poisoned.num_labels = corpus.num_labels;
  out.poisoned.author_names = corpus.author_names;
  out.poisoned.documents = corpus.documents;
  out.results.resize(corpus.size());
  out.degenerate_model = is_degenerate(model, corpus, featurizer);

  if (budget == 0.0) {
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      auto& r = out.results[i];
      r.doc_id = corpus.documents[i].id;
      r.original_label = corpus.documents[i].author;
      r.achieved_label = r.original_label;
      r.term_used = assignment.per_doc.at(r.doc_id);
    }
    return out;
  }

  auto attack_one = [&](std::size_t i) {
    const Document& doc = corpus.documents[i];
    const Termination& term = assignment.per_doc.at(doc.id);
    PerturbationResult r =
        greedy_attack(doc, model, featurizer, term, lexicon, budget);
    if (!r.success && term.kind == Termination::Kind::exact_target &&
        term.retry_target >= 0) {
      Termination retry;
      retry.kind = Termination::Kind::exact_target;
      retry.target = term.retry_target;
      PerturbationResult r2 =
          greedy_attack(doc, model, featurizer, retry, lexicon, budget);
      r2.queries += r.queries;
      r = std::move(r2);
    }
    if (!r.substitutions.empty()) {
      Document& released = out.poisoned.documents[i];
      TokenSequence tokens = tokens_of(doc);
      for (const auto& sub : r.substitutions)
        tokens[sub.position] = sub.replacement;
      released.text = detokenize(tokens);
      released.tokens = std::move(tokens);
    }
    out.results[i] = std::move(r);
  };

  const int workers = std::max(
      1, std::min<int>(jobs, static_cast<int>(corpus.size())));
  if (workers == 1) {
    for (std::size_t i = 0; i < corpus.size(); ++i) attack_one(i);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i = next.fetch_add(1);
        if (i >= corpus.size()) return;
        try {
          attack_one(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          return;
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

double max_replacement_share(const std::vector<PerturbationResult>& results,
                             const Corpus& corpus) {
  std::map<std::string, int> author_of;
  for (const auto& doc : corpus.documents) author_of[doc.id] = doc.author;

  std::map<int, long> poisoned_total;
  std::map<int, std::map<std::string, long>> token_docs;
  for (const auto& r : results) {
    if (r.substitutions.empty()) continue;
    auto it = author_of.find(r.doc_id);
    if (it == author_of.end())
      throw ConfigError("result for unknown document " + r.doc_id);
    const int label = it->second;
    ++poisoned_total[label];
    std::set<std::string> seen;
    for (const auto& sub : r.substitutions)
      if (seen.insert(sub.replacement).second) ++token_docs[label][sub.replacement];
  }
  double worst = 0.0;
  for (const auto& [label, tokens] : token_docs)
    for (const auto& [token, count] : tokens)
      worst = std::max(worst, static_cast<double>(count) /
                                  static_cast<double>(poisoned_total[label]));
  return worst;
}

}  // namespace upton
