#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "dlplora/errors.hpp"
#include "dlplora/vocabulary.hpp"

namespace dlplora {

// Whitespace tokens of `text`; delimiter punctuation is split off like in
// the vocabulary. Newlines count as plain whitespace here.
inline std::vector<std::string> metric_tokens(std::string_view text) {
  std::vector<std::string> out = Vocabulary::split(text);
  std::erase(out, std::string("\n"));
  return out;
}

inline std::string normalize_whitespace(std::string_view text) {
  std::string out;
  for (const auto& t : metric_tokens(text)) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

// Exact match after whitespace normalization.
inline bool exact_match(std::string_view prediction, std::string_view reference) {
  return normalize_whitespace(prediction) == normalize_whitespace(reference);
}

inline double accuracy(const std::vector<std::string>& predictions,
                       const std::vector<std::string>& references) {
  if (predictions.size() != references.size()) {
    throw ContractError("accuracy: " + std::to_string(predictions.size()) + " predictions vs " +
                     std::to_string(references.size()) + " references");
  }
  if (predictions.empty()) throw ContractError("accuracy of an empty set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) hits += exact_match(predictions[i], references[i]);
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

inline PrecisionRecall make_prf(double overlap, double candidate_len, double reference_len) {
  PrecisionRecall r;
  r.precision = candidate_len > 0 ? overlap / candidate_len : 0.0;
  r.recall = reference_len > 0 ? overlap / reference_len : 0.0;
  r.f1 = (r.precision + r.recall) > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

inline std::vector<std::string> reference_tokens(std::string_view reference, const char* metric) {
  auto r = metric_tokens(reference);
  if (r.empty()) throw ContractError(std::string(metric) + ": empty reference");
  return r;
}

// Unigram overlap with clipped counts.
inline PrecisionRecall rouge1(std::string_view candidate, std::string_view reference) {
  const auto c = metric_tokens(candidate);
  const auto r = reference_tokens(reference, "rouge1");
  std::map<std::string, int> ref_counts;
  for (const auto& t : r) ++ref_counts[t];
  double overlap = 0;
  for (const auto& t : c) {
    auto it = ref_counts.find(t);
    if (it != ref_counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  return make_prf(overlap, static_cast<double>(c.size()), static_cast<double>(r.size()));
}

inline std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline PrecisionRecall rouge_l(std::string_view candidate, std::string_view reference) {
  const auto c = metric_tokens(candidate);
  const auto r = reference_tokens(reference, "rougeL");
  return make_prf(static_cast<double>(lcs_length(c, r)), static_cast<double>(c.size()),
                  static_cast<double>(r.size()));
}

struct BleuOptions {
  int max_order = 4;
  bool smoothing = false;  // add-one on orders >= 2
};

// Sentence BLEU with a brevity penalty. Orders for which the candidate has no
// n-grams at all are left out of the geometric mean; an order with n-grams
// but zero matches yields 0 unless smoothing is on.
inline double bleu(std::string_view candidate, std::string_view reference, BleuOptions opt = {}) {
  if (opt.max_order < 1) throw ContractError("BLEU max_order must be >= 1");
  const auto c = metric_tokens(candidate);
  const auto r = reference_tokens(reference, "bleu");
  if (c.empty()) return 0.0;
  double log_sum = 0.0;
  int used = 0;
  for (int n = 1; n <= opt.max_order; ++n) {
    if (c.size() < static_cast<std::size_t>(n)) break;
    std::map<std::vector<std::string>, int> ref_counts;
    for (std::size_t i = 0; i + n <= r.size(); ++i)
      ++ref_counts[std::vector<std::string>(r.begin() + i, r.begin() + i + n)];
    double matched = 0;
    const double total = static_cast<double>(c.size() - n + 1);
    for (std::size_t i = 0; i + n <= c.size(); ++i) {
      auto it = ref_counts.find(std::vector<std::string>(c.begin() + i, c.begin() + i + n));
      if (it != ref_counts.end() && it->second > 0) {
        --it->second;
        ++matched;
      }
    }
    double num = matched, den = total;
    if (opt.smoothing && n > 1) {
      num += 1;
      den += 1;
    }
    if (num == 0) return 0.0;
    log_sum += std::log(num / den);
    ++used;
  }
  const double cl = static_cast<double>(c.size());
  const double rl = static_cast<double>(r.size());
  const double bp = cl >= rl ? 1.0 : std::exp(1.0 - rl / cl);
  return bp * std::exp(log_sum / used);
}

struct TextScores {
  double bleu = 0.0;
  double rouge1 = 0.0;
  double rouge_l = 0.0;
};

// Means of per-example BLEU and ROUGE F1.
inline TextScores mean_text_scores(const std::vector<std::string>& predictions,
                                   const std::vector<std::string>& references,
                                   BleuOptions opt = {}) {
  if (predictions.size() != references.size()) throw ContractError("text scores: size mismatch");
  if (predictions.empty()) throw ContractError("text scores of an empty set");
  TextScores s;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    s.bleu += bleu(predictions[i], references[i], opt);
    s.rouge1 += rouge1(predictions[i], references[i]).f1;
    s.rouge_l += rouge_l(predictions[i], references[i]).f1;
  }
  const double n = static_cast<double>(predictions.size());
  s.bleu /= n;
  s.rouge1 /= n;
  s.rouge_l /= n;
  return s;
}

}  // namespace dlplora
