// SPDX-License-Identifier: Apache-2.0
#pragma once
// Scoring primitives for the downstream-task harness: exact-match accuracy
// with an explicit refusal outcome, and corpus-level BLEU-4.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "graft/common.hpp"
#include "graft/unicode.hpp"

namespace graft {

// one classification outcome; refused means no label could be parsed
struct prediction {
  std::string raw;    // generated text, kept for reports and diagnostics
  std::string label;  // parsed label, empty when refused
  bool refused = false;
};

inline double accuracy(const std::vector<prediction>& predictions,
                       const std::vector<std::string>& golds) {
  if (predictions.size() != golds.size())
    throw error("accuracy: " + std::to_string(predictions.size()) + " predictions vs " +
                std::to_string(golds.size()) + " golds");
  if (predictions.empty()) throw error("accuracy: no predictions");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i)
    if (!predictions[i].refused && predictions[i].label == golds[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

// canonical form for label matching: compose, lowercase, drop punctuation,
// collapse runs of whitespace to single spaces
inline std::string normalize_for_match(std::string_view text) {
  const std::u32string cps = utf8_decode(nfc(sanitize_utf8(text)));
  std::string out;
  bool pending_space = false;
  for (char32_t cp : cps) {
    if (is_space_cp(cp) || is_punct_cp(cp)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    utf8_append(out, tolower_cp(cp));
  }
  return out;
}

// whitespace tokens with punctuation detached into tokens of its own,
// applied identically to hypotheses and references in both languages
inline std::vector<std::string> bleu_tokenize(std::string_view text) {
  const std::u32string cps = utf8_decode(nfc(sanitize_utf8(text)));
  std::string spaced;
  for (char32_t cp : cps) {
    if (is_punct_cp(cp)) {
      spaced.push_back(' ');
      utf8_append(spaced, cp);
      spaced.push_back(' ');
    } else {
      utf8_append(spaced, cp);
    }
  }
  return split_words(spaced);
}

namespace detail {

inline std::map<std::string, std::uint64_t> ngram_counts(const std::vector<std::string>& tokens,
                                                         std::size_t n) {
  std::map<std::string, std::uint64_t> counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    std::string key;
    for (std::size_t j = 0; j < n; ++j) {
      if (j) key.push_back('\x1f');
      key += tokens[i + j];
    }
    ++counts[key];
  }
  return counts;
}

}  // namespace detail

// corpus-level BLEU-4: clipped n-gram matches pooled over all sentence pairs,
// geometric mean of the four precisions times the brevity penalty. A zero
// match count contributes epsilon instead of zero so one missing order does
// not null the whole score; an order longer than every hypothesis scores as
// bare epsilon.
inline double bleu(const std::vector<std::string>& hypotheses,
                   const std::vector<std::string>& references) {
  if (hypotheses.size() != references.size())
    throw error("bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                std::to_string(references.size()) + " references");
  if (hypotheses.empty()) throw error("bleu: no sentence pairs");

  constexpr std::size_t max_order = 4;
  constexpr double epsilon = 1e-9;
  std::array<std::uint64_t, max_order> matches{};
  std::array<std::uint64_t, max_order> totals{};
  std::uint64_t hyp_len = 0;
  std::uint64_t ref_len = 0;

  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const std::vector<std::string> hyp = bleu_tokenize(hypotheses[i]);
    const std::vector<std::string> ref = bleu_tokenize(references[i]);
    if (ref.empty()) throw error("bleu: reference sentence " + std::to_string(i) + " is empty");
    hyp_len += hyp.size();
    ref_len += ref.size();
    for (std::size_t n = 1; n <= max_order; ++n) {
      const auto hyp_counts = detail::ngram_counts(hyp, n);
      const auto ref_counts = detail::ngram_counts(ref, n);
      for (const auto& [gram, count] : hyp_counts) {
        totals[n - 1] += count;
        const auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matches[n - 1] += std::min(count, it->second);
      }
    }
  }

  if (hyp_len == 0) return 0.0;  // brevity penalty limit

  double log_mean = 0.0;
  for (std::size_t n = 0; n < max_order; ++n) {
    double p = epsilon;
    if (totals[n] > 0)
      p = matches[n] > 0
              ? static_cast<double>(matches[n]) / static_cast<double>(totals[n])
              : epsilon / static_cast<double>(totals[n]);
    log_mean += std::log(p) / static_cast<double>(max_order);
  }
  const double ratio = static_cast<double>(ref_len) / static_cast<double>(hyp_len);
  const double brevity = hyp_len < ref_len ? std::exp(1.0 - ratio) : 1.0;
  return std::exp(log_mean) * brevity;
}

}  // namespace graft
