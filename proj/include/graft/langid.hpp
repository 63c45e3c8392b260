// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "graft/common.hpp"
#include "graft/unicode.hpp"

namespace graft {

// Character 3-gram multinomial language model with Laplace smoothing.
// Trained from small seed files, one for the target language and one for the
// contrast language; the score is the per-trigram posterior of the target.

namespace detail {

// Trigrams are packed exactly: 3 codepoints x 21 bits. No hash collisions.
inline std::uint64_t pack_trigram(char32_t a, char32_t b, char32_t c) {
    return (static_cast<std::uint64_t>(a) << 42) |
           (static_cast<std::uint64_t>(b) << 21) |
           static_cast<std::uint64_t>(c);
}

constexpr char32_t kBoundary = 0x0001;

template <typename Fn>
void for_each_trigram(std::string_view text, Fn&& fn) {
    if (text.empty()) return;
    std::u32string cps;
    cps.reserve(text.size() + 4);
    cps.push_back(kBoundary);
    cps.push_back(kBoundary);
    std::size_t i = 0;
    while (i < text.size()) {
        char32_t cp = utf8_next(text, i);
        if (is_space_cp(cp)) cp = U' ';
        cps.push_back(tolower_cp(cp));
    }
    cps.push_back(kBoundary);
    if (cps.size() < 3) return;
    for (std::size_t k = 0; k + 2 < cps.size(); ++k) {
        fn(pack_trigram(cps[k], cps[k + 1], cps[k + 2]));
    }
}

} // namespace detail

class trigram_model {
public:
    void add_sample(std::string_view text) {
        detail::for_each_trigram(text, [&](std::uint64_t key) {
            ++counts_[key];
            ++total_;
        });
    }

    double count(std::uint64_t key) const {
        auto it = counts_.find(key);
        return it == counts_.end() ? 0.0 : static_cast<double>(it->second);
    }

    double total() const { return static_cast<double>(total_); }

    const std::unordered_map<std::uint64_t, std::uint64_t>& counts() const { return counts_; }

private:
    std::unordered_map<std::uint64_t, std::uint64_t> counts_;
    std::uint64_t total_ = 0;
};

class language_profile {
public:
    language_profile() = default;

    language_profile(trigram_model target, trigram_model contrast, double alpha = 1.0)
        : target_(std::move(target)), contrast_(std::move(contrast)), alpha_(alpha) {
        std::unordered_set<std::uint64_t> vocab;
        for (const auto& [k, v] : target_.counts()) vocab.insert(k);
        for (const auto& [k, v] : contrast_.counts()) vocab.insert(k);
        vocab_size_ = static_cast<double>(vocab.size()) + 1.0; // +1 for unseen
    }

    // Equal-prior posterior probability that `text` is in the target
    // language: sigmoid of the total log-likelihood ratio under the two
    // smoothed trigram models. Deterministic; empty text -> 0.
    double score(std::string_view text) const {
        double ll_target = 0.0;
        double ll_contrast = 0.0;
        std::size_t n = 0;
        detail::for_each_trigram(text, [&](std::uint64_t key) {
            ll_target += std::log((target_.count(key) + alpha_) / (target_.total() + alpha_ * vocab_size_));
            ll_contrast += std::log((contrast_.count(key) + alpha_) / (contrast_.total() + alpha_ * vocab_size_));
            ++n;
        });
        if (n == 0) return 0.0;
        return 1.0 / (1.0 + std::exp(ll_contrast - ll_target));
    }

private:
    trigram_model target_;
    trigram_model contrast_;
    double alpha_ = 1.0;
    double vocab_size_ = 1.0;
};

inline trigram_model train_trigram_model_from_lines(std::istream& in) {
    trigram_model m;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) m.add_sample(line);
    }
    return m;
}

inline trigram_model train_trigram_model_from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open language seed file: " + path);
    return train_trigram_model_from_lines(in);
}

inline language_profile train_language_profile(const std::string& target_seed_path,
                                               const std::string& contrast_seed_path,
                                               double alpha = 1.0) {
    return language_profile(train_trigram_model_from_file(target_seed_path),
                            train_trigram_model_from_file(contrast_seed_path), alpha);
}

inline double language_score(std::string_view text, const language_profile& profile) {
    return profile.score(text);
}

} // namespace graft
