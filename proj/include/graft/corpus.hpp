// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_set>
#include <vector>

#include "graft/common.hpp"
#include "graft/langid.hpp"
#include "graft/unicode.hpp"

namespace graft {

struct raw_document {
    std::string id;
    std::string source;
    std::string text;
};

struct cleaning_config {
    std::size_t min_words = 5;
    double lang_threshold = 0.70;
    std::vector<std::string> banned_patterns = default_banned_patterns();
    bool dedup = true;
    unsigned threads = 1;

    static std::vector<std::string> default_banned_patterns() {
        // HTML and code markers typical of crawled web pages.
        return {"<div", "<span", "<script", "<html", "</", "/>", "<?php",
                "{{", "}}", "function(", "=>", "javascript:", "console.log"};
    }

    void validate() const {
        if (min_words < 1) throw config_error("min_words must be >= 1");
        if (lang_threshold < 0.0 || lang_threshold > 1.0)
            throw config_error("lang_threshold must be in [0, 1]");
    }
};

struct clean_sentence {
    std::string text;
    double lang_score = 0.0;
    std::string source;
};

enum class drop_reason { none, short_, banned, language, duplicate };

inline const char* drop_reason_name(drop_reason r) {
    switch (r) {
        case drop_reason::none: return "keep";
        case drop_reason::short_: return "short";
        case drop_reason::banned: return "banned";
        case drop_reason::language: return "language";
        case drop_reason::duplicate: return "duplicate";
    }
    return "?";
}

struct source_stats {
    std::uint64_t documents = 0;
    std::uint64_t sentences_before = 0;
    std::uint64_t bytes_before = 0;
    std::uint64_t sentences_kept = 0;
    std::uint64_t bytes_after = 0;
};

struct corpus_stats {
    std::uint64_t documents = 0;
    std::uint64_t sentences_total = 0;
    std::uint64_t kept = 0;
    std::uint64_t dropped_short = 0;
    std::uint64_t dropped_banned = 0;
    std::uint64_t dropped_language = 0;
    std::uint64_t dropped_duplicate = 0;
    std::uint64_t bytes_before = 0;
    std::uint64_t bytes_after = 0;
    std::map<std::string, source_stats> per_source;

    std::uint64_t dropped_total() const {
        return dropped_short + dropped_banned + dropped_language + dropped_duplicate;
    }

    // kept + dropped must reconcile with the input sentence count.
    bool reconciles() const { return kept + dropped_total() == sentences_total; }
};

// ----------------------------------------------------------------------------
// Sentence splitting
//
// Split after a maximal run of terminal punctuation {. ! ? interrobang
// U+203D, Arabic question mark U+061F, Arabic full stop U+06D4} or at a
// newline. Punctuation stays attached to its sentence; output is
// NFC-normalized and trimmed. Every output line is split-stable, which is
// what makes the pipeline idempotent.
// ----------------------------------------------------------------------------

inline bool is_sentence_terminal(char32_t cp) {
    return cp == U'.' || cp == U'!' || cp == U'?' || cp == 0x203d || cp == 0x061f || cp == 0x06d4;
}

inline std::vector<std::string> split_sentences(std::string_view text) {
    const std::string normalized = nfc(text); // validates UTF-8, throws with byte offset
    std::vector<std::string> out;
    std::string cur;
    std::size_t i = 0;
    bool in_terminal_run = false;
    auto flush = [&]() {
        std::string s = trim(cur);
        if (!s.empty()) out.push_back(std::move(s));
        cur.clear();
    };
    while (i < normalized.size()) {
        char32_t cp = utf8_next(normalized, i);
        if (cp == U'\n') {
            flush();
            in_terminal_run = false;
            continue;
        }
        if (in_terminal_run && !is_sentence_terminal(cp)) {
            flush();
            in_terminal_run = false;
        }
        utf8_append(cur, cp);
        if (is_sentence_terminal(cp)) in_terminal_run = true;
    }
    flush();
    return out;
}

inline std::vector<std::string> split_sentences(const raw_document& doc) {
    return split_sentences(doc.text);
}

// ----------------------------------------------------------------------------
// Per-sentence filter. Drop reasons are checked in fixed order:
// short -> banned -> language. Total function.
// ----------------------------------------------------------------------------

struct filter_result {
    drop_reason reason = drop_reason::none;
    double lang_score = 0.0;
    bool keep() const { return reason == drop_reason::none; }
};

inline filter_result filter_sentence(std::string_view s, const cleaning_config& cfg,
                                     const language_profile& profile) {
    filter_result r;
    if (count_words(s) < cfg.min_words) {
        r.reason = drop_reason::short_;
        return r;
    }
    for (const auto& pat : cfg.banned_patterns) {
        if (!pat.empty() && s.find(pat) != std::string_view::npos) {
            r.reason = drop_reason::banned;
            return r;
        }
    }
    r.lang_score = profile.score(s);
    if (r.lang_score < cfg.lang_threshold) {
        r.reason = drop_reason::language;
        return r;
    }
    return r;
}

// ----------------------------------------------------------------------------
// Exact-match deduplication. First occurrence wins, kept order is stable.
// The duplicate key is the sentence after NFC normalization and trimming.
// ----------------------------------------------------------------------------

class dedup_filter {
public:
    // True when the sentence has not been seen before.
    bool admit(std::string_view sentence) {
        return seen_.insert(nfc(trim(sentence))).second;
    }

    std::size_t size() const { return seen_.size(); }

private:
    std::unordered_set<std::string> seen_;
};

inline std::vector<std::string> deduplicate(const std::vector<std::string>& sentences) {
    dedup_filter filter;
    std::vector<std::string> out;
    out.reserve(sentences.size());
    for (const auto& s : sentences) {
        if (filter.admit(s)) out.push_back(s);
    }
    return out;
}

// ----------------------------------------------------------------------------
// Full pipeline: split -> filter -> dedup, with per-rule statistics.
// Documents are processed in parallel (split + filter are pure); dedup and
// stats aggregation are a serial merge in input order, so output is
// deterministic regardless of thread count.
// ----------------------------------------------------------------------------

namespace detail {

struct sentence_candidate {
    std::string text;
    filter_result result;
};

struct document_result {
    std::vector<sentence_candidate> candidates;
};

inline document_result process_document(const raw_document& doc, const cleaning_config& cfg,
                                        const language_profile& profile) {
    document_result out;
    for (auto& s : split_sentences(doc.text)) {
        sentence_candidate c;
        c.result = filter_sentence(s, cfg, profile);
        c.text = std::move(s);
        out.candidates.push_back(std::move(c));
    }
    return out;
}

} // namespace detail

// Sink receives each kept sentence with its source tag, in input order.
// Stats accumulate into `stats` as documents are merged, so on an abort the
// caller still holds the counts for the processed prefix.
inline void run_pipeline(const std::vector<raw_document>& docs, const cleaning_config& cfg,
                         const language_profile& profile,
                         const std::function<void(const clean_sentence&)>& sink,
                         corpus_stats& stats) {
    cfg.validate();
    std::vector<detail::document_result> results(docs.size());

    const unsigned threads = cfg.threads == 0 ? std::thread::hardware_concurrency() : cfg.threads;
    if (threads > 1 && docs.size() > 1) {
        std::vector<std::thread> pool;
        std::size_t chunk = (docs.size() + threads - 1) / threads;
        for (unsigned t = 0; t < threads; ++t) {
            std::size_t begin = t * chunk;
            std::size_t end = std::min(docs.size(), begin + chunk);
            if (begin >= end) break;
            pool.emplace_back([&, begin, end]() {
                for (std::size_t d = begin; d < end; ++d) {
                    results[d] = detail::process_document(docs[d], cfg, profile);
                }
            });
        }
        for (auto& th : pool) th.join();
    } else {
        for (std::size_t d = 0; d < docs.size(); ++d) {
            results[d] = detail::process_document(docs[d], cfg, profile);
        }
    }

    dedup_filter dedup;
    for (std::size_t d = 0; d < docs.size(); ++d) {
        const auto& doc = docs[d];
        auto& src = stats.per_source[doc.source];
        ++stats.documents;
        ++src.documents;
        for (auto& c : results[d].candidates) {
            ++stats.sentences_total;
            ++src.sentences_before;
            stats.bytes_before += c.text.size();
            src.bytes_before += c.text.size();
            if (!c.result.keep()) {
                switch (c.result.reason) {
                    case drop_reason::short_: ++stats.dropped_short; break;
                    case drop_reason::banned: ++stats.dropped_banned; break;
                    case drop_reason::language: ++stats.dropped_language; break;
                    default: break;
                }
                continue;
            }
            if (cfg.dedup && !dedup.admit(c.text)) {
                ++stats.dropped_duplicate;
                continue;
            }
            ++stats.kept;
            ++src.sentences_kept;
            stats.bytes_after += c.text.size();
            src.bytes_after += c.text.size();
            sink(clean_sentence{std::move(c.text), c.result.lang_score, doc.source});
        }
    }
}

inline corpus_stats run_pipeline(const std::vector<raw_document>& docs, const cleaning_config& cfg,
                                 const language_profile& profile,
                                 const std::function<void(const clean_sentence&)>& sink) {
    corpus_stats stats;
    run_pipeline(docs, cfg, profile, sink, stats);
    return stats;
}

} // namespace graft
