// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "graft/common.hpp"
#include "graft/unicode.hpp"
#include "graft/vocab.hpp"

namespace graft {

// Byte-pair-encoding subword trainer and codec.
//
// Text is transformed by rewriting each space to the word marker U+2581 and
// splitting into pretokens at the marker; merges never cross pretoken
// boundaries. Encoding is greedy longest-match over the vocabulary with
// single-byte tokens as the fallback, so decode(encode(s)) == s whenever
// byte fallback is enabled.

namespace bpe_detail {

constexpr char32_t kWordMarker = 0x2581; // '▁'

inline const std::string& word_marker_utf8() {
    static const std::string s = []() {
        std::string out;
        utf8_append(out, kWordMarker);
        return out;
    }();
    return s;
}

// Splits transformed text (spaces already rewritten to the marker) into
// pretokens: a new pretoken starts at every marker.
inline std::vector<std::string> pretokenize(std::string_view transformed) {
    std::vector<std::string> out;
    std::string cur;
    std::size_t i = 0;
    while (i < transformed.size()) {
        char32_t cp = utf8_next(transformed, i);
        if (cp == kWordMarker && !cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
        utf8_append(cur, cp);
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

inline std::string transform_spaces(std::string_view text) {
    std::string out;
    out.reserve(text.size() + 8);
    for (char c : text) {
        if (c == ' ') out += word_marker_utf8();
        else out.push_back(c);
    }
    return out;
}

} // namespace bpe_detail

struct bpe_train_options {
    bool byte_fallback = true;
    bool add_specials = true;
    std::uint64_t seed = 0;
    std::uint64_t max_sample_bytes = 0; // 0 = use the whole corpus
};

namespace bpe_detail {

using pair_key = std::uint64_t;

inline pair_key make_pair_key(std::uint32_t a, std::uint32_t b) {
    return (static_cast<std::uint64_t>(a) << 32) | b;
}

struct trainer_state {
    std::vector<std::string> symbol_text;                   // symbol id -> utf8 text
    std::unordered_map<std::string, std::uint32_t> symbol_id;
    std::vector<std::vector<std::uint32_t>> words;          // unique pretokens as symbol ids
    std::vector<std::uint64_t> word_count;
    std::unordered_map<pair_key, std::uint64_t> pair_freq;
    std::unordered_map<pair_key, std::unordered_set<std::uint32_t>> pair_words;

    std::uint32_t intern(const std::string& text) {
        auto it = symbol_id.find(text);
        if (it != symbol_id.end()) return it->second;
        const auto id = static_cast<std::uint32_t>(symbol_text.size());
        symbol_id.emplace(text, id);
        symbol_text.push_back(text);
        return id;
    }

    void count_word_pairs(std::uint32_t w, std::int64_t sign) {
        const auto& seq = words[w];
        const std::int64_t c = sign * static_cast<std::int64_t>(word_count[w]);
        for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
            const pair_key k = make_pair_key(seq[i], seq[i + 1]);
            auto& f = pair_freq[k];
            f = static_cast<std::uint64_t>(static_cast<std::int64_t>(f) + c);
            if (sign > 0) {
                pair_words[k].insert(w);
            } else if (f == 0) {
                pair_freq.erase(k);
                pair_words.erase(k);
            }
        }
    }
};

} // namespace bpe_detail

// Trains a BPE vocabulary on a sentence corpus. Deterministic given
// (sentences, target_size, options): ties between equal-frequency pairs go to
// the lexicographically smaller pair.
inline vocabulary train_subword(const std::vector<std::string>& sentences, std::size_t target_size,
                                const bpe_train_options& opts = {}) {
    using namespace bpe_detail;

    // Seeded sample under a byte budget: shuffle line order, take a prefix.
    std::vector<std::size_t> order(sentences.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (opts.max_sample_bytes > 0) {
        rng r(opts.seed);
        r.shuffle(order);
    }

    trainer_state st;
    std::unordered_map<std::string, std::uint64_t> pretoken_count;
    std::uint64_t sampled_bytes = 0;
    bool any_text = false;
    for (std::size_t idx : order) {
        const auto& line = sentences[idx];
        if (trim(line).empty()) continue;
        if (opts.max_sample_bytes > 0 && sampled_bytes >= opts.max_sample_bytes) break;
        sampled_bytes += line.size();
        any_text = true;
        for (auto& p : pretokenize(transform_spaces(line))) {
            ++pretoken_count[p];
        }
    }
    if (!any_text) throw error("train_subword: empty corpus");

    // Alphabet = observed single codepoints, in sorted order for determinism.
    std::map<std::string, bool> alphabet;
    for (const auto& [word, cnt] : pretoken_count) {
        std::size_t i = 0;
        while (i < word.size()) {
            std::size_t start = i;
            utf8_next(word, i);
            alphabet.emplace(word.substr(start, i - start), true);
        }
    }

    vocabulary vocab;
    if (opts.add_specials) {
        for (const auto& tok : special_tokens()) vocab.add(tok, 0.0, token_provenance::base);
    }
    if (opts.byte_fallback) {
        for (unsigned b = 0; b < 256; ++b) {
            vocab.add(byte_token(static_cast<std::uint8_t>(b)), 0.0, token_provenance::base);
        }
    }
    for (const auto& [sym, unused] : alphabet) {
        if (!vocab.find(sym)) vocab.add(sym, 0.0, token_provenance::base);
    }
    if (vocab.size() > target_size) {
        throw error("train_subword: target_size " + std::to_string(target_size) +
                    " is below the base alphabet size " + std::to_string(vocab.size()));
    }

    // Unique pretokens as interned symbol sequences, in sorted order so the
    // incremental pair bookkeeping is independent of hash-map iteration.
    {
        std::map<std::string, std::uint64_t> sorted(pretoken_count.begin(), pretoken_count.end());
        for (const auto& [word, cnt] : sorted) {
            std::vector<std::uint32_t> seq;
            std::size_t i = 0;
            while (i < word.size()) {
                std::size_t start = i;
                utf8_next(word, i);
                seq.push_back(st.intern(word.substr(start, i - start)));
            }
            const auto w = static_cast<std::uint32_t>(st.words.size());
            st.words.push_back(std::move(seq));
            st.word_count.push_back(cnt);
            st.count_word_pairs(w, +1);
        }
    }

    // Merge loop.
    std::int64_t rank = 0;
    while (vocab.size() < target_size) {
        // Max frequency, ties broken lexicographically on (left, right).
        std::uint64_t best_freq = 0;
        for (const auto& [k, f] : st.pair_freq) best_freq = std::max(best_freq, f);
        if (best_freq == 0) break; // nothing left to merge; max attainable size
        std::uint32_t best_a = 0, best_b = 0;
        bool have = false;
        for (const auto& [k, f] : st.pair_freq) {
            if (f != best_freq) continue;
            const auto a = static_cast<std::uint32_t>(k >> 32);
            const auto b = static_cast<std::uint32_t>(k & 0xffffffffu);
            if (!have ||
                std::tie(st.symbol_text[a], st.symbol_text[b]) <
                    std::tie(st.symbol_text[best_a], st.symbol_text[best_b])) {
                best_a = a;
                best_b = b;
                have = true;
            }
        }
        if (!have) break;

        const std::string merged_text = st.symbol_text[best_a] + st.symbol_text[best_b];
        const std::uint32_t merged_sym = st.intern(merged_text);
        if (!vocab.find(merged_text)) {
            vocab.add(merged_text, -static_cast<double>(rank + 1), token_provenance::base);
        }
        ++rank;

        // Rewrite only the words that contain the merged pair.
        const pair_key k = make_pair_key(best_a, best_b);
        auto occ_it = st.pair_words.find(k);
        if (occ_it == st.pair_words.end()) continue;
        std::vector<std::uint32_t> affected(occ_it->second.begin(), occ_it->second.end());
        std::sort(affected.begin(), affected.end());
        for (std::uint32_t w : affected) {
            auto& seq = st.words[w];
            bool contains = false;
            for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
                if (seq[i] == best_a && seq[i + 1] == best_b) { contains = true; break; }
            }
            if (!contains) continue;
            st.count_word_pairs(w, -1);
            std::vector<std::uint32_t> rewritten;
            rewritten.reserve(seq.size());
            for (std::size_t i = 0; i < seq.size();) {
                if (i + 1 < seq.size() && seq[i] == best_a && seq[i + 1] == best_b) {
                    rewritten.push_back(merged_sym);
                    i += 2;
                } else {
                    rewritten.push_back(seq[i]);
                    ++i;
                }
            }
            seq = std::move(rewritten);
            st.count_word_pairs(w, +1);
        }
        st.pair_freq.erase(k);
        st.pair_words.erase(k);
    }

    return vocab;
}

inline vocabulary train_subword(const std::vector<std::string>& sentences, std::size_t target_size,
                                std::uint64_t seed) {
    bpe_train_options opts;
    opts.seed = seed;
    return train_subword(sentences, target_size, opts);
}

// ----------------------------------------------------------------------------
// Codec
// ----------------------------------------------------------------------------

class bpe_codec {
public:
    explicit bpe_codec(const vocabulary& vocab) : vocab_(&vocab) {
        byte_fallback_ = vocab.byte_fallback();
        for (const auto& e : vocab.entries()) {
            if (e.token.empty()) continue;
            if (parse_byte_token(e.token)) continue;
            bool special = false;
            for (const auto& s : special_tokens()) {
                if (e.token == s) { special = true; break; }
            }
            if (special) continue;
            auto& lens = lengths_by_first_[static_cast<unsigned char>(e.token[0])];
            lens.push_back(e.token.size());
        }
        for (auto& [first, lens] : lengths_by_first_) {
            std::sort(lens.begin(), lens.end(), std::greater<>());
            lens.erase(std::unique(lens.begin(), lens.end()), lens.end());
        }
    }

    std::vector<std::uint32_t> encode(std::string_view text) const {
        std::vector<std::uint32_t> out;
        if (text.empty()) return out;
        // Literal word-marker codepoints in the input are escaped through the
        // byte tokens so decode can tell them apart from rewritten spaces.
        const std::string& marker = bpe_detail::word_marker_utf8();
        std::size_t pos = 0;
        std::string segment;
        auto flush_segment = [&]() {
            if (!segment.empty()) {
                encode_segment(bpe_detail::transform_spaces(segment), out);
                segment.clear();
            }
        };
        while (pos < text.size()) {
            if (text.compare(pos, marker.size(), marker) == 0) {
                flush_segment();
                emit_bytes(marker, out);
                pos += marker.size();
            } else {
                segment.push_back(text[pos]);
                ++pos;
            }
        }
        flush_segment();
        return out;
    }

    std::string decode(const std::vector<std::uint32_t>& ids, bool render_specials = false) const {
        std::string out;
        const std::string& marker = bpe_detail::word_marker_utf8();
        for (std::uint32_t id : ids) {
            const auto& e = vocab_->entry(id); // throws on unknown id
            if (auto b = parse_byte_token(e.token)) {
                out.push_back(static_cast<char>(*b));
                continue;
            }
            if (vocab_->is_special(id)) {
                if (render_specials) out += e.token;
                continue;
            }
            // Restore spaces from word markers.
            std::size_t i = 0;
            while (i < e.token.size()) {
                if (e.token.compare(i, marker.size(), marker) == 0) {
                    out.push_back(' ');
                    i += marker.size();
                } else {
                    out.push_back(e.token[i]);
                    ++i;
                }
            }
        }
        return out;
    }

private:
    void emit_bytes(std::string_view raw, std::vector<std::uint32_t>& out) const {
        if (!byte_fallback_)
            throw error("encode: text not coverable by vocabulary and byte fallback is disabled");
        for (char c : raw) {
            out.push_back(*vocab_->find(byte_token(static_cast<std::uint8_t>(c))));
        }
    }

    // Greedy longest-match over the vocabulary; bytes as fallback.
    void encode_segment(std::string_view transformed, std::vector<std::uint32_t>& out) const {
        std::size_t pos = 0;
        while (pos < transformed.size()) {
            const auto first = static_cast<unsigned char>(transformed[pos]);
            std::optional<std::uint32_t> match;
            std::size_t match_len = 0;
            auto it = lengths_by_first_.find(first);
            if (it != lengths_by_first_.end()) {
                for (std::size_t len : it->second) {
                    if (len > transformed.size() - pos) continue;
                    if (auto id = vocab_->find(transformed.substr(pos, len))) {
                        match = id;
                        match_len = len;
                        break;
                    }
                }
            }
            if (match) {
                out.push_back(*match);
                pos += match_len;
            } else {
                // Fall back byte-by-byte for the whole codepoint.
                std::size_t cp_end = pos;
                utf8_next(transformed, cp_end);
                emit_bytes(transformed.substr(pos, cp_end - pos), out);
                pos = cp_end;
            }
        }
    }

    const vocabulary* vocab_;
    bool byte_fallback_ = false;
    std::unordered_map<unsigned char, std::vector<std::size_t>> lengths_by_first_;
};

inline std::vector<std::uint32_t> encode(const vocabulary& vocab, std::string_view text) {
    return bpe_codec(vocab).encode(text);
}

inline std::string decode(const vocabulary& vocab, const std::vector<std::uint32_t>& ids) {
    return bpe_codec(vocab).decode(ids);
}

} // namespace graft
