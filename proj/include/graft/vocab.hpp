// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "graft/common.hpp"
#include "graft/unicode.hpp"

namespace graft {

enum class token_provenance { base, new_ };

struct vocab_entry {
    std::string token;
    double score = 0.0;
    std::uint32_t id = 0;
    token_provenance provenance = token_provenance::base;
};

// Reserved control tokens. Desk-scale vocabularies are trained with these so
// later merges never have to add rows (merged = base + new - overlap stays
// exact arithmetic).
inline const std::vector<std::string>& special_tokens() {
    static const std::vector<std::string> toks = {"<pad>", "<s>", "</s>", "<sep>", "<unk>"};
    return toks;
}

inline std::string byte_token(std::uint8_t b) {
    static const char* digits = "0123456789ABCDEF";
    std::string s = "<0x00>";
    s[3] = digits[b >> 4];
    s[4] = digits[b & 0xf];
    return s;
}

inline std::optional<std::uint8_t> parse_byte_token(std::string_view tok) {
    if (tok.size() != 6 || tok.substr(0, 3) != "<0x" || tok[5] != '>') return std::nullopt;
    auto hex = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        return -1;
    };
    const int hi = hex(tok[3]);
    const int lo = hex(tok[4]);
    if (hi < 0 || lo < 0) return std::nullopt;
    return static_cast<std::uint8_t>(hi * 16 + lo);
}

class vocabulary {
public:
    std::uint32_t add(std::string token, double score, token_provenance prov) {
        if (token_to_id_.count(token))
            throw error("duplicate token in vocabulary: \"" + token + "\"");
        const auto id = static_cast<std::uint32_t>(entries_.size());
        token_to_id_[token] = id;
        entries_.push_back(vocab_entry{std::move(token), score, id, prov});
        return id;
    }

    std::size_t size() const { return entries_.size(); }

    const vocab_entry& entry(std::uint32_t id) const {
        if (id >= entries_.size())
            throw error("unknown token id " + std::to_string(id) + " (vocabulary size " +
                        std::to_string(entries_.size()) + ")");
        return entries_[id];
    }

    std::optional<std::uint32_t> find(std::string_view token) const {
        auto it = token_to_id_.find(std::string(token));
        return it == token_to_id_.end() ? std::nullopt : std::optional<std::uint32_t>(it->second);
    }

    const std::vector<vocab_entry>& entries() const { return entries_; }

    bool byte_fallback() const {
        for (unsigned b = 0; b < 256; ++b) {
            if (!token_to_id_.count(byte_token(static_cast<std::uint8_t>(b)))) return false;
        }
        return true;
    }

    std::uint32_t special_id(const std::string& tok) const {
        auto id = find(tok);
        if (!id) throw error("vocabulary has no reserved token " + tok);
        return *id;
    }

    std::uint32_t pad_id() const { return special_id("<pad>"); }
    std::uint32_t bos_id() const { return special_id("<s>"); }
    std::uint32_t eos_id() const { return special_id("</s>"); }
    std::uint32_t sep_id() const { return special_id("<sep>"); }
    std::uint32_t unk_id() const { return special_id("<unk>"); }

    bool is_special(std::uint32_t id) const {
        if (id >= entries_.size()) return false;
        const auto& tok = entries_[id].token;
        for (const auto& s : special_tokens()) {
            if (tok == s) return true;
        }
        return false;
    }

    std::uint64_t content_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        const unsigned char sep = 0x1f;
        for (const auto& e : entries_) {
            h = fnv1a64(e.token, h);
            h = fnv1a64_bytes(&sep, 1, h);
        }
        return h;
    }

private:
    std::vector<vocab_entry> entries_;
    std::unordered_map<std::string, std::uint32_t> token_to_id_;
};

// ----------------------------------------------------------------------------
// Merge: base tokens keep their ids, non-overlapping new tokens are appended
// with consecutive ids. Overlap = new tokens whose NFC-normalized text equals
// an NFC-normalized base token; those are dropped from the new side.
// ----------------------------------------------------------------------------

struct merge_report {
    std::size_t base_size = 0;
    std::size_t new_size = 0;
    std::size_t overlap_count = 0;
    std::size_t merged_size = 0;
    std::vector<std::string> overlap_tokens;

    bool arithmetic_holds() const {
        return merged_size == base_size + new_size - overlap_count;
    }
};

inline std::pair<vocabulary, merge_report> merge_vocabularies(const vocabulary& base,
                                                              const vocabulary& added) {
    vocabulary merged;
    merge_report report;
    report.base_size = base.size();
    report.new_size = added.size();

    std::unordered_map<std::string, bool> base_norms;
    for (const auto& e : base.entries()) {
        merged.add(e.token, e.score, token_provenance::base);
        base_norms.emplace(nfc(e.token), true);
    }
    for (const auto& e : added.entries()) {
        if (base_norms.count(nfc(e.token))) {
            ++report.overlap_count;
            report.overlap_tokens.push_back(e.token);
            continue;
        }
        merged.add(e.token, e.score, token_provenance::new_);
    }
    report.merged_size = merged.size();
    return {std::move(merged), report};
}

// ----------------------------------------------------------------------------
// Vocabulary file: TSV, one line per token:
//   token (escaped) \t score \t id \t provenance
// ----------------------------------------------------------------------------

namespace detail {

inline std::string escape_token(std::string_view tok) {
    std::string out;
    out.reserve(tok.size());
    for (char c : tok) {
        switch (c) {
            case '\\': out += "\\\\"; break;
            case '\t': out += "\\t"; break;
            case '\n': out += "\\n"; break;
            case '\r': out += "\\r"; break;
            default: out.push_back(c);
        }
    }
    return out;
}

inline std::string unescape_token(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] != '\\' || i + 1 == s.size()) {
            out.push_back(s[i]);
            continue;
        }
        ++i;
        switch (s[i]) {
            case '\\': out.push_back('\\'); break;
            case 't': out.push_back('\t'); break;
            case 'n': out.push_back('\n'); break;
            case 'r': out.push_back('\r'); break;
            default: out.push_back('\\'); out.push_back(s[i]);
        }
    }
    return out;
}

} // namespace detail

inline void save_vocabulary(const vocabulary& v, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open vocabulary file for writing: " + path);
    char score_buf[64];
    for (const auto& e : v.entries()) {
        std::snprintf(score_buf, sizeof(score_buf), "%.17g", e.score);
        out << detail::escape_token(e.token) << '\t' << score_buf << '\t' << e.id << '\t'
            << (e.provenance == token_provenance::base ? "base" : "new") << '\n';
    }
    if (!out) throw io_error("write failed: " + path);
}

inline vocabulary load_vocabulary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open vocabulary file: " + path);
    vocabulary v;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::vector<std::string> fields;
        std::size_t start = 0;
        for (std::size_t i = 0; i <= line.size(); ++i) {
            if (i == line.size() || line[i] == '\t') {
                fields.push_back(line.substr(start, i - start));
                start = i + 1;
            }
        }
        if (fields.size() != 4)
            throw io_error(path + ":" + std::to_string(lineno) + ": expected 4 TSV fields, got " +
                           std::to_string(fields.size()));
        const std::string token = detail::unescape_token(fields[0]);
        const double score = std::stod(fields[1]);
        const auto id = static_cast<std::uint32_t>(std::stoul(fields[2]));
        if (id != v.size())
            throw io_error(path + ":" + std::to_string(lineno) + ": ids must be dense, expected " +
                           std::to_string(v.size()) + " got " + std::to_string(id));
        token_provenance prov;
        if (fields[3] == "base") prov = token_provenance::base;
        else if (fields[3] == "new") prov = token_provenance::new_;
        else throw io_error(path + ":" + std::to_string(lineno) + ": bad provenance " + fields[3]);
        v.add(token, score, prov);
    }
    return v;
}

} // namespace graft
