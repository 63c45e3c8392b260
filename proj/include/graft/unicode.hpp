// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "graft/common.hpp"

namespace graft {

class utf8_error : public error {
public:
    utf8_error(const std::string& msg, std::size_t offset)
        : error(msg + " at byte offset " + std::to_string(offset)), offset(offset) {}
    std::size_t offset;
};

// ----------------------------------------------------------------------------
// UTF-8
// ----------------------------------------------------------------------------

// Decodes one codepoint starting at byte `i`. Advances `i` past it.
// Strict: rejects overlong forms, surrogates, and values above U+10FFFF.
inline char32_t utf8_next(std::string_view s, std::size_t& i) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    const std::size_t start = i;
    auto cont = [&](std::size_t k) -> std::uint32_t {
        if (start + k >= s.size()) throw utf8_error("truncated UTF-8 sequence", start);
        const auto b = static_cast<unsigned char>(s[start + k]);
        if ((b & 0xc0) != 0x80) throw utf8_error("invalid UTF-8 continuation byte", start + k);
        return b & 0x3fu;
    };
    if (b0 < 0x80) {
        i += 1;
        return b0;
    }
    if ((b0 & 0xe0) == 0xc0) {
        std::uint32_t cp = ((b0 & 0x1fu) << 6) | cont(1);
        if (cp < 0x80) throw utf8_error("overlong UTF-8 encoding", start);
        i += 2;
        return cp;
    }
    if ((b0 & 0xf0) == 0xe0) {
        std::uint32_t cp = ((b0 & 0x0fu) << 12) | (cont(1) << 6) | cont(2);
        if (cp < 0x800) throw utf8_error("overlong UTF-8 encoding", start);
        if (cp >= 0xd800 && cp <= 0xdfff) throw utf8_error("UTF-8 encoded surrogate", start);
        i += 3;
        return cp;
    }
    if ((b0 & 0xf8) == 0xf0) {
        std::uint32_t cp = ((b0 & 0x07u) << 18) | (cont(1) << 12) | (cont(2) << 6) | cont(3);
        if (cp < 0x10000) throw utf8_error("overlong UTF-8 encoding", start);
        if (cp > 0x10ffff) throw utf8_error("codepoint out of range", start);
        i += 4;
        return cp;
    }
    throw utf8_error("invalid UTF-8 lead byte", start);
}

inline std::u32string utf8_decode(std::string_view s) {
    std::u32string out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) out.push_back(utf8_next(s, i));
    return out;
}

inline void utf8_append(std::string& out, char32_t cp) {
    const auto c = static_cast<std::uint32_t>(cp);
    if (c < 0x80) {
        out.push_back(static_cast<char>(c));
    } else if (c < 0x800) {
        out.push_back(static_cast<char>(0xc0 | (c >> 6)));
        out.push_back(static_cast<char>(0x80 | (c & 0x3f)));
    } else if (c < 0x10000) {
        out.push_back(static_cast<char>(0xe0 | (c >> 12)));
        out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3f)));
        out.push_back(static_cast<char>(0x80 | (c & 0x3f)));
    } else {
        out.push_back(static_cast<char>(0xf0 | (c >> 18)));
        out.push_back(static_cast<char>(0x80 | ((c >> 12) & 0x3f)));
        out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3f)));
        out.push_back(static_cast<char>(0x80 | (c & 0x3f)));
    }
}

inline std::string utf8_encode(const std::u32string& cps) {
    std::string out;
    out.reserve(cps.size() * 2);
    for (char32_t cp : cps) utf8_append(out, cp);
    return out;
}

inline bool utf8_valid(std::string_view s) {
    try {
        std::size_t i = 0;
        while (i < s.size()) utf8_next(s, i);
        return true;
    } catch (const utf8_error&) {
        return false;
    }
}

// replaces each undecodable byte with U+FFFD; model-generated text can hold
// arbitrary byte sequences, and scoring must not crash on them
inline std::string sanitize_utf8(std::string_view s) {
    if (utf8_valid(s)) return std::string(s);
    std::string out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) {
        const std::size_t start = i;
        try {
            (void)utf8_next(s, i);
            out.append(s.substr(start, i - start));
        } catch (const utf8_error&) {
            utf8_append(out, 0xfffd);
            i = start + 1;
        }
    }
    return out;
}

// ----------------------------------------------------------------------------
// Character classes used by the pipeline
// ----------------------------------------------------------------------------

inline bool is_space_cp(char32_t cp) {
    switch (cp) {
        case U' ': case U'\t': case U'\n': case U'\r': case U'\v': case U'\f':
        case 0x00a0:
            return true;
        default:
            return false;
    }
}

// Punctuation set for BLEU tokenization and label normalization. ASCII
// punctuation plus the Arabic-script and general-punctuation marks that show
// up in the corpora.
inline bool is_punct_cp(char32_t cp) {
    if (cp < 0x80) {
        return (cp >= U'!' && cp <= U'/') || (cp >= U':' && cp <= U'@') ||
               (cp >= U'[' && cp <= U'`') || (cp >= U'{' && cp <= U'~');
    }
    switch (cp) {
        case 0x00ab: case 0x00bb:              // « »
        case 0x060c: case 0x061b: case 0x061f: // ، ؛ ؟
        case 0x06d4:                           // ۔
        case 0x2018: case 0x2019: case 0x201c: case 0x201d:
        case 0x2013: case 0x2014: case 0x2026:
        case 0x2039: case 0x203a: case 0x203d:
            return true;
        default:
            return false;
    }
}

// ----------------------------------------------------------------------------
// Canonical composition (NFC subset)
//
// Full NFC needs the Unicode database. The pipeline only has to produce one
// canonical byte form per sentence, so we compose the (base, combining-mark)
// pairs that actually occur in Latin and Arabic-script text and pass
// everything else through untouched. Already-composed input is left as is,
// which makes the function idempotent.
// ----------------------------------------------------------------------------

inline char32_t compose_pair(char32_t base, char32_t mark) {
    struct entry { char32_t base, mark, composed; };
    static constexpr entry table[] = {
        // Latin capital
        {U'A', 0x300, 0xc0}, {U'A', 0x301, 0xc1}, {U'A', 0x302, 0xc2}, {U'A', 0x303, 0xc3},
        {U'A', 0x308, 0xc4}, {U'A', 0x30a, 0xc5}, {U'C', 0x327, 0xc7},
        {U'E', 0x300, 0xc8}, {U'E', 0x301, 0xc9}, {U'E', 0x302, 0xca}, {U'E', 0x308, 0xcb},
        {U'I', 0x300, 0xcc}, {U'I', 0x301, 0xcd}, {U'I', 0x302, 0xce}, {U'I', 0x308, 0xcf},
        {U'N', 0x303, 0xd1},
        {U'O', 0x300, 0xd2}, {U'O', 0x301, 0xd3}, {U'O', 0x302, 0xd4}, {U'O', 0x303, 0xd5},
        {U'O', 0x308, 0xd6},
        {U'U', 0x300, 0xd9}, {U'U', 0x301, 0xda}, {U'U', 0x302, 0xdb}, {U'U', 0x308, 0xdc},
        {U'Y', 0x301, 0xdd},
        // Latin small
        {U'a', 0x300, 0xe0}, {U'a', 0x301, 0xe1}, {U'a', 0x302, 0xe2}, {U'a', 0x303, 0xe3},
        {U'a', 0x308, 0xe4}, {U'a', 0x30a, 0xe5}, {U'c', 0x327, 0xe7},
        {U'e', 0x300, 0xe8}, {U'e', 0x301, 0xe9}, {U'e', 0x302, 0xea}, {U'e', 0x308, 0xeb},
        {U'i', 0x300, 0xec}, {U'i', 0x301, 0xed}, {U'i', 0x302, 0xee}, {U'i', 0x308, 0xef},
        {U'n', 0x303, 0xf1},
        {U'o', 0x300, 0xf2}, {U'o', 0x301, 0xf3}, {U'o', 0x302, 0xf4}, {U'o', 0x303, 0xf5},
        {U'o', 0x308, 0xf6},
        {U'u', 0x300, 0xf9}, {U'u', 0x301, 0xfa}, {U'u', 0x302, 0xfb}, {U'u', 0x308, 0xfc},
        {U'y', 0x301, 0xfd}, {U'y', 0x308, 0xff},
        // Arabic script
        {0x0627, 0x0653, 0x0622}, // alef + madda
        {0x0627, 0x0654, 0x0623}, // alef + hamza above
        {0x0627, 0x0655, 0x0625}, // alef + hamza below
        {0x0648, 0x0654, 0x0624}, // waw + hamza above
        {0x064a, 0x0654, 0x0626}, // yeh + hamza above
        {0x06d5, 0x0654, 0x06c0},
        {0x06c1, 0x0654, 0x06c2},
        {0x06d2, 0x0654, 0x06d3},
    };
    for (const auto& e : table) {
        if (e.base == base && e.mark == mark) return e.composed;
    }
    return 0;
}

inline std::string nfc(std::string_view s) {
    std::u32string cps = utf8_decode(s);
    std::u32string out;
    out.reserve(cps.size());
    for (char32_t cp : cps) {
        if (!out.empty()) {
            if (char32_t composed = compose_pair(out.back(), cp)) {
                out.back() = composed;
                continue;
            }
        }
        out.push_back(cp);
    }
    return utf8_encode(out);
}

// ----------------------------------------------------------------------------
// Small string helpers
// ----------------------------------------------------------------------------

inline std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    auto ascii_space = [](char c) {
        return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
    };
    while (b < e && ascii_space(s[b])) ++b;
    while (e > b && ascii_space(s[e - 1])) --e;
    return std::string(s.substr(b, e - b));
}

// ASCII + Latin-1 lowercasing. Persian script has no case.
inline char32_t tolower_cp(char32_t cp) {
    if (cp >= U'A' && cp <= U'Z') return cp + 0x20;
    if (cp >= 0xc0 && cp <= 0xde && cp != 0xd7) return cp + 0x20;
    return cp;
}

inline std::string casefold(std::string_view s) {
    std::u32string cps = utf8_decode(s);
    for (auto& cp : cps) cp = tolower_cp(cp);
    return utf8_encode(cps);
}

// Splits on runs of whitespace. A "word" is a maximal run of non-whitespace.
inline std::vector<std::string> split_words(std::string_view s) {
    std::vector<std::string> out;
    std::string cur;
    std::size_t i = 0;
    while (i < s.size()) {
        char32_t cp = utf8_next(s, i);
        if (is_space_cp(cp)) {
            if (!cur.empty()) {
                out.push_back(std::move(cur));
                cur.clear();
            }
        } else {
            utf8_append(cur, cp);
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

inline std::size_t count_words(std::string_view s) {
    std::size_t n = 0;
    bool in_word = false;
    std::size_t i = 0;
    while (i < s.size()) {
        char32_t cp = utf8_next(s, i);
        if (is_space_cp(cp)) {
            in_word = false;
        } else if (!in_word) {
            in_word = true;
            ++n;
        }
    }
    return n;
}

} // namespace graft
