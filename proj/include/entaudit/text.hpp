#pragma once

// Text normalization shared by the corpus loader, the tokenizer and the
// entity matcher. All three must agree on what "the same text" means or
// occurrence counts drift.

#include <cstdint>
#include <string>
#include <string_view>

namespace entaudit {

inline bool is_ascii_space(unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

inline bool is_word_char(unsigned char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9');
}

inline char ascii_lower(char c) {
    return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
}

// Collapse whitespace runs to single spaces, strip C0/C1 control bytes,
// trim the ends. Input is treated as UTF-8 and assumed composed (NFC);
// multi-byte sequences pass through untouched.
inline std::string normalize_text(std::string_view raw) {
    std::string out;
    out.reserve(raw.size());
    bool pending_space = false;
    for (unsigned char c : raw) {
        if (is_ascii_space(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (c < 0x20 || c == 0x7f) continue;  // control bytes
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(c));
    }
    return out;
}

inline std::string lowercase_ascii(std::string_view s) {
    std::string out(s);
    for (char& c : out) c = ascii_lower(c);
    return out;
}

// normalize + lowercase; the canonical form used for matching and tokenizing
inline std::string canonical_text(std::string_view raw) {
    return lowercase_ascii(normalize_text(raw));
}

inline std::size_t utf8_length(std::string_view s) {
    std::size_t n = 0;
    for (unsigned char c : s)
        if ((c & 0xc0) != 0x80) ++n;
    return n;
}

// Byte offset of the idx-th codepoint (s.size() when idx is past the end).
inline std::size_t utf8_byte_offset(std::string_view s, std::size_t idx) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if ((static_cast<unsigned char>(s[i]) & 0xc0) != 0x80) {
            if (n == idx) return i;
            ++n;
        }
    }
    return s.size();
}

// Substring by codepoint offsets [from, from+count).
inline std::string utf8_substr(std::string_view s, std::size_t from, std::size_t count) {
    std::size_t b = utf8_byte_offset(s, from);
    std::size_t e = utf8_byte_offset(s, from + count);
    return std::string(s.substr(b, e - b));
}

}  // namespace entaudit
