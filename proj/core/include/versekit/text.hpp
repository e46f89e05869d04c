#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace versekit {

// Strict UTF-8 decoding; rejects overlong forms, surrogates and truncation.
bool try_utf8_decode(std::string_view s, std::vector<std::uint32_t>& out);
bool is_valid_utf8(std::string_view s);

// Decodes one code point at s[i], advancing i. False on malformed input
// with i unchanged.
bool utf8_next(std::string_view s, std::size_t& i, std::uint32_t& cp);

// True for code points treated as word gaps (ASCII whitespace, NBSP, ...).
bool is_space_codepoint(std::uint32_t cp);

void append_utf8(std::string& out, std::uint32_t cp);
std::string utf8_encode(const std::vector<std::uint32_t>& cps);

// Collapses runs of whitespace to single spaces and trims the ends.
std::string normalize_whitespace(std::string_view s);

// Splits on ASCII whitespace (after normalization every gap is one space).
std::vector<std::string> split_words(std::string_view s);

// Letter-variant unification and mark stripping used by the rhyme check:
// Arabic letter forms fold to their Persian counterparts, combining marks
// and zero-width joiners are dropped, ASCII letters are lowercased.
std::string normalize_word(std::string_view word);

// Final whitespace-delimited token with punctuation stripped from both ends.
// Empty result means the line had no word characters.
std::string last_word(std::string_view s);

// Shared suffix length counted in code points.
std::size_t common_suffix_len(std::string_view a, std::string_view b);

}  // namespace versekit
