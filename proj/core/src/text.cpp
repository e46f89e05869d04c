#include "versekit/text.hpp"

#include <cctype>

namespace versekit {

namespace {

bool decode_one(std::string_view s, std::size_t& i, std::uint32_t& cp) {
  const unsigned char b = static_cast<unsigned char>(s[i]);
  int len;
  if (b < 0x80) {
    cp = b;
    len = 1;
  } else if ((b >> 5) == 0x6) {
    cp = b & 0x1fu;
    len = 2;
  } else if ((b >> 4) == 0xe) {
    cp = b & 0x0fu;
    len = 3;
  } else if ((b >> 3) == 0x1e) {
    cp = b & 0x07u;
    len = 4;
  } else {
    return false;
  }
  if (i + static_cast<std::size_t>(len) > s.size()) return false;
  for (int k = 1; k < len; ++k) {
    const unsigned char c = static_cast<unsigned char>(s[i + k]);
    if ((c >> 6) != 0x2) return false;
    cp = (cp << 6) | (c & 0x3fu);
  }
  if (len == 2 && cp < 0x80) return false;
  if (len == 3 && cp < 0x800) return false;
  if (len == 4 && cp < 0x10000) return false;
  if (cp >= 0xd800 && cp <= 0xdfff) return false;
  if (cp > 0x10ffff) return false;
  i += static_cast<std::size_t>(len);
  return true;
}

bool is_space_cp(std::uint32_t cp) {
  return cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || cp == '\f' ||
         cp == '\v' || cp == 0xa0 || cp == 0x3000;
}

// Marks and joiners ignored when comparing word endings.
bool is_stripped_mark(std::uint32_t cp) {
  if (cp >= 0x064b && cp <= 0x0655) return true;  // harakat
  if (cp == 0x0670) return true;                  // superscript alef
  if (cp == 0x0640) return true;                  // tatweel
  if (cp == 0x200c || cp == 0x200d) return true;  // ZWNJ / ZWJ
  if (cp >= 0x0300 && cp <= 0x036f) return true;  // combining diacritics
  if (cp >= 0xfe00 && cp <= 0xfe0f) return true;  // variation selectors
  return false;
}

std::uint32_t unify_letter(std::uint32_t cp) {
  switch (cp) {
    case 0x064a: return 0x06cc;  // Arabic yeh -> Farsi yeh
    case 0x0643: return 0x06a9;  // Arabic kaf -> keheh
    case 0x0629: return 0x0647;  // teh marbuta -> heh
    case 0x0622:                 // alef madda
    case 0x0623:                 // alef hamza above
    case 0x0625:                 // alef hamza below
    case 0x0671: return 0x0627;  // alef wasla -> alef
    case 0x0624: return 0x0648;  // waw hamza -> waw
    case 0x0626: return 0x06cc;  // yeh hamza -> Farsi yeh
    default: break;
  }
  if (cp >= 'A' && cp <= 'Z') return cp + 32;
  return cp;
}

bool is_edge_punct(std::uint32_t cp) {
  if (cp < 0x80) {
    return std::ispunct(static_cast<int>(cp)) != 0;
  }
  switch (cp) {
    case 0x00ab: case 0x00bb:                       // guillemets
    case 0x060c: case 0x061b: case 0x061f:          // Arabic comma/semicolon/question
    case 0x066a: case 0x066b: case 0x066c:          // Arabic percent/decimal/thousands
    case 0x2018: case 0x2019: case 0x201c: case 0x201d:
    case 0x2013: case 0x2014: case 0x2026:
      return true;
    default:
      return false;
  }
}

}  // namespace

bool try_utf8_decode(std::string_view s, std::vector<std::uint32_t>& out) {
  out.clear();
  out.reserve(s.size());
  std::size_t i = 0;
  std::uint32_t cp = 0;
  while (i < s.size()) {
    if (!decode_one(s, i, cp)) return false;
    out.push_back(cp);
  }
  return true;
}

bool utf8_next(std::string_view s, std::size_t& i, std::uint32_t& cp) {
  if (i >= s.size()) return false;
  return decode_one(s, i, cp);
}

bool is_space_codepoint(std::uint32_t cp) { return is_space_cp(cp); }

bool is_valid_utf8(std::string_view s) {
  std::size_t i = 0;
  std::uint32_t cp = 0;
  while (i < s.size()) {
    if (!decode_one(s, i, cp)) return false;
  }
  return true;
}

void append_utf8(std::string& out, std::uint32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xc0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xe0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  } else {
    out.push_back(static_cast<char>(0xf0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3f)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  }
}

std::string utf8_encode(const std::vector<std::uint32_t>& cps) {
  std::string out;
  out.reserve(cps.size());
  for (std::uint32_t cp : cps) append_utf8(out, cp);
  return out;
}

std::string normalize_whitespace(std::string_view s) {
  std::vector<std::uint32_t> cps;
  if (!try_utf8_decode(s, cps)) {
    // Callers validate encoding separately; treat bad bytes as byte-wise.
    cps.assign(s.begin(), s.end());
  }
  std::string out;
  bool pending_space = false;
  bool seen_word = false;
  for (std::uint32_t cp : cps) {
    if (is_space_cp(cp)) {
      pending_space = seen_word;
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    append_utf8(out, cp);
    seen_word = true;
  }
  return out;
}

std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> words;
  std::string cur;
  std::vector<std::uint32_t> cps;
  if (!try_utf8_decode(s, cps)) {
    cps.assign(s.begin(), s.end());
  }
  for (std::uint32_t cp : cps) {
    if (is_space_cp(cp)) {
      if (!cur.empty()) {
        words.push_back(cur);
        cur.clear();
      }
      continue;
    }
    append_utf8(cur, cp);
  }
  if (!cur.empty()) words.push_back(cur);
  return words;
}

std::string normalize_word(std::string_view word) {
  std::vector<std::uint32_t> cps;
  if (!try_utf8_decode(word, cps)) {
    cps.assign(word.begin(), word.end());
  }
  std::string out;
  for (std::uint32_t cp : cps) {
    if (is_stripped_mark(cp)) continue;
    append_utf8(out, unify_letter(cp));
  }
  return out;
}

std::string last_word(std::string_view s) {
  const std::vector<std::string> words = split_words(s);
  for (std::size_t i = words.size(); i > 0; --i) {
    std::vector<std::uint32_t> cps;
    if (!try_utf8_decode(words[i - 1], cps)) {
      cps.assign(words[i - 1].begin(), words[i - 1].end());
    }
    std::size_t lo = 0, hi = cps.size();
    while (lo < hi && is_edge_punct(cps[lo])) ++lo;
    while (hi > lo && is_edge_punct(cps[hi - 1])) --hi;
    if (hi > lo) {
      return utf8_encode(std::vector<std::uint32_t>(cps.begin() + lo, cps.begin() + hi));
    }
  }
  return "";
}

std::size_t common_suffix_len(std::string_view a, std::string_view b) {
  std::vector<std::uint32_t> ca, cb;
  if (!try_utf8_decode(a, ca)) ca.assign(a.begin(), a.end());
  if (!try_utf8_decode(b, cb)) cb.assign(b.begin(), b.end());
  std::size_t n = 0;
  while (n < ca.size() && n < cb.size() &&
         ca[ca.size() - 1 - n] == cb[cb.size() - 1 - n]) {
    ++n;
  }
  return n;
}

}  // namespace versekit
