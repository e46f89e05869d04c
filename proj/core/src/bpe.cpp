#include "versekit/bpe.hpp"

#include <algorithm>
#include <climits>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "versekit/errors.hpp"
#include "versekit/text.hpp"

namespace versekit {

namespace {

const char* kSpecialNames[kNumSpecials] = {"<bos>", "<eos>", "<sep>", "<pad>"};

std::uint64_t pair_key(int a, int b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
         static_cast<std::uint32_t>(b);
}

// Turns text into base symbols: known single-character tokens stay whole,
// anything else decomposes into fallback bytes.
std::vector<int> base_symbols(const BpeModel& m, std::string_view text) {
  std::vector<int> ids;
  std::size_t i = 0;
  std::uint32_t cp = 0;
  while (i < text.size()) {
    std::size_t start = i;
    if (utf8_next(text, i, cp)) {
      std::string ch(text.substr(start, i - start));
      auto it = m.token_to_id.find(ch);
      if (it != m.token_to_id.end()) {
        ids.push_back(it->second);
        continue;
      }
      for (std::size_t b = start; b < i; ++b) {
        ids.push_back(m.byte_fallback_id(static_cast<unsigned char>(text[b])));
      }
    } else {
      ids.push_back(m.byte_fallback_id(static_cast<unsigned char>(text[i])));
      ++i;
    }
  }
  return ids;
}

std::string escape_token(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char ch : s) {
    switch (ch) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      default: out.push_back(ch);
    }
  }
  return out;
}

std::string unescape_token(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out.push_back(s[i]);
      continue;
    }
    if (i + 1 >= s.size()) {
      throw ValidationError("dangling escape in BPE file");
    }
    switch (s[++i]) {
      case '\\': out.push_back('\\'); break;
      case 't': out.push_back('\t'); break;
      case 'n': out.push_back('\n'); break;
      case 'r': out.push_back('\r'); break;
      default:
        throw ValidationError("unknown escape in BPE file");
    }
  }
  return out;
}

}  // namespace

void BpeModel::build_ranks() const {
  pair_ranks_.clear();
  for (std::size_t rank = 0; rank < merges.size(); ++rank) {
    const auto& [left, right] = merges[rank];
    const auto li = token_to_id.find(left);
    const auto ri = token_to_id.find(right);
    const auto mi = token_to_id.find(left + right);
    if (li == token_to_id.end() || ri == token_to_id.end() ||
        mi == token_to_id.end()) {
      throw ValidationError("BPE merge references unknown token");
    }
    pair_ranks_.emplace(pair_key(li->second, ri->second),
                        std::make_pair(static_cast<int>(rank), mi->second));
  }
  ranks_built_ = true;
}

std::vector<int> BpeModel::encode(std::string_view text) const {
  if (!ranks_built_) build_ranks();
  std::vector<int> syms = base_symbols(*this, text);
  // Merges never contain whitespace tokens, so running over the whole
  // sequence cannot join symbols across word gaps.
  while (syms.size() >= 2) {
    int best_rank = INT_MAX;
    int merged_id = -1;
    std::uint64_t best_key = 0;
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      const std::uint64_t key = pair_key(syms[i], syms[i + 1]);
      const auto it = pair_ranks_.find(key);
      if (it != pair_ranks_.end() && it->second.first < best_rank) {
        best_rank = it->second.first;
        merged_id = it->second.second;
        best_key = key;
      }
    }
    if (merged_id < 0) break;
    std::vector<int> next;
    next.reserve(syms.size());
    for (std::size_t i = 0; i < syms.size();) {
      if (i + 1 < syms.size() && pair_key(syms[i], syms[i + 1]) == best_key) {
        next.push_back(merged_id);
        i += 2;
      } else {
        next.push_back(syms[i]);
        ++i;
      }
    }
    syms.swap(next);
  }
  return syms;
}

std::string BpeModel::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kSepId) {
      out += sep_render;
    } else if (id == kBosId || id == kEosId || id == kPadId) {
      // elided
    } else if (id >= kNumSpecials && id < vocab_size) {
      out += id_to_token[static_cast<std::size_t>(id)];
    } else if (id >= vocab_size && id < vocab_size + 256) {
      out.push_back(static_cast<char>(id - vocab_size));
    } else {
      throw ValidationError("token id out of range: " + std::to_string(id));
    }
  }
  return out;
}

std::vector<int> BpeModel::encode_couplet(const Couplet& c) const {
  std::vector<int> ids;
  ids.push_back(kBosId);
  const std::vector<int> first = encode(c.first);
  ids.insert(ids.end(), first.begin(), first.end());
  ids.push_back(kSepId);
  const std::vector<int> second = encode(c.second);
  ids.insert(ids.end(), second.begin(), second.end());
  ids.push_back(kEosId);
  return ids;
}

BpeModel train_bpe(const std::vector<Couplet>& corpus, int vocab_size) {
  if (corpus.empty()) {
    throw ValidationError("BPE training corpus is empty");
  }

  // Base inventory: every code point seen in either hemistich, in code
  // point order (UTF-8 byte order agrees with it).
  std::set<std::string> base_chars;
  std::map<std::string, long long> word_counts;
  for (const Couplet& c : corpus) {
    for (const std::string* text : {&c.first, &c.second}) {
      std::size_t i = 0;
      std::uint32_t cp = 0;
      while (i < text->size()) {
        std::size_t start = i;
        if (utf8_next(*text, i, cp)) {
          base_chars.insert(text->substr(start, i - start));
        } else {
          base_chars.insert(text->substr(i, 1));
          ++i;
        }
      }
      for (const std::string& w : split_words(*text)) {
        ++word_counts[w];
      }
    }
  }

  const int min_vocab = kNumSpecials + static_cast<int>(base_chars.size());
  if (vocab_size <= min_vocab) {
    throw ValidationError(
        "vocab_size " + std::to_string(vocab_size) + " too small: need > " +
        std::to_string(min_vocab) + " (4 specials + " +
        std::to_string(base_chars.size()) + " base characters)");
  }

  BpeModel model;
  model.vocab_size = vocab_size;  // provisional; trimmed below if merges run out
  for (const char* name : kSpecialNames) {
    model.id_to_token.emplace_back(name);
  }
  for (const std::string& ch : base_chars) {
    model.token_to_id.emplace(ch, static_cast<int>(model.id_to_token.size()));
    model.id_to_token.push_back(ch);
  }

  // Words as symbol-string sequences, code point by code point.
  std::vector<std::pair<std::vector<std::string>, long long>> words;
  words.reserve(word_counts.size());
  for (const auto& [word, count] : word_counts) {
    std::vector<std::string> syms;
    std::size_t i = 0;
    std::uint32_t cp = 0;
    while (i < word.size()) {
      std::size_t start = i;
      if (utf8_next(word, i, cp)) {
        syms.push_back(word.substr(start, i - start));
      } else {
        syms.push_back(word.substr(i, 1));
        ++i;
      }
    }
    words.emplace_back(std::move(syms), count);
  }

  while (static_cast<int>(model.id_to_token.size()) < vocab_size) {
    std::map<std::pair<std::string, std::string>, long long> pair_counts;
    for (const auto& [syms, count] : words) {
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        pair_counts[{syms[i], syms[i + 1]}] += count;
      }
    }
    // Map order is lexicographic, so on ties the first maximum seen is the
    // lexicographically smallest pair.
    const std::pair<std::string, std::string>* best = nullptr;
    long long best_count = 1;
    for (const auto& [pair, count] : pair_counts) {
      if (count > best_count) {
        best_count = count;
        best = &pair;
      }
    }
    if (best == nullptr) break;  // nothing occurs twice

    const std::string left = best->first;
    const std::string right = best->second;
    const std::string merged = left + right;
    for (auto& [syms, count] : words) {
      std::vector<std::string> next;
      next.reserve(syms.size());
      for (std::size_t i = 0; i < syms.size();) {
        if (i + 1 < syms.size() && syms[i] == left && syms[i + 1] == right) {
          next.push_back(merged);
          i += 2;
        } else {
          next.push_back(syms[i]);
          ++i;
        }
      }
      syms.swap(next);
    }
    model.token_to_id.emplace(merged,
                              static_cast<int>(model.id_to_token.size()));
    model.id_to_token.push_back(merged);
    model.merges.emplace_back(left, right);
  }

  model.vocab_size = static_cast<int>(model.id_to_token.size());
  return model;
}

std::vector<SweepPoint> vocab_sweep(const std::vector<Couplet>& corpus,
                                    const std::vector<int>& sizes) {
  if (corpus.empty()) {
    throw ValidationError("sweep corpus is empty");
  }
  for (std::size_t i = 1; i < sizes.size(); ++i) {
    if (sizes[i] <= sizes[i - 1]) {
      throw ValidationError("sweep sizes must be strictly ascending");
    }
  }
  std::vector<SweepPoint> points;
  points.reserve(sizes.size());
  for (int size : sizes) {
    const BpeModel model = train_bpe(corpus, size);
    long long total = 0;
    for (const Couplet& c : corpus) {
      total += static_cast<long long>(model.encode_couplet(c).size());
    }
    SweepPoint pt;
    pt.vocab_size = size;
    pt.avg_tokens_per_couplet =
        static_cast<double>(total) / static_cast<double>(corpus.size());
    points.push_back(pt);
  }
  return points;
}

void save_bpe(const BpeModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw RunError("cannot write BPE model: " + path);
  }
  out << "bpe-v1 " << model.vocab_size << "\n";
  for (std::size_t id = 0; id < model.id_to_token.size(); ++id) {
    out << id << "\t" << escape_token(model.id_to_token[id]) << "\n";
  }
  for (const auto& [left, right] : model.merges) {
    out << escape_token(left) << "\t" << escape_token(right) << "\n";
  }
  if (!out) {
    throw RunError("write failed: " + path);
  }
}

BpeModel load_bpe(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ValidationError("cannot open BPE model: " + path);
  }
  std::string line;
  if (!std::getline(in, line)) {
    throw ValidationError("empty BPE file: " + path);
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::istringstream header(line);
  std::string magic;
  int vocab_size = 0;
  if (!(header >> magic >> vocab_size) || magic != "bpe-v1") {
    throw ValidationError("bad BPE header: " + line);
  }
  if (vocab_size < kNumSpecials) {
    throw ValidationError("BPE vocab_size below special count");
  }

  BpeModel model;
  model.vocab_size = vocab_size;
  model.id_to_token.assign(static_cast<std::size_t>(vocab_size), "");
  std::vector<bool> seen(static_cast<std::size_t>(vocab_size), false);
  for (int i = 0; i < vocab_size; ++i) {
    if (!std::getline(in, line)) {
      throw ValidationError("truncated BPE vocab section");
    }
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      throw ValidationError("malformed BPE vocab line: " + line);
    }
    int id = 0;
    try {
      id = std::stoi(line.substr(0, tab));
    } catch (const std::exception&) {
      throw ValidationError("malformed BPE vocab id: " + line);
    }
    if (id < 0 || id >= vocab_size || seen[static_cast<std::size_t>(id)]) {
      throw ValidationError("BPE vocab ids must cover 0..V-1 exactly once");
    }
    seen[static_cast<std::size_t>(id)] = true;
    model.id_to_token[static_cast<std::size_t>(id)] =
        unescape_token(line.substr(tab + 1));
  }
  for (int id = kNumSpecials; id < vocab_size; ++id) {
    const std::string& tok = model.id_to_token[static_cast<std::size_t>(id)];
    if (!model.token_to_id.emplace(tok, id).second) {
      throw ValidationError("duplicate BPE token string: " + tok);
    }
  }

  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      throw ValidationError("malformed BPE merge line: " + line);
    }
    const std::string left = unescape_token(line.substr(0, tab));
    const std::string right = unescape_token(line.substr(tab + 1));
    const auto li = model.token_to_id.find(left);
    const auto ri = model.token_to_id.find(right);
    const auto mi = model.token_to_id.find(left + right);
    if (li == model.token_to_id.end() || ri == model.token_to_id.end() ||
        mi == model.token_to_id.end()) {
      throw ValidationError("BPE merge references unknown token: " + line);
    }
    if (li->second >= mi->second || ri->second >= mi->second) {
      throw ValidationError("BPE merge parts must precede merged token: " +
                            line);
    }
    model.merges.emplace_back(left, right);
  }
  return model;
}

}  // namespace versekit
