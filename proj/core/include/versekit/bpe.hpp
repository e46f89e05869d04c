#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "versekit/corpus.hpp"

namespace versekit {

// Special token ids. These never participate in merges and sit below the
// learned vocabulary.
inline constexpr int kBosId = 0;
inline constexpr int kEosId = 1;
inline constexpr int kSepId = 2;
inline constexpr int kPadId = 3;
inline constexpr int kNumSpecials = 4;

struct SweepPoint {
  int vocab_size = 0;
  double avg_tokens_per_couplet = 0.0;
};

// Byte-pair codec. `vocab_size` counts specials + base characters + merges;
// on top of that, ids [vocab_size, vocab_size + 256) are a byte-fallback
// range so encoding arbitrary text never fails. The fallback range is
// implied rather than stored, so the model's embedding table must cover
// model_vocab_size() ids.
struct BpeModel {
  int vocab_size = 0;
  std::vector<std::string> id_to_token;                 // one entry per id
  std::unordered_map<std::string, int> token_to_id;     // regular tokens only
  std::vector<std::pair<std::string, std::string>> merges;

  // How decode() renders SEP: the hemistich delimiter of the corpus the
  // model is used with. Presentation only, not part of the serialized model.
  std::string sep_render = "\t";

  int model_vocab_size() const { return vocab_size + 256; }
  int byte_fallback_id(unsigned char b) const {
    return vocab_size + static_cast<int>(b);
  }

  // Applies merges in rank order; unseen characters fall back to bytes.
  std::vector<int> encode(std::string_view text) const;

  // Inverse of encode. SEP renders as sep_render, BOS/EOS/PAD as nothing.
  // Ids outside [0, vocab_size + 256) raise ValidationError.
  std::string decode(const std::vector<int>& ids) const;

  // BOS <first> SEP <second> EOS, the LM training frame for a couplet.
  std::vector<int> encode_couplet(const Couplet& c) const;

private:
  // pair of ids -> (merge rank, merged id); built lazily from `merges`.
  mutable std::unordered_map<std::uint64_t, std::pair<int, int>> pair_ranks_;
  mutable bool ranks_built_ = false;
  void build_ranks() const;
};

// Greedy highest-frequency merging, word-internal, ties broken by the
// lexicographically smaller pair. Stops at vocab_size or when no pair
// occurs at least twice.
BpeModel train_bpe(const std::vector<Couplet>& corpus, int vocab_size);

// Trains one model per size and reports the mean framed length
// (BOS + first + SEP + second + EOS) over the corpus.
std::vector<SweepPoint> vocab_sweep(const std::vector<Couplet>& corpus,
                                    const std::vector<int>& sizes);

// Versioned text format: "bpe-v1 <vocab_size>", vocab lines "id<TAB>token",
// then merges "left<TAB>right" in rank order. Tokens are escaped (\\ \t \n \r).
void save_bpe(const BpeModel& model, const std::string& path);
BpeModel load_bpe(const std::string& path);

}  // namespace versekit
