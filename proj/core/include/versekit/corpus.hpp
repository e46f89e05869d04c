#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace versekit {

struct RawPoem {
  std::string id;
  std::string title;
  std::string body;   // verse lines separated by '\n'
  std::string poet;   // optional, may be empty
};

struct Couplet {
  std::string first;
  std::string second;
  std::string source_id;
};

struct DatasetSplit {
  std::vector<Couplet> train;
  std::vector<Couplet> validation;
  std::uint64_t seed = 0;
  double ratio = 0.0;
};

// Record-level problems are collected, never thrown: a 673k-couplet corpus
// with a handful of bad rows should still build.
struct RecordIssue {
  std::size_t index = 0;  // 0-based record / line number within the source
  std::string reason;
};

struct FetchReport {
  std::size_t parsed = 0;
  std::vector<RecordIssue> skipped;
};

struct CoupletReport {
  std::size_t kept = 0;
  std::size_t dropped_lines = 0;     // wrong delimiter count or empty side
  std::size_t filtered_non_rhyming = 0;
};

struct FetchOptions {
  int page_limit = 1;       // number of pages to request from an HTTP source
  int page_size = 100;
  std::string page_param = "page";
  std::string page_size_param = "page_size";
  int max_attempts = 3;     // per page, with exponential backoff between
  int backoff_ms = 250;
};

// Reads poems from a local JSONL/JSON-array file or an HTTP endpoint that
// returns a JSON array of the same record shape. Source order is preserved.
// Transport failures throw RunError after the retry budget is exhausted;
// malformed records are skipped and reported.
std::vector<RawPoem> fetch_poems(const std::string& source,
                                 const FetchOptions& options,
                                 FetchReport& report);

// Parses poem records from in-memory text holding either a JSON array or
// JSONL, with the same record handling as fetch_poems.
std::vector<RawPoem> parse_poems_text(const std::string& content,
                                      FetchReport& report);

// One couplet per body line containing exactly one delimiter; other lines
// are dropped and counted (blank lines are ignored silently). Hemistichs are
// whitespace-normalized; a couplet with an empty side counts as a drop.
std::vector<Couplet> split_into_couplets(const RawPoem& poem,
                                         const std::string& delimiter,
                                         CoupletReport& report);

// True when the normalized final words share a suffix of at least
// min_suffix code points and are not the same word.
bool is_rhyming(const Couplet& c, std::size_t min_suffix);

// Seeded shuffle, then the round-half-up prefix of ratio*n is train.
DatasetSplit build_split(const std::vector<Couplet>& couplets, double ratio,
                         std::uint64_t seed);

// Couplet JSONL round-trip (fields: first, second, source_id).
std::vector<Couplet> read_couplets_jsonl(const std::string& path,
                                         FetchReport& report);
void write_couplets_jsonl(const std::string& path,
                          const std::vector<Couplet>& couplets);

}  // namespace versekit
