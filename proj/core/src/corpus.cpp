#include "versekit/corpus.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "versekit/errors.hpp"
#include "versekit/rng.hpp"
#include "versekit/text.hpp"

namespace versekit {

namespace {

using nlohmann::json;

std::string json_field_as_string(const json& j, const char* key) {
  if (!j.contains(key)) return "";
  const json& v = j.at(key);
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number_unsigned()) return std::to_string(v.get<unsigned long long>());
  return "";
}

bool parse_poem_record(const json& j, RawPoem& poem, std::string& reason) {
  if (!j.is_object()) {
    reason = "record is not a JSON object";
    return false;
  }
  poem.id = json_field_as_string(j, "id");
  poem.title = json_field_as_string(j, "title");
  poem.body = json_field_as_string(j, "body");
  poem.poet = json_field_as_string(j, "poet");
  if (poem.id.empty()) {
    reason = "missing or empty 'id'";
    return false;
  }
  if (poem.body.empty()) {
    reason = "missing or empty 'body'";
    return false;
  }
  if (!is_valid_utf8(poem.body) || !is_valid_utf8(poem.title) ||
      !is_valid_utf8(poem.poet)) {
    reason = "invalid UTF-8";
    return false;
  }
  return true;
}

void parse_poem_array(const json& arr, std::size_t index_base,
                      std::vector<RawPoem>& out, FetchReport& report) {
  std::size_t i = 0;
  for (const json& rec : arr) {
    RawPoem poem;
    std::string reason;
    if (parse_poem_record(rec, poem, reason)) {
      out.push_back(std::move(poem));
      ++report.parsed;
    } else {
      report.skipped.push_back({index_base + i, reason});
    }
    ++i;
  }
}

std::vector<RawPoem> fetch_from_file(const std::string& path,
                                     FetchReport& report) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ValidationError("cannot open poem source: " + path);
  }
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_poems_text(buf.str(), report);
}

struct UrlParts {
  std::string base;  // scheme://host[:port]
  std::string path;  // /path, without query
  std::string query; // raw query string, may be empty
};

UrlParts parse_url(const std::string& url) {
  const std::size_t scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw ValidationError("unsupported URL: " + url);
  }
  const std::size_t path_start = url.find('/', scheme_end + 3);
  UrlParts parts;
  if (path_start == std::string::npos) {
    parts.base = url;
    parts.path = "/";
  } else {
    parts.base = url.substr(0, path_start);
    parts.path = url.substr(path_start);
  }
  const std::size_t q = parts.path.find('?');
  if (q != std::string::npos) {
    parts.query = parts.path.substr(q + 1);
    parts.path = parts.path.substr(0, q);
  }
  return parts;
}

std::vector<RawPoem> fetch_from_http(const std::string& source,
                                     const FetchOptions& options,
                                     FetchReport& report) {
  const UrlParts parts = parse_url(source);
  httplib::Client client(parts.base);
  client.set_connection_timeout(10, 0);
  client.set_read_timeout(30, 0);

  std::vector<RawPoem> poems;
  const int pages = options.page_limit < 1 ? 1 : options.page_limit;
  for (int page = 1; page <= pages; ++page) {
    std::string target = parts.path + "?";
    if (!parts.query.empty()) target += parts.query + "&";
    target += options.page_param + "=" + std::to_string(page) + "&" +
              options.page_size_param + "=" + std::to_string(options.page_size);

    httplib::Result res;
    int delay = options.backoff_ms;
    for (int attempt = 1; attempt <= options.max_attempts; ++attempt) {
      res = client.Get(target);
      if (res && res->status == 200) break;
      if (attempt < options.max_attempts) {
        std::this_thread::sleep_for(std::chrono::milliseconds(delay));
        delay *= 2;
      }
    }
    if (!res) {
      throw RunError("fetch failed after " +
                     std::to_string(options.max_attempts) +
                     " attempts: " + source + " (" +
                     httplib::to_string(res.error()) + ")");
    }
    if (res->status != 200) {
      throw RunError("fetch failed after " +
                     std::to_string(options.max_attempts) +
                     " attempts: " + source + " (HTTP " +
                     std::to_string(res->status) + ")");
    }

    json arr = json::parse(res->body, nullptr, false);
    if (arr.is_discarded() || !arr.is_array()) {
      throw RunError("HTTP source did not return a JSON array: " + source);
    }
    if (arr.empty()) break;  // ran out of pages
    parse_poem_array(arr, poems.size() + report.skipped.size(), poems, report);
  }
  return poems;
}

}  // namespace

std::vector<RawPoem> parse_poems_text(const std::string& content,
                                      FetchReport& report) {
  std::vector<RawPoem> poems;
  std::size_t first = content.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) {
    return poems;  // empty input, empty sequence
  }
  if (content[first] == '[') {
    json arr = json::parse(content, nullptr, false);
    if (arr.is_discarded() || !arr.is_array()) {
      throw ValidationError("poem source is not a JSON array");
    }
    parse_poem_array(arr, 0, poems, report);
    return poems;
  }

  std::istringstream lines(content);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(lines, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) {
      ++line_no;
      continue;
    }
    json rec = json::parse(line, nullptr, false);
    if (rec.is_discarded()) {
      report.skipped.push_back({line_no, "invalid JSON"});
    } else {
      RawPoem poem;
      std::string reason;
      if (parse_poem_record(rec, poem, reason)) {
        poems.push_back(std::move(poem));
        ++report.parsed;
      } else {
        report.skipped.push_back({line_no, reason});
      }
    }
    ++line_no;
  }
  return poems;
}

std::vector<RawPoem> fetch_poems(const std::string& source,
                                 const FetchOptions& options,
                                 FetchReport& report) {
  if (source.rfind("http://", 0) == 0 || source.rfind("https://", 0) == 0) {
    return fetch_from_http(source, options, report);
  }
  return fetch_from_file(source, report);
}

std::vector<Couplet> split_into_couplets(const RawPoem& poem,
                                         const std::string& delimiter,
                                         CoupletReport& report) {
  if (delimiter.empty()) {
    throw ValidationError("couplet delimiter must be non-empty");
  }
  std::vector<Couplet> couplets;
  std::istringstream lines(poem.body);
  std::string line;
  while (std::getline(lines, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;

    std::size_t count = 0;
    std::size_t first_pos = std::string::npos;
    for (std::size_t pos = line.find(delimiter); pos != std::string::npos;
         pos = line.find(delimiter, pos + delimiter.size())) {
      if (count == 0) first_pos = pos;
      ++count;
    }
    if (count != 1) {
      ++report.dropped_lines;
      continue;
    }
    Couplet c;
    c.first = normalize_whitespace(line.substr(0, first_pos));
    c.second = normalize_whitespace(line.substr(first_pos + delimiter.size()));
    c.source_id = poem.id;
    if (c.first.empty() || c.second.empty()) {
      ++report.dropped_lines;
      continue;
    }
    couplets.push_back(std::move(c));
    ++report.kept;
  }
  return couplets;
}

bool is_rhyming(const Couplet& c, std::size_t min_suffix) {
  if (min_suffix < 1) {
    throw ValidationError("min_suffix must be >= 1");
  }
  const std::string w1 = normalize_word(last_word(c.first));
  const std::string w2 = normalize_word(last_word(c.second));
  if (w1.empty() || w2.empty()) return false;
  if (w1 == w2) return false;
  return common_suffix_len(w1, w2) >= min_suffix;
}

DatasetSplit build_split(const std::vector<Couplet>& couplets, double ratio,
                         std::uint64_t seed) {
  if (couplets.size() < 2) {
    throw ValidationError("need at least 2 couplets to split");
  }
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw ValidationError("split ratio must be in (0, 1)");
  }
  std::vector<std::size_t> order(couplets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  const auto train_size = static_cast<std::size_t>(
      std::llround(ratio * static_cast<double>(couplets.size())));

  DatasetSplit split;
  split.seed = seed;
  split.ratio = ratio;
  split.train.reserve(train_size);
  split.validation.reserve(couplets.size() - train_size);
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < train_size ? split.train : split.validation)
        .push_back(couplets[order[i]]);
  }
  return split;
}

std::vector<Couplet> read_couplets_jsonl(const std::string& path,
                                         FetchReport& report) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ValidationError("cannot open couplet file: " + path);
  }
  std::vector<Couplet> couplets;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) {
      ++line_no;
      continue;
    }
    json rec = json::parse(line, nullptr, false);
    if (rec.is_discarded() || !rec.is_object()) {
      report.skipped.push_back({line_no, "invalid JSON"});
      ++line_no;
      continue;
    }
    Couplet c;
    c.first = json_field_as_string(rec, "first");
    c.second = json_field_as_string(rec, "second");
    c.source_id = json_field_as_string(rec, "source_id");
    if (c.first.empty() || c.second.empty()) {
      report.skipped.push_back({line_no, "missing hemistich"});
    } else if (!is_valid_utf8(c.first) || !is_valid_utf8(c.second)) {
      report.skipped.push_back({line_no, "invalid UTF-8"});
    } else {
      couplets.push_back(std::move(c));
      ++report.parsed;
    }
    ++line_no;
  }
  return couplets;
}

void write_couplets_jsonl(const std::string& path,
                          const std::vector<Couplet>& couplets) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw RunError("cannot write couplet file: " + path);
  }
  for (const Couplet& c : couplets) {
    json rec;
    rec["first"] = c.first;
    rec["second"] = c.second;
    rec["source_id"] = c.source_id;
    out << rec.dump() << "\n";
  }
  if (!out) {
    throw RunError("write failed: " + path);
  }
}

}  // namespace versekit
