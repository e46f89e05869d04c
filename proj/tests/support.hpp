#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "versekit/bundled_corpus.hpp"
#include "versekit/corpus.hpp"

namespace vktest {

// Scratch directory wiped when the test that owns it finishes.
struct TempDir {
  std::filesystem::path path;

  TempDir() {
    std::string tmpl =
        (std::filesystem::temp_directory_path() / "versekit-test-XXXXXX")
            .string();
    std::vector<char> buf(tmpl.begin(), tmpl.end());
    buf.push_back('\0');
    if (mkdtemp(buf.data()) == nullptr) {
      std::perror("mkdtemp");
      std::abort();
    }
    path = buf.data();
  }

  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }

  std::string file(const std::string& name) const {
    return (path / name).string();
  }
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
}

struct CommandResult {
  int exit_code = -1;
  std::string output;  // stdout and stderr interleaved
};

// Runs a shell command, capturing combined output and the exit code.
inline CommandResult run_command(const std::string& cmd) {
  TempDir dir;
  const std::string log = dir.file("out.log");
  const int status = std::system((cmd + " > " + log + " 2>&1").c_str());
  CommandResult result;
  result.output = read_file(log);
  if (WIFEXITED(status)) {
    result.exit_code = WEXITSTATUS(status);
  }
  return result;
}

// The 32 sample couplets compiled into the library.
inline std::vector<versekit::Couplet> bundled_couplets() {
  versekit::FetchReport report;
  auto poems = versekit::parse_poems_text(versekit::kBundledCorpusJsonl, report);
  std::vector<versekit::Couplet> couplets;
  for (const auto& poem : poems) {
    versekit::CoupletReport cr;
    auto cs = versekit::split_into_couplets(poem, "\t", cr);
    couplets.insert(couplets.end(), cs.begin(), cs.end());
  }
  return couplets;
}

}  // namespace vktest
