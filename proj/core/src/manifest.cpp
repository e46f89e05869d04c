#include "versekit/manifest.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "versekit/errors.hpp"
#include "versekit/version.hpp"

namespace versekit {

std::uint64_t fnv1a64(const void* data, std::size_t len) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= static_cast<std::uint64_t>(bytes[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(const std::string& text) {
  return fnv1a64(text.data(), text.size());
}

std::string to_hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(value));
  return std::string(buf);
}

std::string hash_file_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RunError("cannot read file for hashing: " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    const std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i]));
      h *= 0x100000001b3ULL;
    }
  }
  if (in.bad()) throw RunError("read error while hashing: " + path);
  return to_hex64(h);
}

void write_manifest(const std::string& path, const RunManifest& manifest) {
  nlohmann::json j;
  j["tool_version"] = kVersion;
  j["format_version"] = kManifestFormatVersion;
  j["command"] = manifest.command;
  j["config"] = manifest.config;
  j["inputs"] = manifest.inputs;
  j["outputs"] = manifest.outputs;
  j["stats"] = manifest.stats;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw RunError("cannot write manifest: " + path);
  out << j.dump(2) << "\n";
  if (!out) throw RunError("write failed: " + path);
}

}  // namespace versekit
