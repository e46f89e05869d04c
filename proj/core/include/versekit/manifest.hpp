#pragma once

#include <cstdint>
#include <cstddef>
#include <map>
#include <string>

namespace versekit {

// FNV-1a, 64-bit. Stable across platforms; used for content fingerprints in
// run manifests, not for security.
std::uint64_t fnv1a64(const void* data, std::size_t len);
std::uint64_t fnv1a64(const std::string& text);

// 16 lowercase hex digits, zero padded.
std::string to_hex64(std::uint64_t value);

// Hash of a file's raw bytes. Throws RunError if the file cannot be read.
std::string hash_file_hex(const std::string& path);

// What a tool run records about itself: the subcommand, the fully resolved
// configuration (defaults, config file, and flags already merged), and the
// content hashes of every input and output file. All fields are
// deterministic, so identical runs produce byte-identical manifests.
struct RunManifest {
  std::string command;
  std::map<std::string, std::string> config;
  std::map<std::string, std::string> inputs;   // path -> fnv1a64 hex
  std::map<std::string, std::string> outputs;  // path -> fnv1a64 hex
  std::map<std::string, std::string> stats;    // run results worth keeping
};

// Serializes the manifest as JSON, adding tool_version and format_version.
void write_manifest(const std::string& path, const RunManifest& manifest);

}  // namespace versekit
