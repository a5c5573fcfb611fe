#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace upton {

inline constexpr const char* kVersion = "0.1.0";

// FNV-1a 64 digest of a file's bytes, as 16 hex digits.
std::string file_digest_hex(const std::filesystem::path& path);

// Record of one CLI run: inputs are digested before execution, outputs after.
// Written even when the run fails (status carries the error).
struct RunManifest {
  std::string command;
  std::string version = kVersion;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::map<std::string, std::string> inputs;   // path -> digest
  std::map<std::string, std::string> outputs;  // relative path -> digest
  std::string status = "ok";
};

void save_manifest(const RunManifest& manifest,
                   const std::filesystem::path& path);
RunManifest load_manifest(const std::filesystem::path& path);

}  // namespace upton
