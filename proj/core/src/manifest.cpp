#include "upton/manifest.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "upton/errors.hpp"
#include "upton/rng.hpp"

namespace upton {

using nlohmann::json;

std::string file_digest_hex(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();
  const std::uint64_t h = fnv1a64(bytes);
  static const char* digits = "0123456789abcdef";
  std::string hex(16, '0');
  for (int i = 0; i < 16; ++i) hex[15 - i] = digits[(h >> (4 * i)) & 0xf];
  return hex;
}

void save_manifest(const RunManifest& manifest,
                   const std::filesystem::path& path) {
  json doc{{"format", "upton-manifest"},
           {"version", 1},
           {"tool_version", manifest.version},
           {"command", manifest.command},
           {"seed", manifest.seed},
           {"out_dir", manifest.out_dir},
           {"inputs", manifest.inputs},
           {"outputs", manifest.outputs},
           {"status", manifest.status}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

RunManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ParseError(std::string("corrupt manifest: ") + e.what());
  }
  if (!doc.is_object() || doc.value("format", "") != "upton-manifest" ||
      doc.value("version", 0) != 1)
    throw ParseError("not a manifest file: " + path.string());
  RunManifest manifest;
  try {
    manifest.version = doc.at("tool_version");
    manifest.command = doc.at("command");
    manifest.seed = doc.at("seed");
    manifest.out_dir = doc.at("out_dir");
    manifest.inputs = doc.at("inputs").get<std::map<std::string, std::string>>();
    manifest.outputs =
        doc.at("outputs").get<std::map<std::string, std::string>>();
    manifest.status = doc.at("status");
  } catch (const json::exception& e) {
    throw ParseError(std::string("corrupt manifest: ") + e.what());
  }
  return manifest;
}

}  // namespace upton
