#pragma once

// Run manifests: every output file is accompanied by <file>.manifest.json
// recording the subcommand, flags, seeds and input-artifact hashes, so a rerun
// can be checked for byte-identical outputs.

#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace lp {

inline constexpr const char* kToolVersion = "0.1.0";

inline uint64_t fnv1a64(const void* data, size_t len) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < len; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot hash missing file: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  char buf[19];
  std::snprintf(buf, sizeof(buf), "%016llx",
                (unsigned long long)fnv1a64(bytes.data(), bytes.size()));
  return std::string(buf);
}

struct RunManifest {
  std::string subcommand;
  std::vector<std::string> argv;
  std::map<std::string, uint64_t> seeds;
  std::map<std::string, std::string> input_hashes;  // path -> fnv1a64 hex
  std::vector<std::string> outputs;
  double wall_time_s = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["tool"] = "lp";
    j["version"] = kToolVersion;
    j["subcommand"] = subcommand;
    j["argv"] = argv;
    j["seeds"] = seeds;
    nlohmann::json inputs = nlohmann::json::object();
    for (const auto& [path, hash] : input_hashes) {
      inputs[path] = hash;
    }
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["wall_time_s"] = wall_time_s;
    return j;
  }

  void add_input(const std::string& path) { input_hashes[path] = hash_file(path); }

  // One manifest beside each output file.
  void write_all() const {
    for (const auto& out : outputs) {
      std::ofstream f(out + ".manifest.json");
      if (!f) throw std::runtime_error("cannot write manifest for " + out);
      f << to_json().dump(2) << "\n";
    }
  }
};

}  // namespace lp
