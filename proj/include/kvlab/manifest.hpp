#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kvlab/serialize.hpp"
#include "kvlab/sha256.hpp"

namespace kvlab {

// Every CLI run writes one of these next to its outputs: what ran, with which
// config and seeds, and the content digest of every file read and written.
struct Manifest {
  std::string subcommand;
  std::string config_digest;
  std::vector<uint64_t> seeds;
  std::vector<std::pair<std::string, std::string>> inputs;   // name -> sha256
  std::vector<std::pair<std::string, std::string>> outputs;  // name -> sha256
  double wall_time_s = 0.0;
};

inline Json manifest_to_json(const Manifest& m) {
  Json j;
  j["subcommand"] = m.subcommand;
  j["config_digest"] = m.config_digest;
  j["seeds"] = m.seeds;
  Json inputs = Json::object();
  for (const auto& [name, digest] : m.inputs) inputs[name] = digest;
  j["inputs"] = inputs;
  Json outputs = Json::object();
  for (const auto& [name, digest] : m.outputs) outputs[name] = digest;
  j["outputs"] = outputs;
  j["wall_time_s"] = m.wall_time_s;
  return j;
}

inline void write_manifest(const std::string& path, const Manifest& m) {
  write_text_file(path, manifest_to_json(m).dump(2) + "\n");
}

}  // namespace kvlab
