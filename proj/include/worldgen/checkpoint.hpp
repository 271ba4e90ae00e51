#pragma once

#include <map>
#include <string>
#include <vector>

#include "worldgen/params.hpp"

namespace worldgen {

// On-disk checkpoint: text manifest (one "name d0,d1,..." line per parameter)
// followed by one contiguous little-endian f32 blob in manifest order.
struct Checkpoint {
  std::map<std::string, double> meta;  // scalar side data (latent stats, config hash, ...)
  std::vector<std::pair<std::string, Shape>> manifest;
  std::vector<std::vector<float>> blobs;

  static Checkpoint from_store(const ParamStore& store);
  void apply_to(ParamStore& store) const;  // shapes must match exactly

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

}  // namespace worldgen
