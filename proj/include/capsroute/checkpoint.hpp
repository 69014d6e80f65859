#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "capsroute/network.hpp"

namespace capsroute {

/// A saved model: architecture, weights, and training provenance.
///
/// File layout: 8-byte magic "CAPSCKPT", u32 format version, u32 header
/// length, a JSON header (architecture, config hash, step, tensor table with
/// byte offsets), then the raw tensor data as little-endian IEEE-754 doubles
/// in table order. Round-trips are bit-exact.
struct Checkpoint {
  NetworkConfig config;
  NetworkParams params;
  std::uint64_t step = 0;
  std::string config_hash;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& file);
Checkpoint load_checkpoint(const std::filesystem::path& file);

}  // namespace capsroute
