#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>

#include "xling/tensor.hpp"

namespace xling {

// FNV-1a 64-bit, used for config digests and file integrity hashes.
uint64_t fnv1a(const void* data, size_t len, uint64_t h = 14695981039346656037ULL);
uint64_t fnv1a(const std::string& s, uint64_t h = 14695981039346656037ULL);
std::string to_hex(uint64_t x);

// ---------------------------------------------------------------------------
// Named-tensor container: little-endian binary stream of f64 tensors keyed
// by name. Layout: magic, version, count, then per tensor
// {name_len, name, dtype, ndim, dims..., payload}, then an FNV-1a trailer
// over everything before it.
// ---------------------------------------------------------------------------

void write_tensors(std::ostream& os, const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> read_tensors(std::istream& is);

void save_tensor_file(const std::string& path, const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> load_tensor_file(const std::string& path);

// ---------------------------------------------------------------------------
// Checkpoint: single-file container for a training run — model parameters
// and optimizer moments as named tensors, RNG states, the tokenizer model
// embedded as text, and the digest of the config that produced it. Loading
// verifies the integrity hash and the format version.
// ---------------------------------------------------------------------------

struct Checkpoint {
  static constexpr uint32_t kVersion = 1;

  std::string config_digest;
  int64_t step = 0;
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::array<uint64_t, 4>> rng_states;
  std::map<std::string, uint64_t> counters;  // e.g. dropout stream positions
  std::string bpe_text;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace xling
