// Bit-exact flat checkpoint format.
//
// Layout (all integers little-endian):
//   magic "GRWF" | version u32 = 1
//   config block: u32 length, then `key=value` lines
//   manifest: u32 tensor count, then per tensor
//     u16 name length + name bytes, u32 rows, u32 cols,
//     u64 payload offset, u64 byte length, u32 crc32
//   payload: float32 tensors, row-major, in manifest order, contiguous
#pragma once

#include <filesystem>
#include <utility>

#include "growformer/transformer.hpp"

namespace growformer {

// Written atomically (temp file + rename); re-saving the same model produces
// byte-identical files.
void save_checkpoint(const ModelConfig& config, const ParamSet& params,
                     const std::filesystem::path& path);

// Throws std::runtime_error with a distinct message for bad magic, version
// mismatch, checksum failure or shape inconsistencies.
std::pair<ModelConfig, ParamSet> load_checkpoint(
    const std::filesystem::path& path);

}  // namespace growformer
