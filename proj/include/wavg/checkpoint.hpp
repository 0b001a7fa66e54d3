#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "wavg/model.hpp"

namespace wavg {

// Binary little-endian record:
//   "WAVGCKPT" | u32 version |
//   u64 n_widths | u64 widths[] | u64 n_hidden | u8 bn_flags[] | f64 bn_momentum | f64 bn_epsilon |
//   u64 n_values | f64 values[] |
//   u64 n_bn | { u64 layer | u64 width | f64 mean[] | f64 var[] }[] |
//   u64 n_meta | { u64 klen | key | u64 vlen | value }[]
// Doubles are stored as raw IEEE-754 bits, so a save/load round trip is exact.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  MlpSpec spec;
  ParamVector params;
  BnStats bn;
  // Free-form metadata, e.g. decay, sampling_period, update_count, bn_policy,
  // source_run for averaged models.
  std::map<std::string, std::string> metadata;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
// Throws InputError on a malformed or version-mismatched record.
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace wavg
