#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "diet/backbone/backbone.hpp"

namespace diet {

using NamedTensors = std::map<std::string, num::Tensor>;

/// Checkpoint container (little-endian):
///
///   "DIET"  u16 version  u16 section_count
///   per section: u8 tag, u64 payload_length, payload
///
/// Section tags:
///   'B' backbone: u8 arch, u32 x 7 hyper (d, blocks, heads, max_len,
///       horiz_filters, vert_filters, max_horiz_height), u32 n_items,
///       u8 shared_buffer, [if shared: u64 n, f64 x n W_max],
///       u16 layer count, per layer: str name, u8 kind, u32 rows, u32 cols,
///       [if not shared: f64 x rows*cols], then the dense tensor map.
///   'G' generator parameters, 'S' score maps, 'O' other trainable state:
///       tensor map = u32 count, per tensor: str name, u8 rank, u32 x rank
///       extents, f64 data.
///   'C' config: u32 length, UTF-8 JSON.
/// Strings are u16 length + bytes. Unknown tags are rejected.
struct Checkpoint {
  std::optional<BackboneParams> backbone;
  NamedTensors generator;
  NamedTensors score_maps;
  NamedTensors other;
  std::string config_json;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
/// Throws DataError on malformed input.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace diet
