#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "udhf2/nn.hpp"
#include "udhf2/tensor.hpp"

namespace udhf2 {

/// Binary PPM (P6, 8 bit) from a (3, H, W) image in [0, 1].
void write_ppm(const std::filesystem::path& path, const Tensor& image);
/// (3, H, W) float32 in [0, 1].
Tensor read_ppm(const std::filesystem::path& path);

/// Binary PGM (P5, 8 bit) of an integer raster with values in [0, 255].
void write_pgm(const std::filesystem::path& path, std::span<const std::int32_t> raster, std::int64_t height,
               std::int64_t width);
struct GrayRaster {
  std::int64_t height = 0, width = 0;
  std::vector<std::int32_t> values;
};
GrayRaster read_pgm(const std::filesystem::path& path);

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Tensor tensor;
};

/// "UDHF", u32 version, u32 count, then per entry: u32 name length, name
/// bytes, u8 dtype (0 = float32, 1 = float64), u32 rank, u64 dims, raw
/// little-endian payload.
std::string serialize_checkpoint(const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> parse_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> load_checkpoint(const std::filesystem::path& path);

/// Every registry entry (parameters and buffers) in creation order.
void save_registry(const std::filesystem::path& path, const ParameterRegistry& registry);
/// Loads by name; names missing on either side or shape mismatches are reported together.
void load_registry(const std::filesystem::path& path, ParameterRegistry& registry);

/// Probability maps are stored as a one-entry checkpoint named "probs".
void save_probabilities(const std::filesystem::path& path, const Tensor& probs);
Tensor load_probabilities(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace udhf2
