#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "udhf2/mudm.hpp"
#include "udhf2/tensor.hpp"

namespace udhf2 {

enum SceneClass : std::int32_t { clutter = 0, building = 1, road = 2, low_vegetation = 3, tree = 4, car = 5 };
inline constexpr int kMaxSceneClasses = 6;
const char* scene_class_name(int cls);

struct ShapeRecord {
  std::string kind;  // rect, strip, blob, disk, car
  int cls = 0;
  double y0 = 0, x0 = 0, y1 = 0, x1 = 0;  // bounding box
  bool covers_label = true;               // false for trees drawn over buildings
};

struct SceneOptions {
  bool anti_alias = true;        // supersampled boundaries give mixed pixels
  bool trees_over_buildings = true;
  int supersample = 4;
};

/// Image (3, H, W) float32 in [0, 1] quantized to 8 bits, labels (H, W).
struct Scene {
  std::uint64_t seed = 0;
  std::int64_t height = 0, width = 0;
  int num_classes = 0;
  Tensor image;
  std::vector<std::int32_t> label;
  std::vector<ShapeRecord> shapes;
};

Scene generate_scene(std::uint64_t seed, std::int64_t height, std::int64_t width, int num_classes,
                     const SceneOptions& options = {});

struct ChangeOptions {
  int added = -1;    // -1 draws 1..2
  int removed = -1;  // -1 draws 0..1
  bool warp = true;
  double max_shift = kMaxShift;
  double jitter = 0.02;
  int num_classes = kMaxSceneClasses;
  SceneOptions scene;
};

struct ChangePair {
  Tensor image1;
  Tensor image2;
  std::vector<std::int32_t> change_mask;  // (H, W) 0/1
  AffinePerturbation registration;
  std::vector<ShapeRecord> added;
  std::vector<ShapeRecord> removed;
  std::int64_t height = 0, width = 0;
};

ChangePair generate_change_pair(std::uint64_t seed, std::int64_t height, std::int64_t width,
                                const ChangeOptions& options = {});

/// Tree crowns and cars cut out as occluders (3 channels).
std::vector<Occluder> make_occluder_bank(std::uint64_t seed, int count);

}  // namespace udhf2
