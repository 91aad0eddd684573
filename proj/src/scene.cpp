#include "udhf2/scene.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>

#include "udhf2/errors.hpp"

namespace udhf2 {

namespace {

using Color = std::array<double, 3>;

struct Primitive {
  enum Kind { rect, disk, blob } kind = rect;
  int cls = 0;
  bool covers_label = true;
  Color color{};
  double y0 = 0, x0 = 0, y1 = 0, x1 = 0;  // rect
  std::vector<std::array<double, 3>> disks;  // cy, cx, r

  bool contains(double y, double x) const {
    if (kind == rect) return y >= y0 && y < y1 && x >= x0 && x < x1;
    for (const auto& d : disks) {
      const double dy = y - d[0], dx = x - d[1];
      if (dy * dy + dx * dx <= d[2] * d[2]) return true;
    }
    return false;
  }

  ShapeRecord record(const char* name) const {
    ShapeRecord r{name, cls, y0, x0, y1, x1, covers_label};
    if (kind != rect) {
      r.y0 = r.x0 = 1e300;
      r.y1 = r.x1 = -1e300;
      for (const auto& d : disks) {
        r.y0 = std::min(r.y0, d[0] - d[2]);
        r.x0 = std::min(r.x0, d[1] - d[2]);
        r.y1 = std::max(r.y1, d[0] + d[2]);
        r.x1 = std::max(r.x1, d[1] + d[2]);
      }
    }
    return r;
  }
};

constexpr Color kClutter{0.42, 0.36, 0.30};
constexpr Color kRoad{0.52, 0.52, 0.55};
constexpr Color kLowVeg{0.55, 0.74, 0.36};
constexpr Color kTree{0.13, 0.40, 0.15};

const char* kind_name(const Primitive& p) {
  switch (p.cls) {
    case building: return "rect";
    case road: return "strip";
    case low_vegetation: return "blob";
    case tree: return "disk";
    case car: return "car";
    default: return "shape";
  }
}

struct Layout {
  std::vector<Primitive> shapes;  // paint order
};

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

Primitive make_building(std::mt19937_64& rng, std::int64_t h, std::int64_t w) {
  Primitive p;
  p.cls = building;
  const int bh = uniform_int(rng, 8, 18), bw = uniform_int(rng, 8, 18);
  p.y0 = uniform_int(rng, 0, static_cast<int>(h) - bh);
  p.x0 = uniform_int(rng, 0, static_cast<int>(w) - bw);
  p.y1 = p.y0 + bh;
  p.x1 = p.x0 + bw;
  const double tint = uniform(rng, -0.08, 0.08);
  p.color = {0.80 + tint, 0.70 + tint, 0.64 + tint};
  return p;
}

bool overlaps(const Primitive& a, const Primitive& b, double margin) {
  return a.y0 < b.y1 + margin && b.y0 < a.y1 + margin && a.x0 < b.x1 + margin && b.x0 < a.x1 + margin;
}

Layout make_layout(std::mt19937_64& rng, std::int64_t h, std::int64_t w, int classes, const SceneOptions& opt) {
  Layout out;
  const double area = static_cast<double>(h * w) / 4096.0;
  auto scaled = [&](int lo, int hi) { return std::max(1, static_cast<int>(std::lround(uniform_int(rng, lo, hi) * area))); };

  if (classes > road) {
    const int n = scaled(1, 2);
    for (int i = 0; i < n; ++i) {
      Primitive p;
      p.cls = road;
      p.color = kRoad;
      const double width = uniform(rng, 5, 8);
      if (uniform_int(rng, 0, 1)) {
        p.y0 = uniform(rng, 0, h - width);
        p.y1 = p.y0 + width;
        p.x0 = -1;
        p.x1 = w + 1;
      } else {
        p.x0 = uniform(rng, 0, w - width);
        p.x1 = p.x0 + width;
        p.y0 = -1;
        p.y1 = h + 1;
      }
      out.shapes.push_back(p);
    }
  }
  if (classes > low_vegetation) {
    const int n = scaled(2, 3);
    for (int i = 0; i < n; ++i) {
      Primitive p;
      p.kind = Primitive::blob;
      p.cls = low_vegetation;
      const double shade = uniform(rng, -0.04, 0.04);
      p.color = {kLowVeg[0] + shade, kLowVeg[1] + shade, kLowVeg[2] + shade};
      const double cy = uniform(rng, 0, h), cx = uniform(rng, 0, w);
      for (int k = 0; k < 3; ++k) p.disks.push_back({cy + uniform(rng, -6, 6), cx + uniform(rng, -6, 6), uniform(rng, 4, 8)});
      out.shapes.push_back(p);
    }
  }
  std::vector<Primitive> buildings;
  const int nb = scaled(2, 4);
  for (int tries = 0; static_cast<int>(buildings.size()) < nb && tries < 50; ++tries) {
    auto b = make_building(rng, h, w);
    if (std::none_of(buildings.begin(), buildings.end(), [&](const Primitive& o) { return overlaps(b, o, 2); }))
      buildings.push_back(b);
  }
  for (auto& b : buildings) out.shapes.push_back(b);
  if (classes > tree) {
    const int n = scaled(3, 5);
    for (int i = 0; i < n; ++i) {
      Primitive p;
      p.kind = Primitive::disk;
      p.cls = tree;
      p.color = kTree;
      const double r = uniform(rng, 3, 5);
      double cy = uniform(rng, r, h - r), cx = uniform(rng, r, w - r);
      // Crown over a building edge: the label keeps the roof.
      if (i == 0 && opt.trees_over_buildings && !buildings.empty()) {
        const auto& b = buildings[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(buildings.size()) - 1))];
        cy = b.y0 + 1;
        cx = uniform(rng, b.x0 + 1, b.x1 - 1);
        p.covers_label = false;
      }
      p.disks.push_back({cy, cx, r});
      out.shapes.push_back(p);
    }
  }
  if (classes > car) {
    const int n = scaled(2, 3);
    static constexpr std::array<Color, 3> palette{{{0.82, 0.12, 0.12}, {0.15, 0.25, 0.80}, {0.95, 0.95, 0.95}}};
    for (int i = 0; i < n; ++i) {
      Primitive p;
      p.cls = car;
      p.color = palette[static_cast<std::size_t>(uniform_int(rng, 0, 2))];
      const bool horizontal = uniform_int(rng, 0, 1);
      const double ch = horizontal ? 4 : 8, cw = horizontal ? 8 : 4;
      p.y0 = uniform_int(rng, 0, static_cast<int>(h - ch));
      p.x0 = uniform_int(rng, 0, static_cast<int>(w - cw));
      p.y1 = p.y0 + ch;
      p.x1 = p.x0 + cw;
      out.shapes.push_back(p);
    }
  }
  return out;
}

struct Rendered {
  std::vector<double> image;  // (3, H, W)
  std::vector<std::int32_t> label;
};

Rendered render(const Layout& layout, std::int64_t h, std::int64_t w, const SceneOptions& opt, std::mt19937_64& rng) {
  Rendered out;
  const auto hw = h * w;
  out.image.assign(static_cast<std::size_t>(3 * hw), 0.0);
  out.label.assign(static_cast<std::size_t>(hw), clutter);
  const int ss = opt.anti_alias ? std::max(1, opt.supersample) : 1;
  auto color_at = [&](double y, double x) {
    for (auto it = layout.shapes.rbegin(); it != layout.shapes.rend(); ++it)
      if (it->contains(y, x)) return it->color;
    return kClutter;
  };
  std::normal_distribution<double> grain(0.0, 0.025);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const double cy = y + 0.5, cx = x + 0.5;
      for (auto it = layout.shapes.rbegin(); it != layout.shapes.rend(); ++it) {
        if (it->covers_label && it->contains(cy, cx)) {
          out.label[y * w + x] = it->cls;
          break;
        }
      }
      Color acc{};
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx) {
          const auto c = color_at(y + (sy + 0.5) / ss, x + (sx + 0.5) / ss);
          for (int k = 0; k < 3; ++k) acc[k] += c[k];
        }
      const double g = grain(rng);
      for (int k = 0; k < 3; ++k) out.image[k * hw + y * w + x] = acc[k] / (ss * ss) + g;
    }
  }
  return out;
}

Tensor to_image(std::vector<double> v, std::int64_t h, std::int64_t w) {
  for (auto& x : v) x = std::round(std::clamp(x, 0.0, 1.0) * 255.0) / 255.0;
  return Tensor::from_values({3, h, w}, v, DType::f32);
}

void check_size(std::int64_t h, std::int64_t w, int classes) {
  if (h <= 0 || w <= 0 || h % 32 != 0 || w % 32 != 0)
    throw ParameterError("generate_scene: height and width must be positive multiples of 32, got " +
                         std::to_string(h) + "x" + std::to_string(w));
  if (classes < 2 || classes > kMaxSceneClasses)
    throw ParameterError("generate_scene: num_classes must lie in [2, 6], got " + std::to_string(classes));
}

std::vector<ShapeRecord> records(const Layout& layout) {
  std::vector<ShapeRecord> out;
  for (const auto& p : layout.shapes) out.push_back(p.record(kind_name(p)));
  return out;
}

}  // namespace

const char* scene_class_name(int cls) {
  static constexpr std::array<const char*, 6> names{"clutter", "building", "road", "low_vegetation", "tree", "car"};
  return cls >= 0 && cls < 6 ? names[static_cast<std::size_t>(cls)] : "unknown";
}

Scene generate_scene(std::uint64_t seed, std::int64_t height, std::int64_t width, int num_classes,
                     const SceneOptions& options) {
  check_size(height, width, num_classes);
  std::mt19937_64 rng(seed);
  const auto layout = make_layout(rng, height, width, num_classes, options);
  auto r = render(layout, height, width, options, rng);
  Scene s;
  s.seed = seed;
  s.height = height;
  s.width = width;
  s.num_classes = num_classes;
  s.image = to_image(std::move(r.image), height, width);
  s.label = std::move(r.label);
  s.shapes = records(layout);
  return s;
}

ChangePair generate_change_pair(std::uint64_t seed, std::int64_t height, std::int64_t width,
                                const ChangeOptions& options) {
  check_size(height, width, options.num_classes);
  std::mt19937_64 rng(seed);
  Layout before = make_layout(rng, height, width, options.num_classes, options.scene);
  const int added = options.added >= 0 ? options.added : uniform_int(rng, 1, 2);
  const int removed = options.removed >= 0 ? options.removed : uniform_int(rng, 0, 1);

  ChangePair pair;
  pair.height = height;
  pair.width = width;
  pair.change_mask.assign(static_cast<std::size_t>(height * width), 0);
  auto stamp = [&](const Primitive& b) {
    for (std::int64_t y = 0; y < height; ++y)
      for (std::int64_t x = 0; x < width; ++x)
        if (b.contains(y + 0.5, x + 0.5)) pair.change_mask[y * width + x] = 1;
  };

  Layout after = before;
  for (int i = 0; i < removed; ++i) {
    std::vector<std::size_t> idx;
    for (std::size_t k = 0; k < after.shapes.size(); ++k)
      if (after.shapes[k].cls == building) idx.push_back(k);
    if (idx.empty()) break;
    const auto k = idx[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(idx.size()) - 1))];
    stamp(after.shapes[k]);
    pair.removed.push_back(after.shapes[k].record("rect"));
    after.shapes.erase(after.shapes.begin() + static_cast<std::ptrdiff_t>(k));
  }
  for (int i = 0; i < added; ++i) {
    for (int tries = 0; tries < 100; ++tries) {
      auto b = make_building(rng, height, width);
      const bool clash = std::any_of(before.shapes.begin(), before.shapes.end(),
                                     [&](const Primitive& o) { return o.cls == building && overlaps(b, o, 2); }) ||
                         std::any_of(after.shapes.begin(), after.shapes.end(),
                                     [&](const Primitive& o) { return o.cls == building && overlaps(b, o, 2); });
      if (clash) continue;
      stamp(b);
      pair.added.push_back(b.record("rect"));
      // New roofs go on top of ground cover but under trees and cars.
      auto pos = std::find_if(after.shapes.begin(), after.shapes.end(), [](const Primitive& o) { return o.cls == tree || o.cls == car; });
      after.shapes.insert(pos, b);
      break;
    }
  }

  // Same grain on both dates; radiometric jitter is separate.
  std::mt19937_64 grain1(rng()), grain2 = grain1;
  auto r1 = render(before, height, width, options.scene, grain1);
  auto r2 = render(after, height, width, options.scene, grain2);
  const auto hw = height * width;
  pair.image1 = to_image(r1.image, height, width);
  Tensor img2 = Tensor::from_values({3, height, width}, r2.image, DType::f64);
  if (options.warp) {
    pair.registration = sample_perturbation(rng, options.max_shift);
    img2 = registration_warp(img2, AffineCoeffs{}, pair.registration);
  }
  auto v = img2.to_vector();
  if (options.jitter > 0) {
    for (int k = 0; k < 3; ++k) {
      const double gain = 1.0 + uniform(rng, -options.jitter, options.jitter);
      const double bias = uniform(rng, -options.jitter, options.jitter);
      for (std::int64_t i = 0; i < hw; ++i) v[k * hw + i] = v[k * hw + i] * gain + bias;
    }
  }
  pair.image2 = to_image(std::move(v), height, width);
  return pair;
}

std::vector<Occluder> make_occluder_bank(std::uint64_t seed, int count) {
  std::mt19937_64 rng(seed);
  std::vector<Occluder> bank;
  for (int i = 0; i < count; ++i) {
    Occluder o;
    const bool crown = i % 2 == 0;
    const double r = uniform(rng, 3, 5);
    o.height = crown ? static_cast<std::int64_t>(std::ceil(2 * r)) : 3;
    o.width = crown ? o.height : 6;
    o.footprint.assign(static_cast<std::size_t>(o.height * o.width), 0);
    std::vector<double> patch(static_cast<std::size_t>(3 * o.height * o.width), 0.0);
    const Color base = crown ? kTree : Color{0.82, 0.12, 0.12};
    std::normal_distribution<double> grain(0.0, 0.025);
    for (std::int64_t y = 0; y < o.height; ++y)
      for (std::int64_t x = 0; x < o.width; ++x) {
        const double dy = y + 0.5 - o.height / 2.0, dx = x + 0.5 - o.width / 2.0;
        const bool inside = !crown || dy * dy + dx * dx <= r * r;
        o.footprint[y * o.width + x] = inside ? 1 : 0;
        const double g = grain(rng);
        for (int k = 0; k < 3; ++k)
          patch[(k * o.height + y) * o.width + x] = std::clamp(base[k] + g, 0.0, 1.0);
      }
    o.patch = Tensor::from_values({3, o.height, o.width}, patch, DType::f32);
    bank.push_back(std::move(o));
  }
  return bank;
}

}  // namespace udhf2
