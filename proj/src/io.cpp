#include "udhf2/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "udhf2/errors.hpp"

namespace udhf2 {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written in native little-endian order");

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

namespace {

struct NetpbmHeader {
  std::string magic;
  std::int64_t width = 0, height = 0, maxval = 0;
  std::size_t offset = 0;
};

NetpbmHeader parse_netpbm(const std::string& bytes, const std::string& expect, const std::string& what) {
  NetpbmHeader h;
  std::size_t pos = 0;
  auto skip = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto token = [&] {
    skip();
    const auto start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw FormatError(what + ": truncated header at byte " + std::to_string(start));
    return bytes.substr(start, pos - start);
  };
  h.magic = token();
  if (h.magic != expect) throw FormatError(what + ": expected magic " + expect + ", found '" + h.magic + "'");
  try {
    h.width = std::stoll(token());
    h.height = std::stoll(token());
    h.maxval = std::stoll(token());
  } catch (const std::logic_error&) {
    throw FormatError(what + ": malformed header");
  }
  if (h.width <= 0 || h.height <= 0 || h.maxval != 255) throw FormatError(what + ": only 8-bit rasters are supported");
  h.offset = pos + 1;
  return h;
}

void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& out, std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  void need(std::size_t n, const char* what) const {
    if (pos_ + n > bytes_.size())
      throw FormatError("checkpoint truncated at byte " + std::to_string(bytes_.size()) + " while reading " + what +
                        " at byte offset " + std::to_string(pos_));
  }
  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("write_ppm: expected (3, H, W), got " + shape_str(image.shape()));
  const auto h = image.dim(1), w = image.dim(2), hw = h * w;
  const auto v = image.to_vector();
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::int64_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c)
      out.push_back(static_cast<char>(static_cast<std::uint8_t>(std::lround(std::clamp(v[c * hw + i], 0.0, 1.0) * 255.0))));
  write_file(path, out);
}

Tensor read_ppm(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const auto h = parse_netpbm(bytes, "P6", path.string());
  const auto hw = h.width * h.height;
  if (bytes.size() < h.offset + static_cast<std::size_t>(3 * hw))
    throw FormatError(path.string() + ": pixel data truncated at byte " + std::to_string(bytes.size()));
  std::vector<double> v(static_cast<std::size_t>(3 * hw));
  for (std::int64_t i = 0; i < hw; ++i)
    for (int c = 0; c < 3; ++c)
      v[c * hw + i] = static_cast<std::uint8_t>(bytes[h.offset + 3 * i + c]) / 255.0;
  return Tensor::from_values({3, h.height, h.width}, v, DType::f32);
}

void write_pgm(const std::filesystem::path& path, std::span<const std::int32_t> raster, std::int64_t height,
               std::int64_t width) {
  if (static_cast<std::int64_t>(raster.size()) != height * width) throw DimensionError("write_pgm: raster size mismatch");
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (auto v : raster) {
    if (v < 0 || v > 255) throw ParameterError("write_pgm: value " + std::to_string(v) + " outside [0, 255]");
    out.push_back(static_cast<char>(static_cast<std::uint8_t>(v)));
  }
  write_file(path, out);
}

GrayRaster read_pgm(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const auto h = parse_netpbm(bytes, "P5", path.string());
  GrayRaster r{h.height, h.width, {}};
  const auto n = h.width * h.height;
  if (bytes.size() < h.offset + static_cast<std::size_t>(n))
    throw FormatError(path.string() + ": pixel data truncated at byte " + std::to_string(bytes.size()));
  r.values.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) r.values[i] = static_cast<std::uint8_t>(bytes[h.offset + i]);
  return r;
}

std::string serialize_checkpoint(const std::vector<CheckpointEntry>& entries) {
  std::string out = "UDHF";
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    out.push_back(static_cast<char>(e.tensor.dtype()));
    put_u32(out, static_cast<std::uint32_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) put_u64(out, static_cast<std::uint64_t>(d));
    dispatch(e.tensor.dtype(), [&](auto tag) {
      using T = decltype(tag);
      out.append(reinterpret_cast<const char*>(e.tensor.data<T>()), sizeof(T) * static_cast<std::size_t>(e.tensor.numel()));
    });
  }
  return out;
}

std::vector<CheckpointEntry> parse_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  const auto magic = r.take(4, "magic");
  if (magic != "UDHF") throw FormatError("not a checkpoint: expected magic \"UDHF\"");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const auto count = r.get<std::uint32_t>("entry count");
  std::vector<CheckpointEntry> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto len = r.get<std::uint32_t>("name length");
    e.name = std::string(r.take(len, "name"));
    const auto code = r.get<std::uint8_t>("dtype");
    if (code > 1) throw FormatError("checkpoint entry '" + e.name + "': unknown dtype code " + std::to_string(code));
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) throw FormatError("checkpoint entry '" + e.name + "': implausible rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<std::int64_t>(r.get<std::uint64_t>("dims")));
    const DType dtype = static_cast<DType>(code);
    e.tensor = Tensor::zeros(shape, dtype);
    dispatch(dtype, [&](auto tag) {
      using T = decltype(tag);
      const auto payload = r.take(sizeof(T) * static_cast<std::size_t>(shape_numel(shape)), "payload");
      std::memcpy(e.tensor.data<T>(), payload.data(), payload.size());
    });
    out.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError("checkpoint has trailing bytes after offset " + std::to_string(r.offset()));
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries) {
  write_file(path, serialize_checkpoint(entries));
}

std::vector<CheckpointEntry> load_checkpoint(const std::filesystem::path& path) {
  try {
    return parse_checkpoint(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_registry(const std::filesystem::path& path, const ParameterRegistry& registry) {
  std::vector<CheckpointEntry> entries;
  for (const auto& e : registry.entries()) entries.push_back({e.name, e.tensor});
  save_checkpoint(path, entries);
}

void load_registry(const std::filesystem::path& path, ParameterRegistry& registry) {
  const auto entries = load_checkpoint(path);
  std::vector<std::string> problems;
  std::vector<std::string> seen;
  for (const auto& e : entries) {
    seen.push_back(e.name);
    if (!registry.contains(e.name)) {
      problems.push_back("unexpected parameter " + e.name);
      continue;
    }
    Tensor t = registry.get(e.name);
    if (t.shape() != e.tensor.shape())
      problems.push_back("shape mismatch for " + e.name + ": model " + shape_str(t.shape()) + ", file " +
                         shape_str(e.tensor.shape()));
  }
  std::sort(seen.begin(), seen.end());
  for (const auto& e : registry.entries())
    if (!std::binary_search(seen.begin(), seen.end(), e.name)) problems.push_back("missing parameter " + e.name);
  if (!problems.empty()) {
    std::string msg = path.string() + ": checkpoint does not match the model";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ConfigError(msg);
  }
  for (const auto& e : entries) registry.get(e.name).copy_from(e.tensor.to(registry.get(e.name).dtype()));
}

void save_probabilities(const std::filesystem::path& path, const Tensor& probs) {
  save_checkpoint(path, {{"probs", probs}});
}

Tensor load_probabilities(const std::filesystem::path& path) {
  auto entries = load_checkpoint(path);
  if (entries.size() != 1 || entries[0].name != "probs") throw FormatError(path.string() + ": not a probability map");
  return entries[0].tensor;
}

}  // namespace udhf2
