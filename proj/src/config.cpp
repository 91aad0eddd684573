#include "udhf2/config.hpp"

#include <charconv>
#include <functional>
#include <sstream>
#include <vector>

#include "udhf2/errors.hpp"
#include "udhf2/io.hpp"

namespace udhf2 {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("not a number: '" + v + "'");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("not a boolean: '" + v + "'");
}

std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
Key field(std::string name, T RunConfig::*member) {
  Key k;
  k.name = std::move(name);
  k.set = [member](RunConfig& c, const std::string& v) {
    if constexpr (std::is_same_v<T, bool>) {
      c.*member = parse_bool(v);
    } else if constexpr (std::is_same_v<T, std::string>) {
      c.*member = v;
    } else {
      c.*member = parse_number<T>(v);
    }
  };
  k.get = [member](const RunConfig& c) {
    if constexpr (std::is_same_v<T, bool>) {
      return std::string(c.*member ? "true" : "false");
    } else if constexpr (std::is_same_v<T, std::string>) {
      return c.*member;
    } else if constexpr (std::is_floating_point_v<T>) {
      return format_double(c.*member);
    } else {
      return std::to_string(c.*member);
    }
  };
  return k;
}

Key loss_field(std::string name, double LossWeights::*member) {
  return {std::move(name), [member](RunConfig& c, const std::string& v) { c.loss.*member = parse_number<double>(v); },
          [member](const RunConfig& c) { return format_double(c.loss.*member); }};
}

const std::vector<Key>& keys() {
  static const std::vector<Key> table = [] {
    std::vector<Key> t;
    t.push_back({"channel_plan",
                 [](RunConfig& c, const std::string& v) {
                   std::stringstream ss(v);
                   std::string item;
                   int i = 0;
                   while (std::getline(ss, item, ',')) {
                     if (i >= 4) throw ConfigError("channel_plan needs exactly 4 entries");
                     c.channel_plan[static_cast<std::size_t>(i++)] = parse_number<std::int64_t>(trim(item));
                   }
                   if (i != 4) throw ConfigError("channel_plan needs exactly 4 entries");
                 },
                 [](const RunConfig& c) {
                   return std::to_string(c.channel_plan[0]) + "," + std::to_string(c.channel_plan[1]) + "," +
                          std::to_string(c.channel_plan[2]) + "," + std::to_string(c.channel_plan[3]);
                 }});
    t.push_back(field("window", &RunConfig::window));
    t.push_back(field("heads", &RunConfig::heads));
    t.push_back(field("groups", &RunConfig::groups));
    t.push_back(field("points", &RunConfig::points));
    t.push_back(field("ffn_expansion", &RunConfig::ffn_expansion));
    t.push_back(field("blocks_per_stage", &RunConfig::blocks_per_stage));
    t.push_back(field("dtype", &RunConfig::dtype));
    t.push_back(field("num_classes", &RunConfig::num_classes));
    t.push_back(field("image_size", &RunConfig::image_size));
    t.push_back(field("num_samples", &RunConfig::num_samples));
    t.push_back(field("data_seed", &RunConfig::data_seed));
    t.push_back(field("augment_flips", &RunConfig::augment_flips));
    t.push_back(field("rho", &RunConfig::rho));
    t.push_back(field("buffer_radius", &RunConfig::buffer_radius));
    t.push_back(field("diffusion_steps", &RunConfig::diffusion_steps));
    t.push_back(field("mu_min", &RunConfig::mu_min));
    t.push_back(field("mu_max", &RunConfig::mu_max));
    t.push_back(field("mixed_pixel_fraction", &RunConfig::mixed_pixel_fraction));
    t.push_back(field("occlusions", &RunConfig::occlusions));
    t.push_back(field("registration_noise", &RunConfig::registration_noise));
    t.push_back(field("max_shift", &RunConfig::max_shift));
    t.push_back(field("snr_cap", &RunConfig::snr_cap));
    t.push_back(loss_field("gamma", &LossWeights::gamma));
    t.push_back(loss_field("omega", &LossWeights::omega));
    t.push_back(loss_field("g", &LossWeights::g));
    t.push_back(loss_field("lambda_class", &LossWeights::lambda_class));
    t.push_back(loss_field("lambda_cd", &LossWeights::lambda_cd));
    t.push_back(field("stationary_only", &RunConfig::stationary_only));
    t.push_back(field("non_stationary_only", &RunConfig::non_stationary_only));
    t.push_back(field("disable_mudm", &RunConfig::disable_mudm));
    t.push_back(field("hftm_vs_plain", &RunConfig::hftm_vs_plain));
    t.push_back(field("difference_architecture", &RunConfig::difference_architecture));
    t.push_back(field("fully_shared_siamese", &RunConfig::fully_shared_siamese));
    t.push_back(field("plain_decoder", &RunConfig::plain_decoder));
    t.push_back(field("lr", &RunConfig::lr));
    t.push_back(field("weight_decay", &RunConfig::weight_decay));
    t.push_back(field("beta1", &RunConfig::beta1));
    t.push_back(field("beta2", &RunConfig::beta2));
    t.push_back(field("warmup_steps", &RunConfig::warmup_steps));
    t.push_back(field("lr_schedule", &RunConfig::lr_schedule));
    t.push_back(field("grad_clip", &RunConfig::grad_clip));
    t.push_back(field("batch_size", &RunConfig::batch_size));
    t.push_back(field("steps", &RunConfig::steps));
    t.push_back(field("stage2_steps", &RunConfig::stage2_steps));
    t.push_back(field("eval_every", &RunConfig::eval_every));
    t.push_back(field("target_metric", &RunConfig::target_metric));
    t.push_back(field("seed", &RunConfig::seed));
    return t;
  }();
  return table;
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

void unit_range(double v, const char* name) {
  require(v >= 0.0 && v <= 1.0, std::string(name) + " must lie in [0, 1], got " + format_double(v));
}

}  // namespace

void RunConfig::validate() const {
  unit_range(rho, "rho");
  unit_range(loss.gamma, "gamma");
  unit_range(loss.omega, "omega");
  unit_range(loss.g, "g");
  unit_range(loss.lambda_class, "lambda_class");
  unit_range(loss.lambda_cd, "lambda_cd");
  unit_range(mixed_pixel_fraction, "mixed_pixel_fraction");
  unit_range(target_metric, "target_metric");
  require(dtype == "f32" || dtype == "f64", "dtype must be f32 or f64");
  require(num_classes >= 2 && num_classes <= 6, "num_classes must lie in [2, 6]");
  require(image_size > 0 && image_size % 32 == 0, "image_size must be a positive multiple of 32");
  require(num_samples >= 1, "num_samples must be >= 1");
  require(buffer_radius >= 0, "buffer_radius must be >= 0");
  require(diffusion_steps >= 1, "diffusion_steps must be >= 1");
  require(mu_min >= 0 && mu_max < 1 && mu_min <= mu_max, "need 0 <= mu_min <= mu_max < 1");
  require(occlusions >= 0, "occlusions must be >= 0");
  require(max_shift >= 0 && max_shift <= kMaxShift, "max_shift must lie in [0, 1.5]");
  require(snr_cap > 0, "snr_cap must be positive");
  require(!(stationary_only && non_stationary_only), "stationary_only and non_stationary_only are exclusive");
  require(lr_schedule == "cosine" || lr_schedule == "constant", "lr_schedule must be cosine or constant");
  require(warmup_steps >= 0 && grad_clip >= 0, "warmup_steps and grad_clip must be >= 0");
  require(lr >= 0 && weight_decay >= 0, "lr and weight_decay must be >= 0");
  require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "beta1 and beta2 must lie in [0, 1)");
  require(batch_size >= 1 && steps >= 0 && stage2_steps >= 0 && eval_every >= 1, "batch_size, steps, eval_every out of range");
  encoder().validate();
}

DType RunConfig::value_dtype() const { return dtype == "f64" ? DType::f64 : DType::f32; }

EncoderConfig RunConfig::encoder() const {
  EncoderConfig e;
  e.channel_plan = channel_plan;
  e.window = window;
  e.heads = heads;
  e.groups = groups;
  e.points = points;
  e.ffn_expansion = ffn_expansion;
  e.blocks_per_stage = blocks_per_stage;
  e.use_stationary = !non_stationary_only;
  e.use_non_stationary = !stationary_only;
  e.plain_blocks = hftm_vs_plain;
  return e;
}

NetConfig RunConfig::net() const {
  NetConfig n;
  n.encoder = encoder();
  n.num_classes = num_classes;
  n.plain_decoder = plain_decoder;
  return n;
}

ChangeConfig RunConfig::change() const {
  ChangeConfig c;
  c.encoder = encoder();
  c.plain_decoder = plain_decoder;
  c.fully_shared = fully_shared_siamese;
  c.difference_architecture = difference_architecture;
  return c;
}

DenoiserConfig RunConfig::seg_denoiser() const {
  DenoiserConfig d;
  d.encoder = encoder();
  d.image_channels = 3;
  d.state_channels = num_classes;
  d.plain_decoder = plain_decoder;
  return d;
}

DenoiserConfig RunConfig::cd_denoiser() const {
  auto d = change_denoiser_config(encoder(), 3);
  d.plain_decoder = plain_decoder;
  return d;
}

NoiseSchedule RunConfig::schedule() const { return noise_schedule_build(diffusion_steps, mu_min, mu_max); }

RefineConfig RunConfig::refine() const {
  RefineConfig r;
  r.rho = rho;
  r.buffer_radius = buffer_radius;
  r.seed = seed;
  return r;
}

AdamWOptions RunConfig::optimizer() const {
  AdamWOptions o;
  o.lr = lr;
  o.weight_decay = weight_decay;
  o.beta1 = beta1;
  o.beta2 = beta2;
  return o;
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto body = trim(line.substr(0, line.find('#')));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(number) + ": expected key=value, got '" + body + "'");
    const auto key = trim(std::string_view(body).substr(0, eq));
    const auto value = trim(std::string_view(body).substr(eq + 1));
    const auto& table = keys();
    auto it = std::find_if(table.begin(), table.end(), [&](const Key& k) { return k.name == key; });
    if (it == table.end()) throw ConfigError("line " + std::to_string(number) + ": unknown key '" + key + "'");
    try {
      it->set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(number) + ": " + key + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  try {
    return parse_config(read_file(path));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
}

std::string config_to_text(const RunConfig& config) {
  std::string out;
  for (const auto& k : keys()) out += k.name + "=" + k.get(config) + "\n";
  return out;
}

}  // namespace udhf2
