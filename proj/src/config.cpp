#include "crnet/config.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "crnet/error.hpp"

namespace crnet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Shortest %g form that parses back to the same double.
std::string fmt(double v) {
  char buf[64];
  for (int precision = 1; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

template <class T>
std::string fmt_int(T v) {
  return std::to_string(v);
}

double parse_double(const std::string& key, const std::string& text) {
  double v = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size() || text.empty()) {
    throw ConfigError(key + ": expected a number, got '" + text + "'");
  }
  return v;
}

template <class T>
T parse_int(const std::string& key, const std::string& text) {
  T v = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size() || text.empty()) {
    throw ConfigError(key + ": expected an integer, got '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

template <class Fn>
auto enum_value(const std::string& key, Fn parse, const std::string& text) {
  try {
    return parse(text);
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

struct Entry {
  ConfigKey key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define CRNET_INT(name, field, type, doc)                                                             \
  Entry {                                                                                             \
    {name, doc}, [](const RunConfig& c) { return fmt_int(c.field); },                                 \
        [](RunConfig& c, const std::string& v) { c.field = parse_int<type>(name, v); }                \
  }
#define CRNET_REAL(name, field, doc)                                                                  \
  Entry {                                                                                             \
    {name, doc}, [](const RunConfig& c) { return fmt(c.field); },                                     \
        [](RunConfig& c, const std::string& v) { c.field = parse_double(name, v); }                   \
  }
#define CRNET_BOOL(name, field, doc)                                                                  \
  Entry {                                                                                             \
    {name, doc}, [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); },         \
        [](RunConfig& c, const std::string& v) { c.field = parse_bool(name, v); }                     \
  }
#define CRNET_ENUM(name, field, parser, doc)                                                          \
  Entry {                                                                                             \
    {name, doc}, [](const RunConfig& c) { return std::string(to_string(c.field)); },                  \
        [](RunConfig& c, const std::string& v) { c.field = enum_value(name, parser, v); }             \
  }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table{
      CRNET_INT("model.base_channels", model.base_channels, std::int64_t, "feature width C"),
      CRNET_INT("model.n_ceb", model.n_ceb, int, "convolutional enhancement blocks per HFEM"),
      CRNET_INT("model.n_hfem", model.n_hfem, int, "number of HFEMs"),
      Entry{{"model.mbb_split", "conv depths of the two multi-branch paths, as a,b"},
            [](const RunConfig& c) { return fmt_int(c.model.mbb_split.a) + "," + fmt_int(c.model.mbb_split.b); },
            [](RunConfig& c, const std::string& v) {
              const auto parts = split_list(v);
              if (parts.size() != 2) throw ConfigError("model.mbb_split: expected a,b, got '" + v + "'");
              c.model.mbb_split = {parse_int<int>("model.mbb_split", parts[0]),
                                   parse_int<int>("model.mbb_split", parts[1])};
            }},
      CRNET_ENUM("model.pool_kind", model.pool_kind, parse_pool_kind, "frequency separation pooling: avg|max"),
      CRNET_INT("model.attn_window", model.attn_window, int, "self-attention window side"),
      CRNET_INT("model.attn_heads", model.attn_heads, int, "self-attention heads"),
      CRNET_INT("model.ca_reduction", model.ca_reduction, int, "channel attention reduction ratio"),
      CRNET_ENUM("model.ffn_mode", model.ffn_mode, parse_ffn_mode, "ConvFFN shape: inverted|normal_bottleneck|flat"),
      CRNET_INT("model.ffn_expansion", model.ffn_expansion, int, "ConvFFN width factor"),
      CRNET_ENUM("model.ceb_kernel_mode", model.ceb_kernel_mode, parse_ceb_kernel_mode,
                 "CEB depthwise stage: dw7|three_dw3|dw5_dw3"),
      CRNET_ENUM("model.fusion_mode", model.fusion_mode, parse_fusion_mode, "frame fusion: joint|recurrent"),
      CRNET_BOOL("model.freq_separation", model.freq_separation, "split HFEM features into high/low bands"),
      CRNET_REAL("model.gamma", model.gamma, "gamma applied to the LDR inputs"),
      CRNET_REAL("model.mu", model.mu, "mu-law compression constant"),
      CRNET_INT("model.init_seed", init_seed, std::uint64_t, "seed for parameter initialization"),

      CRNET_REAL("train.initial_lr", train.initial_lr, "AdamW learning rate at epoch 0"),
      CRNET_REAL("train.lr_gamma", train.lr_gamma, "StepLR decay factor"),
      CRNET_INT("train.lr_step_epochs", train.lr_step_epochs, int, "epochs between lr decays"),
      CRNET_INT("train.crop", train.crop, std::int64_t, "random crop side"),
      CRNET_INT("train.epochs", train.epochs, int, "training epochs"),
      CRNET_INT("train.max_steps", train.max_steps, std::int64_t, "run length in steps when > 0, overriding epochs"),
      CRNET_INT("train.batch", train.batch, int, "samples per step"),
      CRNET_INT("train.seed", train.seed, std::uint64_t, "seed for sample order and augmentation"),
      CRNET_REAL("train.weight_decay", train.weight_decay, "decoupled weight decay (biases exempt)"),
      CRNET_REAL("train.beta1", train.beta1, "AdamW first moment decay"),
      CRNET_REAL("train.beta2", train.beta2, "AdamW second moment decay"),
      CRNET_REAL("train.eps", train.eps, "AdamW denominator epsilon"),
      CRNET_BOOL("train.augment", train.augment, "random flips and quarter turns"),
      CRNET_INT("train.checkpoint_every", train.checkpoint_every, int, "epochs between checkpoints"),

      CRNET_INT("data.height", scene.height, std::int64_t, "scene height in packed pixels"),
      CRNET_INT("data.width", scene.width, std::int64_t, "scene width in packed pixels"),
      CRNET_INT("data.n_gradients", scene.n_gradients, int, "smooth gradient layers per scene"),
      CRNET_INT("data.n_disks", scene.n_disks, int, "disks per scene"),
      CRNET_INT("data.n_edges", scene.n_edges, int, "straight edges per scene"),
      CRNET_REAL("data.dynamic_range", scene.dynamic_range, "maximum scene radiance"),
      CRNET_REAL("data.drift_x", scene.drift_x, "horizontal translation per frame, pixels"),
      CRNET_REAL("data.drift_y", scene.drift_y, "vertical translation per frame, pixels"),
      Entry{{"data.exposure_times", "five increasing exposure times"},
            [](const RunConfig& c) {
              std::string out;
              for (int i = 0; i < kFrames; ++i) out += (i ? "," : "") + fmt(c.degrade.exposure_times[i]);
              return out;
            },
            [](RunConfig& c, const std::string& v) {
              const auto parts = split_list(v);
              if (parts.size() != kFrames) {
                throw ConfigError("data.exposure_times: expected 5 values, got '" + v + "'");
              }
              for (int i = 0; i < kFrames; ++i) {
                c.degrade.exposure_times[i] = parse_double("data.exposure_times", parts[i]);
              }
            }},
      CRNET_REAL("data.read_noise_sigma", degrade.read_noise_sigma, "read noise std on the reference frame scale"),
      CRNET_REAL("data.shot_noise_scale", degrade.shot_noise_scale, "signal-dependent noise scale"),
      CRNET_INT("data.blur_taps", degrade.blur_taps, int, "motion blur samples for the two longest frames"),
      CRNET_BOOL("data.quantize", degrade.quantize, "round frames to 12 bits"),
  };
  return table;
}

#undef CRNET_INT
#undef CRNET_REAL
#undef CRNET_BOOL
#undef CRNET_ENUM

const Entry& find_entry(const std::string& key) {
  for (const auto& e : entries()) {
    if (e.key.name == key) return e;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) { find_entry(key).set(*this, trim(value)); }

std::string RunConfig::get(const std::string& key) const { return find_entry(key).get(*this); }

void RunConfig::validate() const {
  model.validate();
  train.validate();
  scene.validate();
  degrade.validate();
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const auto& e : entries()) out.push_back(e.key);
    return out;
  }();
  return keys;
}

std::string describe_config_keys() {
  const RunConfig defaults;
  std::string out;
  for (const auto& e : entries()) out += e.key.name + " = " + e.get(defaults) + "  # " + e.key.doc + "\n";
  return out;
}

void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(number) + ": expected 'key = value'");
    }
    try {
      cfg.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(number) + ": " + e.what());
    }
  }
}

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  apply_config_text(cfg, ss.str(), path.string());
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  cfg.set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

std::string to_config_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& e : entries()) out += e.key.name + " = " + e.get(cfg) + "\n";
  return out;
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"default", "desk"};
  return names;
}

RunConfig preset(const std::string& name) {
  RunConfig c;
  if (name == "default") return c;
  if (name != "desk") throw ConfigError("unknown preset '" + name + "'");
  c.model.base_channels = 8;
  c.model.n_ceb = 2;
  c.model.n_hfem = 1;
  c.train.crop = 32;
  c.train.batch = 4;
  c.train.initial_lr = 3e-3;
  c.train.lr_step_epochs = 400;
  c.train.augment = false;
  c.train.max_steps = 200;
  c.scene.height = 32;
  c.scene.width = 32;
  return c;
}

}  // namespace crnet
