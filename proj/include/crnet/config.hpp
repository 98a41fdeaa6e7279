#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "crnet/model.hpp"
#include "crnet/synth.hpp"
#include "crnet/train.hpp"

namespace crnet {

// Everything a command can be configured with, addressed through one flat
// namespaced key space: model.*, train.*, data.*.
struct RunConfig {
  CRNetConfig model;
  TrainConfig train;
  SceneSpec scene;
  DegradeSpec degrade;
  std::uint64_t init_seed = 0;

  // Applies one `key = value` assignment; unknown keys and unparsable values
  // throw ConfigError naming the key.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  void validate() const;
};

struct ConfigKey {
  std::string name;
  std::string doc;
};

// Every accepted key in a stable order.
const std::vector<ConfigKey>& config_keys();

// `key = default  # doc` for every key, one per line.
std::string describe_config_keys();

// Lines of `key = value`; '#' starts a comment, blank lines are skipped.
void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& source);
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);
// "key=value" as given on the command line.
void apply_override(RunConfig& cfg, const std::string& assignment);

// Every key with its current value, in config_keys() order; parses back to an
// equal config.
std::string to_config_text(const RunConfig& cfg);

// Named starting points. "default" is the full-size model with the stock
// schedule; "desk" is the small CPU-scale setup used for overfit and smoke runs.
RunConfig preset(const std::string& name);
const std::vector<std::string>& preset_names();

}  // namespace crnet
