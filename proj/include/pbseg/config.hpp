#pragma once

// Flat key=value run configuration. '#' starts a comment, blank lines are
// ignored, unknown keys are rejected. Every field has a default; the
// effective configuration is echoed into run reports.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pbseg/model.hpp"

namespace pbseg {

struct RunConfig {
  std::uint64_t seed = 42;   // initialization and batch sampling
  std::string out_dir = "out";

  ModelConfig model;  // model.input_h/w mirror data.height/width

  std::uint64_t data_seed = 1000;  // scene i is generated from data_seed + i
  std::size_t data_count = 200;
  std::size_t data_height = 64, data_width = 64;

  double train_lr = 1e-3;
  std::size_t train_steps = 2000;
  std::size_t train_batch = 2;
  std::size_t eval_count = 20;  // held-out scenes, seeds data_seed + data_count + i

  std::vector<std::size_t> bench_sizes{1024, 4096, 16384};  // spatial tokens S
  std::vector<std::size_t> bench_queries{100};              // L
  std::vector<std::size_t> bench_dims{256};                 // d (= D)
  std::size_t bench_heads = 8;
  std::size_t bench_repeats = 20;
  std::size_t bench_warmups = 3;

  static RunConfig defaults() { return RunConfig{}; }
  static RunConfig from_file(const std::string& path);

  // applies one key=value pair; throws std::invalid_argument on unknown keys
  // or unparsable values
  void apply(const std::string& key, const std::string& value);

  // effective configuration as ordered key -> value text
  std::map<std::string, std::string> echo() const;
};

// the model.* subset, used for the checkpoint config block
std::map<std::string, std::string> model_config_entries(const ModelConfig& cfg);
void apply_model_key(ModelConfig& cfg, const std::string& key, const std::string& value);

}  // namespace pbseg
