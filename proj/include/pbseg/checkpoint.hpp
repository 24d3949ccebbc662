#pragma once

// Versioned binary checkpoint:
//   magic "PBSG" | u32 version | u32 config length | config text |
//   repeated until EOF:
//     u32 name length | name | u32 rank | u64 extents[rank] | f64 data[numel]
// All integers and floats little-endian. The config block is the model.*
// key=value text.

#include <string>
#include <vector>

#include "pbseg/model.hpp"

namespace pbseg {

struct CheckpointData {
  ModelConfig config;
  std::vector<NamedParam> params;
};

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const std::vector<NamedParam>& params);
CheckpointData load_checkpoint(const std::string& path);

// copies parameters into the model by name; throws on missing names or
// shape mismatches
void load_params(PBSegModel& model, const CheckpointData& ckpt);

}  // namespace pbseg
