#pragma once

#include <map>
#include <string>

#include <json.hpp>
#include <torch/torch.h>

namespace efdiff {

// Named-tensor container. Layout (little-endian):
//   "EFDT" u32 version u64 count
//   per entry: u32 name_len, name, u8 dtype, u32 ndim, i64 dims[ndim], u64 nbytes, payload
// dtype: 0 = float32, 1 = float64, 2 = int64.
using TensorMap = std::map<std::string, torch::Tensor>;

void save_tensors(const std::string& path, const TensorMap& tensors);
TensorMap load_tensors(const std::string& path);

// Writes go to a sibling temporary and are renamed into place, so a failed
// write never leaves a truncated file behind.
void write_json(const std::string& path, const nlohmann::json& doc);
nlohmann::json read_json(const std::string& path);
void write_text(const std::string& path, const std::string& text);

}  // namespace efdiff
