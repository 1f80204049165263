#pragma once

#include <nlohmann/json.hpp>

#include "ctgrader/common.hpp"
#include "ctgrader/nn/tensor.hpp"

namespace ctg::nn {

// Self-contained tensor container: a JSON header describing named float32
// tensors plus their raw data. Backs both run checkpoints and pretrained
// weight files.
struct TensorFile {
  nlohmann::json meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
};

void write_tensor_file(const fs::path& path, const TensorFile& file);
TensorFile read_tensor_file(const fs::path& path);

}  // namespace ctg::nn
