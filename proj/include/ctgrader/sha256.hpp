#pragma once

#include <cstdint>
#include <string>

#include "ctgrader/common.hpp"

namespace ctg {

// Hex digest of the SHA-256 of a byte string. Used to key resumable grid runs
// on the dataset manifest contents.
std::string sha256_hex(const std::string& bytes);
std::string sha256_file_hex(const fs::path& path);

}  // namespace ctg
