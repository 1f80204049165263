#include "ctgrader/nn/serialize.hpp"

#include <cstring>
#include <fstream>

namespace ctg::nn {

namespace {
constexpr char kMagic[8] = {'C', 'T', 'G', 'T', 'F', '0', '0', '1'};
}

const Tensor* TensorFile::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

void write_tensor_file(const fs::path& path, const TensorFile& file) {
  nlohmann::json header;
  header["meta"] = file.meta;
  auto& list = header["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : file.tensors) {
    list.push_back({{"name", name}, {"shape", t.shape}, {"dtype", "f32"}});
  }
  const std::string hs = header.dump();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write tensor file: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : file.tensors) {
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  }
  if (!out) throw DataError("short write on tensor file: " + path.string());
}

TensorFile read_tensor_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open tensor file: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw LoadError("not a tensor file (bad magic): " + path.string());
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!in || hlen > (1ULL << 30)) throw LoadError("corrupt tensor file header: " + path.string());
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw LoadError("truncated tensor file header: " + path.string());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("corrupt tensor file header JSON: " + std::string(e.what()));
  }

  TensorFile file;
  file.meta = header.value("meta", nlohmann::json::object());
  for (const auto& entry : header.at("tensors")) {
    Tensor t(entry.at("shape").get<std::vector<int64_t>>());
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!in) throw LoadError("truncated tensor data in: " + path.string());
    file.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  return file;
}

}  // namespace ctg::nn
