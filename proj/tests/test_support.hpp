#pragma once

#include <cstdio>
#include <functional>

#include "ctgrader/common.hpp"
#include "ctgrader/image.hpp"
#include "ctgrader/nn/autodiff.hpp"

namespace ctg::test {

// Self-deleting scratch directory under the system temp root.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("ctgrader_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& sub) const { return path_ / sub; }

 private:
  fs::path path_;
};

// Central-difference gradient check against the engine's analytic gradients,
// compared by vector-norm relative error (float32 forward noise makes
// per-element comparisons meaningless for near-zero entries).
inline double gradcheck(const nn::Var& leaf, const std::function<nn::Var()>& loss_fn,
                        double h = 1e-2) {
  leaf->zero_grad();
  nn::backward(loss_fn());
  const nn::Tensor analytic = leaf->grad;
  leaf->zero_grad();
  double num = 0.0, den = 0.0;
  for (int64_t i = 0; i < leaf->value.numel(); ++i) {
    const float orig = leaf->value.data[i];
    leaf->value.data[i] = static_cast<float>(orig + h);
    const double lp = loss_fn()->value.data[0];
    leaf->value.data[i] = static_cast<float>(orig - h);
    const double lm = loss_fn()->value.data[0];
    leaf->value.data[i] = orig;
    const double fd = (lp - lm) / (2.0 * h);
    num += (fd - analytic.data[i]) * (fd - analytic.data[i]);
    den += fd * fd;
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

inline nn::Tensor random_tensor(std::vector<int64_t> shape, nn::Rng& rng, float scale = 0.5f) {
  nn::Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.normal() * scale;
  return t;
}

inline void write_tiny_jpeg(const fs::path& path, int side, uint8_t base, uint64_t seed) {
  ImageU8 img(side, side, base);
  nn::Rng rng(seed);
  for (auto& px : img.px)
    px = static_cast<uint8_t>(std::clamp<int>(int(px) + int(rng.uniform_int(30)) - 15, 0, 255));
  write_jpeg_gray(path, img, 90);
}

}  // namespace ctg::test
