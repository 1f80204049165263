#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "ctgrader/common.hpp"

namespace ctg::nn {

// Dense float32 tensor, row-major. All engine math runs on these.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), data(numel_of(shape), 0.0f) {}

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(size_t i) const { return shape.at(i); }
  size_t ndim() const { return shape.size(); }

  static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int64_t> s, float v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(float v) {
    Tensor t({1});
    t.data[0] = v;
    return t;
  }
  static Tensor from_vector(std::vector<int64_t> s, std::vector<float> values) {
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(values);
    if (t.numel() != numel_of(t.shape)) throw ArgumentError("tensor shape/data size mismatch");
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  std::string shape_str() const;

  float& operator[](int64_t i) { return data[i]; }
  float operator[](int64_t i) const { return data[i]; }
};

// Deterministic PRNG with explicit float transforms; the std:: distributions
// are implementation-defined, which would make seeds non-portable.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

  uint64_t next_u64() {
    // splitmix64
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  int64_t uniform_int(int64_t n);

  float normal();

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[uniform_int(i + 1)]);
    }
  }

 private:
  uint64_t state_;
  bool have_cached_ = false;
  float cached_ = 0.0f;
};

}  // namespace ctg::nn
