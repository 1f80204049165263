#pragma once

#include <vector>

#include "ctgrader/nn/autodiff.hpp"

namespace ctg::nn {

// Optimizers operate on whatever parameter list they are given; freeze
// policies are applied by handing over only the trainable parameters.
class Optimizer {
 public:
  explicit Optimizer(std::vector<Var> params) : params_(std::move(params)) {}
  virtual ~Optimizer() = default;

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }
  virtual void step() = 0;

 protected:
  std::vector<Var> params_;
};

class Sgd : public Optimizer {
 public:
  Sgd(std::vector<Var> params, float lr, float momentum = 0.9f);
  void step() override;

 private:
  float lr_, momentum_;
  std::vector<std::vector<float>> velocity_;
};

class Adam : public Optimizer {
 public:
  Adam(std::vector<Var> params, float lr, float beta1 = 0.9f, float beta2 = 0.999f,
       float eps = 1e-8f);
  void step() override;

 private:
  float lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

}  // namespace ctg::nn
