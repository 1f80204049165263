#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ctgrader/nn/autodiff.hpp"

namespace ctg::nn {

struct Parameter {
  std::string name;
  Var var;
};

// Owns every named parameter and buffer of a model, in registration order.
// Registration order is the initialization order, which makes scratch builds
// deterministic for a fixed seed.
class ParamStore {
 public:
  Var add_param(const std::string& name, Tensor t, bool requires_grad = true);
  Tensor* add_buffer(const std::string& name, Tensor t);

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }
  std::vector<std::pair<std::string, Tensor*>> buffers();
  std::vector<std::pair<std::string, const Tensor*>> buffers() const;

  Var find_param(const std::string& name) const;

 private:
  std::vector<Parameter> params_;
  std::vector<std::pair<std::string, std::unique_ptr<Tensor>>> buffers_;
};

void init_he_normal(Tensor& w, int64_t fan_in, Rng& rng);
void init_uniform_fan_in(Tensor& t, int64_t fan_in, Rng& rng);
void init_xavier_uniform(Tensor& w, int64_t fan_in, int64_t fan_out, Rng& rng);
void init_normal(Tensor& t, float std, Rng& rng);

struct Conv2d {
  Var w, b;
  int sh = 1, sw = 1, ph = 0, pw = 0;

  Conv2d() = default;
  Conv2d(ParamStore& ps, Rng& rng, const std::string& name, int cin, int cout, int kh, int kw,
         int sh, int sw, int ph, int pw, bool bias = true);
  // Square kernel convenience.
  Conv2d(ParamStore& ps, Rng& rng, const std::string& name, int cin, int cout, int k,
         int stride = 1, int pad = 0, bool bias = true)
      : Conv2d(ps, rng, name, cin, cout, k, k, stride, stride, pad, pad, bias) {}

  Var operator()(const Var& x) const { return conv2d(x, w, b, sh, sw, ph, pw); }
};

struct Linear {
  Var w, b;

  Linear() = default;
  Linear(ParamStore& ps, Rng& rng, const std::string& name, int in, int out, bool bias = true);

  Var operator()(const Var& x) const { return linear(x, w, b); }
};

struct BatchNorm2d {
  Var gamma, beta;
  Tensor* running_mean = nullptr;
  Tensor* running_var = nullptr;
  float eps = 1e-5f;

  BatchNorm2d() = default;
  BatchNorm2d(ParamStore& ps, const std::string& name, int channels, float eps = 1e-5f);

  Var operator()(const Var& x, const ForwardCtx& ctx) const {
    return batch_norm2d(x, gamma, beta, *running_mean, *running_var, ctx.train, 0.1f, eps);
  }
};

struct LayerNorm {
  Var gamma, beta;
  float eps = 1e-6f;

  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, int dim, float eps = 1e-6f);

  Var operator()(const Var& x) const { return layer_norm_lastdim(x, gamma, beta, eps); }
};

}  // namespace ctg::nn
