#include "ctgrader/nn/layers.hpp"

#include <cmath>

namespace ctg::nn {

Var ParamStore::add_param(const std::string& name, Tensor t, bool requires_grad) {
  for (const auto& p : params_)
    if (p.name == name) throw ArgumentError("duplicate parameter name: " + name);
  Var v = make_var(std::move(t), requires_grad);
  params_.push_back({name, v});
  return v;
}

Tensor* ParamStore::add_buffer(const std::string& name, Tensor t) {
  buffers_.emplace_back(name, std::make_unique<Tensor>(std::move(t)));
  return buffers_.back().second.get();
}

std::vector<std::pair<std::string, Tensor*>> ParamStore::buffers() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.reserve(buffers_.size());
  for (auto& [name, t] : buffers_) out.emplace_back(name, t.get());
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ParamStore::buffers() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(buffers_.size());
  for (const auto& [name, t] : buffers_) out.emplace_back(name, t.get());
  return out;
}

Var ParamStore::find_param(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.var;
  throw ArgumentError("no such parameter: " + name);
}

void init_he_normal(Tensor& w, int64_t fan_in, Rng& rng) {
  const float std = std::sqrt(2.0f / static_cast<float>(fan_in));
  for (auto& v : w.data) v = rng.normal() * std;
}

void init_uniform_fan_in(Tensor& t, int64_t fan_in, Rng& rng) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
  for (auto& v : t.data) v = static_cast<float>(rng.uniform(-bound, bound));
}

void init_xavier_uniform(Tensor& w, int64_t fan_in, int64_t fan_out, Rng& rng) {
  const float bound = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
  for (auto& v : w.data) v = static_cast<float>(rng.uniform(-bound, bound));
}

void init_normal(Tensor& t, float std, Rng& rng) {
  for (auto& v : t.data) v = rng.normal() * std;
}

Conv2d::Conv2d(ParamStore& ps, Rng& rng, const std::string& name, int cin, int cout, int kh,
               int kw, int sh_, int sw_, int ph_, int pw_, bool bias)
    : sh(sh_), sw(sw_), ph(ph_), pw(pw_) {
  Tensor wt({cout, cin, kh, kw});
  const int64_t fan_in = int64_t(cin) * kh * kw;
  init_he_normal(wt, fan_in, rng);
  w = ps.add_param(name + ".weight", std::move(wt));
  if (bias) {
    Tensor bt({cout});
    b = ps.add_param(name + ".bias", std::move(bt));  // zeros
  }
}

Linear::Linear(ParamStore& ps, Rng& rng, const std::string& name, int in, int out, bool bias) {
  Tensor wt({out, in});
  init_uniform_fan_in(wt, in, rng);
  w = ps.add_param(name + ".weight", std::move(wt));
  if (bias) {
    Tensor bt({out});
    init_uniform_fan_in(bt, in, rng);
    b = ps.add_param(name + ".bias", std::move(bt));
  }
}

BatchNorm2d::BatchNorm2d(ParamStore& ps, const std::string& name, int channels, float eps_)
    : eps(eps_) {
  gamma = ps.add_param(name + ".weight", Tensor::full({channels}, 1.0f));
  beta = ps.add_param(name + ".bias", Tensor::zeros({channels}));
  running_mean = ps.add_buffer(name + ".running_mean", Tensor::zeros({channels}));
  running_var = ps.add_buffer(name + ".running_var", Tensor::full({channels}, 1.0f));
}

LayerNorm::LayerNorm(ParamStore& ps, const std::string& name, int dim, float eps_) : eps(eps_) {
  gamma = ps.add_param(name + ".weight", Tensor::full({dim}, 1.0f));
  beta = ps.add_param(name + ".bias", Tensor::zeros({dim}));
}

}  // namespace ctg::nn
