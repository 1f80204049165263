#include "models/arch_impl.hpp"

namespace ctg::models {

using nn::Conv2d;
using nn::ForwardCtx;
using nn::Linear;
using nn::ParamStore;
using nn::Rng;
using nn::Var;

namespace {

class AlexNetModel : public Model {
 public:
  AlexNetModel(const ModelSpec& spec, Rng& rng) : Model(spec) {
    c1_ = Conv2d(store_, rng, "features.0", 3, 64, 11, 11, 4, 4, 2, 2);
    c2_ = Conv2d(store_, rng, "features.3", 64, 192, 5, 1, 2);
    c3_ = Conv2d(store_, rng, "features.6", 192, 384, 3, 1, 1);
    c4_ = Conv2d(store_, rng, "features.8", 384, 256, 3, 1, 1);
    c5_ = Conv2d(store_, rng, "features.10", 256, 256, 3, 1, 1);
    fc1_ = Linear(store_, rng, "classifier.1", 256 * 6 * 6, 4096);
    fc2_ = Linear(store_, rng, "classifier.4", 4096, 4096);
    head_ = Linear(store_, rng, "head.fc", 4096, spec.num_classes);
  }

 protected:
  ModelOutput forward_impl(const Var& x, ForwardCtx& ctx) override {
    Var h = nn::maxpool2d(nn::relu(c1_(x)), 3, 3, 2, 2);
    h = nn::maxpool2d(nn::relu(c2_(h)), 3, 3, 2, 2);
    h = nn::relu(c3_(h));
    h = nn::relu(c4_(h));
    h = nn::maxpool2d(nn::relu(c5_(h)), 3, 3, 2, 2);
    h = nn::adaptive_avgpool2d(h, 6, 6);
    h = nn::reshape(h, {h->value.shape[0], 256 * 6 * 6});
    h = nn::relu(fc1_(nn::dropout(h, 0.5f, ctx)));
    h = nn::relu(fc2_(nn::dropout(h, 0.5f, ctx)));
    return {head_(h), nullptr};
  }

 private:
  Conv2d c1_, c2_, c3_, c4_, c5_;
  Linear fc1_, fc2_, head_;
};

// VGG-16, configuration D, no batch norm.
class Vgg16Model : public Model {
 public:
  Vgg16Model(const ModelSpec& spec, Rng& rng) : Model(spec) {
    static constexpr int kCfg[] = {64, 64, -1, 128, 128, -1, 256, 256, 256, -1,
                                   512, 512, 512, -1, 512, 512, 512, -1};
    int cin = 3;
    int idx = 0;
    for (int c : kCfg) {
      if (c < 0) {
        pool_after_.push_back(static_cast<int>(convs_.size()) - 1);
        ++idx;
        continue;
      }
      convs_.emplace_back(store_, rng, "features." + std::to_string(idx), cin, c, 3, 1, 1);
      cin = c;
      ++idx;
      ++idx;  // relu slot in the torchvision numbering
    }
    fc1_ = Linear(store_, rng, "classifier.0", 512 * 7 * 7, 4096);
    fc2_ = Linear(store_, rng, "classifier.3", 4096, 4096);
    head_ = Linear(store_, rng, "head.fc", 4096, spec.num_classes);
  }

 protected:
  ModelOutput forward_impl(const Var& x, ForwardCtx& ctx) override {
    Var h = x;
    size_t pool_idx = 0;
    for (size_t i = 0; i < convs_.size(); ++i) {
      h = nn::relu(convs_[i](h));
      if (pool_idx < pool_after_.size() && pool_after_[pool_idx] == static_cast<int>(i)) {
        h = nn::maxpool2d(h, 2, 2, 2, 2);
        ++pool_idx;
      }
    }
    h = nn::adaptive_avgpool2d(h, 7, 7);
    h = nn::reshape(h, {h->value.shape[0], 512 * 7 * 7});
    h = nn::dropout(nn::relu(fc1_(h)), 0.5f, ctx);
    h = nn::dropout(nn::relu(fc2_(h)), 0.5f, ctx);
    return {head_(h), nullptr};
  }

 private:
  std::vector<Conv2d> convs_;
  std::vector<int> pool_after_;
  Linear fc1_, fc2_, head_;
};

struct Fire {
  Conv2d squeeze, expand1, expand3;

  Fire() = default;
  Fire(ParamStore& ps, Rng& rng, const std::string& name, int cin, int s, int e1, int e3) {
    squeeze = Conv2d(ps, rng, name + ".squeeze", cin, s, 1);
    expand1 = Conv2d(ps, rng, name + ".expand1x1", s, e1, 1);
    expand3 = Conv2d(ps, rng, name + ".expand3x3", s, e3, 3, 1, 1);
  }

  Var operator()(const Var& x) const {
    Var s = nn::relu(squeeze(x));
    return nn::concat({nn::relu(expand1(s)), nn::relu(expand3(s))}, 1);
  }
};

// SqueezeNet 1.1. The head is the final 1x1 conv; its output feeds the global
// average pool directly (no activation on the logits).
class SqueezeNetModel : public Model {
 public:
  SqueezeNetModel(const ModelSpec& spec, Rng& rng) : Model(spec) {
    conv1_ = Conv2d(store_, rng, "features.0", 3, 64, 3, 2, 0);
    fires_.emplace_back(store_, rng, "features.3", 64, 16, 64, 64);
    fires_.emplace_back(store_, rng, "features.4", 128, 16, 64, 64);
    fires_.emplace_back(store_, rng, "features.6", 128, 32, 128, 128);
    fires_.emplace_back(store_, rng, "features.7", 256, 32, 128, 128);
    fires_.emplace_back(store_, rng, "features.9", 256, 48, 192, 192);
    fires_.emplace_back(store_, rng, "features.10", 384, 48, 192, 192);
    fires_.emplace_back(store_, rng, "features.11", 384, 64, 256, 256);
    fires_.emplace_back(store_, rng, "features.12", 512, 64, 256, 256);
    head_ = Conv2d(store_, rng, "head.conv", 512, spec.num_classes, 1);
  }

 protected:
  ModelOutput forward_impl(const Var& x, ForwardCtx& ctx) override {
    Var h = nn::maxpool2d(nn::relu(conv1_(x)), 3, 3, 2, 2);
    h = fires_[1](fires_[0](h));
    h = nn::maxpool2d(h, 3, 3, 2, 2);
    h = fires_[3](fires_[2](h));
    h = nn::maxpool2d(h, 3, 3, 2, 2);
    for (size_t i = 4; i < fires_.size(); ++i) h = fires_[i](h);
    h = head_(nn::dropout(h, 0.5f, ctx));
    h = nn::adaptive_avgpool2d(h, 1, 1);
    return {nn::reshape(h, {h->value.shape[0], spec_.num_classes}), nullptr};
  }

 private:
  Conv2d conv1_, head_;
  std::vector<Fire> fires_;
};

}  // namespace

std::unique_ptr<Model> build_alexnet(const ModelSpec& spec, Rng& rng) {
  return std::make_unique<AlexNetModel>(spec, rng);
}

std::unique_ptr<Model> build_vgg16(const ModelSpec& spec, Rng& rng) {
  return std::make_unique<Vgg16Model>(spec, rng);
}

std::unique_ptr<Model> build_squeezenet(const ModelSpec& spec, Rng& rng) {
  return std::make_unique<SqueezeNetModel>(spec, rng);
}

}  // namespace ctg::models
