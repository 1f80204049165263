#include "models/arch_impl.hpp"

namespace ctg::models {

using nn::BatchNorm2d;
using nn::Conv2d;
using nn::ForwardCtx;
using nn::Linear;
using nn::ParamStore;
using nn::Rng;
using nn::Var;

namespace {

constexpr int kExpansion = 4;

struct Bottleneck {
  Conv2d conv1, conv2, conv3;
  BatchNorm2d bn1, bn2, bn3;
  Conv2d down_conv;
  BatchNorm2d down_bn;
  bool has_down = false;

  Bottleneck(ParamStore& ps, Rng& rng, const std::string& name, int cin, int planes, int width,
             int stride) {
    conv1 = Conv2d(ps, rng, name + ".conv1", cin, width, 1, 1, 0, false);
    bn1 = BatchNorm2d(ps, name + ".bn1", width);
    conv2 = Conv2d(ps, rng, name + ".conv2", width, width, 3, stride, 1, false);
    bn2 = BatchNorm2d(ps, name + ".bn2", width);
    conv3 = Conv2d(ps, rng, name + ".conv3", width, planes * kExpansion, 1, 1, 0, false);
    bn3 = BatchNorm2d(ps, name + ".bn3", planes * kExpansion);
    if (stride != 1 || cin != planes * kExpansion) {
      has_down = true;
      down_conv =
          Conv2d(ps, rng, name + ".downsample.0", cin, planes * kExpansion, 1, stride, 0, false);
      down_bn = BatchNorm2d(ps, name + ".downsample.1", planes * kExpansion);
    }
  }

  Var operator()(const Var& x, const ForwardCtx& ctx) const {
    Var h = nn::relu(bn1(conv1(x), ctx));
    h = nn::relu(bn2(conv2(h), ctx));
    h = bn3(conv3(h), ctx);
    Var identity = has_down ? down_bn(down_conv(x), ctx) : x;
    return nn::relu(nn::add(h, identity));
  }
};

// Bottleneck ResNet: ResNet-152 is [3,8,36,3] at base width 64, the wide
// variant is [3,4,23,3] with the inner 3x3 width doubled.
class ResNetModel : public Model {
 public:
  ResNetModel(const ModelSpec& spec, Rng& rng) : Model(spec) {
    const bool wide = spec.arch == Arch::WideResNet101;
    const std::array<int, 4> blocks = wide ? std::array<int, 4>{3, 4, 23, 3}
                                           : std::array<int, 4>{3, 8, 36, 3};
    const int width_mult = wide ? 2 : 1;

    stem_ = Conv2d(store_, rng, "conv1", 3, 64, 7, 2, 3, false);
    stem_bn_ = BatchNorm2d(store_, "bn1", 64);

    int cin = 64;
    for (int stage = 0; stage < 4; ++stage) {
      const int planes = 64 << stage;
      const int stride = stage == 0 ? 1 : 2;
      for (int b = 0; b < blocks[stage]; ++b) {
        const std::string name =
            "layer" + std::to_string(stage + 1) + "." + std::to_string(b);
        layers_.emplace_back(store_, rng, name, cin, planes, planes * width_mult,
                             b == 0 ? stride : 1);
        cin = planes * kExpansion;
      }
    }
    head_ = Linear(store_, rng, "head.fc", cin, spec.num_classes);
  }

 protected:
  ModelOutput forward_impl(const Var& x, ForwardCtx& ctx) override {
    Var h = nn::maxpool2d(nn::relu(stem_bn_(stem_(x), ctx)), 3, 3, 2, 2, 1, 1);
    for (const auto& block : layers_) h = block(h, ctx);
    h = nn::adaptive_avgpool2d(h, 1, 1);
    h = nn::reshape(h, {h->value.shape[0], h->value.shape[1]});
    return {head_(h), nullptr};
  }

 private:
  Conv2d stem_;
  BatchNorm2d stem_bn_;
  std::vector<Bottleneck> layers_;
  Linear head_;
};

}  // namespace

std::unique_ptr<Model> build_resnet(const ModelSpec& spec, Rng& rng) {
  return std::make_unique<ResNetModel>(spec, rng);
}

}  // namespace ctg::models
