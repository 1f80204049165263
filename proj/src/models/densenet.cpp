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

constexpr int kGrowth = 32;

struct DenseLayer {
  BatchNorm2d bn1, bn2;
  Conv2d conv1, conv2;

  DenseLayer(ParamStore& ps, Rng& rng, const std::string& name, int cin) {
    bn1 = BatchNorm2d(ps, name + ".norm1", cin);
    conv1 = Conv2d(ps, rng, name + ".conv1", cin, 4 * kGrowth, 1, 1, 0, false);
    bn2 = BatchNorm2d(ps, name + ".norm2", 4 * kGrowth);
    conv2 = Conv2d(ps, rng, name + ".conv2", 4 * kGrowth, kGrowth, 3, 1, 1, false);
  }

  Var operator()(const Var& x, const ForwardCtx& ctx) const {
    Var h = conv1(nn::relu(bn1(x, ctx)));
    h = conv2(nn::relu(bn2(h, ctx)));
    return nn::concat({x, h}, 1);
  }
};

struct Transition {
  BatchNorm2d bn;
  Conv2d conv;

  Transition(ParamStore& ps, Rng& rng, const std::string& name, int cin, int cout) {
    bn = BatchNorm2d(ps, name + ".norm", cin);
    conv = Conv2d(ps, rng, name + ".conv", cin, cout, 1, 1, 0, false);
  }

  Var operator()(const Var& x, const ForwardCtx& ctx) const {
    return nn::avgpool2d(conv(nn::relu(bn(x, ctx))), 2, 2, 2, 2);
  }
};

// DenseNet-121 ("DenseNet") and DenseNet-201, growth rate 32.
class DenseNetModel : public Model {
 public:
  DenseNetModel(const ModelSpec& spec, Rng& rng) : Model(spec) {
    const std::array<int, 4> blocks = spec.arch == Arch::DenseNet201
                                          ? std::array<int, 4>{6, 12, 48, 32}
                                          : std::array<int, 4>{6, 12, 24, 16};
    stem_ = Conv2d(store_, rng, "features.conv0", 3, 64, 7, 2, 3, false);
    stem_bn_ = BatchNorm2d(store_, "features.norm0", 64);

    int features = 64;
    for (int stage = 0; stage < 4; ++stage) {
      std::vector<DenseLayer> block;
      for (int l = 0; l < blocks[stage]; ++l) {
        const std::string name = "features.denseblock" + std::to_string(stage + 1) +
                                 ".denselayer" + std::to_string(l + 1);
        block.emplace_back(store_, rng, name, features);
        features += kGrowth;
      }
      blocks_.push_back(std::move(block));
      if (stage < 3) {
        const std::string name = "features.transition" + std::to_string(stage + 1);
        transitions_.emplace_back(store_, rng, name, features, features / 2);
        features /= 2;
      }
    }
    final_bn_ = BatchNorm2d(store_, "features.norm5", features);
    head_ = Linear(store_, rng, "head.classifier", features, spec.num_classes);
  }

 protected:
  ModelOutput forward_impl(const Var& x, ForwardCtx& ctx) override {
    Var h = nn::maxpool2d(nn::relu(stem_bn_(stem_(x), ctx)), 3, 3, 2, 2, 1, 1);
    for (size_t stage = 0; stage < blocks_.size(); ++stage) {
      for (const auto& layer : blocks_[stage]) h = layer(h, ctx);
      if (stage < transitions_.size()) h = transitions_[stage](h, ctx);
    }
    h = nn::relu(final_bn_(h, ctx));
    h = nn::adaptive_avgpool2d(h, 1, 1);
    h = nn::reshape(h, {h->value.shape[0], h->value.shape[1]});
    return {head_(h), nullptr};
  }

 private:
  Conv2d stem_;
  BatchNorm2d stem_bn_, final_bn_;
  std::vector<std::vector<DenseLayer>> blocks_;
  std::vector<Transition> transitions_;
  Linear head_;
};

}  // namespace

std::unique_ptr<Model> build_densenet(const ModelSpec& spec, Rng& rng) {
  return std::make_unique<DenseNetModel>(spec, rng);
}

}  // namespace ctg::models
