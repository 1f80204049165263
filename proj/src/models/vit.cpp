#include "models/arch_impl.hpp"

namespace ctg::models {

using nn::ForwardCtx;
using nn::LayerNorm;
using nn::Linear;
using nn::ParamStore;
using nn::Rng;
using nn::Var;

namespace {

constexpr int kPatch = 32;
constexpr int kDim = 768;
constexpr int kHeads = 12;
constexpr int kHeadDim = kDim / kHeads;
constexpr int kMlpDim = 3072;
constexpr int kLayers = 12;

struct EncoderBlock {
  LayerNorm ln1, ln2;
  Linear qkv, proj, fc1, fc2;

  EncoderBlock(ParamStore& ps, Rng& rng, const std::string& n) {
    ln1 = LayerNorm(ps, n + ".ln_1", kDim);
    qkv = Linear(ps, rng, n + ".self_attention.in_proj", kDim, 3 * kDim);
    proj = Linear(ps, rng, n + ".self_attention.out_proj", kDim, kDim);
    ln2 = LayerNorm(ps, n + ".ln_2", kDim);
    fc1 = Linear(ps, rng, n + ".mlp.0", kDim, kMlpDim);
    fc2 = Linear(ps, rng, n + ".mlp.3", kMlpDim, kDim);
  }

  Var operator()(const Var& x) const {
    const int64_t n = x->value.shape[0];
    const int64_t t = x->value.shape[1];

    Var h = ln1(x);
    Var packed = qkv(nn::reshape(h, {n * t, kDim}));           // [N*T, 3D]
    packed = nn::reshape(packed, {n, t, 3, kHeads, kHeadDim});
    packed = nn::permute(packed, {2, 0, 3, 1, 4});             // [3, N, H, T, hd]
    auto split = [&](int64_t i) {
      return nn::reshape(nn::slice(packed, 0, i, 1), {n * kHeads, t, kHeadDim});
    };
    Var q = split(0), k = split(1), v = split(2);

    Var att = nn::bmm(q, nn::permute(k, {0, 2, 1}));
    att = nn::softmax_lastdim(mul_scalar(att, 1.0f / std::sqrt(float(kHeadDim))));
    Var o = nn::bmm(att, v);                                   // [N*H, T, hd]
    o = nn::permute(nn::reshape(o, {n, kHeads, t, kHeadDim}), {0, 2, 1, 3});
    o = proj(nn::reshape(o, {n * t, kDim}));
    Var x1 = nn::add(x, nn::reshape(o, {n, t, kDim}));

    Var m = ln2(x1);
    m = fc2(nn::gelu(fc1(nn::reshape(m, {n * t, kDim}))));
    return nn::add(x1, nn::reshape(m, {n, t, kDim}));
  }
};

// ViT-B/32: 32x32 patch embedding, class token, 12 encoder blocks.
class VitB32Model : public Model {
 public:
  VitB32Model(const ModelSpec& spec, Rng& rng) : Model(spec) {
    if (spec.input_side % kPatch != 0)
      throw ArgumentError("VTB32 input side must be a multiple of 32");
    grid_ = spec.input_side / kPatch;
    tokens_ = grid_ * grid_ + 1;

    nn::Tensor proj_w({kDim, 3, kPatch, kPatch});
    nn::init_normal(proj_w, std::sqrt(1.0f / float(3 * kPatch * kPatch)), rng);
    patch_w_ = store_.add_param("conv_proj.weight", std::move(proj_w));
    patch_b_ = store_.add_param("conv_proj.bias", nn::Tensor::zeros({kDim}));

    cls_ = store_.add_param("class_token", nn::Tensor::zeros({1, 1, kDim}));
    nn::Tensor pos({1, tokens_, kDim});
    nn::init_normal(pos, 0.02f, rng);
    pos_ = store_.add_param("pos_embedding", std::move(pos));

    for (int i = 0; i < kLayers; ++i)
      blocks_.emplace_back(store_, rng, "encoder.layer_" + std::to_string(i));
    final_ln_ = LayerNorm(store_, "encoder.ln", kDim);
    head_ = Linear(store_, rng, "head.fc", kDim, spec.num_classes);
  }

  int patch_grid() const { return grid_; }

 protected:
  ModelOutput forward_impl(const Var& x, ForwardCtx&) override {
    const int64_t n = x->value.shape[0];
    Var h = nn::conv2d(x, patch_w_, patch_b_, kPatch, kPatch, 0, 0);  // [N, D, g, g]
    h = nn::reshape(h, {n, kDim, int64_t(grid_) * grid_});
    h = nn::permute(h, {0, 2, 1});                                    // [N, g*g, D]
    h = nn::concat({nn::broadcast_dim0(cls_, n), h}, 1);
    h = nn::add(h, pos_);
    for (const auto& block : blocks_) h = block(h);
    h = final_ln_(h);
    Var cls = nn::reshape(nn::slice(h, 1, 0, 1), {n, kDim});
    return {head_(cls), nullptr};
  }

 private:
  int grid_ = 7;
  int tokens_ = 50;
  Var patch_w_, patch_b_, cls_, pos_;
  std::vector<EncoderBlock> blocks_;
  LayerNorm final_ln_;
  Linear head_;
};

}  // namespace

std::unique_ptr<Model> build_vit_b32(const ModelSpec& spec, Rng& rng) {
  return std::make_unique<VitB32Model>(spec, rng);
}

}  // namespace ctg::models
