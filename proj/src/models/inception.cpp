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

// conv (no bias) + BN(eps 1e-3) + relu
struct BasicConv {
  Conv2d conv;
  BatchNorm2d bn;

  BasicConv() = default;
  BasicConv(ParamStore& ps, Rng& rng, const std::string& name, int cin, int cout, int kh, int kw,
            int sh, int sw, int ph, int pw) {
    conv = Conv2d(ps, rng, name + ".conv", cin, cout, kh, kw, sh, sw, ph, pw, false);
    bn = BatchNorm2d(ps, name + ".bn", cout, 1e-3f);
  }
  BasicConv(ParamStore& ps, Rng& rng, const std::string& name, int cin, int cout, int k,
            int stride = 1, int pad = 0)
      : BasicConv(ps, rng, name, cin, cout, k, k, stride, stride, pad, pad) {}

  Var operator()(const Var& x, const ForwardCtx& ctx) const {
    return nn::relu(bn(conv(x), ctx));
  }
};

struct InceptionA {
  BasicConv b1, b5_1, b5_2, d1, d2, d3, pool;

  InceptionA(ParamStore& ps, Rng& rng, const std::string& n, int cin, int pool_features) {
    b1 = BasicConv(ps, rng, n + ".branch1x1", cin, 64, 1);
    b5_1 = BasicConv(ps, rng, n + ".branch5x5_1", cin, 48, 1);
    b5_2 = BasicConv(ps, rng, n + ".branch5x5_2", 48, 64, 5, 1, 2);
    d1 = BasicConv(ps, rng, n + ".branch3x3dbl_1", cin, 64, 1);
    d2 = BasicConv(ps, rng, n + ".branch3x3dbl_2", 64, 96, 3, 1, 1);
    d3 = BasicConv(ps, rng, n + ".branch3x3dbl_3", 96, 96, 3, 1, 1);
    pool = BasicConv(ps, rng, n + ".branch_pool", cin, pool_features, 1);
  }

  Var operator()(const Var& x, const ForwardCtx& ctx) const {
    return nn::concat({b1(x, ctx), b5_2(b5_1(x, ctx), ctx), d3(d2(d1(x, ctx), ctx), ctx),
                       pool(nn::avgpool2d(x, 3, 3, 1, 1, 1, 1), ctx)},
                      1);
  }
};

struct InceptionB {
  BasicConv b3, d1, d2, d3;

  InceptionB(ParamStore& ps, Rng& rng, const std::string& n, int cin) {
    b3 = BasicConv(ps, rng, n + ".branch3x3", cin, 384, 3, 2, 0);
    d1 = BasicConv(ps, rng, n + ".branch3x3dbl_1", cin, 64, 1);
    d2 = BasicConv(ps, rng, n + ".branch3x3dbl_2", 64, 96, 3, 1, 1);
    d3 = BasicConv(ps, rng, n + ".branch3x3dbl_3", 96, 96, 3, 2, 0);
  }

  Var operator()(const Var& x, const ForwardCtx& ctx) const {
    return nn::concat(
        {b3(x, ctx), d3(d2(d1(x, ctx), ctx), ctx), nn::maxpool2d(x, 3, 3, 2, 2)}, 1);
  }
};

struct InceptionC {
  BasicConv b1, s1, s2, s3, d1, d2, d3, d4, d5, pool;

  InceptionC(ParamStore& ps, Rng& rng, const std::string& n, int cin, int c7) {
    b1 = BasicConv(ps, rng, n + ".branch1x1", cin, 192, 1);
    s1 = BasicConv(ps, rng, n + ".branch7x7_1", cin, c7, 1);
    s2 = BasicConv(ps, rng, n + ".branch7x7_2", c7, c7, 1, 7, 1, 1, 0, 3);
    s3 = BasicConv(ps, rng, n + ".branch7x7_3", c7, 192, 7, 1, 1, 1, 3, 0);
    d1 = BasicConv(ps, rng, n + ".branch7x7dbl_1", cin, c7, 1);
    d2 = BasicConv(ps, rng, n + ".branch7x7dbl_2", c7, c7, 7, 1, 1, 1, 3, 0);
    d3 = BasicConv(ps, rng, n + ".branch7x7dbl_3", c7, c7, 1, 7, 1, 1, 0, 3);
    d4 = BasicConv(ps, rng, n + ".branch7x7dbl_4", c7, c7, 7, 1, 1, 1, 3, 0);
    d5 = BasicConv(ps, rng, n + ".branch7x7dbl_5", c7, 192, 1, 7, 1, 1, 0, 3);
    pool = BasicConv(ps, rng, n + ".branch_pool", cin, 192, 1);
  }

  Var operator()(const Var& x, const ForwardCtx& ctx) const {
    Var seven = s3(s2(s1(x, ctx), ctx), ctx);
    Var dbl = d5(d4(d3(d2(d1(x, ctx), ctx), ctx), ctx), ctx);
    return nn::concat(
        {b1(x, ctx), seven, dbl, pool(nn::avgpool2d(x, 3, 3, 1, 1, 1, 1), ctx)}, 1);
  }
};

struct InceptionD {
  BasicConv t1, t2, s1, s2, s3, s4;

  InceptionD(ParamStore& ps, Rng& rng, const std::string& n, int cin) {
    t1 = BasicConv(ps, rng, n + ".branch3x3_1", cin, 192, 1);
    t2 = BasicConv(ps, rng, n + ".branch3x3_2", 192, 320, 3, 2, 0);
    s1 = BasicConv(ps, rng, n + ".branch7x7x3_1", cin, 192, 1);
    s2 = BasicConv(ps, rng, n + ".branch7x7x3_2", 192, 192, 1, 7, 1, 1, 0, 3);
    s3 = BasicConv(ps, rng, n + ".branch7x7x3_3", 192, 192, 7, 1, 1, 1, 3, 0);
    s4 = BasicConv(ps, rng, n + ".branch7x7x3_4", 192, 192, 3, 2, 0);
  }

  Var operator()(const Var& x, const ForwardCtx& ctx) const {
    return nn::concat({t2(t1(x, ctx), ctx), s4(s3(s2(s1(x, ctx), ctx), ctx), ctx),
                       nn::maxpool2d(x, 3, 3, 2, 2)},
                      1);
  }
};

struct InceptionE {
  BasicConv b1, b3_1, b3_2a, b3_2b, d1, d2, d3a, d3b, pool;

  InceptionE(ParamStore& ps, Rng& rng, const std::string& n, int cin) {
    b1 = BasicConv(ps, rng, n + ".branch1x1", cin, 320, 1);
    b3_1 = BasicConv(ps, rng, n + ".branch3x3_1", cin, 384, 1);
    b3_2a = BasicConv(ps, rng, n + ".branch3x3_2a", 384, 384, 1, 3, 1, 1, 0, 1);
    b3_2b = BasicConv(ps, rng, n + ".branch3x3_2b", 384, 384, 3, 1, 1, 1, 1, 0);
    d1 = BasicConv(ps, rng, n + ".branch3x3dbl_1", cin, 448, 1);
    d2 = BasicConv(ps, rng, n + ".branch3x3dbl_2", 448, 384, 3, 1, 1);
    d3a = BasicConv(ps, rng, n + ".branch3x3dbl_3a", 384, 384, 1, 3, 1, 1, 0, 1);
    d3b = BasicConv(ps, rng, n + ".branch3x3dbl_3b", 384, 384, 3, 1, 1, 1, 1, 0);
    pool = BasicConv(ps, rng, n + ".branch_pool", cin, 192, 1);
  }

  Var operator()(const Var& x, const ForwardCtx& ctx) const {
    Var b3 = b3_1(x, ctx);
    b3 = nn::concat({b3_2a(b3, ctx), b3_2b(b3, ctx)}, 1);
    Var dbl = d2(d1(x, ctx), ctx);
    dbl = nn::concat({d3a(dbl, ctx), d3b(dbl, ctx)}, 1);
    return nn::concat(
        {b1(x, ctx), b3, dbl, pool(nn::avgpool2d(x, 3, 3, 1, 1, 1, 1), ctx)}, 1);
  }
};

// Inception v3 with the training-time auxiliary classifier. Aux logits are
// produced only in train mode; the trainer folds them into the loss at 0.4.
class InceptionV3Model : public Model {
 public:
  InceptionV3Model(const ModelSpec& spec, Rng& rng) : Model(spec) {
    if (spec.input_side < 75)
      throw ArgumentError("InceptionNet needs an input side of at least 75 pixels");
    c1_ = BasicConv(store_, rng, "Conv2d_1a_3x3", 3, 32, 3, 2, 0);
    c2_ = BasicConv(store_, rng, "Conv2d_2a_3x3", 32, 32, 3, 1, 0);
    c3_ = BasicConv(store_, rng, "Conv2d_2b_3x3", 32, 64, 3, 1, 1);
    c4_ = BasicConv(store_, rng, "Conv2d_3b_1x1", 64, 80, 1, 1, 0);
    c5_ = BasicConv(store_, rng, "Conv2d_4a_3x3", 80, 192, 3, 1, 0);
    a1_ = std::make_unique<InceptionA>(store_, rng, "Mixed_5b", 192, 32);
    a2_ = std::make_unique<InceptionA>(store_, rng, "Mixed_5c", 256, 64);
    a3_ = std::make_unique<InceptionA>(store_, rng, "Mixed_5d", 288, 64);
    b_ = std::make_unique<InceptionB>(store_, rng, "Mixed_6a", 288);
    c6_[0] = std::make_unique<InceptionC>(store_, rng, "Mixed_6b", 768, 128);
    c6_[1] = std::make_unique<InceptionC>(store_, rng, "Mixed_6c", 768, 160);
    c6_[2] = std::make_unique<InceptionC>(store_, rng, "Mixed_6d", 768, 160);
    c6_[3] = std::make_unique<InceptionC>(store_, rng, "Mixed_6e", 768, 192);
    aux_conv0_ = BasicConv(store_, rng, "AuxLogits.conv0", 768, 128, 1);
    aux_conv1_ = BasicConv(store_, rng, "AuxLogits.conv1", 128, 768, 5, 1, 0);
    aux_fc_ = Linear(store_, rng, "AuxLogits.fc", 768, spec.num_classes);
    d_ = std::make_unique<InceptionD>(store_, rng, "Mixed_7a", 768);
    e1_ = std::make_unique<InceptionE>(store_, rng, "Mixed_7b", 1280);
    e2_ = std::make_unique<InceptionE>(store_, rng, "Mixed_7c", 2048);
    head_ = Linear(store_, rng, "head.fc", 2048, spec.num_classes);
  }

 protected:
  ModelOutput forward_impl(const Var& x, ForwardCtx& ctx) override {
    Var h = c3_(c2_(c1_(x, ctx), ctx), ctx);
    h = nn::maxpool2d(h, 3, 3, 2, 2);
    h = c5_(c4_(h, ctx), ctx);
    h = nn::maxpool2d(h, 3, 3, 2, 2);
    h = (*a3_)((*a2_)((*a1_)(h, ctx), ctx), ctx);
    h = (*b_)(h, ctx);
    for (auto& c : c6_) h = (*c)(h, ctx);

    Var aux;
    if (ctx.train) {
      Var a = nn::avgpool2d(h, 5, 5, 3, 3);
      a = aux_conv1_(aux_conv0_(a, ctx), ctx);
      a = nn::adaptive_avgpool2d(a, 1, 1);
      aux = aux_fc_(nn::reshape(a, {a->value.shape[0], 768}));
    }

    h = (*d_)(h, ctx);
    h = (*e2_)((*e1_)(h, ctx), ctx);
    h = nn::adaptive_avgpool2d(h, 1, 1);
    h = nn::dropout(nn::reshape(h, {h->value.shape[0], 2048}), 0.5f, ctx);
    return {head_(h), aux};
  }

 private:
  BasicConv c1_, c2_, c3_, c4_, c5_, aux_conv0_, aux_conv1_;
  std::unique_ptr<InceptionA> a1_, a2_, a3_;
  std::unique_ptr<InceptionB> b_;
  std::array<std::unique_ptr<InceptionC>, 4> c6_;
  std::unique_ptr<InceptionD> d_;
  std::unique_ptr<InceptionE> e1_, e2_;
  Linear aux_fc_, head_;
};

}  // namespace

std::unique_ptr<Model> build_inception_v3(const ModelSpec& spec, Rng& rng) {
  return std::make_unique<InceptionV3Model>(spec, rng);
}

}  // namespace ctg::models
