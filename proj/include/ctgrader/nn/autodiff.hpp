#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "ctgrader/nn/tensor.hpp"

namespace ctg::nn {

struct Node;
using Var = std::shared_ptr<Node>;

// Tape node. Ops that see no grad-requiring input skip the tape entirely, so a
// frozen backbone runs forward-only with no stored activations.
struct Node {
  Tensor value;
  Tensor grad;  // empty until gradient flows
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.numel() == 0) grad = Tensor::zeros(value.shape);
  }
  void zero_grad() { grad = Tensor(); }
};

Var make_var(Tensor t, bool requires_grad = false);

// Accumulates gradients into every reachable node with requires_grad. The root
// must be scalar.
void backward(const Var& root);

struct ForwardCtx {
  bool train = false;
  Rng* rng = nullptr;  // needed only by dropout in train mode
};

Var add(const Var& a, const Var& b);  // same shape, or b broadcast over dim 0
Var mul_scalar(const Var& a, float s);
Var concat(const std::vector<Var>& xs, int axis);
Var slice(const Var& x, int axis, int64_t start, int64_t len);
Var reshape(const Var& x, std::vector<int64_t> shape);
Var permute(const Var& x, const std::vector<int>& dims);
Var broadcast_dim0(const Var& x, int64_t n);  // tile a leading dim of size 1

Var relu(const Var& x);
Var gelu(const Var& x);
Var softmax_lastdim(const Var& x);

Var linear(const Var& x, const Var& w, const Var& b);  // x [N,in] w [out,in] b [out]|null
Var bmm(const Var& a, const Var& b);                   // [B,M,K] x [B,K,N]
Var conv2d(const Var& x, const Var& w, const Var& b, int sh, int sw, int ph, int pw);
Var maxpool2d(const Var& x, int kh, int kw, int sh, int sw, int ph = 0, int pw = 0);
Var avgpool2d(const Var& x, int kh, int kw, int sh, int sw, int ph = 0, int pw = 0);
Var adaptive_avgpool2d(const Var& x, int out_h, int out_w);
Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                 Tensor& running_var, bool train, float momentum = 0.1f, float eps = 1e-5f);
Var layer_norm_lastdim(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-6f);
Var dropout(const Var& x, float p, const ForwardCtx& ctx);

// Mean categorical cross-entropy over the batch, from raw logits.
Var cross_entropy(const Var& logits, const std::vector<int>& labels);

// Inference-side helpers, no tape.
Tensor softmax_rows(const Tensor& logits);
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace ctg::nn
