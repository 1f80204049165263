#include "ctgrader/nn/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace ctg::nn {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto out = std::make_shared<Node>();
  out->value = std::move(value);
  bool req = false;
  for (const auto& p : parents) req = req || (p && p->requires_grad);
  out->requires_grad = req;
  if (req) {
    out->parents = std::move(parents);
    out->backward_fn = std::move(fn);
  }
  return out;
}

void accumulate(const Var& dst, const Tensor& g) {
  if (!dst->requires_grad) return;
  dst->ensure_grad();
  const int64_t n = g.numel();
  float* d = dst->grad.data.data();
  const float* s = g.data.data();
  for (int64_t i = 0; i < n; ++i) d[i] += s[i];
}

struct Extent {
  int64_t outer = 1, axis = 1, inner = 1;
};

Extent extent_of(const std::vector<int64_t>& shape, int axis) {
  Extent e;
  for (int i = 0; i < axis; ++i) e.outer *= shape[i];
  e.axis = shape[axis];
  for (size_t i = axis + 1; i < shape.size(); ++i) e.inner *= shape[i];
  return e;
}

void im2col(const float* x, int64_t C, int64_t H, int64_t W, int kh, int kw, int sh, int sw,
            int ph, int pw, int64_t Ho, int64_t Wo, float* col) {
  const int64_t plane = Ho * Wo;
  for (int64_t c = 0; c < C; ++c) {
    const float* xc = x + c * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        float* row = col + ((c * kh + ki) * kw + kj) * plane;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          const int64_t ih = oh * sh - ph + ki;
          float* out = row + oh * Wo;
          if (ih < 0 || ih >= H) {
            std::fill(out, out + Wo, 0.0f);
            continue;
          }
          const float* xrow = xc + ih * W;
          for (int64_t ow = 0; ow < Wo; ++ow) {
            const int64_t iw = ow * sw - pw + kj;
            out[ow] = (iw >= 0 && iw < W) ? xrow[iw] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im(const float* col, int64_t C, int64_t H, int64_t W, int kh, int kw, int sh, int sw,
            int ph, int pw, int64_t Ho, int64_t Wo, float* x) {
  const int64_t plane = Ho * Wo;
  for (int64_t c = 0; c < C; ++c) {
    float* xc = x + c * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const float* row = col + ((c * kh + ki) * kw + kj) * plane;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          const int64_t ih = oh * sh - ph + ki;
          if (ih < 0 || ih >= H) continue;
          float* xrow = xc + ih * W;
          const float* in = row + oh * Wo;
          for (int64_t ow = 0; ow < Wo; ++ow) {
            const int64_t iw = ow * sw - pw + kj;
            if (iw >= 0 && iw < W) xrow[iw] += in[ow];
          }
        }
      }
    }
  }
}

int64_t conv_out(int64_t in, int k, int s, int p) { return (in + 2 * p - k) / s + 1; }

}  // namespace

Var make_var(Tensor t, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = requires_grad;
  return n;
}

void backward(const Var& root) {
  if (root->value.numel() != 1) throw ArgumentError("backward() root must be scalar");
  // Iterative post-order DFS; backward_fn runs in reverse topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad.data[0] = 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.numel() > 0) n->backward_fn(*n);
  }
}

Var add(const Var& a, const Var& b) {
  const bool bcast = !a->value.same_shape(b->value);
  if (bcast) {
    bool ok = a->value.ndim() == b->value.ndim() && b->value.shape[0] == 1;
    for (size_t i = 1; ok && i < a->value.shape.size(); ++i)
      ok = a->value.shape[i] == b->value.shape[i];
    if (!ok)
      throw ArgumentError("add: shape mismatch " + a->value.shape_str() + " vs " +
                          b->value.shape_str());
  }
  Tensor out = a->value;
  const int64_t bn = b->value.numel();
  for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += b->value.data[i % bn];
  return make_op(std::move(out), {a, b}, [a, b, bn](Node& n) {
    accumulate(a, n.grad);
    if (b->requires_grad) {
      b->ensure_grad();
      for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad.data[i % bn] += n.grad.data[i];
    }
  });
}

Var mul_scalar(const Var& a, float s) {
  Tensor out = a->value;
  for (auto& v : out.data) v *= s;
  return make_op(std::move(out), {a}, [a, s](Node& n) {
    if (!a->requires_grad) return;
    a->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad.data[i] += n.grad.data[i] * s;
  });
}

Var concat(const std::vector<Var>& xs, int axis) {
  if (xs.empty()) throw ArgumentError("concat: empty input list");
  auto shape = xs[0]->value.shape;
  int64_t total_axis = 0;
  for (const auto& x : xs) total_axis += x->value.shape[axis];
  shape[axis] = total_axis;
  Tensor out(shape);
  const Extent e = extent_of(shape, axis);

  int64_t offset = 0;
  for (const auto& x : xs) {
    const int64_t xa = x->value.shape[axis];
    for (int64_t o = 0; o < e.outer; ++o) {
      std::copy_n(x->value.data.data() + o * xa * e.inner, xa * e.inner,
                  out.data.data() + (o * total_axis + offset) * e.inner);
    }
    offset += xa;
  }

  std::vector<Var> parents(xs.begin(), xs.end());
  return make_op(std::move(out), std::move(parents), [xs, e, total_axis, axis](Node& n) {
    int64_t off = 0;
    for (const auto& x : xs) {
      const int64_t xa = x->value.shape[axis];
      if (x->requires_grad) {
        x->ensure_grad();
        for (int64_t o = 0; o < e.outer; ++o) {
          const float* src = n.grad.data.data() + (o * total_axis + off) * e.inner;
          float* dst = x->grad.data.data() + o * xa * e.inner;
          for (int64_t i = 0; i < xa * e.inner; ++i) dst[i] += src[i];
        }
      }
      off += xa;
    }
  });
}

Var slice(const Var& x, int axis, int64_t start, int64_t len) {
  auto shape = x->value.shape;
  if (start < 0 || start + len > shape[axis]) throw ArgumentError("slice out of range");
  const Extent e = extent_of(shape, axis);
  const int64_t full_axis = shape[axis];
  shape[axis] = len;
  Tensor out(shape);
  for (int64_t o = 0; o < e.outer; ++o) {
    std::copy_n(x->value.data.data() + (o * full_axis + start) * e.inner, len * e.inner,
                out.data.data() + o * len * e.inner);
  }
  return make_op(std::move(out), {x}, [x, e, full_axis, start, len](Node& n) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int64_t o = 0; o < e.outer; ++o) {
      const float* src = n.grad.data.data() + o * len * e.inner;
      float* dst = x->grad.data.data() + (o * full_axis + start) * e.inner;
      for (int64_t i = 0; i < len * e.inner; ++i) dst[i] += src[i];
    }
  });
}

Var reshape(const Var& x, std::vector<int64_t> shape) {
  if (Tensor::numel_of(shape) != x->value.numel())
    throw ArgumentError("reshape: element count mismatch");
  Tensor out;
  out.shape = std::move(shape);
  out.data = x->value.data;
  return make_op(std::move(out), {x}, [x](Node& n) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) x->grad.data[i] += n.grad.data[i];
  });
}

namespace {
void permute_copy(const Tensor& in, const std::vector<int>& dims, Tensor& out) {
  const size_t r = in.ndim();
  std::vector<int64_t> in_strides(r, 1), out_shape(r);
  for (int i = static_cast<int>(r) - 2; i >= 0; --i)
    in_strides[i] = in_strides[i + 1] * in.shape[i + 1];
  for (size_t i = 0; i < r; ++i) out_shape[i] = in.shape[dims[i]];
  out = Tensor(out_shape);
  std::vector<int64_t> idx(r, 0);
  const int64_t n = in.numel();
  for (int64_t o = 0; o < n; ++o) {
    int64_t src = 0;
    for (size_t i = 0; i < r; ++i) src += idx[i] * in_strides[dims[i]];
    out.data[o] = in.data[src];
    for (int i = static_cast<int>(r) - 1; i >= 0; --i) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
}
}  // namespace

Var permute(const Var& x, const std::vector<int>& dims) {
  if (dims.size() != x->value.ndim()) throw ArgumentError("permute: rank mismatch");
  Tensor out;
  permute_copy(x->value, dims, out);
  return make_op(std::move(out), {x}, [x, dims](Node& n) {
    if (!x->requires_grad) return;
    std::vector<int> inv(dims.size());
    for (size_t i = 0; i < dims.size(); ++i) inv[dims[i]] = static_cast<int>(i);
    Tensor g;
    permute_copy(n.grad, inv, g);
    accumulate(x, g);
  });
}

Var broadcast_dim0(const Var& x, int64_t n) {
  if (x->value.shape[0] != 1) throw ArgumentError("broadcast_dim0 expects leading dim 1");
  auto shape = x->value.shape;
  shape[0] = n;
  Tensor out(shape);
  const int64_t chunk = x->value.numel();
  for (int64_t i = 0; i < n; ++i)
    std::copy_n(x->value.data.data(), chunk, out.data.data() + i * chunk);
  return make_op(std::move(out), {x}, [x, n, chunk](Node& nd) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      const float* src = nd.grad.data.data() + i * chunk;
      for (int64_t j = 0; j < chunk; ++j) x->grad.data[j] += src[j];
    }
  });
}

Var relu(const Var& x) {
  Tensor out = x->value;
  for (auto& v : out.data) v = v > 0.0f ? v : 0.0f;
  return make_op(std::move(out), {x}, [x](Node& n) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    const float* v = x->value.data.data();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      if (v[i] > 0.0f) x->grad.data[i] += n.grad.data[i];
  });
}

Var gelu(const Var& x) {
  Tensor out = x->value;
  constexpr float kInvSqrt2 = 0.7071067811865476f;
  for (auto& v : out.data) v = 0.5f * v * (1.0f + std::erf(v * kInvSqrt2));
  return make_op(std::move(out), {x}, [x, kInvSqrt2](Node& n) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    constexpr float kInvSqrt2Pi = 0.3989422804014327f;
    const float* v = x->value.data.data();
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      const float xv = v[i];
      const float cdf = 0.5f * (1.0f + std::erf(xv * kInvSqrt2));
      const float pdf = kInvSqrt2Pi * std::exp(-0.5f * xv * xv);
      x->grad.data[i] += n.grad.data[i] * (cdf + xv * pdf);
    }
  });
}

Var softmax_lastdim(const Var& x) {
  const int64_t d = x->value.shape.back();
  const int64_t rows = x->value.numel() / d;
  Tensor out = x->value;
  for (int64_t r = 0; r < rows; ++r) {
    float* row = out.data.data() + r * d;
    const float mx = *std::max_element(row, row + d);
    double sum = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      row[i] = std::exp(row[i] - mx);
      sum += row[i];
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (int64_t i = 0; i < d; ++i) row[i] *= inv;
  }
  return make_op(std::move(out), {x}, [x, rows, d](Node& n) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const float* y = n.value.data.data() + r * d;
      const float* dy = n.grad.data.data() + r * d;
      float* dx = x->grad.data.data() + r * d;
      double dot = 0.0;
      for (int64_t i = 0; i < d; ++i) dot += double(dy[i]) * y[i];
      for (int64_t i = 0; i < d; ++i) dx[i] += y[i] * (dy[i] - static_cast<float>(dot));
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const int64_t in = w->value.shape[1];
  const int64_t out_dim = w->value.shape[0];
  const int64_t n = x->value.numel() / in;
  if (x->value.shape.back() != in) throw ArgumentError("linear: input width mismatch");

  Tensor out({n, out_dim});
  {
    CMapM X(x->value.data.data(), n, in);
    CMapM W(w->value.data.data(), out_dim, in);
    MapM Y(out.data.data(), n, out_dim);
    Y.noalias() = X * W.transpose();
    if (b) {
      CMapM B(b->value.data.data(), 1, out_dim);
      Y.rowwise() += B.row(0);
    }
  }
  std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
  return make_op(std::move(out), std::move(parents), [x, w, b, n, in, out_dim](Node& nd) {
    CMapM dY(nd.grad.data.data(), n, out_dim);
    if (x->requires_grad) {
      x->ensure_grad();
      MapM dX(x->grad.data.data(), n, in);
      CMapM W(w->value.data.data(), out_dim, in);
      dX.noalias() += dY * W;
    }
    if (w->requires_grad) {
      w->ensure_grad();
      MapM dW(w->grad.data.data(), out_dim, in);
      CMapM X(x->value.data.data(), n, in);
      dW.noalias() += dY.transpose() * X;
    }
    if (b && b->requires_grad) {
      b->ensure_grad();
      // Fixed-order accumulation: Eigen's redux kernels pick their vector
      // split from the pointer alignment, which changes low bits per
      // allocation and breaks run-to-run determinism.
      for (int64_t c = 0; c < out_dim; ++c) {
        double acc = 0.0;
        for (int64_t r = 0; r < n; ++r) acc += nd.grad.data[r * out_dim + c];
        b->grad.data[c] += static_cast<float>(acc);
      }
    }
  });
}

Var bmm(const Var& a, const Var& b) {
  const auto& as = a->value.shape;
  const auto& bs = b->value.shape;
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[1])
    throw ArgumentError("bmm: shape mismatch " + a->value.shape_str() + " x " +
                        b->value.shape_str());
  const int64_t B = as[0], M = as[1], K = as[2], N = bs[2];
  Tensor out({B, M, N});
  for (int64_t i = 0; i < B; ++i) {
    CMapM A(a->value.data.data() + i * M * K, M, K);
    CMapM Bm(b->value.data.data() + i * K * N, K, N);
    MapM Y(out.data.data() + i * M * N, M, N);
    Y.noalias() = A * Bm;
  }
  return make_op(std::move(out), {a, b}, [a, b, B, M, K, N](Node& nd) {
    for (int64_t i = 0; i < B; ++i) {
      CMapM dY(nd.grad.data.data() + i * M * N, M, N);
      if (a->requires_grad) {
        a->ensure_grad();
        MapM dA(a->grad.data.data() + i * M * K, M, K);
        CMapM Bm(b->value.data.data() + i * K * N, K, N);
        dA.noalias() += dY * Bm.transpose();
      }
      if (b->requires_grad) {
        b->ensure_grad();
        MapM dB(b->grad.data.data() + i * K * N, K, N);
        CMapM A(a->value.data.data() + i * M * K, M, K);
        dB.noalias() += A.transpose() * dY;
      }
    }
  });
}

Var conv2d(const Var& x, const Var& w, const Var& b, int sh, int sw, int ph, int pw) {
  const auto& xs = x->value.shape;
  const auto& ws = w->value.shape;
  if (xs.size() != 4 || ws.size() != 4)
    throw ArgumentError("conv2d expects NCHW input and OIHW weights");
  if (xs[1] != ws[1])
    throw ArgumentError("conv2d: channel mismatch " + x->value.shape_str() + " vs " +
                        w->value.shape_str());
  const int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int64_t Cout = ws[0];
  const int kh = static_cast<int>(ws[2]), kw = static_cast<int>(ws[3]);
  const int64_t Ho = conv_out(H, kh, sh, ph), Wo = conv_out(W, kw, sw, pw);
  if (Ho < 1 || Wo < 1)
    throw ArgumentError("conv2d: input " + x->value.shape_str() + " too small for kernel");
  const int64_t K = C * kh * kw;
  const int64_t plane = Ho * Wo;

  Tensor out({N, Cout, Ho, Wo});
  std::vector<float> col(K * plane);
  for (int64_t i = 0; i < N; ++i) {
    im2col(x->value.data.data() + i * C * H * W, C, H, W, kh, kw, sh, sw, ph, pw, Ho, Wo,
           col.data());
    CMapM Wm(w->value.data.data(), Cout, K);
    CMapM Cm(col.data(), K, plane);
    MapM Y(out.data.data() + i * Cout * plane, Cout, plane);
    Y.noalias() = Wm * Cm;
    if (b) {
      const float* bias = b->value.data.data();
      for (int64_t c = 0; c < Cout; ++c) Y.row(c).array() += bias[c];
    }
  }

  std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
  auto fn = [x, w, b, N, C, H, W, Cout, kh, kw, sh, sw, ph, pw, Ho, Wo, K, plane](Node& nd) {
    std::vector<float> col(K * plane);
    std::vector<float> dcol;
    for (int64_t i = 0; i < N; ++i) {
      CMapM dY(nd.grad.data.data() + i * Cout * plane, Cout, plane);
      if (w->requires_grad) {
        // The im2col buffer is recomputed instead of kept from forward; storing
        // it per conv would dominate activation memory.
        im2col(x->value.data.data() + i * C * H * W, C, H, W, kh, kw, sh, sw, ph, pw, Ho, Wo,
               col.data());
        w->ensure_grad();
        MapM dW(w->grad.data.data(), Cout, K);
        CMapM Cm(col.data(), K, plane);
        dW.noalias() += dY * Cm.transpose();
      }
      if (b && b->requires_grad) {
        b->ensure_grad();
        // Explicit loop for the same determinism reason as in linear().
        for (int64_t c = 0; c < Cout; ++c) {
          const float* row = nd.grad.data.data() + (i * Cout + c) * plane;
          double acc = 0.0;
          for (int64_t j = 0; j < plane; ++j) acc += row[j];
          b->grad.data[c] += static_cast<float>(acc);
        }
      }
      if (x->requires_grad) {
        x->ensure_grad();
        dcol.resize(K * plane);
        CMapM Wm(w->value.data.data(), Cout, K);
        MapM dC(dcol.data(), K, plane);
        dC.noalias() = Wm.transpose() * dY;
        col2im(dcol.data(), C, H, W, kh, kw, sh, sw, ph, pw, Ho, Wo,
               x->grad.data.data() + i * C * H * W);
      }
    }
  };
  return make_op(std::move(out), std::move(parents), std::move(fn));
}

Var maxpool2d(const Var& x, int kh, int kw, int sh, int sw, int ph, int pw) {
  const auto& xs = x->value.shape;
  const int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int64_t Ho = conv_out(H, kh, sh, ph), Wo = conv_out(W, kw, sw, pw);
  if (Ho < 1 || Wo < 1) throw ArgumentError("maxpool2d: input too small");
  Tensor out({N, C, Ho, Wo});
  auto indices = std::make_shared<std::vector<int64_t>>(out.numel());
  int64_t o = 0;
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const float* xp = x->value.data.data() + nc * H * W;
    for (int64_t oh = 0; oh < Ho; ++oh) {
      for (int64_t ow = 0; ow < Wo; ++ow, ++o) {
        float best = -std::numeric_limits<float>::infinity();
        int64_t best_idx = -1;
        for (int ki = 0; ki < kh; ++ki) {
          const int64_t ih = oh * sh - ph + ki;
          if (ih < 0 || ih >= H) continue;
          for (int kj = 0; kj < kw; ++kj) {
            const int64_t iw = ow * sw - pw + kj;
            if (iw < 0 || iw >= W) continue;
            const float v = xp[ih * W + iw];
            if (v > best) {
              best = v;
              best_idx = nc * H * W + ih * W + iw;
            }
          }
        }
        out.data[o] = best;
        (*indices)[o] = best_idx;
      }
    }
  }
  return make_op(std::move(out), {x}, [x, indices](Node& nd) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int64_t i = 0; i < nd.grad.numel(); ++i) {
      const int64_t src = (*indices)[i];
      if (src >= 0) x->grad.data[src] += nd.grad.data[i];
    }
  });
}

Var avgpool2d(const Var& x, int kh, int kw, int sh, int sw, int ph, int pw) {
  const auto& xs = x->value.shape;
  const int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int64_t Ho = conv_out(H, kh, sh, ph), Wo = conv_out(W, kw, sw, pw);
  if (Ho < 1 || Wo < 1) throw ArgumentError("avgpool2d: input too small");
  Tensor out({N, C, Ho, Wo});
  const float inv = 1.0f / static_cast<float>(kh * kw);  // padded cells count in the divisor
  int64_t o = 0;
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const float* xp = x->value.data.data() + nc * H * W;
    for (int64_t oh = 0; oh < Ho; ++oh) {
      for (int64_t ow = 0; ow < Wo; ++ow, ++o) {
        double sum = 0.0;
        for (int ki = 0; ki < kh; ++ki) {
          const int64_t ih = oh * sh - ph + ki;
          if (ih < 0 || ih >= H) continue;
          for (int kj = 0; kj < kw; ++kj) {
            const int64_t iw = ow * sw - pw + kj;
            if (iw >= 0 && iw < W) sum += xp[ih * W + iw];
          }
        }
        out.data[o] = static_cast<float>(sum) * inv;
      }
    }
  }
  return make_op(std::move(out), {x}, [x, N, C, H, W, Ho, Wo, kh, kw, sh, sw, ph, pw, inv](Node& nd) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    int64_t o = 0;
    for (int64_t nc = 0; nc < N * C; ++nc) {
      float* dx = x->grad.data.data() + nc * H * W;
      for (int64_t oh = 0; oh < Ho; ++oh) {
        for (int64_t ow = 0; ow < Wo; ++ow, ++o) {
          const float g = nd.grad.data[o] * inv;
          for (int ki = 0; ki < kh; ++ki) {
            const int64_t ih = oh * sh - ph + ki;
            if (ih < 0 || ih >= H) continue;
            for (int kj = 0; kj < kw; ++kj) {
              const int64_t iw = ow * sw - pw + kj;
              if (iw >= 0 && iw < W) dx[ih * W + iw] += g;
            }
          }
        }
      }
    }
  });
}

Var adaptive_avgpool2d(const Var& x, int out_h, int out_w) {
  const auto& xs = x->value.shape;
  const int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  auto bin_start = [](int64_t i, int64_t in, int64_t out) { return (i * in) / out; };
  auto bin_end = [](int64_t i, int64_t in, int64_t out) { return ((i + 1) * in + out - 1) / out; };
  Tensor out({N, C, out_h, out_w});
  int64_t o = 0;
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const float* xp = x->value.data.data() + nc * H * W;
    for (int64_t oh = 0; oh < out_h; ++oh) {
      const int64_t h0 = bin_start(oh, H, out_h), h1 = bin_end(oh, H, out_h);
      for (int64_t ow = 0; ow < out_w; ++ow, ++o) {
        const int64_t w0 = bin_start(ow, W, out_w), w1 = bin_end(ow, W, out_w);
        double sum = 0.0;
        for (int64_t ih = h0; ih < h1; ++ih)
          for (int64_t iw = w0; iw < w1; ++iw) sum += xp[ih * W + iw];
        out.data[o] = static_cast<float>(sum / double((h1 - h0) * (w1 - w0)));
      }
    }
  }
  return make_op(std::move(out), {x}, [x, N, C, H, W, out_h, out_w, bin_start, bin_end](Node& nd) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    int64_t o = 0;
    for (int64_t nc = 0; nc < N * C; ++nc) {
      float* dx = x->grad.data.data() + nc * H * W;
      for (int64_t oh = 0; oh < out_h; ++oh) {
        const int64_t h0 = bin_start(oh, H, out_h), h1 = bin_end(oh, H, out_h);
        for (int64_t ow = 0; ow < out_w; ++ow, ++o) {
          const int64_t w0 = bin_start(ow, W, out_w), w1 = bin_end(ow, W, out_w);
          const float g = nd.grad.data[o] / static_cast<float>((h1 - h0) * (w1 - w0));
          for (int64_t ih = h0; ih < h1; ++ih)
            for (int64_t iw = w0; iw < w1; ++iw) dx[ih * W + iw] += g;
        }
      }
    }
  });
}

Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                 Tensor& running_var, bool train, float momentum, float eps) {
  const auto& xs = x->value.shape;
  const int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int64_t plane = H * W;
  const int64_t count = N * plane;
  Tensor out(xs);

  if (!train) {
    // Linear transform with frozen statistics.
    auto istd = std::make_shared<std::vector<float>>(C);
    auto mean = std::make_shared<std::vector<float>>(C);
    std::vector<float> scale(C), shift(C);
    for (int64_t c = 0; c < C; ++c) {
      (*istd)[c] = 1.0f / std::sqrt(running_var.data[c] + eps);
      (*mean)[c] = running_mean.data[c];
      scale[c] = gamma->value.data[c] * (*istd)[c];
      shift[c] = beta->value.data[c] - running_mean.data[c] * scale[c];
    }
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        const float* xp = x->value.data.data() + (n * C + c) * plane;
        float* yp = out.data.data() + (n * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) yp[i] = xp[i] * scale[c] + shift[c];
      }
    auto sc = std::make_shared<std::vector<float>>(std::move(scale));
    return make_op(std::move(out), {x, gamma, beta},
                   [x, gamma, beta, sc, istd, mean, N, C, plane](Node& nd) {
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          const float* g = nd.grad.data.data() + (n * C + c) * plane;
          if (x->requires_grad) {
            x->ensure_grad();
            float* dx = x->grad.data.data() + (n * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) dx[i] += g[i] * (*sc)[c];
          }
          if (gamma->requires_grad) {
            gamma->ensure_grad();
            const float* xp = x->value.data.data() + (n * C + c) * plane;
            double acc = 0.0;
            for (int64_t i = 0; i < plane; ++i) acc += double(g[i]) * (xp[i] - (*mean)[c]);
            gamma->grad.data[c] += static_cast<float>(acc) * (*istd)[c];
          }
          if (beta->requires_grad) {
            beta->ensure_grad();
            double acc = 0.0;
            for (int64_t i = 0; i < plane; ++i) acc += g[i];
            beta->grad.data[c] += static_cast<float>(acc);
          }
        }
    });
  }

  auto xhat = std::make_shared<Tensor>(xs);
  auto inv_std = std::make_shared<std::vector<float>>(C);
  for (int64_t c = 0; c < C; ++c) {
    double sum = 0.0, sq = 0.0;
    for (int64_t n = 0; n < N; ++n) {
      const float* xp = x->value.data.data() + (n * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        sum += xp[i];
        sq += double(xp[i]) * xp[i];
      }
    }
    const double mean = sum / count;
    const double var = std::max(0.0, sq / count - mean * mean);
    const float istd = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*inv_std)[c] = istd;
    const float g = gamma->value.data[c], b = beta->value.data[c];
    for (int64_t n = 0; n < N; ++n) {
      const float* xp = x->value.data.data() + (n * C + c) * plane;
      float* hp = xhat->data.data() + (n * C + c) * plane;
      float* yp = out.data.data() + (n * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        hp[i] = (xp[i] - static_cast<float>(mean)) * istd;
        yp[i] = hp[i] * g + b;
      }
    }
    const double unbiased = count > 1 ? var * count / (count - 1) : var;
    running_mean.data[c] =
        (1.0f - momentum) * running_mean.data[c] + momentum * static_cast<float>(mean);
    running_var.data[c] =
        (1.0f - momentum) * running_var.data[c] + momentum * static_cast<float>(unbiased);
  }

  return make_op(std::move(out), {x, gamma, beta},
                 [x, gamma, beta, xhat, inv_std, N, C, plane, count](Node& nd) {
    for (int64_t c = 0; c < C; ++c) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int64_t n = 0; n < N; ++n) {
        const float* dy = nd.grad.data.data() + (n * C + c) * plane;
        const float* hp = xhat->data.data() + (n * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          sum_dy += dy[i];
          sum_dy_xhat += double(dy[i]) * hp[i];
        }
      }
      if (gamma->requires_grad) {
        gamma->ensure_grad();
        gamma->grad.data[c] += static_cast<float>(sum_dy_xhat);
      }
      if (beta->requires_grad) {
        beta->ensure_grad();
        beta->grad.data[c] += static_cast<float>(sum_dy);
      }
      if (x->requires_grad) {
        x->ensure_grad();
        const float g = gamma->value.data[c];
        const float istd = (*inv_std)[c];
        const float k = g * istd / count;
        for (int64_t n = 0; n < N; ++n) {
          const float* dy = nd.grad.data.data() + (n * C + c) * plane;
          const float* hp = xhat->data.data() + (n * C + c) * plane;
          float* dx = x->grad.data.data() + (n * C + c) * plane;
          for (int64_t i = 0; i < plane; ++i) {
            dx[i] += k * (count * dy[i] - static_cast<float>(sum_dy) -
                          hp[i] * static_cast<float>(sum_dy_xhat));
          }
        }
      }
    }
  });
}

Var layer_norm_lastdim(const Var& x, const Var& gamma, const Var& beta, float eps) {
  const int64_t d = x->value.shape.back();
  const int64_t rows = x->value.numel() / d;
  Tensor out(x->value.shape);
  auto xhat = std::make_shared<Tensor>(x->value.shape);
  auto inv_std = std::make_shared<std::vector<float>>(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const float* xp = x->value.data.data() + r * d;
    double sum = 0.0, sq = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      sum += xp[i];
      sq += double(xp[i]) * xp[i];
    }
    const double mean = sum / d;
    const double var = std::max(0.0, sq / d - mean * mean);
    const float istd = static_cast<float>(1.0 / std::sqrt(var + eps));
    (*inv_std)[r] = istd;
    float* hp = xhat->data.data() + r * d;
    float* yp = out.data.data() + r * d;
    for (int64_t i = 0; i < d; ++i) {
      hp[i] = (xp[i] - static_cast<float>(mean)) * istd;
      yp[i] = hp[i] * gamma->value.data[i] + beta->value.data[i];
    }
  }
  return make_op(std::move(out), {x, gamma, beta},
                 [x, gamma, beta, xhat, inv_std, rows, d](Node& nd) {
    for (int64_t r = 0; r < rows; ++r) {
      const float* dy = nd.grad.data.data() + r * d;
      const float* hp = xhat->data.data() + r * d;
      if (gamma->requires_grad) {
        gamma->ensure_grad();
        for (int64_t i = 0; i < d; ++i) gamma->grad.data[i] += dy[i] * hp[i];
      }
      if (beta->requires_grad) {
        beta->ensure_grad();
        for (int64_t i = 0; i < d; ++i) beta->grad.data[i] += dy[i];
      }
      if (x->requires_grad) {
        x->ensure_grad();
        double sum_g = 0.0, sum_gh = 0.0;
        for (int64_t i = 0; i < d; ++i) {
          const double g = double(dy[i]) * gamma->value.data[i];
          sum_g += g;
          sum_gh += g * hp[i];
        }
        float* dx = x->grad.data.data() + r * d;
        const float istd = (*inv_std)[r];
        for (int64_t i = 0; i < d; ++i) {
          const float g = dy[i] * gamma->value.data[i];
          dx[i] += istd * (g - static_cast<float>(sum_g / d) -
                           hp[i] * static_cast<float>(sum_gh / d));
        }
      }
    }
  });
}

Var dropout(const Var& x, float p, const ForwardCtx& ctx) {
  if (!ctx.train || p <= 0.0f) return x;
  if (!ctx.rng) throw ArgumentError("dropout in train mode needs an RNG in the forward context");
  const float keep = 1.0f - p;
  auto mask = std::make_shared<std::vector<float>>(x->value.numel());
  Tensor out = x->value;
  for (int64_t i = 0; i < out.numel(); ++i) {
    const float m = ctx.rng->uniform() >= p ? 1.0f / keep : 0.0f;
    (*mask)[i] = m;
    out.data[i] *= m;
  }
  return make_op(std::move(out), {x}, [x, mask](Node& nd) {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int64_t i = 0; i < nd.grad.numel(); ++i)
      x->grad.data[i] += nd.grad.data[i] * (*mask)[i];
  });
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
  const int64_t k = logits->value.shape.back();
  const int64_t n = logits->value.numel() / k;
  if (static_cast<int64_t>(labels.size()) != n)
    throw ArgumentError("cross_entropy: batch size mismatch");
  auto probs = std::make_shared<Tensor>(softmax_rows(logits->value));
  double loss = 0.0;
  for (int64_t r = 0; r < n; ++r) {
    const float* row = logits->value.data.data() + r * k;
    const float mx = *std::max_element(row, row + k);
    double lse = 0.0;
    for (int64_t i = 0; i < k; ++i) lse += std::exp(double(row[i]) - mx);
    loss += mx + std::log(lse) - row[labels[r]];
  }
  Tensor out = Tensor::scalar(static_cast<float>(loss / n));
  return make_op(std::move(out), {logits}, [logits, probs, labels, n, k](Node& nd) {
    if (!logits->requires_grad) return;
    logits->ensure_grad();
    const float g = nd.grad.data[0] / static_cast<float>(n);
    for (int64_t r = 0; r < n; ++r) {
      const float* p = probs->data.data() + r * k;
      float* dl = logits->grad.data.data() + r * k;
      for (int64_t i = 0; i < k; ++i) dl[i] += g * (p[i] - (labels[r] == i ? 1.0f : 0.0f));
    }
  });
}

Tensor softmax_rows(const Tensor& logits) {
  const int64_t k = logits.shape.back();
  const int64_t n = logits.numel() / k;
  Tensor out = logits;
  for (int64_t r = 0; r < n; ++r) {
    float* row = out.data.data() + r * k;
    const float mx = *std::max_element(row, row + k);
    double sum = 0.0;
    for (int64_t i = 0; i < k; ++i) {
      row[i] = std::exp(row[i] - mx);
      sum += row[i];
    }
    for (int64_t i = 0; i < k; ++i) row[i] = static_cast<float>(row[i] / sum);
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const int64_t k = logits.shape.back();
  const int64_t n = logits.numel() / k;
  std::vector<int> out(n);
  for (int64_t r = 0; r < n; ++r) {
    const float* row = logits.data.data() + r * k;
    out[r] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

}  // namespace ctg::nn
