#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "ega/kernels.hpp"
#include "ega/tensor.hpp"

namespace ega {

namespace detail {

inline void require_rank(const TensorPtr& t, int rank, const char* what) {
  if (t->rank() != rank)
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t->shape));
}

inline bool any_requires_grad(std::initializer_list<TensorPtr> ts) {
  for (const auto& t : ts)
    if (t && t->requires_grad) return true;
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: input N x C x H x W, weight K x C x R x S, bias K
// ---------------------------------------------------------------------------

inline TensorPtr conv2d(Tape& tape, const TensorPtr& x, const TensorPtr& w, const TensorPtr& b,
                        int stride = 1, int pad = 0) {
  detail::require_rank(x, 4, "conv2d input");
  detail::require_rank(w, 4, "conv2d weight");
  detail::require_rank(b, 1, "conv2d bias");
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  if (pad < 0) throw ContractError("conv2d: pad must be >= 0");
  const int N = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
  const int K = w->dim(0), R = w->dim(2), S = w->dim(3);
  if (w->dim(1) != C)
    throw DimensionError("conv2d: input shape " + detail::shape_str(x->shape) +
                         " does not match weight shape " + detail::shape_str(w->shape));
  if (b->dim(0) != K)
    throw DimensionError("conv2d: bias shape " + detail::shape_str(b->shape) +
                         " does not match weight shape " + detail::shape_str(w->shape));
  auto s = kernels::conv2d_shape(C, K, H, W, R, S, stride, pad);
  if (s.OH < 1 || s.OW < 1)
    throw DimensionError("conv2d: kernel " + detail::shape_str(w->shape) +
                         " does not fit input " + detail::shape_str(x->shape));

  auto out = Tensor::make({N, K, s.OH, s.OW}, detail::any_requires_grad({x, w, b}));

  std::vector<float> wp_fwd, bias_pad;
  if (s.fast) {
    wp_fwd = kernels::pack_w_fwd(w->data.data(), C, K);
    bias_pad = kernels::pad_bias16(b->data.data(), K);
  }
  const size_t in_plane = size_t(C) * H * W, out_plane = size_t(K) * s.OH * s.OW;
  parallel_chunks(N, [&](int64_t lo, int64_t hi) {
    for (int64_t n = lo; n < hi; ++n)
      kernels::conv_fwd_one(s, x->data.data() + size_t(n) * in_plane, w->data.data(),
                            wp_fwd.data(), bias_pad.data(), b->data.data(),
                            out->data.data() + size_t(n) * out_plane);
  });

  if (!out->requires_grad) return out;
  tape.record("conv2d", {x, w, b}, out, [x, w, b, out, s, N, in_plane, out_plane] {
    const float* dy = out->grad.data();
    if (x->requires_grad) {
      std::vector<float> wp_dx;
      if (s.fast) wp_dx = kernels::pack_w_dx(w->data.data(), s.C, s.K);
      parallel_chunks(N, [&](int64_t lo, int64_t hi) {
        for (int64_t n = lo; n < hi; ++n)
          kernels::conv_dx_one(s, x->grad.data() + size_t(n) * in_plane, w->data.data(),
                               wp_dx.data(), dy + size_t(n) * out_plane);
      });
    }
    if (w->requires_grad) {
      // per-sample partials reduced in sample order: bit-identical for any
      // thread count
      const size_t wsz = w->data.size();
      std::vector<float> slabs(size_t(N) * wsz, 0.0f);
      parallel_chunks(N, [&](int64_t lo, int64_t hi) {
        for (int64_t n = lo; n < hi; ++n)
          kernels::conv_dw_one(s, x->data.data() + size_t(n) * in_plane,
                               dy + size_t(n) * out_plane, slabs.data() + size_t(n) * wsz);
      });
      for (int64_t n = 0; n < N; ++n) {
        const float* src = slabs.data() + size_t(n) * wsz;
        for (size_t i = 0; i < wsz; ++i) w->grad[i] += src[i];
      }
    }
    if (b->requires_grad) {
      const size_t hw = size_t(s.OH) * s.OW;
      for (int64_t n = 0; n < N; ++n)
        for (int k = 0; k < s.K; ++k) {
          const float* g = dy + size_t(n) * out_plane + size_t(k) * hw;
          double acc = 0.0;
          for (size_t i = 0; i < hw; ++i) acc += g[i];
          b->grad[size_t(k)] += float(acc);
        }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

inline TensorPtr relu(Tape& tape, const TensorPtr& x) {
  auto out = Tensor::make(x->shape, x->requires_grad);
  const int64_t n = x->numel();
  parallel_chunks(n, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) out->data[size_t(i)] = x->data[size_t(i)] > 0.0f ? x->data[size_t(i)] : 0.0f;
  });
  if (!out->requires_grad) return out;
  tape.record("relu", {x}, out, [x, out, n] {
    parallel_chunks(n, [&](int64_t lo, int64_t hi) {
      for (int64_t i = lo; i < hi; ++i)
        if (out->data[size_t(i)] > 0.0f) x->grad[size_t(i)] += out->grad[size_t(i)];
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// max_pool2: 2x2 non-overlapping, first-occurrence (row-major) tie break
// ---------------------------------------------------------------------------

inline TensorPtr max_pool2(Tape& tape, const TensorPtr& x) {
  detail::require_rank(x, 4, "max_pool2 input");
  const int N = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
  if (H % 2 != 0 || W % 2 != 0)
    throw DimensionError("max_pool2: spatial dims must be even, got " + detail::shape_str(x->shape));
  const int OH = H / 2, OW = W / 2;
  auto out = Tensor::make({N, C, OH, OW}, x->requires_grad);
  auto argmax = std::make_shared<std::vector<int32_t>>(size_t(N) * C * OH * OW);
  const int64_t planes = int64_t(N) * C;
  parallel_chunks(planes, [&](int64_t lo, int64_t hi) {
    for (int64_t p = lo; p < hi; ++p) {
      const float* in = x->data.data() + size_t(p) * H * W;
      float* o = out->data.data() + size_t(p) * OH * OW;
      int32_t* am = argmax->data() + size_t(p) * OH * OW;
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          int32_t best = (2 * oy) * W + 2 * ox;
          float bv = in[best];
          const int32_t cand[3] = {(2 * oy) * W + 2 * ox + 1, (2 * oy + 1) * W + 2 * ox,
                                   (2 * oy + 1) * W + 2 * ox + 1};
          for (int32_t idx : cand)
            if (in[idx] > bv) { bv = in[idx]; best = idx; }
          o[oy * OW + ox] = bv;
          am[oy * OW + ox] = best;
        }
    }
  });
  if (!out->requires_grad) return out;
  tape.record("max_pool2", {x}, out, [x, out, argmax, planes, H, W, OH, OW] {
    parallel_chunks(planes, [&](int64_t lo, int64_t hi) {
      for (int64_t p = lo; p < hi; ++p) {
        float* gx = x->grad.data() + size_t(p) * H * W;
        const float* go = out->grad.data() + size_t(p) * OH * OW;
        const int32_t* am = argmax->data() + size_t(p) * OH * OW;
        for (int i = 0; i < OH * OW; ++i) gx[am[i]] += go[i];
      }
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// global_avg_pool: N x C x H x W -> N x C
// ---------------------------------------------------------------------------

inline TensorPtr global_avg_pool(Tape& tape, const TensorPtr& x) {
  detail::require_rank(x, 4, "global_avg_pool input");
  const int N = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
  const size_t hw = size_t(H) * W;
  auto out = Tensor::make({N, C}, x->requires_grad);
  const int64_t planes = int64_t(N) * C;
  parallel_chunks(planes, [&](int64_t lo, int64_t hi) {
    for (int64_t p = lo; p < hi; ++p) {
      const float* in = x->data.data() + size_t(p) * hw;
      double acc = 0.0;
      for (size_t i = 0; i < hw; ++i) acc += in[i];
      out->data[size_t(p)] = float(acc / double(hw));
    }
  });
  if (!out->requires_grad) return out;
  tape.record("global_avg_pool", {x}, out, [x, out, planes, hw] {
    const float inv = 1.0f / float(hw);
    parallel_chunks(planes, [&](int64_t lo, int64_t hi) {
      for (int64_t p = lo; p < hi; ++p) {
        float g = out->grad[size_t(p)] * inv;
        float* gx = x->grad.data() + size_t(p) * hw;
        for (size_t i = 0; i < hw; ++i) gx[i] += g;
      }
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// linear: input N x K, weight C x K, bias C -> N x C
// ---------------------------------------------------------------------------

inline TensorPtr linear(Tape& tape, const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
  detail::require_rank(x, 2, "linear input");
  detail::require_rank(w, 2, "linear weight");
  detail::require_rank(b, 1, "linear bias");
  const int N = x->dim(0), K = x->dim(1), C = w->dim(0);
  if (w->dim(1) != K || b->dim(0) != C)
    throw DimensionError("linear: input " + detail::shape_str(x->shape) + " vs weight " +
                         detail::shape_str(w->shape) + " vs bias " + detail::shape_str(b->shape));
  auto out = Tensor::make({N, C}, detail::any_requires_grad({x, w, b}));
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double acc = b->data[size_t(c)];
      const float* xr = x->data.data() + size_t(n) * K;
      const float* wr = w->data.data() + size_t(c) * K;
      for (int k = 0; k < K; ++k) acc += double(xr[k]) * wr[k];
      out->data[size_t(n) * C + c] = float(acc);
    }
  if (!out->requires_grad) return out;
  tape.record("linear", {x, w, b}, out, [x, w, b, out, N, K, C] {
    const float* dy = out->grad.data();
    if (x->requires_grad)
      for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k) {
          float acc = 0.0f;
          for (int c = 0; c < C; ++c) acc += dy[size_t(n) * C + c] * w->data[size_t(c) * K + k];
          x->grad[size_t(n) * K + k] += acc;
        }
    if (w->requires_grad)
      for (int c = 0; c < C; ++c)
        for (int k = 0; k < K; ++k) {
          float acc = 0.0f;
          for (int n = 0; n < N; ++n) acc += dy[size_t(n) * C + c] * x->data[size_t(n) * K + k];
          w->grad[size_t(c) * K + k] += acc;
        }
    if (b->requires_grad)
      for (int c = 0; c < C; ++c) {
        float acc = 0.0f;
        for (int n = 0; n < N; ++n) acc += dy[size_t(n) * C + c];
        b->grad[size_t(c)] += acc;
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// softmax cross entropy, mean over batch, max-subtraction stabilized
// ---------------------------------------------------------------------------

inline TensorPtr softmax_cross_entropy(Tape& tape, const TensorPtr& logits,
                                       const std::vector<int>& labels) {
  detail::require_rank(logits, 2, "softmax_cross_entropy logits");
  const int N = logits->dim(0), C = logits->dim(1);
  if (int(labels.size()) != N)
    throw ContractError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                        " labels for batch of " + std::to_string(N));
  for (int n = 0; n < N; ++n)
    if (labels[n] < 0 || labels[n] >= C)
      throw LabelError("label " + std::to_string(labels[n]) + " outside [0, " + std::to_string(C) +
                       ") at index " + std::to_string(n));
  auto probs = std::make_shared<std::vector<float>>(size_t(N) * C);
  double loss_acc = 0.0;
  for (int n = 0; n < N; ++n) {
    const float* z = logits->data.data() + size_t(n) * C;
    float mx = z[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, z[c]);
    double denom = 0.0;
    for (int c = 0; c < C; ++c) denom += std::exp(double(z[c]) - mx);
    for (int c = 0; c < C; ++c) (*probs)[size_t(n) * C + c] = float(std::exp(double(z[c]) - mx) / denom);
    loss_acc += std::log(denom) - (double(z[labels[size_t(n)]]) - mx);
  }
  auto out = Tensor::make({1}, logits->requires_grad);
  out->set_scalar(loss_acc / N);
  if (!out->requires_grad) return out;
  auto labels_copy = labels;
  tape.record("softmax_cross_entropy", {logits}, out, [logits, out, probs, labels_copy, N, C] {
    const float g = out->grad[0] / float(N);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        float p = (*probs)[size_t(n) * C + c];
        logits->grad[size_t(n) * C + c] += g * (p - (c == labels_copy[size_t(n)] ? 1.0f : 0.0f));
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// batch norm over N x C x H x W with external running statistics
// ---------------------------------------------------------------------------

struct BnMode {
  bool training = true;
  bool update_running_stats = true;
};

inline TensorPtr batch_norm(Tape& tape, const TensorPtr& x, const TensorPtr& gamma,
                            const TensorPtr& beta, const TensorPtr& running_mean,
                            const TensorPtr& running_var, BnMode mode, float momentum = 0.1f,
                            float eps = 1e-5f) {
  detail::require_rank(x, 4, "batch_norm input");
  const int N = x->dim(0), C = x->dim(1), H = x->dim(2), W = x->dim(3);
  if (gamma->numel() != C || beta->numel() != C || running_mean->numel() != C ||
      running_var->numel() != C)
    throw DimensionError("batch_norm: parameter size does not match " + std::to_string(C) +
                         " channels");
  if (mode.training && N < 2)
    throw ContractError("batch_norm: degenerate batch of size " + std::to_string(N) +
                        " in train mode");
  const size_t hw = size_t(H) * W, chw = size_t(C) * hw;
  auto out = Tensor::make(x->shape, detail::any_requires_grad({x, gamma, beta}));

  auto mean = std::make_shared<std::vector<float>>(size_t(C));
  auto inv = std::make_shared<std::vector<float>>(size_t(C));

  if (mode.training) {
    const double m = double(N) * hw;
    parallel_chunks(C, [&](int64_t lo, int64_t hi) {
      for (int64_t c = lo; c < hi; ++c) {
        double s = 0.0, s2 = 0.0;
        for (int n = 0; n < N; ++n) {
          const float* p = x->data.data() + size_t(n) * chw + size_t(c) * hw;
          for (size_t i = 0; i < hw; ++i) {
            s += p[i];
            s2 += double(p[i]) * p[i];
          }
        }
        double mu = s / m;
        double var = s2 / m - mu * mu;
        if (var < 0.0) var = 0.0;
        (*mean)[size_t(c)] = float(mu);
        (*inv)[size_t(c)] = float(1.0 / std::sqrt(var + double(eps)));
        if (mode.update_running_stats) {
          double unbiased = m > 1.0 ? var * m / (m - 1.0) : var;
          running_mean->data[size_t(c)] =
              (1.0f - momentum) * running_mean->data[size_t(c)] + momentum * float(mu);
          running_var->data[size_t(c)] =
              (1.0f - momentum) * running_var->data[size_t(c)] + momentum * float(unbiased);
        }
      }
    });
  } else {
    for (int c = 0; c < C; ++c) {
      (*mean)[size_t(c)] = running_mean->data[size_t(c)];
      (*inv)[size_t(c)] = float(1.0 / std::sqrt(double(running_var->data[size_t(c)]) + double(eps)));
    }
  }

  parallel_chunks(int64_t(N) * C, [&](int64_t lo, int64_t hi) {
    for (int64_t p = lo; p < hi; ++p) {
      int c = int(p % C);
      const float* in = x->data.data() + size_t(p) * hw;
      float* o = out->data.data() + size_t(p) * hw;
      const float mu = (*mean)[size_t(c)], iv = (*inv)[size_t(c)];
      const float ga = gamma->data[size_t(c)], be = beta->data[size_t(c)];
      for (size_t i = 0; i < hw; ++i) o[i] = (in[i] - mu) * iv * ga + be;
    }
  });

  if (!out->requires_grad) return out;
  bool training = mode.training;
  tape.record("batch_norm", {x, gamma, beta}, out, [x, gamma, beta, out, mean, inv, training, N, C, hw, chw] {
    const double m = double(N) * hw;
    parallel_chunks(C, [&](int64_t lo, int64_t hi) {
      for (int64_t c = lo; c < hi; ++c) {
        const float mu = (*mean)[size_t(c)], iv = (*inv)[size_t(c)];
        const float ga = gamma->data[size_t(c)];
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int n = 0; n < N; ++n) {
          const float* xin = x->data.data() + size_t(n) * chw + size_t(c) * hw;
          const float* gy = out->grad.data() + size_t(n) * chw + size_t(c) * hw;
          for (size_t i = 0; i < hw; ++i) {
            sum_dy += gy[i];
            sum_dy_xhat += double(gy[i]) * ((xin[i] - mu) * iv);
          }
        }
        if (gamma->requires_grad) gamma->grad[size_t(c)] += float(sum_dy_xhat);
        if (beta->requires_grad) beta->grad[size_t(c)] += float(sum_dy);
        if (x->requires_grad) {
          if (training) {
            const float k1 = float(sum_dy / m), k2 = float(sum_dy_xhat / m);
            for (int n = 0; n < N; ++n) {
              const float* xin = x->data.data() + size_t(n) * chw + size_t(c) * hw;
              const float* gy = out->grad.data() + size_t(n) * chw + size_t(c) * hw;
              float* gx = x->grad.data() + size_t(n) * chw + size_t(c) * hw;
              for (size_t i = 0; i < hw; ++i) {
                float xhat = (xin[i] - mu) * iv;
                gx[i] += ga * iv * (gy[i] - k1 - xhat * k2);
              }
            }
          } else {
            for (int n = 0; n < N; ++n) {
              const float* gy = out->grad.data() + size_t(n) * chw + size_t(c) * hw;
              float* gx = x->grad.data() + size_t(n) * chw + size_t(c) * hw;
              for (size_t i = 0; i < hw; ++i) gx[i] += gy[i] * ga * iv;
            }
          }
        }
      }
    });
  });
  return out;
}

// ---------------------------------------------------------------------------
// element-wise / reduction utility ops
// ---------------------------------------------------------------------------

inline TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape)
    throw DimensionError("add: shape " + detail::shape_str(a->shape) + " vs " +
                         detail::shape_str(b->shape));
  auto out = Tensor::make(a->shape, detail::any_requires_grad({a, b}));
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
  if (a->is_scalar()) out->set_scalar(a->value_precise() + b->value_precise());
  if (!out->requires_grad) return out;
  tape.record("add", {a, b}, out, [a, b, out] {
    if (a->requires_grad)
      for (size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i];
    if (b->requires_grad)
      for (size_t i = 0; i < out->grad.size(); ++i) b->grad[i] += out->grad[i];
  });
  return out;
}

inline TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape)
    throw DimensionError("mul: shape " + detail::shape_str(a->shape) + " vs " +
                         detail::shape_str(b->shape));
  auto out = Tensor::make(a->shape, detail::any_requires_grad({a, b}));
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * b->data[i];
  if (!out->requires_grad) return out;
  tape.record("mul", {a, b}, out, [a, b, out] {
    if (a->requires_grad)
      for (size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i] * b->data[i];
    if (b->requires_grad)
      for (size_t i = 0; i < out->grad.size(); ++i) b->grad[i] += out->grad[i] * a->data[i];
  });
  return out;
}

inline TensorPtr scale(Tape& tape, const TensorPtr& a, float factor) {
  auto out = Tensor::make(a->shape, a->requires_grad);
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * factor;
  if (a->is_scalar()) out->set_scalar(a->value_precise() * double(factor));
  if (!out->requires_grad) return out;
  tape.record("scale", {a}, out, [a, out, factor] {
    for (size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i] * factor;
  });
  return out;
}

inline TensorPtr sum(Tape& tape, const TensorPtr& x) {
  auto out = Tensor::make({1}, x->requires_grad);
  double acc = 0.0;
  for (float v : x->data) acc += v;
  out->set_scalar(acc);
  if (!out->requires_grad) return out;
  tape.record("sum", {x}, out, [x, out] {
    const float g = out->grad[0];
    for (size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += g;
  });
  return out;
}

// ---------------------------------------------------------------------------
// CAM ops
// ---------------------------------------------------------------------------

// cam[n](h,w) = sum_k head_w[class_n][k] * features[n][k][h][w]
inline TensorPtr cam_select(Tape& tape, const TensorPtr& features, const TensorPtr& head_w,
                            const std::vector<int>& classes) {
  detail::require_rank(features, 4, "cam_select features");
  detail::require_rank(head_w, 2, "cam_select head weight");
  const int N = features->dim(0), K = features->dim(1), H = features->dim(2), W = features->dim(3);
  const int C = head_w->dim(0);
  if (head_w->dim(1) != K)
    throw DimensionError("cam_select: features " + detail::shape_str(features->shape) +
                         " vs head weight " + detail::shape_str(head_w->shape));
  if (int(classes.size()) != N)
    throw ContractError("cam_select: class count " + std::to_string(classes.size()) +
                        " does not match batch " + std::to_string(N));
  for (int cls : classes)
    if (cls < 0 || cls >= C)
      throw LabelError("class index " + std::to_string(cls) + " outside [0, " + std::to_string(C) + ")");
  const size_t hw = size_t(H) * W, khw = size_t(K) * hw;
  auto out = Tensor::make({N, H, W}, detail::any_requires_grad({features, head_w}));
  parallel_chunks(N, [&](int64_t lo, int64_t hi) {
    for (int64_t n = lo; n < hi; ++n) {
      float* o = out->data.data() + size_t(n) * hw;
      const float* wr = head_w->data.data() + size_t(classes[size_t(n)]) * K;
      std::fill(o, o + hw, 0.0f);
      for (int k = 0; k < K; ++k) {
        const float* f = features->data.data() + size_t(n) * khw + size_t(k) * hw;
        const float a = wr[k];
        for (size_t i = 0; i < hw; ++i) o[i] += a * f[i];
      }
    }
  });
  if (!out->requires_grad) return out;
  auto cls = classes;
  tape.record("cam_select", {features, head_w}, out, [features, head_w, out, cls, N, K, hw, khw] {
    if (features->requires_grad) {
      parallel_chunks(N, [&](int64_t lo, int64_t hi) {
        for (int64_t n = lo; n < hi; ++n) {
          const float* go = out->grad.data() + size_t(n) * hw;
          const float* wr = head_w->data.data() + size_t(cls[size_t(n)]) * K;
          for (int k = 0; k < K; ++k) {
            float* gf = features->grad.data() + size_t(n) * khw + size_t(k) * hw;
            const float a = wr[k];
            for (size_t i = 0; i < hw; ++i) gf[i] += a * go[i];
          }
        }
      });
    }
    if (head_w->requires_grad) {
      // samples may share a class row; keep the accumulation order fixed
      for (int64_t n = 0; n < N; ++n) {
        const float* go = out->grad.data() + size_t(n) * hw;
        float* gw = head_w->grad.data() + size_t(cls[size_t(n)]) * K;
        for (int k = 0; k < K; ++k) {
          const float* f = features->data.data() + size_t(n) * khw + size_t(k) * hw;
          double acc = 0.0;
          for (size_t i = 0; i < hw; ++i) acc += double(f[i]) * go[i];
          gw[k] += float(acc);
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// CAM pixel probabilities and Shannon entropy loss
// ---------------------------------------------------------------------------

constexpr float kProbClampLo = 1e-6f;
constexpr float kProbClampHi = 1.0f - 1e-6f;
constexpr float kDegenerateRange = 1e-8f;

enum class PixelState : uint8_t { Linear = 0, ClampLo = 1, ClampHi = 2 };

// Per-sample min/max normalization captured at the forward pass. The extrema
// are constants under differentiation; freezing the context lets a
// finite-difference harness probe exactly the function the backward pass
// models.
struct CamNormContext {
  int samples = 0;
  int64_t pixels_per_sample = 0;
  std::vector<float> minv, scl;
  std::vector<uint8_t> degenerate;
  std::vector<uint8_t> pixel_state;
};

namespace detail {

inline CamNormContext make_norm_context(const float* v, int N, int64_t hw) {
  CamNormContext ctx;
  ctx.samples = N;
  ctx.pixels_per_sample = hw;
  ctx.minv.resize(size_t(N));
  ctx.scl.resize(size_t(N));
  ctx.degenerate.resize(size_t(N));
  ctx.pixel_state.assign(size_t(N) * size_t(hw), uint8_t(PixelState::Linear));
  for (int n = 0; n < N; ++n) {
    const float* p = v + size_t(n) * size_t(hw);
    float mn = p[0], mx = p[0];
    for (int64_t i = 0; i < hw; ++i) {
      if (!std::isfinite(p[i]))
        throw NumericError("cam normalization: NaN or Inf in activation map");
      mn = std::min(mn, p[i]);
      mx = std::max(mx, p[i]);
    }
    ctx.minv[size_t(n)] = mn;
    bool degen = (mx - mn) < kDegenerateRange;
    ctx.degenerate[size_t(n)] = degen ? 1 : 0;
    ctx.scl[size_t(n)] = degen ? 0.0f : 1.0f / (mx - mn);
    if (!degen) {
      uint8_t* st = ctx.pixel_state.data() + size_t(n) * size_t(hw);
      const float s = ctx.scl[size_t(n)];
      for (int64_t i = 0; i < hw; ++i) {
        float raw = (p[i] - mn) * s;
        if (raw <= kProbClampLo) st[i] = uint8_t(PixelState::ClampLo);
        else if (raw >= kProbClampHi) st[i] = uint8_t(PixelState::ClampHi);
      }
    }
  }
  return ctx;
}

inline float prob_from_context(const CamNormContext& ctx, int n, int64_t i, float v) {
  if (ctx.degenerate[size_t(n)]) return 0.5f;
  switch (PixelState(ctx.pixel_state[size_t(n) * size_t(ctx.pixels_per_sample) + size_t(i)])) {
    case PixelState::ClampLo: return kProbClampLo;
    case PixelState::ClampHi: return kProbClampHi;
    default: return (v - ctx.minv[size_t(n)]) * ctx.scl[size_t(n)];
  }
}

}  // namespace detail

struct CamEntropyStats {
  std::vector<uint8_t> degenerate;
  double frac_above_crossover = 0.0;  // share of pixels with P > 1/e
};

// L = (1/N) * sum_n [ -sum_{h,w} P log P ] with per-sample min/max
// normalized, clamped P. Degenerate (constant) maps contribute 0.
inline TensorPtr cam_entropy(Tape& tape, const TensorPtr& cams,
                             CamEntropyStats* stats = nullptr,
                             const CamNormContext* frozen = nullptr) {
  detail::require_rank(cams, 3, "cam_entropy input");
  const int N = cams->dim(0);
  const int64_t hw = int64_t(cams->dim(1)) * cams->dim(2);
  auto ctx = std::make_shared<CamNormContext>(
      frozen ? *frozen : detail::make_norm_context(cams->data.data(), N, hw));
  if (ctx->samples != N || ctx->pixels_per_sample != hw)
    throw ContractError("cam_entropy: frozen normalization context does not match input shape");

  double total = 0.0;
  int64_t high = 0;
  constexpr double crossover = 0.36787944117144233;  // 1/e
  for (int n = 0; n < N; ++n) {
    if (ctx->degenerate[size_t(n)]) continue;
    const float* p = cams->data.data() + size_t(n) * size_t(hw);
    double s = 0.0;
    for (int64_t i = 0; i < hw; ++i) {
      double prob = detail::prob_from_context(*ctx, n, i, p[i]);
      // frozen contexts can push a re-evaluated pixel slightly outside (0,1)
      if (prob < double(kProbClampLo)) prob = double(kProbClampLo);
      if (prob > double(kProbClampHi)) prob = double(kProbClampHi);
      s -= prob * std::log(prob);
      if (prob > crossover) ++high;
    }
    total += s;
  }
  auto out = Tensor::make({1}, cams->requires_grad);
  out->set_scalar(total / N);
  if (stats) {
    stats->degenerate.assign(ctx->degenerate.begin(), ctx->degenerate.end());
    stats->frac_above_crossover = double(high) / (double(N) * double(hw));
  }
  if (!out->requires_grad) return out;
  tape.record("cam_entropy", {cams}, out, [cams, out, ctx, N, hw] {
    const float g = out->grad[0] / float(N);
    for (int n = 0; n < N; ++n) {
      if (ctx->degenerate[size_t(n)]) continue;
      const float s = ctx->scl[size_t(n)];
      const float mn = ctx->minv[size_t(n)];
      const uint8_t* st = ctx->pixel_state.data() + size_t(n) * size_t(hw);
      const float* p = cams->data.data() + size_t(n) * size_t(hw);
      float* gx = cams->grad.data() + size_t(n) * size_t(hw);
      for (int64_t i = 0; i < hw; ++i) {
        if (PixelState(st[i]) != PixelState::Linear) continue;
        float prob = (p[i] - mn) * s;
        prob = std::min(std::max(prob, kProbClampLo), kProbClampHi);
        gx[i] += g * (-(std::log(prob) + 1.0f)) * s;
      }
    }
  });
  return out;
}

}  // namespace ega
