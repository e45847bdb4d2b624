#pragma once

// Convolution compute kernels. The model only ever uses 3x3 / stride 1 /
// pad 1 convolutions on widths that are multiples of 16, so that case gets a
// hand-tiled AVX-512 implicit-GEMM path; everything else (odd test shapes,
// other strides) runs through the general scalar path. Dispatch depends only
// on shapes and CPU features, never on data, so results are reproducible.
//
// Reduction order in every kernel is independent of the thread count.

#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <vector>

#include "ega/common.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#include <immintrin.h>
#define EGA_HAVE_AVX512_COMPILE 1
#endif

namespace ega::kernels {

inline bool avx512_enabled() {
#ifdef EGA_HAVE_AVX512_COMPILE
  static const bool ok = [] {
    if (std::getenv("EGA_FORCE_SCALAR")) return false;
    return bool(__builtin_cpu_supports("avx512f"));
  }();
  return ok;
#else
  return false;
#endif
}

inline bool conv3x3_fast_ok(int H, int W, int R, int S, int stride, int pad) {
  (void)H;
  return R == 3 && S == 3 && stride == 1 && pad == 1 && W >= 16 && W % 16 == 0 && avx512_enabled();
}

// ---------------------------------------------------------------------------
// general scalar path (any R,S,stride,pad)
// ---------------------------------------------------------------------------

inline void conv_fwd_scalar(const float* x, const float* w, const float* bias, float* y,
                            int C, int K, int H, int W, int R, int S, int stride, int pad,
                            int OH, int OW) {
  for (int k = 0; k < K; ++k) {
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox = 0; ox < OW; ++ox) {
        double s = bias ? bias[k] : 0.0;
        for (int c = 0; c < C; ++c) {
          const float* xc = x + (size_t(c) * H) * W;
          const float* wk = w + ((size_t(k) * C + c) * R) * S;
          for (int r = 0; r < R; ++r) {
            int sy = oy * stride - pad + r;
            if (sy < 0 || sy >= H) continue;
            for (int q = 0; q < S; ++q) {
              int sx = ox * stride - pad + q;
              if (sx < 0 || sx >= W) continue;
              s += double(wk[r * S + q]) * xc[sy * W + sx];
            }
          }
        }
        y[(size_t(k) * OH + oy) * OW + ox] = float(s);
      }
    }
  }
}

inline void conv_dx_scalar(float* dx, const float* w, const float* dy,
                           int C, int K, int H, int W, int R, int S, int stride, int pad,
                           int OH, int OW) {
  for (int k = 0; k < K; ++k) {
    const float* gk = dy + (size_t(k) * OH) * OW;
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox = 0; ox < OW; ++ox) {
        float g = gk[oy * OW + ox];
        if (g == 0.0f) continue;
        for (int c = 0; c < C; ++c) {
          float* dxc = dx + (size_t(c) * H) * W;
          const float* wk = w + ((size_t(k) * C + c) * R) * S;
          for (int r = 0; r < R; ++r) {
            int sy = oy * stride - pad + r;
            if (sy < 0 || sy >= H) continue;
            for (int q = 0; q < S; ++q) {
              int sx = ox * stride - pad + q;
              if (sx < 0 || sx >= W) continue;
              dxc[sy * W + sx] += wk[r * S + q] * g;
            }
          }
        }
      }
    }
  }
}

inline void conv_dw_scalar(const float* x, const float* dy, float* dw,
                           int C, int K, int H, int W, int R, int S, int stride, int pad,
                           int OH, int OW) {
  for (int k = 0; k < K; ++k) {
    const float* gk = dy + (size_t(k) * OH) * OW;
    for (int c = 0; c < C; ++c) {
      const float* xc = x + (size_t(c) * H) * W;
      for (int r = 0; r < R; ++r) {
        for (int q = 0; q < S; ++q) {
          double s = 0.0;
          for (int oy = 0; oy < OH; ++oy) {
            int sy = oy * stride - pad + r;
            if (sy < 0 || sy >= H) continue;
            for (int ox = 0; ox < OW; ++ox) {
              int sx = ox * stride - pad + q;
              if (sx < 0 || sx >= W) continue;
              s += double(gk[oy * OW + ox]) * xc[sy * W + sx];
            }
          }
          dw[((size_t(k) * C + c) * R + r) * S + q] += float(s);
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// AVX-512 implicit-GEMM path for 3x3 / stride 1 / pad 1, W % 16 == 0.
// Weights are pre-packed as wp[(o * C + c) * Kpad + k] with o = dy*3+dx and
// Kpad a multiple of 16 (zero padded).
// ---------------------------------------------------------------------------

#ifdef EGA_HAVE_AVX512_COMPILE

__attribute__((target("avx512f,fma"))) inline void conv3x3_fwd_avx512(
    const float* x, const float* wp, const float* bias, float* y,
    int C, int Kpad, int H, int W, bool accumulate) {
  const int XB = W / 16;
  for (int kb = 0; kb < Kpad; kb += 16) {
    for (int yy = 0; yy < H; ++yy) {
      for (int xb = 0; xb < XB; ++xb) {
        __m512 acc[16];
        for (int k = 0; k < 16; ++k) acc[k] = _mm512_set1_ps(bias ? bias[kb + k] : 0.0f);
        for (int c = 0; c < C; ++c) {
          const float* xc = x + size_t(c) * H * W;
          for (int dy = -1; dy <= 1; ++dy) {
            int sy = yy + dy;
            if (sy < 0 || sy >= H) continue;
            const float* row = xc + size_t(sy) * W + size_t(xb) * 16;
            for (int dx = -1; dx <= 1; ++dx) {
              __m512 xv;
              if (dx == -1 && xb == 0)
                xv = _mm512_maskz_loadu_ps(__mmask16(0xFFFE), row - 1);
              else if (dx == 1 && xb == XB - 1)
                xv = _mm512_maskz_loadu_ps(__mmask16(0x7FFF), row + 1);
              else
                xv = _mm512_loadu_ps(row + dx);
              const float* wrow = wp + (size_t((dy + 1) * 3 + (dx + 1)) * C + c) * Kpad + kb;
              for (int k = 0; k < 16; ++k)
                acc[k] = _mm512_fmadd_ps(xv, _mm512_set1_ps(wrow[k]), acc[k]);
            }
          }
        }
        for (int k = 0; k < 16; ++k) {
          float* dst = y + (size_t(kb + k) * H + yy) * W + size_t(xb) * 16;
          if (accumulate)
            _mm512_storeu_ps(dst, _mm512_add_ps(_mm512_loadu_ps(dst), acc[k]));
          else
            _mm512_storeu_ps(dst, acc[k]);
        }
      }
    }
  }
}

// dW[k][c][o] += sum_{y,x} dY[k][y][x] * X[c][y+dy][x+dx]
__attribute__((target("avx512f,fma"))) inline void conv3x3_dw_avx512(
    const float* x, const float* dy_, float* dw, int C, int K, int H, int W) {
  const int XB = W / 16;
  for (int c = 0; c < C; ++c) {
    const float* xc = x + size_t(c) * H * W;
    for (int kb = 0; kb < K; kb += 2) {
      const int kn = (K - kb) >= 2 ? 2 : 1;
      __m512 acc[2][9];
      for (int k2 = 0; k2 < 2; ++k2)
        for (int o = 0; o < 9; ++o) acc[k2][o] = _mm512_setzero_ps();
      for (int yy = 0; yy < H; ++yy) {
        for (int xb = 0; xb < XB; ++xb) {
          __m512 xv[9];
          for (int dy = -1; dy <= 1; ++dy) {
            int sy = yy + dy;
            for (int dx = -1; dx <= 1; ++dx) {
              int o = (dy + 1) * 3 + (dx + 1);
              if (sy < 0 || sy >= H) {
                xv[o] = _mm512_setzero_ps();
                continue;
              }
              const float* row = xc + size_t(sy) * W + size_t(xb) * 16;
              if (dx == -1 && xb == 0)
                xv[o] = _mm512_maskz_loadu_ps(__mmask16(0xFFFE), row - 1);
              else if (dx == 1 && xb == XB - 1)
                xv[o] = _mm512_maskz_loadu_ps(__mmask16(0x7FFF), row + 1);
              else
                xv[o] = _mm512_loadu_ps(row + dx);
            }
          }
          for (int k2 = 0; k2 < kn; ++k2) {
            __m512 gv = _mm512_loadu_ps(dy_ + (size_t(kb + k2) * H + yy) * W + size_t(xb) * 16);
            for (int o = 0; o < 9; ++o) acc[k2][o] = _mm512_fmadd_ps(gv, xv[o], acc[k2][o]);
          }
        }
      }
      for (int k2 = 0; k2 < kn; ++k2)
        for (int o = 0; o < 9; ++o)
          dw[(size_t(kb + k2) * C + c) * 9 + o] += _mm512_reduce_add_ps(acc[k2][o]);
    }
  }
}

#endif  // EGA_HAVE_AVX512_COMPILE

// ---------------------------------------------------------------------------
// packing helpers for the fast path
// ---------------------------------------------------------------------------

inline int round_up16(int v) { return (v + 15) & ~15; }

// w: K x C x 3 x 3  ->  wp[(o * C + c) * Kpad + k]
inline std::vector<float> pack_w_fwd(const float* w, int C, int K) {
  int Kpad = round_up16(K);
  std::vector<float> wp(size_t(9) * C * Kpad, 0.0f);
  for (int k = 0; k < K; ++k)
    for (int c = 0; c < C; ++c)
      for (int o = 0; o < 9; ++o)
        wp[(size_t(o) * C + c) * Kpad + k] = w[(size_t(k) * C + c) * 9 + o];
  return wp;
}

// Transposed conv uses the same kernel with roles swapped and offsets
// flipped: input channels K, output channels C.
inline std::vector<float> pack_w_dx(const float* w, int C, int K) {
  int Cpad = round_up16(C);
  std::vector<float> wp(size_t(9) * K * Cpad, 0.0f);
  for (int k = 0; k < K; ++k)
    for (int c = 0; c < C; ++c)
      for (int o = 0; o < 9; ++o)
        wp[(size_t(8 - o) * K + k) * Cpad + c] = w[(size_t(k) * C + c) * 9 + o];
  return wp;
}

inline std::vector<float> pad_bias16(const float* bias, int K) {
  int Kpad = round_up16(K);
  std::vector<float> b(size_t(Kpad), 0.0f);
  if (bias) std::memcpy(b.data(), bias, sizeof(float) * size_t(K));
  return b;
}

// ---------------------------------------------------------------------------
// single-sample dispatchers (packed weights supplied by the conv op so the
// packing cost is paid once per batch, not per sample)
// ---------------------------------------------------------------------------

struct Conv2dShape {
  int C, K, H, W, R, S, stride, pad, OH, OW;
  bool fast;
};

inline Conv2dShape conv2d_shape(int C, int K, int H, int W, int R, int S, int stride, int pad) {
  Conv2dShape s{C, K, H, W, R, S, stride, pad, 0, 0, false};
  s.OH = (H + 2 * pad - R) / stride + 1;
  s.OW = (W + 2 * pad - S) / stride + 1;
  s.fast = conv3x3_fast_ok(H, W, R, S, stride, pad);
  return s;
}

inline void conv_fwd_one(const Conv2dShape& s, const float* x, const float* w,
                         const float* wp_fwd, const float* bias_pad, const float* bias,
                         float* y) {
#ifdef EGA_HAVE_AVX512_COMPILE
  if (s.fast) {
    int Kpad = round_up16(s.K);
    if (Kpad == s.K) {
      conv3x3_fwd_avx512(x, wp_fwd, bias_pad, y, s.C, Kpad, s.H, s.W, false);
    } else {
      std::vector<float> tmp(size_t(Kpad) * s.H * s.W);
      conv3x3_fwd_avx512(x, wp_fwd, bias_pad, tmp.data(), s.C, Kpad, s.H, s.W, false);
      std::memcpy(y, tmp.data(), sizeof(float) * size_t(s.K) * s.H * s.W);
    }
    return;
  }
#endif
  (void)wp_fwd;
  (void)bias_pad;
  conv_fwd_scalar(x, w, bias, y, s.C, s.K, s.H, s.W, s.R, s.S, s.stride, s.pad, s.OH, s.OW);
}

inline void conv_dx_one(const Conv2dShape& s, float* dx, const float* w,
                        const float* wp_dx, const float* dy) {
#ifdef EGA_HAVE_AVX512_COMPILE
  if (s.fast) {
    int Cpad = round_up16(s.C);
    if (Cpad == s.C) {
      conv3x3_fwd_avx512(dy, wp_dx, nullptr, dx, s.K, Cpad, s.H, s.W, true);
    } else {
      std::vector<float> tmp(size_t(Cpad) * s.H * s.W);
      conv3x3_fwd_avx512(dy, wp_dx, nullptr, tmp.data(), s.K, Cpad, s.H, s.W, false);
      const size_t plane = size_t(s.H) * s.W;
      for (int c = 0; c < s.C; ++c)
        for (size_t i = 0; i < plane; ++i) dx[size_t(c) * plane + i] += tmp[size_t(c) * plane + i];
    }
    return;
  }
#endif
  (void)wp_dx;
  conv_dx_scalar(dx, w, dy, s.C, s.K, s.H, s.W, s.R, s.S, s.stride, s.pad, s.OH, s.OW);
}

inline void conv_dw_one(const Conv2dShape& s, const float* x, const float* dy, float* dw) {
#ifdef EGA_HAVE_AVX512_COMPILE
  if (s.fast) {
    conv3x3_dw_avx512(x, dy, dw, s.C, s.K, s.H, s.W);
    return;
  }
#endif
  conv_dw_scalar(x, dy, dw, s.C, s.K, s.H, s.W, s.R, s.S, s.stride, s.pad, s.OH, s.OW);
}

}  // namespace ega::kernels
