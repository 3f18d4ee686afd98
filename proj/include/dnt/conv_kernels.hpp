#pragma once

// Register-blocked 3x3 convolution kernels over explicitly zero-padded NHWC
// input. The output channel count is a compile-time constant so that the
// accumulator tile stays in vector registers; layers dispatch here for the
// channel widths the desk-scale models use and fall back to plain loops
// otherwise.

#include <algorithm>
#include <cstddef>

#include "dnt/tensor.hpp"

namespace dnt::detail {

/// [n,h,w,c] -> [n,h+2,w+2,c] with a one-pixel zero border.
template <typename T>
BasicTensor<T> pad1(const BasicTensor<T>& x) {
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  BasicTensor<T> out({n, h + 2, w + 2, c});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(x.data() + ((b * h + y) * w) * c, w * c, out.data() + ((b * (h + 2) + y + 1) * (w + 2) + 1) * c);
  return out;
}

// 32-byte vectors (8 floats / 4 doubles) via the GCC/Clang vector extension.
template <typename T>
struct Simd {
  typedef T type __attribute__((vector_size(32)));
  static constexpr std::size_t lanes = 32 / sizeof(T);

  static type load(const T* p) {
    type v;
    __builtin_memcpy(&v, p, sizeof(v));
    return v;
  }
  static void store(T* p, const type& v) { __builtin_memcpy(p, &v, sizeof(v)); }
  static type splat(T x) { return type{} + x; }
};

template <typename T, std::size_t CO, std::size_t P>
inline void conv3x3_tile(const T* xp, std::size_t wp, std::size_t cin, const T* weight, const T* bias, T* out) {
  using S = Simd<T>;
  using V = typename S::type;
  constexpr std::size_t NV = CO / S::lanes;
  V acc[P][NV];
  for (std::size_t j = 0; j < NV; ++j) {
    const V b0 = bias ? S::load(bias + j * S::lanes) : V{};
    for (std::size_t p = 0; p < P; ++p) acc[p][j] = b0;
  }
  for (std::size_t ky = 0; ky < 3; ++ky) {
    const T* row = xp + ky * wp * cin;
    for (std::size_t kx = 0; kx < 3; ++kx) {
      const T* base = row + kx * cin;
      const T* wk = weight + (ky * 3 + kx) * cin * CO;
      for (std::size_t ci = 0; ci < cin; ++ci) {
        V wv[NV];
        for (std::size_t j = 0; j < NV; ++j) wv[j] = S::load(wk + ci * CO + j * S::lanes);
        for (std::size_t p = 0; p < P; ++p) {
          const V v = S::splat(base[p * cin + ci]);
          for (std::size_t j = 0; j < NV; ++j) acc[p][j] += v * wv[j];
        }
      }
    }
  }
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t j = 0; j < NV; ++j) S::store(out + p * CO + j * S::lanes, acc[p][j]);
}

/// y[n,h,w,CO] = correlate(xp[n,h+2,w+2,cin], weight[3,3,cin,CO]) + bias.
template <typename T, std::size_t CO>
void conv3x3_padded(const T* xp, std::size_t n, std::size_t h, std::size_t w, std::size_t cin, const T* weight,
                    const T* bias, T* y) {
  constexpr std::size_t P = CO >= 32 ? 4 : (CO >= 16 ? 6 : 8);
  const std::size_t wp = w + 2;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oy = 0; oy < h; ++oy) {
      const T* in_row = xp + ((b * (h + 2) + oy) * wp) * cin;
      T* out_row = y + ((b * h + oy) * w) * CO;
      std::size_t ox = 0;
      for (; ox + P <= w; ox += P) conv3x3_tile<T, CO, P>(in_row + ox * cin, wp, cin, weight, bias, out_row + ox * CO);
      for (; ox + 2 <= w; ox += 2) conv3x3_tile<T, CO, 2>(in_row + ox * cin, wp, cin, weight, bias, out_row + ox * CO);
      for (; ox < w; ++ox) conv3x3_tile<T, CO, 1>(in_row + ox * cin, wp, cin, weight, bias, out_row + ox * CO);
    }
}

template <typename T, std::size_t CO, std::size_t CB>
inline void conv3x3_dweight_tile(const T* xp, const T* dy, std::size_t n, std::size_t h, std::size_t w,
                                 std::size_t cin, std::size_t ky, std::size_t kx, std::size_t ci0, T* dweight) {
  using S = Simd<T>;
  using V = typename S::type;
  constexpr std::size_t NV = CO / S::lanes;
  V acc[CB][NV] = {};
  const std::size_t wp = w + 2;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oy = 0; oy < h; ++oy) {
      const T* in_row = xp + ((b * (h + 2) + oy + ky) * wp + kx) * cin + ci0;
      const T* g_row = dy + ((b * h + oy) * w) * CO;
      for (std::size_t ox = 0; ox < w; ++ox) {
        const T* in = in_row + ox * cin;
        V g[NV];
        for (std::size_t j = 0; j < NV; ++j) g[j] = S::load(g_row + ox * CO + j * S::lanes);
        for (std::size_t c = 0; c < CB; ++c) {
          const V v = S::splat(in[c]);
          for (std::size_t j = 0; j < NV; ++j) acc[c][j] += v * g[j];
        }
      }
    }
  T* dst = dweight + ((ky * 3 + kx) * cin + ci0) * CO;
  for (std::size_t c = 0; c < CB; ++c)
    for (std::size_t j = 0; j < NV; ++j) S::store(dst + c * CO + j * S::lanes, acc[c][j]);
}

/// dweight[3,3,cin,CO] = sum over pixels of xp patch (x) dy.
template <typename T, std::size_t CO>
void conv3x3_dweight(const T* xp, const T* dy, std::size_t n, std::size_t h, std::size_t w, std::size_t cin,
                     T* dweight) {
  constexpr std::size_t CB = CO >= 32 ? 4 : 8;
  for (std::size_t ky = 0; ky < 3; ++ky)
    for (std::size_t kx = 0; kx < 3; ++kx) {
      std::size_t ci = 0;
      for (; ci + CB <= cin; ci += CB) conv3x3_dweight_tile<T, CO, CB>(xp, dy, n, h, w, cin, ky, kx, ci, dweight);
      for (; ci < cin; ++ci) conv3x3_dweight_tile<T, CO, 1>(xp, dy, n, h, w, cin, ky, kx, ci, dweight);
    }
}

/// Calls `f(std::integral_constant<size_t, C>)` for C in {8, 16, 32};
/// returns false for any other width.
template <typename F>
bool dispatch_width(std::size_t c, F&& f) {
  switch (c) {
    case 8: f(std::integral_constant<std::size_t, 8>{}); return true;
    case 16: f(std::integral_constant<std::size_t, 16>{}); return true;
    case 32: f(std::integral_constant<std::size_t, 32>{}); return true;
    default: return false;
  }
}

}  // namespace dnt::detail
