#pragma once

// Forward and backward passes for the layer kinds of a block-structured CNN.
// Activations are NHWC; convolution weights are [3, 3, C_in, C_out].

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <vector>

#include "dnt/conv_kernels.hpp"
#include "dnt/error.hpp"
#include "dnt/tensor.hpp"

namespace dnt {

enum class Mode { train, eval };

namespace detail {

inline void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    fail(ErrorKind::shape_mismatch, std::string(what) + " expects rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Conv2D: 3x3 cross-correlation, stride 1, one pixel of zero padding.

template <typename T>
struct Conv2DGrads {
  BasicTensor<T> dx;
  BasicTensor<T> dweight;
  BasicTensor<T> dbias;
};

template <typename T>
class Conv2D {
 public:
  static constexpr std::size_t kernel = 3;

  Conv2D() = default;
  Conv2D(std::size_t in_channels, std::size_t out_channels)
      : weight({kernel, kernel, in_channels, out_channels}), bias({out_channels}) {}

  std::size_t in_channels() const { return weight.dim(2); }
  std::size_t out_channels() const { return weight.dim(3); }
  std::size_t param_count() const { return weight.size() + bias.size(); }

  BasicTensor<T> forward(const BasicTensor<T>& x) const {
    check_input(x);
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2);
    BasicTensor<T> y({n, h, w, out_channels()});
    const bool fast = detail::dispatch_width(out_channels(), [&](auto co) {
      const BasicTensor<T> xp = detail::pad1(x);
      detail::conv3x3_padded<T, decltype(co)::value>(xp.data(), n, h, w, in_channels(), weight.data(), bias.data(),
                                                     y.data());
    });
    if (!fast) correlate_generic(x, weight, &bias, y);
    return y;
  }

  /// Gradients of the forward map. `need_dx = false` skips the input
  /// gradient when nothing upstream consumes it; `need_params = false` skips
  /// the weight and bias gradients.
  Conv2DGrads<T> backward(const BasicTensor<T>& x, const BasicTensor<T>& dy, bool need_dx = true,
                          bool need_params = true) const {
    check_input(x);
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t cin = in_channels(), cout = out_channels();
    require_same_shape(dy.shape(), Shape{n, h, w, cout}, "conv backward dy");

    Conv2DGrads<T> g;
    if (need_params) {
      g.dweight = BasicTensor<T>(weight.shape());
      g.dbias = BasicTensor<T>(bias.shape());
      for (std::size_t i = 0; i < dy.size(); i += cout)
        for (std::size_t c = 0; c < cout; ++c) g.dbias[c] += dy[i + c];
      const bool fast = detail::dispatch_width(cout, [&](auto co) {
        const BasicTensor<T> xp = detail::pad1(x);
        detail::conv3x3_dweight<T, decltype(co)::value>(xp.data(), dy.data(), n, h, w, cin, g.dweight.data());
      });
      if (!fast) dweight_generic(x, dy, g.dweight);
    }
    if (need_dx) {
      // dx is the same correlation applied to dy with the kernel flipped in
      // both spatial axes and its channel axes swapped: [ky,kx,co,ci].
      BasicTensor<T> flipped({kernel, kernel, cout, cin});
      for (std::size_t k = 0; k < kernel * kernel; ++k)
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (std::size_t co = 0; co < cout; ++co)
            flipped[((kernel * kernel - 1 - k) * cout + co) * cin + ci] = weight[(k * cin + ci) * cout + co];
      g.dx = BasicTensor<T>(x.shape());
      const bool fast = detail::dispatch_width(cin, [&](auto ci_width) {
        const BasicTensor<T> dyp = detail::pad1(dy);
        detail::conv3x3_padded<T, decltype(ci_width)::value>(dyp.data(), n, h, w, cout, flipped.data(), nullptr,
                                                             g.dx.data());
      });
      if (!fast) correlate_generic(dy, flipped, nullptr, g.dx);
    }
    return g;
  }

  BasicTensor<T> weight;
  BasicTensor<T> bias;

 private:
  void check_input(const BasicTensor<T>& x) const {
    detail::require_rank(x.shape(), 4, "conv input");
    if (x.dim(3) != in_channels()) {
      fail(ErrorKind::shape_mismatch, "conv expects " + std::to_string(in_channels()) + " input channels, got " +
                                          std::to_string(x.dim(3)));
    }
  }

  // y = same-padded correlation of x with k[3,3,cin,cout] (+ bias).
  static void correlate_generic(const BasicTensor<T>& x, const BasicTensor<T>& k, const BasicTensor<T>* b,
                                BasicTensor<T>& y) {
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t cin = k.dim(2), cout = k.dim(3);
    for (std::size_t bi = 0; bi < n; ++bi)
      for (std::size_t oy = 0; oy < h; ++oy)
        for (std::size_t ox = 0; ox < w; ++ox) {
          T* out = y.data() + ((bi * h + oy) * w + ox) * cout;
          for (std::size_t co = 0; co < cout; ++co) out[co] = b ? (*b)[co] : T{0};
          for (std::size_t ky = 0; ky < kernel; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - 1;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < kernel; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - 1;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              const T* in = x.data() + ((bi * h + iy) * w + ix) * cin;
              const T* wk = k.data() + (ky * kernel + kx) * cin * cout;
              for (std::size_t ci = 0; ci < cin; ++ci)
                for (std::size_t co = 0; co < cout; ++co) out[co] += in[ci] * wk[ci * cout + co];
            }
          }
        }
  }

  static void dweight_generic(const BasicTensor<T>& x, const BasicTensor<T>& dy, BasicTensor<T>& dw) {
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t cin = dw.dim(2), cout = dw.dim(3);
    for (std::size_t bi = 0; bi < n; ++bi)
      for (std::size_t oy = 0; oy < h; ++oy)
        for (std::size_t ox = 0; ox < w; ++ox) {
          const T* grad = dy.data() + ((bi * h + oy) * w + ox) * cout;
          for (std::size_t ky = 0; ky < kernel; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - 1;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < kernel; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) - 1;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              const T* in = x.data() + ((bi * h + iy) * w + ix) * cin;
              T* dwk = dw.data() + (ky * kernel + kx) * cin * cout;
              for (std::size_t ci = 0; ci < cin; ++ci)
                for (std::size_t co = 0; co < cout; ++co) dwk[ci * cout + co] += in[ci] * grad[co];
            }
          }
        }
  }
};

// ---------------------------------------------------------------------------
// BatchNorm2D over the channel axis (last axis of NHWC).

template <typename T>
struct BatchNormGrads {
  BasicTensor<T> dx;
  BasicTensor<T> dgamma;
  BasicTensor<T> dbeta;
};

template <typename T>
class BatchNorm2D {
 public:
  static constexpr double default_eps = 1e-5;
  static constexpr double default_momentum = 0.99;

  BatchNorm2D() = default;
  explicit BatchNorm2D(std::size_t channels)
      : gamma({channels}, T{1}), beta({channels}, T{0}), running_mean({channels}, T{0}), running_var({channels}, T{1}) {}

  std::size_t channels() const { return gamma.size(); }
  std::size_t param_count() const { return gamma.size() + beta.size(); }

  void reset() {
    gamma.fill(T{1});
    beta.fill(T{0});
    running_mean.fill(T{0});
    running_var.fill(T{1});
  }

  /// Train mode normalizes by batch statistics and folds them into the
  /// running estimates; eval mode uses the running estimates only.
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) {
    const std::size_t c = check_input(x);
    if (mode == Mode::eval) return forward_eval(x);
    const std::size_t count = x.size() / c;
    if (count < 2) fail(ErrorKind::degenerate_batch, "train-mode batch norm needs at least two values per channel");
    std::vector<double> mean, var;
    batch_stats(x, mean, var);
    BasicTensor<T> y(x.shape());
    std::vector<T> scale(c), shift(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double inv_std = 1.0 / std::sqrt(var[ch] + eps);
      scale[ch] = static_cast<T>(gamma[ch] * inv_std);
      shift[ch] = static_cast<T>(beta[ch] - gamma[ch] * mean[ch] * inv_std);
    }
    apply_affine(x, y, scale, shift);
    for (std::size_t ch = 0; ch < c; ++ch) {
      running_mean[ch] = static_cast<T>(momentum * running_mean[ch] + (1.0 - momentum) * mean[ch]);
      running_var[ch] = static_cast<T>(momentum * running_var[ch] + (1.0 - momentum) * var[ch]);
    }
    return y;
  }

  BasicTensor<T> forward_eval(const BasicTensor<T>& x) const {
    const std::size_t c = check_input(x);
    BasicTensor<T> y(x.shape());
    std::vector<T> scale(c), shift(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double inv_std = 1.0 / std::sqrt(static_cast<double>(running_var[ch]) + eps);
      scale[ch] = static_cast<T>(gamma[ch] * inv_std);
      shift[ch] = static_cast<T>(beta[ch] - gamma[ch] * running_mean[ch] * inv_std);
    }
    apply_affine(x, y, scale, shift);
    return y;
  }

  /// Exact gradients of the train-mode forward. Batch statistics are
  /// recomputed from `x`.
  BatchNormGrads<T> backward(const BasicTensor<T>& x, const BasicTensor<T>& dy, bool need_dx = true) const {
    const std::size_t c = check_input(x);
    require_same_shape(dy.shape(), x.shape(), "batch norm backward dy");
    const std::size_t count = x.size() / c;
    if (count < 2) fail(ErrorKind::degenerate_batch, "train-mode batch norm needs at least two values per channel");
    std::vector<double> mean, var;
    batch_stats(x, mean, var);
    std::vector<double> inv_std(c), sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = 1.0 / std::sqrt(var[ch] + eps);
    for (std::size_t i = 0; i < x.size(); i += c) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double xhat = (x[i + ch] - mean[ch]) * inv_std[ch];
        sum_dy[ch] += dy[i + ch];
        sum_dy_xhat[ch] += dy[i + ch] * xhat;
      }
    }
    BatchNormGrads<T> g;
    g.dgamma = BasicTensor<T>({c});
    g.dbeta = BasicTensor<T>({c});
    for (std::size_t ch = 0; ch < c; ++ch) {
      g.dgamma[ch] = static_cast<T>(sum_dy_xhat[ch]);
      g.dbeta[ch] = static_cast<T>(sum_dy[ch]);
    }
    if (need_dx) {
      g.dx = BasicTensor<T>(x.shape());
      const double inv_count = 1.0 / static_cast<double>(count);
      for (std::size_t i = 0; i < x.size(); i += c) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double xhat = (x[i + ch] - mean[ch]) * inv_std[ch];
          const double v = gamma[ch] * inv_std[ch] *
                           (dy[i + ch] - inv_count * sum_dy[ch] - xhat * inv_count * sum_dy_xhat[ch]);
          g.dx[i + ch] = static_cast<T>(v);
        }
      }
    }
    return g;
  }

  /// Input gradient of the eval-mode forward (a fixed per-channel affine map).
  BasicTensor<T> backward_eval(const BasicTensor<T>& dy) const {
    const std::size_t c = check_input(dy);
    BasicTensor<T> dx(dy.shape());
    std::vector<T> scale(c);
    for (std::size_t ch = 0; ch < c; ++ch)
      scale[ch] = static_cast<T>(gamma[ch] / std::sqrt(static_cast<double>(running_var[ch]) + eps));
    for (std::size_t i = 0; i < dy.size(); i += c)
      for (std::size_t ch = 0; ch < c; ++ch) dx[i + ch] = dy[i + ch] * scale[ch];
    return dx;
  }

  BasicTensor<T> gamma;
  BasicTensor<T> beta;
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;
  double eps = default_eps;
  double momentum = default_momentum;

 private:
  std::size_t check_input(const BasicTensor<T>& x) const {
    detail::require_rank(x.shape(), 4, "batch norm input");
    if (x.dim(3) != channels()) {
      fail(ErrorKind::shape_mismatch, "batch norm expects " + std::to_string(channels()) + " channels, got " +
                                          std::to_string(x.dim(3)));
    }
    return channels();
  }

  void batch_stats(const BasicTensor<T>& x, std::vector<double>& mean, std::vector<double>& var) const {
    const std::size_t c = channels();
    const double inv_count = static_cast<double>(c) / static_cast<double>(x.size());
    mean.assign(c, 0.0);
    var.assign(c, 0.0);
    for (std::size_t i = 0; i < x.size(); i += c)
      for (std::size_t ch = 0; ch < c; ++ch) mean[ch] += x[i + ch];
    for (auto& m : mean) m *= inv_count;
    for (std::size_t i = 0; i < x.size(); i += c)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double d = x[i + ch] - mean[ch];
        var[ch] += d * d;
      }
    for (auto& v : var) v *= inv_count;
  }

  static void apply_affine(const BasicTensor<T>& x, BasicTensor<T>& y, const std::vector<T>& scale,
                           const std::vector<T>& shift) {
    const std::size_t c = scale.size();
    for (std::size_t i = 0; i < x.size(); i += c)
      for (std::size_t ch = 0; ch < c; ++ch) y[i + ch] = x[i + ch] * scale[ch] + shift[ch];
  }
};

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& x) {
  BasicTensor<T> y = x;
  for (auto& v : y.span()) v = v > T{0} ? v : T{0};
  return y;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& dy) {
  require_same_shape(x.shape(), dy.shape(), "relu backward");
  BasicTensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T{0} ? dy[i] : T{0};
  return dx;
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2. Ties resolve to the first element of the window
// in row-major order; backward routes each gradient to that element only.

template <typename T>
class MaxPool2x2 {
 public:
  BasicTensor<T> forward(const BasicTensor<T>& x) {
    detail::require_rank(x.shape(), 4, "max pool input");
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    const std::size_t oh = h / 2, ow = w / 2;
    if (oh == 0 || ow == 0) fail(ErrorKind::shape_mismatch, "max pool input smaller than its window");
    input_shape_ = x.shape();
    BasicTensor<T> y({n, oh, ow, c});
    argmax_.assign(y.size(), 0);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t out = ((b * oh + oy) * ow + ox) * c + ch;
            std::size_t best = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
            for (std::size_t dy = 0; dy < 2; ++dy)
              for (std::size_t dx = 0; dx < 2; ++dx) {
                const std::size_t idx = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                if (x[idx] > x[best]) best = idx;
              }
            y[out] = x[best];
            argmax_[out] = best;
          }
    return y;
  }

  BasicTensor<T> backward(const BasicTensor<T>& dy) const {
    if (argmax_.size() != dy.size()) fail(ErrorKind::shape_mismatch, "max pool backward without matching forward");
    BasicTensor<T> dx(input_shape_);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax_[i]] += dy[i];
    return dx;
  }

 private:
  Shape input_shape_;
  std::vector<std::size_t> argmax_;
};

// ---------------------------------------------------------------------------

template <typename T>
struct DenseGrads {
  BasicTensor<T> dx;
  BasicTensor<T> dweight;
  BasicTensor<T> dbias;
};

template <typename T>
class Dense {
 public:
  Dense() = default;
  Dense(std::size_t in, std::size_t out) : weight({in, out}), bias({out}) {}

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
  std::size_t param_count() const { return weight.size() + bias.size(); }

  BasicTensor<T> forward(const BasicTensor<T>& x) const {
    check_input(x);
    BasicTensor<T> y({x.dim(0), out_features()});
    for (std::size_t b = 0; b < x.dim(0); ++b)
      for (std::size_t j = 0; j < out_features(); ++j) y[b * out_features() + j] = bias[j];
    detail::gemm_accumulate(x.data(), weight.data(), y.data(), x.dim(0), in_features(), out_features());
    return y;
  }

  DenseGrads<T> backward(const BasicTensor<T>& x, const BasicTensor<T>& dy, bool need_dx = true,
                         bool need_params = true) const {
    check_input(x);
    const std::size_t n = x.dim(0), in = in_features(), out = out_features();
    require_same_shape(dy.shape(), Shape{n, out}, "dense backward dy");
    DenseGrads<T> g;
    if (need_params) {
      g.dweight = BasicTensor<T>(weight.shape());
      g.dbias = BasicTensor<T>(bias.shape());
      for (std::size_t b = 0; b < n; ++b) {
        const T* grad = dy.data() + b * out;
        for (std::size_t j = 0; j < out; ++j) g.dbias[j] += grad[j];
        for (std::size_t i = 0; i < in; ++i) {
          const T v = x[b * in + i];
          if (v == T{0}) continue;
          T* row = g.dweight.data() + i * out;
          for (std::size_t j = 0; j < out; ++j) row[j] += v * grad[j];
        }
      }
    }
    if (need_dx) {
      g.dx = BasicTensor<T>(x.shape());
      for (std::size_t b = 0; b < n; ++b) {
        const T* grad = dy.data() + b * out;
        for (std::size_t i = 0; i < in; ++i) {
          const T* row = weight.data() + i * out;
          T acc{0};
          for (std::size_t j = 0; j < out; ++j) acc += row[j] * grad[j];
          g.dx[b * in + i] = acc;
        }
      }
    }
    return g;
  }

  BasicTensor<T> weight;
  BasicTensor<T> bias;

 private:
  void check_input(const BasicTensor<T>& x) const {
    detail::require_rank(x.shape(), 2, "dense input");
    if (x.dim(1) != in_features()) {
      fail(ErrorKind::shape_mismatch, "dense expects " + std::to_string(in_features()) + " features, got " +
                                          std::to_string(x.dim(1)));
    }
  }
};

// ---------------------------------------------------------------------------

template <typename T>
struct LossAndGrad {
  double loss = 0.0;
  BasicTensor<T> grad;
};

/// Mean softmax cross-entropy over the batch; grad = (softmax - onehot) / N.
template <typename T>
LossAndGrad<T> softmax_xent(const BasicTensor<T>& logits, std::span<const std::int32_t> labels) {
  detail::require_rank(logits.shape(), 2, "softmax_xent logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) fail(ErrorKind::shape_mismatch, "label count does not match batch size");
  LossAndGrad<T> out;
  out.grad = BasicTensor<T>(logits.shape());
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t b = 0; b < n; ++b) {
    const std::int32_t label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      fail(ErrorKind::invalid_label, "label " + std::to_string(label) + " outside [0," + std::to_string(k) + ")");
    }
    const T* row = logits.data() + b * k;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
    const double log_sum = std::log(sum);
    out.loss += (log_sum - (row[label] - mx)) * inv_n;
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::exp(row[j] - mx - log_sum);
      out.grad[b * k + j] = static_cast<T>((p - (static_cast<std::int32_t>(j) == label ? 1.0 : 0.0)) * inv_n);
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
  detail::require_rank(logits.shape(), 2, "softmax logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  BasicTensor<T> p(logits.shape());
  for (std::size_t b = 0; b < n; ++b) {
    const T* row = logits.data() + b * k;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < k; ++j) p[b * k + j] = static_cast<T>(std::exp(row[j] - mx) / sum);
  }
  return p;
}

}  // namespace dnt
