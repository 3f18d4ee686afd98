#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dnt/error.hpp"
#include "dnt/random.hpp"
#include "dnt/tensor.hpp"

namespace dnt {

enum class Split { train, validation, test };

struct Dataset {
  Tensor images;                     // [N,H,W,C]
  std::vector<std::int32_t> labels;  // [N]
  Split split = Split::train;
  std::size_t class_count = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t height() const { return images.dim(1); }
  std::size_t width() const { return images.dim(2); }
  std::size_t channels() const { return images.dim(3); }
  std::size_t sample_size() const { return images.size() / labels.size(); }

  void validate() const {
    if (labels.empty()) fail(ErrorKind::consistency, "dataset is empty");
    if (images.rank() != 4 || images.dim(0) != labels.size()) {
      fail(ErrorKind::consistency, "image tensor " + shape_str(images.shape()) + " does not match " +
                                       std::to_string(labels.size()) + " labels");
    }
    for (auto l : labels)
      if (l < 0 || static_cast<std::size_t>(l) >= class_count) fail(ErrorKind::invalid_label, "label outside [0,K)");
  }
};

struct Batch {
  Tensor images;
  std::vector<std::int32_t> labels;
};

/// Samples [begin, begin + count) as a new dataset.
inline Dataset slice(const Dataset& ds, std::size_t begin, std::size_t count, Split split) {
  if (count == 0 || begin + count > ds.size()) fail(ErrorKind::out_of_range, "dataset slice outside bounds");
  const std::size_t per = ds.sample_size();
  Dataset out;
  Shape shape = ds.images.shape();
  shape[0] = count;
  std::vector<float> data(ds.images.data() + begin * per, ds.images.data() + (begin + count) * per);
  out.images = Tensor(shape, std::move(data));
  out.labels.assign(ds.labels.begin() + static_cast<std::ptrdiff_t>(begin),
                    ds.labels.begin() + static_cast<std::ptrdiff_t>(begin + count));
  out.split = split;
  out.class_count = ds.class_count;
  return out;
}

/// Holds out the last `val_count` training samples for validation.
inline std::pair<Dataset, Dataset> split_validation(const Dataset& train, std::size_t val_count) {
  if (val_count == 0 || val_count >= train.size()) {
    fail(ErrorKind::out_of_range, "validation count must be in [1, " + std::to_string(train.size()) + ")");
  }
  const std::size_t n_train = train.size() - val_count;
  return {slice(train, 0, n_train, Split::train), slice(train, n_train, val_count, Split::validation)};
}

inline Batch gather(const Dataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) fail(ErrorKind::empty_batch, "empty batch");
  const std::size_t per = ds.sample_size();
  Shape shape = ds.images.shape();
  shape[0] = indices.size();
  Batch b;
  std::vector<float> data(indices.size() * per);
  b.labels.resize(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t idx = indices[i];
    if (idx >= ds.size()) fail(ErrorKind::out_of_range, "sample index " + std::to_string(idx));
    std::copy_n(ds.images.data() + idx * per, per, data.data() + i * per);
    b.labels[i] = ds.labels[idx];
  }
  b.images = Tensor(shape, std::move(data));
  return b;
}

/// Batch index lists covering [0, n) once; the final partial batch is kept.
/// The order is a Fisher-Yates shuffle driven by `shuffle_seed`.
inline std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size,
                                                     std::optional<std::uint64_t> shuffle_seed) {
  if (batch_size == 0) fail(ErrorKind::config_validation, "batch size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle_seed) {
    Rng rng(*shuffle_seed);
    shuffle(std::span<std::size_t>(order), rng);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return out;
}

inline std::vector<std::vector<std::size_t>> batches(const Dataset& ds, std::size_t batch_size,
                                                     std::optional<std::uint64_t> shuffle_seed) {
  return batches(ds.size(), batch_size, shuffle_seed);
}

// ---------------------------------------------------------------------------
// IDX (MNIST) files: big-endian magic, big-endian dimension sizes, ubyte data.

namespace idx {

inline constexpr std::uint32_t images_magic = 0x00000803;
inline constexpr std::uint32_t labels_magic = 0x00000801;

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    fail(ErrorKind::data_not_found, "cannot open " + path.string() +
                                        " (download the MNIST IDX files and pass their directory with --data-dir)");
  }
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset, const std::string& what) {
  if (buf.size() < offset + 4) fail(ErrorKind::truncation, what + ": header truncated");
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

}  // namespace idx

inline Dataset load_mnist_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                              Split split = Split::train) {
  const auto ibuf = idx::read_file(images_path);
  const auto lbuf = idx::read_file(labels_path);
  const std::string iname = images_path.filename().string(), lname = labels_path.filename().string();

  const std::uint32_t imagic = idx::read_be32(ibuf, 0, iname);
  if (imagic != idx::images_magic) fail(ErrorKind::format, iname + ": bad image magic");
  const std::uint32_t count = idx::read_be32(ibuf, 4, iname);
  const std::uint32_t rows = idx::read_be32(ibuf, 8, iname);
  const std::uint32_t cols = idx::read_be32(ibuf, 12, iname);
  if (count == 0 || rows == 0 || cols == 0) fail(ErrorKind::format, iname + ": zero dimension");
  const std::size_t pixels = std::size_t{count} * rows * cols;
  if (ibuf.size() < 16 + pixels) fail(ErrorKind::truncation, iname + ": pixel data truncated");

  const std::uint32_t lmagic = idx::read_be32(lbuf, 0, lname);
  if (lmagic != idx::labels_magic) fail(ErrorKind::format, lname + ": bad label magic");
  const std::uint32_t lcount = idx::read_be32(lbuf, 4, lname);
  if (lbuf.size() < 8 + std::size_t{lcount}) fail(ErrorKind::truncation, lname + ": label data truncated");
  if (lcount != count) {
    fail(ErrorKind::consistency, std::to_string(count) + " images but " + std::to_string(lcount) + " labels");
  }

  Dataset ds;
  std::vector<float> data(pixels);
  for (std::size_t i = 0; i < pixels; ++i) data[i] = static_cast<float>(ibuf[16 + i]) / 255.0f;
  ds.images = Tensor({count, rows, cols, 1}, std::move(data));
  ds.labels.resize(count);
  std::int32_t max_label = 0;
  for (std::size_t i = 0; i < count; ++i) {
    ds.labels[i] = lbuf[8 + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.class_count = std::max<std::size_t>(10, static_cast<std::size_t>(max_label) + 1);
  ds.split = split;
  return ds;
}

struct MnistFiles {
  Dataset train;
  Dataset test;
};

/// Standard file names in `dir`.
inline MnistFiles load_mnist(const std::filesystem::path& dir) {
  return {load_mnist_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte", Split::train),
          load_mnist_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte", Split::test)};
}

// ---------------------------------------------------------------------------
// Synthetic shapes: four parametric classes on 32x32 single-channel images.

enum class ShapeClass : std::int32_t { filled_square = 0, hollow_square = 1, diagonal_stripe = 2, disk = 3 };

inline constexpr std::size_t synth_class_count = 4;
inline constexpr std::size_t synth_size = 32;

/// Label of sample i is i mod 4, so classes are balanced to within one.
inline Dataset synth_shapes(std::size_t n, std::uint64_t seed, Split split = Split::train) {
  if (n < synth_class_count) fail(ErrorKind::config_validation, "synthetic dataset needs n >= 4");
  constexpr std::size_t S = synth_size;
  Rng rng(seed);
  std::vector<float> data(n * S * S, 0.0f);
  Dataset ds;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto cls = static_cast<ShapeClass>(i % synth_class_count);
    ds.labels[i] = static_cast<std::int32_t>(cls);
    float* img = data.data() + i * S * S;
    const double intensity = uniform(rng, 0.5, 1.0);
    auto put = [&](long y, long x) {
      if (y >= 0 && x >= 0 && y < static_cast<long>(S) && x < static_cast<long>(S))
        img[static_cast<std::size_t>(y) * S + static_cast<std::size_t>(x)] = static_cast<float>(intensity);
    };
    switch (cls) {
      case ShapeClass::filled_square:
      case ShapeClass::hollow_square: {
        const long side = 8 + static_cast<long>(uniform_index(rng, 9));  // 8..16
        const long y0 = 2 + static_cast<long>(uniform_index(rng, static_cast<std::uint64_t>(S - 4 - side + 1)));
        const long x0 = 2 + static_cast<long>(uniform_index(rng, static_cast<std::uint64_t>(S - 4 - side + 1)));
        const bool hollow = cls == ShapeClass::hollow_square;
        for (long y = y0; y < y0 + side; ++y)
          for (long x = x0; x < x0 + side; ++x) {
            const bool edge = y < y0 + 2 || y >= y0 + side - 2 || x < x0 + 2 || x >= x0 + side - 2;
            if (!hollow || edge) put(y, x);
          }
        break;
      }
      case ShapeClass::diagonal_stripe: {
        const long offset = static_cast<long>(uniform_index(rng, 17)) - 8;
        const long half = 1 + static_cast<long>(uniform_index(rng, 2));
        const long len = 12 + static_cast<long>(uniform_index(rng, 13));  // 12..24
        const long start = static_cast<long>(uniform_index(rng, static_cast<std::uint64_t>(S - len + 1)));
        for (long t = start; t < start + len; ++t)
          for (long d = -half; d <= half; ++d) put(t, t + offset + d);
        break;
      }
      case ShapeClass::disk: {
        const double r = uniform(rng, 4.0, 8.0);
        const double cy = uniform(rng, r + 2.0, S - r - 2.0);
        const double cx = uniform(rng, r + 2.0, S - r - 2.0);
        for (long y = 0; y < static_cast<long>(S); ++y)
          for (long x = 0; x < static_cast<long>(S); ++x) {
            const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
            if (dy * dy + dx * dx <= r * r) put(y, x);
          }
        break;
      }
    }
    for (std::size_t p = 0; p < S * S; ++p) {
      const double v = img[p] + 0.15 * normal01(rng);
      img[p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  ds.images = Tensor({n, S, S, 1}, std::move(data));
  ds.class_count = synth_class_count;
  ds.split = split;
  return ds;
}

// ---------------------------------------------------------------------------
// Preprocessing: optional zero padding to a square size, per-channel
// standardization with statistics from the train split, horizontal flips.

inline Tensor zero_pad(const Tensor& images, std::size_t size) {
  const std::size_t n = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
  if (h == size && w == size) return images;
  if (h > size || w > size) fail(ErrorKind::config_validation, "cannot pad images down to a smaller size");
  const std::size_t top = (size - h) / 2, left = (size - w) / 2;
  Tensor out({n, size, size, c});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(images.data() + ((b * h + y) * w) * c, w * c,
                  out.data() + ((b * size + y + top) * size + left) * c);
  return out;
}

class Preprocessor {
 public:
  Preprocessor() = default;
  Preprocessor(std::optional<std::size_t> pad_to, double hflip_prob) : pad_to_(pad_to), hflip_prob_(hflip_prob) {
    if (!(hflip_prob >= 0.0 && hflip_prob <= 1.0)) fail(ErrorKind::config_validation, "hflip_prob must be in [0,1]");
  }

  /// Per-channel mean/std of the (padded) train split.
  void fit(const Dataset& train) {
    if (train.split != Split::train) fail(ErrorKind::config_validation, "statistics must come from the train split");
    const Tensor padded = pad_to_ ? zero_pad(train.images, *pad_to_) : train.images;
    const std::size_t c = padded.dim(3);
    std::vector<double> sum(c, 0.0), sq(c, 0.0);
    for (std::size_t i = 0; i < padded.size(); i += c)
      for (std::size_t ch = 0; ch < c; ++ch) sum[ch] += padded[i + ch];
    const double count = static_cast<double>(padded.size() / c);
    mean_.assign(c, 0.0);
    std_.assign(c, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) mean_[ch] = sum[ch] / count;
    for (std::size_t i = 0; i < padded.size(); i += c)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double d = padded[i + ch] - mean_[ch];
        sq[ch] += d * d;
      }
    for (std::size_t ch = 0; ch < c; ++ch) {
      std_[ch] = std::sqrt(sq[ch] / count);
      if (!(std_[ch] > 0.0)) fail(ErrorKind::consistency, "channel " + std::to_string(ch) + " has zero variance");
    }
  }

  bool fitted() const { return !mean_.empty(); }
  const std::vector<double>& mean() const { return mean_; }
  const std::vector<double>& stddev() const { return std_; }
  std::optional<std::size_t> pad_to() const { return pad_to_; }
  double hflip_prob() const { return hflip_prob_; }

  void set_stats(std::vector<double> mean, std::vector<double> stddev) {
    if (mean.size() != stddev.size() || mean.empty()) fail(ErrorKind::config_validation, "bad preprocessing statistics");
    for (double s : stddev)
      if (!(s > 0.0)) fail(ErrorKind::config_validation, "std must be > 0");
    mean_ = std::move(mean);
    std_ = std::move(stddev);
  }

  Dataset apply(const Dataset& ds) const {
    if (!fitted()) fail(ErrorKind::unfitted, "preprocessor applied before fit");
    Dataset out = ds;
    if (pad_to_) out.images = zero_pad(ds.images, *pad_to_);
    const std::size_t c = out.images.dim(3);
    if (c != mean_.size()) fail(ErrorKind::shape_mismatch, "channel count differs from fitted statistics");
    for (std::size_t i = 0; i < out.images.size(); i += c)
      for (std::size_t ch = 0; ch < c; ++ch)
        out.images[i + ch] = static_cast<float>((out.images[i + ch] - mean_[ch]) / std_[ch]);
    return out;
  }

 private:
  std::optional<std::size_t> pad_to_;
  double hflip_prob_ = 0.0;
  std::vector<double> mean_;
  std::vector<double> std_;
};

inline Dataset preprocess(const Dataset& ds, const Preprocessor& p) { return p.apply(ds); }

/// Mirrors sample `b` of an NHWC batch left-right in place.
inline void hflip_sample(Tensor& images, std::size_t b) {
  const std::size_t h = images.dim(1), w = images.dim(2), c = images.dim(3);
  for (std::size_t y = 0; y < h; ++y) {
    float* row = images.data() + ((b * h + y) * w) * c;
    for (std::size_t x = 0; x < w / 2; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) std::swap(row[x * c + ch], row[(w - 1 - x) * c + ch]);
  }
}

/// Flips each sample independently with the preprocessor's probability.
inline Batch augment_batch(Batch batch, const Preprocessor& p, std::uint64_t seed) {
  if (p.hflip_prob() <= 0.0) return batch;
  Rng rng(seed);
  for (std::size_t b = 0; b < batch.labels.size(); ++b)
    if (uniform01(rng) < p.hflip_prob()) hflip_sample(batch.images, b);
  return batch;
}

}  // namespace dnt
