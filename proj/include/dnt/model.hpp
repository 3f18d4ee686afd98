#pragma once

// Block-structured CNN: every block is conv_count x [Conv2D, BatchNorm2D,
// ReLU] followed by a 2x2 max pool; the head is flatten -> Dense(hidden) ->
// ReLU -> Dense(num_classes).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dnt/error.hpp"
#include "dnt/layers.hpp"
#include "dnt/random.hpp"
#include "dnt/tensor.hpp"

namespace dnt {

struct BlockSpec {
  std::size_t conv_count = 1;
  std::size_t channels = 1;

  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

struct ModelSpec {
  std::vector<BlockSpec> blocks;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t in_channels = 1;
  std::size_t num_classes = 10;
  std::size_t head_hidden = 128;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;

  /// Spatial size after block `b`'s pool.
  std::size_t tap_height(std::size_t b) const { return height >> (b + 1); }
  std::size_t tap_width(std::size_t b) const { return width >> (b + 1); }

  std::size_t block_input_channels(std::size_t b) const { return b == 0 ? in_channels : blocks[b - 1].channels; }

  std::size_t flat_features() const {
    return tap_height(blocks.size() - 1) * tap_width(blocks.size() - 1) * blocks.back().channels;
  }

  void validate() const {
    if (blocks.empty()) fail(ErrorKind::invalid_spec, "model needs at least one block");
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      if (blocks[b].conv_count < 1) fail(ErrorKind::invalid_spec, "block " + std::to_string(b) + " has no convolutions");
      if (blocks[b].channels < 1) fail(ErrorKind::invalid_spec, "block " + std::to_string(b) + " has no channels");
    }
    if (blocks.size() >= 31) fail(ErrorKind::invalid_spec, "too many blocks");
    const std::size_t div = std::size_t{1} << blocks.size();
    if (height == 0 || width == 0 || height % div != 0 || width % div != 0) {
      fail(ErrorKind::invalid_spec, "input " + std::to_string(height) + "x" + std::to_string(width) +
                                        " is not divisible by " + std::to_string(div) + " (2^blocks)");
    }
    if (in_channels < 1) fail(ErrorKind::invalid_spec, "input needs at least one channel");
    if (num_classes < 1) fail(ErrorKind::invalid_spec, "num_classes must be positive");
    if (head_hidden < 1) fail(ErrorKind::invalid_spec, "head_hidden must be positive");
  }
};

/// Desk-scale VGG16 stand-in: the VGG16 block pattern (2,2,3,3,3) with
/// narrow channels on 32x32 single-channel input.
inline ModelSpec mini_vgg_spec(std::size_t num_classes = 10, std::size_t in_channels = 1) {
  ModelSpec s;
  s.blocks = {{2, 8}, {2, 16}, {3, 32}, {3, 32}, {3, 32}};
  s.height = 32;
  s.width = 32;
  s.in_channels = in_channels;
  s.num_classes = num_classes;
  s.head_hidden = 128;
  return s;
}

inline void to_json(nlohmann::json& j, const ModelSpec& s) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : s.blocks) blocks.push_back({{"conv_count", b.conv_count}, {"channels", b.channels}});
  j = nlohmann::json{{"blocks", blocks},
                     {"input_shape", {s.height, s.width, s.in_channels}},
                     {"num_classes", s.num_classes},
                     {"head_hidden", s.head_hidden}};
}

inline void from_json(const nlohmann::json& j, ModelSpec& s) {
  try {
    s.blocks.clear();
    for (const auto& b : j.at("blocks")) {
      s.blocks.push_back({b.at("conv_count").get<std::size_t>(), b.at("channels").get<std::size_t>()});
    }
    const auto& in = j.at("input_shape");
    if (!in.is_array() || in.size() != 3) fail(ErrorKind::invalid_spec, "input_shape must be [H,W,C]");
    s.height = in[0].get<std::size_t>();
    s.width = in[1].get<std::size_t>();
    s.in_channels = in[2].get<std::size_t>();
    s.num_classes = j.at("num_classes").get<std::size_t>();
    s.head_hidden = j.at("head_hidden").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::invalid_spec, std::string("malformed model spec: ") + e.what());
  }
}

template <typename T>
void glorot_uniform(BasicTensor<T>& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : t.span()) v = static_cast<T>(uniform(rng, -limit, limit));
}

template <typename T>
void glorot_uniform(Conv2D<T>& conv, Rng& rng) {
  glorot_uniform(conv.weight, 9 * conv.in_channels(), 9 * conv.out_channels(), rng);
  conv.bias.fill(T{0});
}

template <typename T>
void glorot_uniform(Dense<T>& dense, Rng& rng) {
  glorot_uniform(dense.weight, dense.in_features(), dense.out_features(), rng);
  dense.bias.fill(T{0});
}

/// Non-owning handle into a network's registry.
template <typename T>
struct ParamSlot {
  std::string name;
  BasicTensor<T>* value = nullptr;
  BasicTensor<T>* grad = nullptr;
};

template <typename T>
struct NamedTensorRef {
  std::string name;
  BasicTensor<T>* tensor = nullptr;
  bool trainable = true;
};

template <typename T>
class BasicNetwork {
 public:
  struct ConvUnit {
    Conv2D<T> conv;
    BatchNorm2D<T> bn;
    BasicTensor<T> dweight, dbias, dgamma, dbeta;
    // Training caches: conv input, conv output (= bn input), bn output (= relu input).
    BasicTensor<T> x_in, conv_out, bn_out;
    bool bn_train = false;
  };

  struct Block {
    std::vector<ConvUnit> units;
    MaxPool2x2<T> pool;
    bool trainable = true;
  };

  BasicNetwork() = default;

  /// Glorot-uniform conv/dense weights, zero biases, identity batch norm.
  static BasicNetwork build(const ModelSpec& spec, std::uint64_t seed) {
    BasicNetwork net(spec);
    Rng rng(seed);
    for (auto& block : net.blocks_)
      for (auto& u : block.units) glorot_uniform(u.conv, rng);
    glorot_uniform(net.fc1_, rng);
    glorot_uniform(net.fc2_, rng);
    return net;
  }

  /// Same topology, every parameter zero, batch norm at identity.
  static BasicNetwork zeros(const ModelSpec& spec) { return BasicNetwork(spec); }

  const ModelSpec& spec() const { return spec_; }
  std::size_t block_count() const { return blocks_.size(); }
  Block& block(std::size_t b) { return blocks_.at(b); }
  const Block& block(std::size_t b) const { return blocks_.at(b); }
  Dense<T>& fc1() { return fc1_; }
  Dense<T>& fc2() { return fc2_; }
  const Dense<T>& fc1() const { return fc1_; }
  const Dense<T>& fc2() const { return fc2_; }

  /// Layer kinds in execution order.
  std::vector<std::string> layer_sequence() const {
    std::vector<std::string> seq;
    for (const auto& block : blocks_) {
      for (std::size_t i = 0; i < block.units.size(); ++i) {
        seq.insert(seq.end(), {"Conv2D", "BatchNorm2D", "ReLU"});
      }
      seq.emplace_back("MaxPool2x2");
    }
    seq.insert(seq.end(), {"Flatten", "Dense", "ReLU", "Dense"});
    return seq;
  }

  // -- trainability ---------------------------------------------------------

  void set_all_trainable(bool on) {
    for (auto& b : blocks_) b.trainable = on;
    head_trainable_ = on;
  }
  void set_block_trainable(std::size_t b, bool on) { blocks_.at(b).trainable = on; }
  void set_head_trainable(bool on) { head_trainable_ = on; }
  bool block_trainable(std::size_t b) const { return blocks_.at(b).trainable; }
  bool head_trainable() const { return head_trainable_; }

  // Compressed blocks start uninitialized until an init scheme runs.
  std::optional<std::size_t> uninitialized_block() const { return uninitialized_block_; }
  void mark_uninitialized(std::size_t b) { uninitialized_block_ = b; }
  void mark_initialized() { uninitialized_block_.reset(); }

  // -- forward --------------------------------------------------------------

  /// In train mode, batch norm in trainable blocks uses batch statistics;
  /// frozen blocks always normalize with their running statistics.
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode) {
    BasicTensor<T> h = forward_to_tap(x, blocks_.size() - 1, mode);
    return head_forward(h, mode);
  }

  /// Activation after block `tap`'s max pool.
  BasicTensor<T> forward_to_tap(const BasicTensor<T>& x, std::size_t tap, Mode mode) {
    check_tap(tap);
    check_input(x);
    BasicTensor<T> h = x;
    for (std::size_t b = 0; b <= tap; ++b) h = run_block(b, h, mode, /*pool=*/true);
    return h;
  }

  /// Activation after block `b`'s last ReLU, before its pool. Eval mode.
  BasicTensor<T> block_activation(const BasicTensor<T>& x, std::size_t b) {
    check_tap(b);
    check_input(x);
    BasicTensor<T> h = x;
    for (std::size_t i = 0; i < b; ++i) h = run_block(i, h, Mode::eval, true);
    return run_block(b, h, Mode::eval, false);
  }

  /// Classifier head applied to the last block's pooled activation.
  BasicTensor<T> head_forward(const BasicTensor<T>& pooled, Mode mode) {
    const std::size_t n = pooled.dim(0);
    BasicTensor<T> flat = pooled.reshaped({n, pooled.size() / n});
    BasicTensor<T> h1 = fc1_.forward(flat);
    BasicTensor<T> a1 = relu_forward(h1);
    BasicTensor<T> logits = fc2_.forward(a1);
    if (mode == Mode::train) {
      pooled_shape_ = pooled.shape();
      flat_in_ = std::move(flat);
      fc1_out_ = std::move(h1);
      fc2_in_ = std::move(a1);
    }
    return logits;
  }

  // -- backward -------------------------------------------------------------

  /// Fills gradients of trainable parameters from dL/dlogits. Requires the
  /// preceding train-mode forward.
  void backward(const BasicTensor<T>& dlogits) {
    const std::size_t lowest = lowest_trainable_block();
    const bool need_below = lowest < blocks_.size();
    auto g2 = fc2_.backward(fc2_in_, dlogits, true, head_trainable_);
    BasicTensor<T> d1 = relu_backward(fc1_out_, g2.dx);
    auto g1 = fc1_.backward(flat_in_, d1, need_below, head_trainable_);
    if (head_trainable_) {
      fc2_dweight_ = std::move(g2.dweight);
      fc2_dbias_ = std::move(g2.dbias);
      fc1_dweight_ = std::move(g1.dweight);
      fc1_dbias_ = std::move(g1.dbias);
    }
    if (!need_below) return;
    BasicTensor<T> d = g1.dx.reshaped(pooled_shape_);
    backward_blocks(d, blocks_.size() - 1, lowest);
  }

  /// Gradients from dL/d(activation after block `tap`'s pool).
  void backward_from_tap(const BasicTensor<T>& dtap, std::size_t tap) {
    check_tap(tap);
    const std::size_t lowest = lowest_trainable_block();
    if (lowest > tap) return;
    backward_blocks(dtap, tap, lowest);
  }

  void zero_grad() {
    for (auto& block : blocks_)
      for (auto& u : block.units) {
        u.dweight.fill(T{0});
        u.dbias.fill(T{0});
        u.dgamma.fill(T{0});
        u.dbeta.fill(T{0});
      }
    fc1_dweight_.fill(T{0});
    fc1_dbias_.fill(T{0});
    fc2_dweight_.fill(T{0});
    fc2_dbias_.fill(T{0});
  }

  // -- registry -------------------------------------------------------------

  /// Every persistent tensor (parameters and batch-norm running statistics)
  /// in a stable declaration order.
  std::vector<NamedTensorRef<T>> state() {
    std::vector<NamedTensorRef<T>> out;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      for (std::size_t i = 0; i < blocks_[b].units.size(); ++i) {
        auto& u = blocks_[b].units[i];
        const std::string conv = "block" + std::to_string(b) + ".conv" + std::to_string(i);
        const std::string bn = "block" + std::to_string(b) + ".bn" + std::to_string(i);
        out.push_back({conv + ".weight", &u.conv.weight, true});
        out.push_back({conv + ".bias", &u.conv.bias, true});
        out.push_back({bn + ".gamma", &u.bn.gamma, true});
        out.push_back({bn + ".beta", &u.bn.beta, true});
        out.push_back({bn + ".running_mean", &u.bn.running_mean, false});
        out.push_back({bn + ".running_var", &u.bn.running_var, false});
      }
    }
    out.push_back({"head.fc1.weight", &fc1_.weight, true});
    out.push_back({"head.fc1.bias", &fc1_.bias, true});
    out.push_back({"head.fc2.weight", &fc2_.weight, true});
    out.push_back({"head.fc2.bias", &fc2_.bias, true});
    return out;
  }

  std::vector<std::pair<std::string, const BasicTensor<T>*>> state() const {
    std::vector<std::pair<std::string, const BasicTensor<T>*>> out;
    for (const auto& r : const_cast<BasicNetwork*>(this)->state()) out.emplace_back(r.name, r.tensor);
    return out;
  }

  /// Trainable parameters of the currently unfrozen blocks with their gradients.
  std::vector<ParamSlot<T>> trainable_parameters() {
    std::vector<ParamSlot<T>> out;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      if (!blocks_[b].trainable) continue;
      for (std::size_t i = 0; i < blocks_[b].units.size(); ++i) {
        auto& u = blocks_[b].units[i];
        const std::string conv = "block" + std::to_string(b) + ".conv" + std::to_string(i);
        const std::string bn = "block" + std::to_string(b) + ".bn" + std::to_string(i);
        out.push_back({conv + ".weight", &u.conv.weight, &u.dweight});
        out.push_back({conv + ".bias", &u.conv.bias, &u.dbias});
        out.push_back({bn + ".gamma", &u.bn.gamma, &u.dgamma});
        out.push_back({bn + ".beta", &u.bn.beta, &u.dbeta});
      }
    }
    if (head_trainable_) {
      out.push_back({"head.fc1.weight", &fc1_.weight, &fc1_dweight_});
      out.push_back({"head.fc1.bias", &fc1_.bias, &fc1_dbias_});
      out.push_back({"head.fc2.weight", &fc2_.weight, &fc2_dweight_});
      out.push_back({"head.fc2.bias", &fc2_.bias, &fc2_dbias_});
    }
    return out;
  }

  /// Trainable scalar count: conv W/b, batch-norm gamma/beta, dense W/b.
  std::size_t param_count() const {
    std::size_t total = fc1_.param_count() + fc2_.param_count();
    for (const auto& block : blocks_)
      for (const auto& u : block.units) total += u.conv.param_count() + u.bn.param_count();
    return total;
  }

 private:
  explicit BasicNetwork(const ModelSpec& spec) : spec_(spec) {
    spec_.validate();
    std::size_t cin = spec_.in_channels;
    for (const auto& bs : spec_.blocks) {
      Block block;
      for (std::size_t i = 0; i < bs.conv_count; ++i) {
        ConvUnit u;
        u.conv = Conv2D<T>(i == 0 ? cin : bs.channels, bs.channels);
        u.bn = BatchNorm2D<T>(bs.channels);
        u.dweight = BasicTensor<T>(u.conv.weight.shape());
        u.dbias = BasicTensor<T>(u.conv.bias.shape());
        u.dgamma = BasicTensor<T>(u.bn.gamma.shape());
        u.dbeta = BasicTensor<T>(u.bn.beta.shape());
        block.units.push_back(std::move(u));
      }
      blocks_.push_back(std::move(block));
      cin = bs.channels;
    }
    fc1_ = Dense<T>(spec_.flat_features(), spec_.head_hidden);
    fc2_ = Dense<T>(spec_.head_hidden, spec_.num_classes);
    fc1_dweight_ = BasicTensor<T>(fc1_.weight.shape());
    fc1_dbias_ = BasicTensor<T>(fc1_.bias.shape());
    fc2_dweight_ = BasicTensor<T>(fc2_.weight.shape());
    fc2_dbias_ = BasicTensor<T>(fc2_.bias.shape());
  }

  void check_tap(std::size_t tap) const {
    if (tap >= blocks_.size()) {
      fail(ErrorKind::invalid_tap, "block " + std::to_string(tap) + " outside [0," + std::to_string(blocks_.size()) + ")");
    }
  }

  void check_input(const BasicTensor<T>& x) const {
    const Shape want{spec_.height, spec_.width, spec_.in_channels};
    if (x.rank() != 4 || Shape(x.shape().begin() + 1, x.shape().end()) != want) {
      fail(ErrorKind::shape_mismatch, "network input " + shape_str(x.shape()) + " does not match [N," +
                                          std::to_string(spec_.height) + "," + std::to_string(spec_.width) + "," +
                                          std::to_string(spec_.in_channels) + "]");
    }
  }

  std::size_t lowest_trainable_block() const {
    for (std::size_t b = 0; b < blocks_.size(); ++b)
      if (blocks_[b].trainable) return b;
    return blocks_.size();
  }

  BasicTensor<T> run_block(std::size_t b, BasicTensor<T> h, Mode mode, bool pool) {
    Block& block = blocks_[b];
    const bool cache = mode == Mode::train;
    const bool bn_train = cache && block.trainable;
    for (auto& u : block.units) {
      BasicTensor<T> c = u.conv.forward(h);
      BasicTensor<T> n = bn_train ? u.bn.forward(c, Mode::train) : u.bn.forward_eval(c);
      BasicTensor<T> a = relu_forward(n);
      if (cache) {
        u.x_in = std::move(h);
        u.conv_out = std::move(c);
        u.bn_out = std::move(n);
        u.bn_train = bn_train;
      }
      h = std::move(a);
    }
    if (!pool) return h;
    if (cache) return block.pool.forward(h);
    MaxPool2x2<T> scratch;
    return scratch.forward(h);
  }

  void backward_blocks(BasicTensor<T> d, std::size_t top, std::size_t lowest) {
    for (std::size_t b = top + 1; b-- > lowest;) {
      Block& block = blocks_[b];
      d = block.pool.backward(d);
      for (std::size_t i = block.units.size(); i-- > 0;) {
        auto& u = block.units[i];
        const bool is_last = b == lowest && i == 0;
        d = relu_backward(u.bn_out, d);
        if (u.bn_train) {
          auto g = u.bn.backward(u.conv_out, d, true);
          if (block.trainable) {
            u.dgamma = std::move(g.dgamma);
            u.dbeta = std::move(g.dbeta);
          }
          d = std::move(g.dx);
        } else {
          d = u.bn.backward_eval(d);
        }
        auto g = u.conv.backward(u.x_in, d, !is_last, block.trainable);
        if (block.trainable) {
          u.dweight = std::move(g.dweight);
          u.dbias = std::move(g.dbias);
        }
        if (!is_last) d = std::move(g.dx);
      }
    }
  }

  ModelSpec spec_;
  std::vector<Block> blocks_;
  Dense<T> fc1_, fc2_;
  BasicTensor<T> fc1_dweight_, fc1_dbias_, fc2_dweight_, fc2_dbias_;
  Shape pooled_shape_;
  BasicTensor<T> flat_in_, fc1_out_, fc2_in_;
  bool head_trainable_ = true;
  std::optional<std::size_t> uninitialized_block_;
};

using Network = BasicNetwork<float>;
using Network64 = BasicNetwork<double>;

template <typename T>
BasicNetwork<T> build(const ModelSpec& spec, std::uint64_t seed) {
  return BasicNetwork<T>::build(spec, seed);
}

/// Deep copy: independent state, bitwise-identical parameters.
template <typename T>
BasicNetwork<T> clone(const BasicNetwork<T>& net) {
  return net;
}

template <typename T>
std::size_t param_count(const BasicNetwork<T>& net) {
  return net.param_count();
}

/// Trainable scalars of one convolution unit (conv + batch norm).
inline std::size_t conv_unit_params(std::size_t cin, std::size_t cout) { return 9 * cin * cout + cout + 2 * cout; }

}  // namespace dnt
