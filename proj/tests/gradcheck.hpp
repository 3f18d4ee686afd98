#pragma once

// Finite-difference checks for every layer kind, in double precision. Each
// check draws one random configuration from `seed` and returns the worst
// relative error over all gradients it compares.

#include <algorithm>
#include <cstdint>
#include <string>

#include "dnt/layers.hpp"
#include "dnt/model.hpp"
#include "test_support.hpp"

namespace dnt::testing {

struct GradCheck {
  std::string what;
  double error = 0.0;
};

inline GradCheck check_conv(std::uint64_t seed) {
  Rng rng(seed);
  static constexpr std::size_t widths[] = {1, 2, 3, 8, 16};
  const std::size_t n = 1 + uniform_index(rng, 2), h = 1 + uniform_index(rng, 5), w = 1 + uniform_index(rng, 5);
  const std::size_t cin = widths[uniform_index(rng, 5)], cout = widths[uniform_index(rng, 5)];
  Conv2D<double> conv(cin, cout);
  conv.weight = random_tensor<double>(conv.weight.shape(), rng);
  conv.bias = random_tensor<double>(conv.bias.shape(), rng);
  Tensor64 x = random_tensor<double>({n, h, w, cin}, rng);
  const Tensor64 r = random_tensor<double>({n, h, w, cout}, rng);
  auto loss = [&] { return dot(r, conv.forward(x)); };
  const auto g = conv.backward(x, r);
  double err = relative_error(g.dx, numeric_gradient(x, loss));
  err = std::max(err, relative_error(g.dweight, numeric_gradient(conv.weight, loss)));
  err = std::max(err, relative_error(g.dbias, numeric_gradient(conv.bias, loss)));
  return {"conv " + std::to_string(cin) + "->" + std::to_string(cout), err};
}

inline GradCheck check_batchnorm_train(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = 1 + uniform_index(rng, 3), h = 1 + uniform_index(rng, 3), w = 2 + uniform_index(rng, 3);
  const std::size_t c = 1 + uniform_index(rng, 4);
  BatchNorm2D<double> bn(c);
  bn.gamma = random_tensor<double>({c}, rng, 0.5, 1.5);
  bn.beta = random_tensor<double>({c}, rng);
  Tensor64 x = random_tensor<double>({n, h, w, c}, rng, -2.0, 2.0);
  const Tensor64 r = random_tensor<double>({n, h, w, c}, rng);
  auto loss = [&] {
    BatchNorm2D<double> scratch = bn;  // keep running statistics out of the picture
    return dot(r, scratch.forward(x, Mode::train));
  };
  const auto g = bn.backward(x, r);
  double err = relative_error(g.dx, numeric_gradient(x, loss));
  err = std::max(err, relative_error(g.dgamma, numeric_gradient(bn.gamma, loss)));
  err = std::max(err, relative_error(g.dbeta, numeric_gradient(bn.beta, loss)));
  return {"batchnorm train", err};
}

inline GradCheck check_batchnorm_eval(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t c = 1 + uniform_index(rng, 4);
  BatchNorm2D<double> bn(c);
  bn.gamma = random_tensor<double>({c}, rng, 0.5, 1.5);
  bn.beta = random_tensor<double>({c}, rng);
  bn.running_mean = random_tensor<double>({c}, rng);
  bn.running_var = random_tensor<double>({c}, rng, 0.2, 2.0);
  Tensor64 x = random_tensor<double>({2, 3, 2, c}, rng);
  const Tensor64 r = random_tensor<double>(x.shape(), rng);
  auto loss = [&] { return dot(r, bn.forward_eval(x)); };
  return {"batchnorm eval", relative_error(bn.backward_eval(r), numeric_gradient(x, loss))};
}

inline GradCheck check_relu(std::uint64_t seed) {
  Rng rng(seed);
  Tensor64 x = away_from_zero({1 + uniform_index(rng, 3), 3, 3, 1 + uniform_index(rng, 3)}, rng);
  const Tensor64 r = random_tensor<double>(x.shape(), rng);
  auto loss = [&] { return dot(r, relu_forward(x)); };
  return {"relu", relative_error(relu_backward(x, r), numeric_gradient(x, loss))};
}

inline GradCheck check_maxpool(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = 1 + uniform_index(rng, 2), h = 2 * (1 + uniform_index(rng, 3)), w = 2 * (1 + uniform_index(rng, 3));
  const std::size_t c = 1 + uniform_index(rng, 3);
  // Distinct values at least 1e-3 apart: no step can reorder a window.
  Tensor64 x({n, h, w, c});
  std::vector<std::size_t> order(x.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(std::span<std::size_t>(order), rng);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 1e-3 * static_cast<double>(order[i]);
  const Tensor64 r = random_tensor<double>({n, h / 2, w / 2, c}, rng);
  MaxPool2x2<double> pool;
  pool.forward(x);
  const Tensor64 dx = pool.backward(r);
  auto loss = [&] {
    MaxPool2x2<double> p;
    return dot(r, p.forward(x));
  };
  return {"maxpool", relative_error(dx, numeric_gradient(x, loss))};
}

inline GradCheck check_dense(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = 1 + uniform_index(rng, 4), in = 1 + uniform_index(rng, 7), out = 1 + uniform_index(rng, 5);
  Dense<double> d(in, out);
  d.weight = random_tensor<double>(d.weight.shape(), rng);
  d.bias = random_tensor<double>(d.bias.shape(), rng);
  Tensor64 x = random_tensor<double>({n, in}, rng);
  const Tensor64 r = random_tensor<double>({n, out}, rng);
  auto loss = [&] { return dot(r, d.forward(x)); };
  const auto g = d.backward(x, r);
  double err = relative_error(g.dx, numeric_gradient(x, loss));
  err = std::max(err, relative_error(g.dweight, numeric_gradient(d.weight, loss)));
  err = std::max(err, relative_error(g.dbias, numeric_gradient(d.bias, loss)));
  return {"dense", err};
}

inline GradCheck check_softmax_xent(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = 1 + uniform_index(rng, 4), k = 2 + uniform_index(rng, 5);
  Tensor64 logits = random_tensor<double>({n, k}, rng, -3.0, 3.0);
  std::vector<std::int32_t> labels(n);
  for (auto& l : labels) l = static_cast<std::int32_t>(uniform_index(rng, k));
  auto loss = [&] { return softmax_xent(logits, std::span<const std::int32_t>(labels)).loss; };
  const auto lg = softmax_xent(logits, std::span<const std::int32_t>(labels));
  return {"softmax_xent", relative_error(lg.grad, numeric_gradient(logits, loss))};
}

/// Whole network in train mode: conv/BN/ReLU/pool blocks plus the head.
inline GradCheck check_network(std::uint64_t seed) {
  Rng rng(seed);
  ModelSpec spec;
  spec.blocks = {{2, 2}, {1, 3}};
  spec.height = 4;
  spec.width = 4;
  spec.in_channels = 1;
  spec.num_classes = 3;
  spec.head_hidden = 4;
  Network64 net = Network64::build(spec, seed);
  for (std::size_t b = 0; b < net.block_count(); ++b)
    for (auto& u : net.block(b).units) {
      u.conv.bias = random_tensor<double>(u.conv.bias.shape(), rng, -0.1, 0.1);
      u.bn.gamma = random_tensor<double>(u.bn.gamma.shape(), rng, 0.5, 1.5);
      u.bn.beta = random_tensor<double>(u.bn.beta.shape(), rng, -0.1, 0.1);
    }
  Tensor64 x = random_tensor<double>({3, 4, 4, 1}, rng);
  std::vector<std::int32_t> labels{0, 1, 2};
  auto loss = [&] {
    Network64 scratch = net;
    return softmax_xent(scratch.forward(x, Mode::train), std::span<const std::int32_t>(labels)).loss;
  };
  Network64 work = net;
  const auto lg = softmax_xent(work.forward(x, Mode::train), std::span<const std::int32_t>(labels));
  work.backward(lg.grad);
  double err = 0.0;
  auto slots = work.trainable_parameters();
  auto state = net.state();
  for (const auto& s : slots) {
    auto it = std::find_if(state.begin(), state.end(), [&](const auto& r) { return r.name == s.name; });
    const auto numeric = numeric_gradient(*it->tensor, loss);
    const bool before_bn = s.name.find(".conv") != std::string::npos && s.name.ends_with(".bias");
    if (before_bn) {
      // Batch statistics cancel any per-channel shift: the exact gradient is
      // zero, so compare magnitudes instead of a ratio of roundoff terms.
      double na = 0.0, nn = 0.0;
      for (std::size_t i = 0; i < numeric.size(); ++i) {
        na = std::max(na, std::abs((*s.grad)[i]));
        nn = std::max(nn, std::abs(numeric[i]));
      }
      if (na > 1e-12 || nn > 1e-8) err = std::max(err, 1.0);
      continue;
    }
    err = std::max(err, relative_error(*s.grad, numeric));
  }
  return {"network", err};
}

}  // namespace dnt::testing
