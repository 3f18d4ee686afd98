#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "dnt/model.hpp"
#include "gtest_helpers.hpp"
#include "test_support.hpp"

using namespace dnt;
using namespace dnt::testing;

namespace {

ModelSpec minimal_spec() {
  ModelSpec s;
  s.blocks = {{1, 4}};
  s.height = 2;
  s.width = 2;
  s.in_channels = 1;
  s.num_classes = 2;
  s.head_hidden = 2;
  return s;
}

std::size_t count_kind(const std::vector<std::string>& seq, const std::string& kind) {
  return static_cast<std::size_t>(std::count(seq.begin(), seq.end(), kind));
}

// Independent hand count: 9*cin*cout + cout per conv, 2*c per BN, in*out + out per dense.
std::size_t hand_count(const ModelSpec& s) {
  std::size_t total = 0, cin = s.in_channels;
  for (const auto& b : s.blocks) {
    for (std::size_t i = 0; i < b.conv_count; ++i) {
      total += 9 * cin * b.channels + b.channels + 2 * b.channels;
      cin = b.channels;
    }
  }
  const std::size_t hw = (s.height >> s.blocks.size()) * (s.width >> s.blocks.size());
  total += hw * cin * s.head_hidden + s.head_hidden;
  total += s.head_hidden * s.num_classes + s.num_classes;
  return total;
}

}  // namespace

TEST(Build, MiniVggLayout) {
  const Network net = Network::build(mini_vgg_spec(), 1);
  const auto seq = net.layer_sequence();
  EXPECT_EQ(count_kind(seq, "Conv2D"), 13u);
  EXPECT_EQ(count_kind(seq, "BatchNorm2D"), 13u);
  EXPECT_EQ(count_kind(seq, "MaxPool2x2"), 5u);
  EXPECT_EQ(count_kind(seq, "Dense"), 2u);
  // every conv is followed by BN then ReLU
  for (std::size_t i = 0; i < seq.size(); ++i)
    if (seq[i] == "Conv2D") {
      EXPECT_EQ(seq[i + 1], "BatchNorm2D");
      EXPECT_EQ(seq[i + 2], "ReLU");
    }
}

TEST(Build, MinimalSpec) {
  Network net = Network::build(minimal_spec(), 2);
  EXPECT_EQ(count_kind(net.layer_sequence(), "Conv2D"), 1u);
  EXPECT_EQ(count_kind(net.layer_sequence(), "MaxPool2x2"), 1u);
  const Tensor tap = net.forward_to_tap(Tensor({3, 2, 2, 1}, 0.5f), 0, Mode::eval);
  EXPECT_EQ(tap.shape(), (Shape{3, 1, 1, 4}));
  EXPECT_EQ(net.fc1().weight.dim(0), 4u);
}

TEST(Build, IndivisibleInputIsInvalid) {
  ModelSpec s = mini_vgg_spec();
  s.height = s.width = 30;
  expect_kind(ErrorKind::invalid_spec, [&] { Network::build(s, 0); });
  s = mini_vgg_spec();
  s.blocks.clear();
  expect_kind(ErrorKind::invalid_spec, [&] { Network::build(s, 0); });
}

TEST(Build, InitialState) {
  Network net = Network::build(mini_vgg_spec(), 3);
  for (std::size_t b = 0; b < net.block_count(); ++b)
    for (const auto& u : net.block(b).units) {
      for (float v : u.bn.gamma.span()) EXPECT_EQ(v, 1.0f);
      for (float v : u.bn.beta.span()) EXPECT_EQ(v, 0.0f);
      for (float v : u.bn.running_mean.span()) EXPECT_EQ(v, 0.0f);
      for (float v : u.bn.running_var.span()) EXPECT_EQ(v, 1.0f);
      const double limit = std::sqrt(6.0 / (9.0 * (u.conv.weight.dim(2) + u.conv.weight.dim(3))));
      for (float v : u.conv.weight.span()) EXPECT_LE(std::abs(v), limit);
    }
}

TEST(Build, SameSeedSameWeights) {
  Network a = Network::build(mini_vgg_spec(), 9), b = Network::build(mini_vgg_spec(), 9),
          c = Network::build(mini_vgg_spec(), 10);
  const auto sa = a.state(), sb = b.state(), sc = c.state();
  bool any_diff = false;
  for (std::size_t i = 0; i < sa.size(); ++i) {
    EXPECT_EQ(*sa[i].tensor, *sb[i].tensor) << sa[i].name;
    any_diff |= !(*sa[i].tensor == *sc[i].tensor);
  }
  EXPECT_TRUE(any_diff);
}

TEST(ParamCount, MinimalSpecIs64) {
  const Network net = Network::build(minimal_spec(), 0);
  EXPECT_EQ(net.param_count(), 64u);
  EXPECT_EQ(hand_count(minimal_spec()), 64u);
}

TEST(ParamCount, MatchesHandCount) {
  EXPECT_EQ(Network::build(mini_vgg_spec(), 0).param_count(), hand_count(mini_vgg_spec()));
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    ModelSpec s;
    const std::size_t nb = 1 + uniform_index(rng, 3);
    for (std::size_t b = 0; b < nb; ++b) s.blocks.push_back({1 + uniform_index(rng, 3), 1 + uniform_index(rng, 6)});
    s.height = s.width = std::size_t{1} << (nb + uniform_index(rng, 2));
    s.in_channels = 1 + uniform_index(rng, 3);
    s.num_classes = 2 + uniform_index(rng, 4);
    s.head_hidden = 1 + uniform_index(rng, 5);
    EXPECT_EQ(Network::build(s, 0).param_count(), hand_count(s));
  }
}

TEST(Registry, NamesUniqueAndStable) {
  Network a = Network::build(mini_vgg_spec(), 1), b = Network::build(mini_vgg_spec(), 2);
  std::set<std::string> names;
  const auto sa = a.state(), sb = b.state();
  ASSERT_EQ(sa.size(), sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) {
    EXPECT_TRUE(names.insert(sa[i].name).second) << sa[i].name;
    EXPECT_EQ(sa[i].name, sb[i].name);
  }
  EXPECT_TRUE(names.count("block0.conv0.weight"));
  EXPECT_TRUE(names.count("block4.bn2.running_var"));
  EXPECT_TRUE(names.count("head.fc2.bias"));
}

TEST(Forward, EvalIsDeterministic) {
  Rng rng(5);
  Network net = Network::build(mini_vgg_spec(), 5);
  const Tensor x = random_tensor<float>({4, 32, 32, 1}, rng);
  const Tensor a = net.forward(x, Mode::eval), b = net.forward(x, Mode::eval);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.shape(), (Shape{4, 10}));
}

TEST(Forward, ZeroNetworkGivesEqualLogits) {
  Network net = Network::zeros(minimal_spec());
  Rng rng(6);
  const Tensor y = net.forward(random_tensor<float>({3, 2, 2, 1}, rng), Mode::eval);
  for (std::size_t n = 0; n < 3; ++n) EXPECT_EQ(y[2 * n], y[2 * n + 1]);
}

TEST(Forward, ShapeMismatch) {
  Network net = Network::build(mini_vgg_spec(), 0);
  expect_kind(ErrorKind::shape_mismatch, [&] { net.forward(Tensor({1, 28, 28, 1}), Mode::eval); });
  expect_kind(ErrorKind::shape_mismatch, [&] { net.forward(Tensor({1, 32, 32, 3}), Mode::eval); });
}

TEST(Forward, EqualsHeadOfLastTap) {
  Rng rng(7);
  Network net = Network::build(mini_vgg_spec(), 7);
  const Tensor x = random_tensor<float>({3, 32, 32, 1}, rng);
  const Tensor tap = net.forward_to_tap(x, 4, Mode::eval);
  EXPECT_EQ(net.forward(x, Mode::eval), net.head_forward(tap, Mode::eval));
}

TEST(Tap, Shapes) {
  Rng rng(8);
  Network net = Network::build(mini_vgg_spec(), 8);
  const Tensor x = random_tensor<float>({2, 32, 32, 1}, rng);
  const std::size_t channels[] = {8, 16, 32, 32, 32};
  for (std::size_t t = 0; t < 5; ++t) {
    const std::size_t side = 32 >> (t + 1);
    EXPECT_EQ(net.forward_to_tap(x, t, Mode::eval).shape(), (Shape{2, side, side, channels[t]}));
  }
  expect_kind(ErrorKind::invalid_tap, [&] { net.forward_to_tap(x, 5, Mode::eval); });
}

TEST(Tap, IdenticalNetworksAgreeBitwise) {
  Rng rng(9);
  Network a = Network::build(mini_vgg_spec(), 11), b = Network::build(mini_vgg_spec(), 11);
  const Tensor x = random_tensor<float>({2, 32, 32, 1}, rng);
  for (std::size_t t = 0; t < 5; ++t) EXPECT_EQ(a.forward_to_tap(x, t, Mode::eval), b.forward_to_tap(x, t, Mode::eval));
}

TEST(Clone, IsIndependentDeepCopy) {
  Network net = Network::build(mini_vgg_spec(), 12);
  Network copy = clone(net);
  EXPECT_EQ(copy.param_count(), net.param_count());
  const auto before = net.state();
  std::vector<Tensor> saved;
  for (const auto& r : before) saved.push_back(*r.tensor);
  for (auto& r : copy.state())
    for (auto& v : r.tensor->span()) v += 1.0f;
  const auto after = net.state();
  for (std::size_t i = 0; i < after.size(); ++i) EXPECT_EQ(*after[i].tensor, saved[i]) << after[i].name;
}

TEST(Spec, JsonRoundTrip) {
  const ModelSpec s = mini_vgg_spec();
  nlohmann::json j = s;
  EXPECT_EQ(j.get<ModelSpec>(), s);
  j.erase("blocks");
  expect_kind(ErrorKind::invalid_spec, [&] { (void)j.get<ModelSpec>(); });
}
