#include <gtest/gtest.h>

#include <cstring>
#include <string>

#include "dnt/persistence.hpp"
#include "gtest_helpers.hpp"
#include "test_support.hpp"

using namespace dnt;
using namespace dnt::testing;

namespace {

Network random_network(const ModelSpec& spec, std::uint64_t seed) {
  Network net = Network::build(spec, seed);
  Rng rng(seed + 1000);
  for (auto& r : net.state()) *r.tensor = random_tensor<float>(r.tensor->shape(), rng, -3.0, 3.0);
  return net;
}

void expect_same_state(Network& a, Network& b) {
  const auto sa = a.state(), sb = b.state();
  ASSERT_EQ(sa.size(), sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) {
    EXPECT_EQ(sa[i].name, sb[i].name);
    ASSERT_EQ(sa[i].tensor->shape(), sb[i].tensor->shape());
    EXPECT_EQ(std::memcmp(sa[i].tensor->data(), sb[i].tensor->data(), sa[i].tensor->size() * 4), 0) << sa[i].name;
  }
}

std::size_t header_end(const std::vector<unsigned char>& bytes) {
  const std::string s(bytes.begin(), bytes.end());
  return s.find("end\n") + 4;
}

std::vector<unsigned char> replace_text(const std::vector<unsigned char>& bytes, const std::string& from,
                                        const std::string& to) {
  std::string s(bytes.begin(), bytes.end());
  const auto pos = s.find(from);
  EXPECT_NE(pos, std::string::npos) << from;
  s.replace(pos, from.size(), to);
  return {s.begin(), s.end()};
}

}  // namespace

TEST(Crc32, KnownCheckValue) {
  const std::string text = "123456789";
  EXPECT_EQ(crc32_of({reinterpret_cast<const unsigned char*>(text.data()), text.size()}), 0xCBF43926u);
  EXPECT_EQ(crc32_of({}), 0u);
}

TEST(Checkpoint, RoundTripMiniVgg) {
  Network net = random_network(mini_vgg_spec(), 1);
  const auto dir = scratch_dir("ckpt-roundtrip");
  save(net, dir / "net.ckpt");
  Network back = load(dir / "net.ckpt");
  EXPECT_EQ(back.spec(), net.spec());
  expect_same_state(net, back);
  EXPECT_FALSE(std::filesystem::exists(dir / "net.ckpt.tmp"));
}

TEST(Checkpoint, RoundTripProperty) {
  Rng rng(2);
  for (int trial = 0; trial < 25; ++trial) {
    ModelSpec s;
    const std::size_t nb = 1 + uniform_index(rng, 3);
    for (std::size_t b = 0; b < nb; ++b) s.blocks.push_back({1 + uniform_index(rng, 3), 1 + uniform_index(rng, 5)});
    s.height = std::size_t{1} << (nb + uniform_index(rng, 2));
    s.width = std::size_t{1} << (nb + uniform_index(rng, 2));
    s.in_channels = 1 + uniform_index(rng, 3);
    s.num_classes = 2 + uniform_index(rng, 5);
    s.head_hidden = 1 + uniform_index(rng, 6);
    Network net = random_network(s, trial);
    const auto bytes = encode_checkpoint(net);
    Network back = decode_checkpoint(bytes);
    EXPECT_EQ(back.spec(), s);
    expect_same_state(net, back);
    EXPECT_EQ(encode_checkpoint(back), bytes);
  }
}

TEST(Checkpoint, SpecialValuesSurvive) {
  Network net = Network::build(mini_vgg_spec(), 3);
  auto& w = net.block(0).units[0].conv.weight;
  w[0] = -0.0f;
  w[1] = std::numeric_limits<float>::denorm_min();
  w[2] = std::numeric_limits<float>::max();
  Network back = decode_checkpoint(encode_checkpoint(net));
  expect_same_state(net, back);
}

TEST(Checkpoint, PayloadIsLittleEndian) {
  Network net = Network::build(mini_vgg_spec(), 4);
  net.block(0).units[0].conv.weight[0] = 1.0f;  // 0x3f800000
  const auto bytes = encode_checkpoint(net);
  const std::size_t p = header_end(bytes);
  EXPECT_EQ(bytes[p], 0x00);
  EXPECT_EQ(bytes[p + 1], 0x00);
  EXPECT_EQ(bytes[p + 2], 0x80);
  EXPECT_EQ(bytes[p + 3], 0x3f);
}

TEST(Checkpoint, HeaderIsReadableText) {
  const auto bytes = encode_checkpoint(Network::build(mini_vgg_spec(), 5));
  const std::string head(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(header_end(bytes)));
  EXPECT_EQ(head.rfind("DNT-CHECKPOINT\nformat_version 1\nspec {", 0), 0u);
  EXPECT_NE(head.find("tensor block0.conv0.weight 3,3,1,8 0\n"), std::string::npos);
  EXPECT_NE(head.find("tensor block0.conv0.bias 8 288\n"), std::string::npos);
}

TEST(Checkpoint, FlippedPayloadByteIsCorruption) {
  Network net = Network::build(mini_vgg_spec(), 6);
  const auto bytes = encode_checkpoint(net);
  const std::size_t p = header_end(bytes);
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    auto bad = bytes;
    bad[p + uniform_index(rng, bytes.size() - p)] ^= static_cast<unsigned char>(1 + uniform_index(rng, 255));
    expect_kind(ErrorKind::corruption, [&] { decode_checkpoint(bad); });
  }
  auto short_payload = bytes;
  short_payload.pop_back();
  expect_kind(ErrorKind::corruption, [&] { decode_checkpoint(short_payload); });
}

TEST(Checkpoint, UnknownVersion) {
  const auto bytes = encode_checkpoint(Network::build(mini_vgg_spec(), 7));
  expect_kind(ErrorKind::version, [&] { decode_checkpoint(replace_text(bytes, "format_version 1", "format_version 999")); });
}

TEST(Checkpoint, SchemaErrors) {
  ModelSpec s;
  s.blocks = {{1, 2}};
  s.height = s.width = 2;
  s.num_classes = 2;
  s.head_hidden = 2;
  const auto bytes = encode_checkpoint(Network::build(s, 8));
  // spec says 3 channels, table still lists 2-channel tensors
  expect_kind(ErrorKind::schema,
              [&] { decode_checkpoint(replace_text(bytes, "\"channels\":2", "\"channels\":3")); });
  expect_kind(ErrorKind::schema, [&] { decode_checkpoint(replace_text(bytes, "block0.conv0.bias", "block0.conv0.bias2")); });
  expect_kind(ErrorKind::schema, [&] { decode_checkpoint(replace_text(bytes, "DNT-CHECKPOINT", "NOT-A-CHECKPOINT")); });
  expect_kind(ErrorKind::schema, [&] { decode_checkpoint(replace_text(bytes, "\nend\n", "\nfin\n")); });
}

TEST(Checkpoint, MissingFile) {
  const auto dir = scratch_dir("ckpt-missing");
  expect_kind(ErrorKind::missing_artifact, [&] { load(dir / "nope.ckpt"); });
}
