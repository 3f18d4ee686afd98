#pragma once

// Checkpoint file layout (all header lines end in '\n'):
//
//   DNT-CHECKPOINT
//   format_version 1
//   spec {"blocks":[...],"head_hidden":...,"input_shape":[H,W,C],"num_classes":...}
//   tensor <name> <d0,d1,...> <byte_offset>      one line per registry tensor
//   payload_bytes <N>
//   crc32 <8 lowercase hex digits>
//   end
//   <N bytes: little-endian IEEE-754 float32 values, tensors in declaration order>
//
// The CRC-32 (IEEE polynomial, as computed by zlib) covers the payload only.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dnt/error.hpp"
#include "dnt/model.hpp"

namespace dnt {

inline constexpr int checkpoint_format_version = 1;
inline constexpr std::string_view checkpoint_magic = "DNT-CHECKPOINT";

inline std::uint32_t crc32_of(std::span<const unsigned char> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = ::crc32(crc, bytes.data() + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace detail {

inline void put_f32_le(std::vector<unsigned char>& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<unsigned char>((bits >> s) & 0xffu));
}

inline float get_f32_le(const unsigned char* p) {
  const std::uint32_t bits = std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
                             (std::uint32_t{p[3]} << 24);
  return std::bit_cast<float>(bits);
}

inline std::string join_shape(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out;
}

inline Shape parse_shape(const std::string& text) {
  Shape s;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos)
      fail(ErrorKind::schema, "bad shape '" + text + "'");
    s.push_back(std::stoull(part));
  }
  return s;
}

}  // namespace detail

/// Serialized bytes of a network checkpoint.
inline std::vector<unsigned char> encode_checkpoint(const Network& net) {
  std::vector<unsigned char> payload;
  std::ostringstream table;
  for (const auto& [name, tensor] : net.state()) {
    table << "tensor " << name << ' ' << detail::join_shape(tensor->shape()) << ' ' << payload.size() << '\n';
    payload.reserve(payload.size() + tensor->size() * 4);
    for (float v : tensor->span()) detail::put_f32_le(payload, v);
  }
  std::ostringstream header;
  header << checkpoint_magic << '\n'
         << "format_version " << checkpoint_format_version << '\n'
         << "spec " << nlohmann::json(net.spec()).dump() << '\n'
         << table.str() << "payload_bytes " << payload.size() << '\n'
         << "crc32 " << std::hex << std::setw(8) << std::setfill('0') << crc32_of(payload) << std::dec << '\n'
         << "end\n";
  const std::string h = header.str();
  std::vector<unsigned char> out(h.begin(), h.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

inline Network decode_checkpoint(std::span<const unsigned char> bytes) {
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const auto* begin = bytes.data() + pos;
    const auto* end = bytes.data() + bytes.size();
    const auto* nl = std::find(begin, end, static_cast<unsigned char>('\n'));
    if (nl == end) fail(ErrorKind::schema, "checkpoint header truncated");
    std::string line(begin, nl);
    pos += line.size() + 1;
    return line;
  };
  auto expect_key = [](const std::string& line, std::string_view key) -> std::string {
    if (line.rfind(std::string(key) + ' ', 0) != 0) fail(ErrorKind::schema, "expected '" + std::string(key) + "' line");
    return line.substr(key.size() + 1);
  };

  if (next_line() != checkpoint_magic) fail(ErrorKind::schema, "not a checkpoint file");
  const std::string version_text = expect_key(next_line(), "format_version");
  int version = 0;
  try {
    version = std::stoi(version_text);
  } catch (const std::exception&) {
    fail(ErrorKind::schema, "unreadable format_version");
  }
  if (version != checkpoint_format_version) {
    fail(ErrorKind::version, "unsupported checkpoint format_version " + std::to_string(version));
  }

  ModelSpec spec;
  try {
    spec = nlohmann::json::parse(expect_key(next_line(), "spec")).get<ModelSpec>();
    spec.validate();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::schema, std::string("bad spec: ") + e.what());
  } catch (const Error& e) {
    fail(ErrorKind::schema, e.what());
  }

  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  std::string line = next_line();
  while (line.rfind("tensor ", 0) == 0) {
    std::istringstream ls(line.substr(7));
    Entry e;
    std::string shape_text;
    if (!(ls >> e.name >> shape_text >> e.offset)) fail(ErrorKind::schema, "bad tensor line '" + line + "'");
    e.shape = detail::parse_shape(shape_text);
    entries.push_back(std::move(e));
    line = next_line();
  }
  std::size_t payload_bytes = 0;
  try {
    payload_bytes = std::stoull(expect_key(line, "payload_bytes"));
  } catch (const std::invalid_argument&) {
    fail(ErrorKind::schema, "bad payload_bytes");
  }
  const std::string crc_text = expect_key(next_line(), "crc32");
  if (next_line() != "end") fail(ErrorKind::schema, "missing header terminator");

  if (bytes.size() - pos != payload_bytes) fail(ErrorKind::corruption, "payload length does not match header");
  const auto payload = bytes.subspan(pos);
  std::uint32_t expected_crc = 0;
  try {
    expected_crc = static_cast<std::uint32_t>(std::stoul(crc_text, nullptr, 16));
  } catch (const std::exception&) {
    fail(ErrorKind::schema, "bad crc32 field");
  }
  if (crc32_of(payload) != expected_crc) fail(ErrorKind::corruption, "payload checksum mismatch");

  Network net = Network::zeros(spec);
  auto state = net.state();
  if (state.size() != entries.size()) {
    fail(ErrorKind::schema, "parameter table lists " + std::to_string(entries.size()) + " tensors, spec implies " +
                                std::to_string(state.size()));
  }
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const Entry& e = entries[i];
    auto& ref = state[i];
    if (e.name != ref.name) fail(ErrorKind::schema, "expected tensor " + ref.name + ", found " + e.name);
    if (e.shape != ref.tensor->shape()) fail(ErrorKind::schema, e.name + ": shape does not match spec");
    if (e.offset != expected_offset) fail(ErrorKind::schema, e.name + ": offset out of declaration order");
    const std::size_t nbytes = ref.tensor->size() * 4;
    if (e.offset + nbytes > payload.size()) fail(ErrorKind::schema, e.name + ": extends past payload");
    for (std::size_t k = 0; k < ref.tensor->size(); ++k)
      (*ref.tensor)[k] = detail::get_f32_le(payload.data() + e.offset + 4 * k);
    expected_offset += nbytes;
  }
  if (expected_offset != payload.size()) fail(ErrorKind::schema, "payload has trailing bytes");
  return net;
}

inline void save(const Network& net, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(net);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::io, "write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Network load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::missing_artifact, "checkpoint not found: " + path.string());
  std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

}  // namespace dnt
