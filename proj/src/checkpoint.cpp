// SPDX-License-Identifier: Apache-2.0
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "lkt/errors.hpp"
#include "lkt/parameters.hpp"

namespace lkt {

namespace {

constexpr std::string_view kMagic = "lkt-checkpoint 1";

template <typename U>
void append_le(std::string& out, U bits) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }
}

template <typename U>
U read_le(const unsigned char* p) {
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(p[i]) << (8 * i);
  return bits;
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  throw ValidationError("checkpoint: unsupported dtype '" + dtype + "'");
}

}  // namespace

const std::string& Checkpoint::get(const std::string& key) const {
  for (const auto& [k, v] : config) {
    if (k == key) return v;
  }
  throw ValidationError("checkpoint config is missing key '" + key + "'");
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::ostringstream manifest;
  manifest << kMagic << '\n' << "kind = " << ckpt.kind << '\n' << "[config]\n";
  for (const auto& [k, v] : ckpt.config) manifest << k << " = " << v << '\n';
  manifest << "[tensors]\n";
  for (const auto& t : ckpt.tensors) {
    manifest << t.name << ' ' << t.dtype;
    for (auto d : t.shape) manifest << ' ' << d;
    manifest << '\n';
  }
  manifest << "end\n";
  std::string out = manifest.str();
  for (const auto& t : ckpt.tensors) {
    if (shape_numel(t.shape) != t.values.size()) {
      throw DimensionError("checkpoint tensor " + t.name + " has inconsistent length");
    }
    if (dtype_size(t.dtype) == 4) {
      for (double v : t.values) append_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    } else {
      for (double v : t.values) append_le(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  return out;
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw ValidationError("checkpoint manifest is truncated");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  if (next_line() != kMagic) throw ValidationError("not an lkt checkpoint (bad magic line)");
  Checkpoint ckpt;
  std::string line = next_line();
  if (line.rfind("kind = ", 0) != 0) throw ValidationError("checkpoint: missing kind line");
  ckpt.kind = line.substr(7);
  if (next_line() != "[config]") throw ValidationError("checkpoint: missing [config] section");
  while ((line = next_line()) != "[tensors]") {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw ValidationError("checkpoint: bad config line '" + line + "'");
    ckpt.config.emplace_back(line.substr(0, eq), line.substr(eq + 3));
  }
  std::size_t expected = 0;
  while ((line = next_line()) != "end") {
    std::istringstream ls(line);
    CheckpointTensor t;
    ls >> t.name >> t.dtype;
    std::size_t d = 0;
    while (ls >> d) t.shape.push_back(d);
    if (t.name.empty() || t.shape.empty()) {
      throw ValidationError("checkpoint: bad tensor line '" + line + "'");
    }
    expected += shape_numel(t.shape) * dtype_size(t.dtype);
    ckpt.tensors.push_back(std::move(t));
  }
  const std::size_t available = bytes.size() - pos;
  if (available != expected) {
    throw ValidationError("checkpoint payload is " + std::to_string(available) +
                          " bytes, manifest requires " + std::to_string(expected));
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + pos;
  for (auto& t : ckpt.tensors) {
    const std::size_t n = shape_numel(t.shape);
    t.values.resize(n);
    if (dtype_size(t.dtype) == 4) {
      for (std::size_t i = 0; i < n; ++i, p += 4) {
        t.values[i] = std::bit_cast<float>(read_le<std::uint32_t>(p));
      }
    } else {
      for (std::size_t i = 0; i < n; ++i, p += 8) {
        t.values[i] = std::bit_cast<double>(read_le<std::uint64_t>(p));
      }
    }
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write checkpoint " + path.string());
  const auto bytes = serialize_checkpoint(checkpoint);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

}  // namespace lkt
