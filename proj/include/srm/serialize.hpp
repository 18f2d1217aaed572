#pragma once

// On-disk formats shared by every module:
//  * tensor files: raw little-endian float32 + "<file>.json" sidecar
//  * checkpoints: one file = magic, u64 manifest length, JSON manifest,
//    concatenated little-endian float32 arrays
// plus SHA-256 digests used for config hashes and freeze checks.

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "srm/nn.hpp"
#include "srm/tensor.hpp"

namespace srm {

using json = nlohmann::json;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string sha256_hex(const void* data, std::size_t len) {
  unsigned char out[EVP_MAX_MD_SIZE];
  unsigned int out_len = 0;
  if (EVP_Digest(data, len, out, &out_len, EVP_sha256(), nullptr) != 1) throw std::runtime_error("EVP_Digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < out_len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(out[i]);
  return os.str();
}

inline std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

/// Digest of parameter values at full precision; names and shapes included.
inline std::string param_digest(const nn::ParamList& params) {
  std::string buf;
  for (const auto& p : params) {
    buf += p.name;
    buf += shape_str(p.tensor.shape());
    const auto v = p.tensor.values();
    buf.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
  }
  return sha256_hex(buf);
}

inline void append_f32le(std::string& out, std::span<const double> values) {
  const std::size_t base = out.size();
  out.resize(base + 4 * values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    for (int b = 0; b < 4; ++b) out[base + 4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
  }
}

inline std::vector<double> read_f32le(const std::string& bytes, std::size_t offset, std::size_t count) {
  if (offset + 4 * count > bytes.size()) throw IoError("float32 payload truncated");
  std::vector<double> v(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + 4 * i + b])) << (8 * b);
    v[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return v;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline void write_json(const std::filesystem::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

inline json read_json(const std::filesystem::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

/// Writes `path` (float32 LE) and `path.json` with {dims, ...extra}.
inline void save_tensor(const std::filesystem::path& path, const Tensor& t, json extra = json::object()) {
  std::string bytes;
  append_f32le(bytes, t.values());
  write_file(path, bytes);
  extra["dims"] = t.shape();
  extra["dtype"] = "float32le";
  write_json(path.string() + ".json", extra);
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  const json meta = read_json(path.string() + ".json");
  Shape shape = meta.at("dims").get<Shape>();
  const std::string bytes = read_file(path);
  if (bytes.size() != 4 * numel_of(shape)) throw IoError(path.string() + ": size does not match sidecar dims");
  return Tensor(shape, read_f32le(bytes, 0, numel_of(shape)));
}

inline constexpr char kCheckpointMagic[8] = {'S', 'R', 'M', 'C', 'K', 'P', 'T', '1'};

struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  json meta = json::object();

  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json manifest;
  manifest["format"] = "srm-checkpoint-1";
  manifest["meta"] = ckpt.meta;
  json entries = json::array();
  std::string payload;
  for (const auto& [name, t] : ckpt.tensors) {
    entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size()}});
    append_f32le(payload, t.values());
  }
  manifest["tensors"] = entries;
  const std::string head = manifest.dump();
  std::string bytes(kCheckpointMagic, 8);
  std::uint64_t len = head.size();
  for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<char>((len >> (8 * b)) & 0xffu));
  bytes += head;
  bytes += payload;
  write_file(path, bytes);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 16 || bytes.compare(0, 8, std::string(kCheckpointMagic, 8)) != 0)
    throw IoError(path.string() + ": not a checkpoint file");
  std::uint64_t len = 0;
  for (int b = 0; b < 8; ++b) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + b])) << (8 * b);
  if (16 + len > bytes.size()) throw IoError(path.string() + ": manifest truncated");
  const json manifest = json::parse(bytes.substr(16, len));
  const std::size_t base = 16 + len;
  Checkpoint ckpt;
  ckpt.meta = manifest.value("meta", json::object());
  for (const auto& e : manifest.at("tensors")) {
    Shape shape = e.at("shape").get<Shape>();
    const std::size_t off = e.at("offset").get<std::size_t>();
    ckpt.tensors.emplace(e.at("name").get<std::string>(), Tensor(shape, read_f32le(bytes, base + off, numel_of(shape))));
  }
  return ckpt;
}

inline void store_params(Checkpoint& ckpt, const nn::ParamList& params) {
  for (const auto& p : params) ckpt.tensors[p.name] = p.tensor.detach();
}

/// Loads values into existing parameters; every parameter must be present.
inline void restore_params(const Checkpoint& ckpt, nn::ParamList& params) {
  for (auto& p : params) {
    auto it = ckpt.tensors.find(p.name);
    if (it == ckpt.tensors.end()) throw IoError("checkpoint is missing parameter " + p.name);
    if (it->second.shape() != p.tensor.shape())
      throw IoError("checkpoint shape mismatch for " + p.name + ": " + shape_str(it->second.shape()));
    auto dst = p.tensor.mutable_values();
    std::copy(it->second.values().begin(), it->second.values().end(), dst.begin());
  }
}

}  // namespace srm
