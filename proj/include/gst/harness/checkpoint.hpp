#pragma once

// Binary checkpoint: magic, format version, a JSON header holding the config
// snapshot, trainer state, RNG state, step and tensor manifest, then a
// little-endian float32 payload.

#include "gst/nn/optim.hpp"
#include "gst/nn/tensor.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace gst::harness {

using json = nlohmann::json;
namespace fs = std::filesystem;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'G', 'S', 'T', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorEntry {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string kind;  // image_tokenizer, camera_tokenizer or gst
  json config;
  json state;
  std::int64_t step = 0;
  std::string rng_state;
  std::vector<TensorEntry> tensors;

  bool has(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return true;
    return false;
  }
  const TensorEntry& tensor(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw CheckpointError("checkpoint has no tensor " + name);
  }
  void add(std::string name, std::vector<std::int64_t> shape, std::vector<float> data) {
    tensors.push_back({std::move(name), std::move(shape), std::move(data)});
  }
};

namespace detail {

template <typename U>
U byteswap(U v) {
  char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  std::reverse(b, b + sizeof(U));
  std::memcpy(&v, b, sizeof(U));
  return v;
}

template <typename U>
void put_le(std::string& out, U v) {
  if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
  char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  out.append(b, sizeof(U));
}

template <typename U>
U get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw CheckpointError("truncated checkpoint");
  U v;
  std::memcpy(&v, in.data() + pos, sizeof(U));
  pos += sizeof(U);
  if constexpr (std::endian::native == std::endian::big) v = byteswap(v);
  return v;
}

}  // namespace detail

inline std::string serialize(const Checkpoint& c) {
  json header;
  header["kind"] = c.kind;
  header["config"] = c.config;
  header["state"] = c.state;
  header["step"] = c.step;
  header["rng_state"] = c.rng_state;
  json manifest = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : c.tensors) {
    std::int64_t count = 1;
    for (auto d : t.shape) count *= d;
    if (count != std::int64_t(t.data.size())) throw CheckpointError("tensor " + t.name + " shape does not match data");
    manifest.push_back(json{{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += std::uint64_t(count) * 4;
  }
  header["tensors"] = manifest;
  const std::string h = header.dump();

  std::string out(kCheckpointMagic, 8);
  detail::put_le<std::uint32_t>(out, c.version);
  detail::put_le<std::uint64_t>(out, h.size());
  out += h;
  out.reserve(out.size() + offset);
  for (const auto& t : c.tensors)
    for (float f : t.data) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

inline Checkpoint deserialize(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw CheckpointError("not a checkpoint file");
  std::size_t pos = 8;
  Checkpoint c;
  c.version = detail::get_le<std::uint32_t>(bytes, pos);
  if (c.version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(c.version));
  const auto hlen = detail::get_le<std::uint64_t>(bytes, pos);
  if (pos + hlen > bytes.size()) throw CheckpointError("truncated checkpoint header");
  const json header = json::parse(bytes.substr(pos, hlen));
  pos += hlen;
  const std::size_t payload = pos;
  c.kind = header.at("kind").get<std::string>();
  c.config = header.at("config");
  c.state = header.at("state");
  c.step = header.at("step").get<std::int64_t>();
  c.rng_state = header.at("rng_state").get<std::string>();
  for (const auto& e : header.at("tensors")) {
    TensorEntry t;
    t.name = e.at("name").get<std::string>();
    t.shape = e.at("shape").get<std::vector<std::int64_t>>();
    std::int64_t count = 1;
    for (auto d : t.shape) count *= d;
    std::size_t at = payload + e.at("offset").get<std::uint64_t>();
    t.data.resize(std::size_t(count));
    for (auto& f : t.data) f = std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, at));
    c.tensors.push_back(std::move(t));
  }
  return c;
}

inline void save_checkpoint(const fs::path& path, const Checkpoint& c) {
  const std::string bytes = serialize(c);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw CheckpointError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

template <typename T>
void add_params(Checkpoint& c, const nn::ParamList<T>& params, const std::string& prefix = "") {
  for (const auto* p : params) {
    std::vector<std::int64_t> shape(p->shape.begin(), p->shape.end());
    c.add(prefix + p->name, shape, std::vector<float>(p->value.begin(), p->value.end()));
  }
}

template <typename T>
void load_params(const Checkpoint& c, const nn::ParamList<T>& params, const std::string& prefix = "") {
  for (auto* p : params) {
    const auto& t = c.tensor(prefix + p->name);
    if (t.data.size() != p->value.size())
      throw CheckpointError("tensor " + t.name + " has " + std::to_string(t.data.size()) + " values, expected " +
                            std::to_string(p->value.size()));
    std::copy(t.data.begin(), t.data.end(), p->value.begin());
  }
}

template <typename T>
void add_optimizer(Checkpoint& c, nn::AdamW<T>& opt) {
  const auto& params = opt.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto n = std::int64_t(params[i]->value.size());
    const auto& m = opt.first_moments()[i];
    const auto& v = opt.second_moments()[i];
    c.add("adam.m/" + params[i]->name, {n}, std::vector<float>(m.begin(), m.end()));
    c.add("adam.v/" + params[i]->name, {n}, std::vector<float>(v.begin(), v.end()));
  }
  c.state["adam_steps"] = opt.steps();
}

template <typename T>
void load_optimizer(const Checkpoint& c, nn::AdamW<T>& opt) {
  const auto& params = opt.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& m = c.tensor("adam.m/" + params[i]->name).data;
    const auto& v = c.tensor("adam.v/" + params[i]->name).data;
    if (m.size() != params[i]->value.size() || v.size() != params[i]->value.size())
      throw CheckpointError("optimizer state for " + params[i]->name + " has the wrong size");
    opt.first_moments()[i].assign(m.begin(), m.end());
    opt.second_moments()[i].assign(v.begin(), v.end());
  }
  opt.set_steps(c.state.at("adam_steps").get<std::int64_t>());
}

}  // namespace gst::harness
