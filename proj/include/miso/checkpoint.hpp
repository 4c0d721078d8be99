#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "miso/model.hpp"

namespace miso {

// Layout (all integers little-endian):
//   "MISO" | u32 version | u32 config_len | config JSON (UTF-8)
//   u32 tensor_count | per tensor: u32 name_len, name, u32 rank, rank x u64 dims
//   payloads: f64 elements of every tensor, in table order
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  std::vector<char>& buffer() { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<char>& b) : buf_(b) {}

  std::uint64_t uint(int width, const char* what) {
    need(static_cast<std::size_t>(width), what);
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(uint(4, what)); }
  std::uint64_t u64(const char* what) { return uint(8, what); }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (buf_.size() - pos_ < n) throw LoadError(std::string("truncated while reading ") + what, pos_);
  }
  const std::vector<char>& buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> serialize_checkpoint(const ModelParams& params, const ModelConfig& config) {
  detail::ByteWriter w;
  w.bytes("MISO");
  w.u32(kCheckpointVersion);
  const std::string cfg = nlohmann::json(config).dump();
  w.u32(static_cast<std::uint32_t>(cfg.size()));
  w.bytes(cfg);
  std::uint32_t count = 0;
  params.visit([&](const std::string&, const Tensor&) { ++count; });
  w.u32(count);
  params.visit([&](const std::string& name, const Tensor& t) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t dim : t.shape()) w.u64(dim);
  });
  params.visit([&](const std::string&, const Tensor& t) {
    for (double v : t.data()) w.f64(v);
  });
  return std::move(w.buffer());
}

inline std::pair<ModelParams, ModelConfig> deserialize_checkpoint(const std::vector<char>& bytes) {
  detail::ByteReader r(bytes);
  if (r.bytes(4, "magic") != "MISO") throw LoadError("bad magic, not a MISO checkpoint", 0);
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw LoadError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  const std::uint32_t cfg_len = r.u32("config length");
  const std::size_t cfg_at = r.offset();
  ModelConfig config;
  try {
    config = nlohmann::json::parse(r.bytes(cfg_len, "config")).get<ModelConfig>();
    config.validate();
  } catch (const LoadError&) {
    throw;
  } catch (const std::exception& e) {
    throw LoadError(std::string("invalid config blob: ") + e.what(), cfg_at);
  }

  ModelParams params = ModelParams::zeros(config);
  std::vector<std::pair<std::string, Tensor*>> expected;
  params.visit([&](const std::string& name, Tensor& t) { expected.emplace_back(name, &t); });
  const std::size_t count_at = r.offset();
  const std::uint32_t count = r.u32("tensor count");
  if (count != expected.size()) {
    throw LoadError("tensor count " + std::to_string(count) + " does not match config (" +
                        std::to_string(expected.size()) + ")",
                    count_at);
  }
  for (const auto& [name, tensor] : expected) {
    const std::size_t entry_at = r.offset();
    const std::uint32_t name_len = r.u32("name length");
    const std::string got = r.bytes(name_len, "tensor name");
    if (got != name) throw LoadError("expected tensor '" + name + "', found '" + got + "'", entry_at);
    const std::uint32_t rank = r.u32("tensor rank");
    std::vector<std::size_t> shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u64("tensor dim"));
    if (shape != tensor->shape()) {
      throw LoadError("tensor '" + name + "' has shape " + Tensor::shape_string(shape) +
                          ", config implies " + shape_string(*tensor),
                      entry_at);
    }
  }
  for (const auto& [name, tensor] : expected)
    for (double& v : tensor->data()) v = r.f64("tensor payload");
  if (!r.at_end()) throw LoadError("trailing bytes after tensor payloads", r.offset());
  return {std::move(params), config};
}

inline void save_checkpoint(const ModelParams& params, const ModelConfig& config,
                            const std::filesystem::path& path) {
  const std::vector<char> bytes = serialize_checkpoint(params, config);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

inline std::pair<ModelParams, ModelConfig> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace miso
