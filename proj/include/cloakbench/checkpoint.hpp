#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "cloakbench/image.hpp"
#include "cloakbench/models.hpp"

namespace cloakbench {

// Layout (all integers little-endian):
//   "CLKB" | u32 version | u64 body length
//   body: u32 n + UTF-8 JSON header (id, descriptor, provenance)
//         u32 array count, then per array:
//         u32 n + name | u32 rank | u64 dims[rank] | f32 values
//   u32 CRC32 of every preceding byte

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointChecksumError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

inline std::uint32_t crc32_of(const void* data, std::size_t n) {
  return static_cast<std::uint32_t>(
      ::crc32(::crc32(0L, Z_NULL, 0), static_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void raw(const char* s, std::size_t n) { buf_.insert(buf_.end(), s, s + n); }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t n) : data_(data), n_(n) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(data_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(data_[pos_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == n_; }

 private:
  void need(std::size_t k) {
    if (n_ - pos_ < k) throw CheckpointTruncatedError("checkpoint: record runs past end of body");
  }
  const std::uint8_t* data_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

inline nlohmann::json provenance_json(const Provenance& p) {
  return {{"dataset_id", p.dataset_id}, {"seed", p.seed}, {"epochs", p.epochs},
          {"train_accuracy", p.train_accuracy}, {"val_accuracy", p.val_accuracy},
          {"config_hash", p.config_hash}};
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Classifier& model) {
  detail::ByteWriter body;
  const nlohmann::json header = {{"id", model.id},
                                 {"descriptor", to_json(model.descriptor)},
                                 {"provenance", detail::provenance_json(model.provenance)}};
  body.str(header.dump());
  body.u32(static_cast<std::uint32_t>(model.params.size()));
  for (const auto& p : model.params) {
    body.str(p.name);
    body.u32(static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) body.u64(d);
    for (float v : p.value.data()) body.f32(v);
  }
  detail::ByteWriter out;
  out.raw("CLKB", 4);
  out.u32(kCheckpointVersion);
  out.u64(body.bytes().size());
  auto& bytes = out.bytes();
  bytes.insert(bytes.end(), body.bytes().begin(), body.bytes().end());
  out.u32(crc32_of(bytes.data(), bytes.size()));
  return std::move(bytes);
}

inline Classifier deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), "CLKB", 4) != 0) {
    throw CheckpointError("checkpoint: missing CLKB magic");
  }
  detail::ByteReader head(bytes.data() + 4, bytes.size() - 4);
  const std::uint32_t version = head.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError("checkpoint: unsupported format version " + std::to_string(version) +
                                 " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  if (bytes.size() < 16) throw CheckpointTruncatedError("checkpoint: header truncated");
  const std::uint64_t body_len = head.u64();
  if (bytes.size() - 16 < body_len + 4) {
    throw CheckpointTruncatedError("checkpoint: file holds " + std::to_string(bytes.size()) +
                                   " bytes, header declares " + std::to_string(body_len + 20));
  }
  const std::size_t crc_at = 16 + body_len;
  detail::ByteReader tail(bytes.data() + crc_at, 4);
  if (tail.u32() != crc32_of(bytes.data(), crc_at)) {
    throw CheckpointChecksumError("checkpoint: CRC32 mismatch");
  }

  detail::ByteReader body(bytes.data() + 16, body_len);
  Classifier model;
  try {
    const auto header = nlohmann::json::parse(body.str());
    model.id = header.at("id").get<std::string>();
    model.descriptor = descriptor_from_json(header.at("descriptor"));
    const auto& p = header.at("provenance");
    model.provenance = {p.at("dataset_id"), p.at("seed"), p.at("epochs"), p.at("train_accuracy"),
                        p.at("val_accuracy"), p.at("config_hash")};
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: bad header: ") + e.what());
  }
  const std::uint32_t count = body.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = body.str();
    Shape shape(body.u32());
    for (auto& d : shape) d = body.u64();
    std::vector<float> values(numel(shape));
    for (float& v : values) v = body.f32();
    model.params.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!body.done()) throw CheckpointError("checkpoint: trailing bytes in body");

  // Parameters must match what the descriptor builds.
  const auto reference = build_model(model.descriptor, 0);
  if (reference.params.size() != model.params.size()) {
    throw CheckpointError("checkpoint: parameter count does not match descriptor");
  }
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    if (reference.params[i].name != model.params[i].name ||
        reference.params[i].value.shape() != model.params[i].value.shape()) {
      throw CheckpointError("checkpoint: parameter '" + model.params[i].name + "' does not match descriptor");
    }
  }
  return model;
}

inline void save_checkpoint(const Classifier& model, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(model);
  write_file(path, bytes.data(), bytes.size());
}

inline Classifier load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

}  // namespace cloakbench
