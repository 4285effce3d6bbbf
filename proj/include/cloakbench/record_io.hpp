#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cloakbench/checkpoint.hpp"
#include "cloakbench/eval.hpp"

namespace cloakbench {

// Crafted-example batch file, same framing as checkpoints:
//   "CLKR" | u32 version | u64 body length | body | u32 CRC32
//   body: u32 n + JSON header {source, method, epsilon, count}
//         per record: u32 n + JSON {index, y_true, y_target, n_iter, violations,
//         error, source_model, height, width}, then x and x_adv as f32 arrays

inline constexpr std::uint32_t kRecordsVersion = 1;

namespace detail {

inline void put_image(ByteWriter& w, const Image& img) {
  for (float v : img.pixels) w.f32(v);
}

inline Image get_image(ByteReader& r, std::size_t h, std::size_t w) {
  Image img(h, w);
  for (float& v : img.pixels) v = r.f32();
  return img;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_batch(const AdvBatch& batch, const std::string& source_id) {
  detail::ByteWriter body;
  body.str(nlohmann::json{{"source", source_id},
                          {"source_index", batch.source},
                          {"method", to_string(batch.method)},
                          {"epsilon", batch.epsilon},
                          {"count", batch.records.size()}}
               .dump());
  for (const auto& r : batch.records) {
    nlohmann::json h = {{"index", r.index},         {"y_true", r.y_true},
                        {"n_iter", r.n_iter_used},  {"violations", r.budget_violations},
                        {"error", r.error},         {"source_model", r.source_model},
                        {"height", r.x.height},     {"width", r.x.width}};
    h["y_target"] = r.y_target ? nlohmann::json(*r.y_target) : nlohmann::json(nullptr);
    body.str(h.dump());
    detail::put_image(body, r.x);
    detail::put_image(body, r.x_adv);
  }
  detail::ByteWriter out;
  out.raw("CLKR", 4);
  out.u32(kRecordsVersion);
  out.u64(body.bytes().size());
  auto& bytes = out.bytes();
  bytes.insert(bytes.end(), body.bytes().begin(), body.bytes().end());
  out.u32(crc32_of(bytes.data(), bytes.size()));
  return std::move(bytes);
}

inline AdvBatch deserialize_batch(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), "CLKR", 4) != 0)
    throw CheckpointError("records: missing CLKR magic");
  detail::ByteReader head(bytes.data() + 4, 12);
  if (const auto v = head.u32(); v != kRecordsVersion)
    throw CheckpointVersionError("records: unsupported format version " + std::to_string(v));
  const std::uint64_t body_len = head.u64();
  if (bytes.size() - 16 < body_len + 4) throw CheckpointTruncatedError("records: file truncated");
  detail::ByteReader tail(bytes.data() + 16 + body_len, 4);
  if (tail.u32() != crc32_of(bytes.data(), 16 + body_len)) throw CheckpointChecksumError("records: CRC32 mismatch");

  detail::ByteReader body(bytes.data() + 16, body_len);
  AdvBatch batch;
  try {
    const auto h = nlohmann::json::parse(body.str());
    batch.source = h.at("source_index");
    batch.method = parse_method(h.at("method"));
    batch.epsilon = h.at("epsilon");
    const std::size_t count = h.at("count");
    for (std::size_t i = 0; i < count; ++i) {
      const auto rh = nlohmann::json::parse(body.str());
      AdvRecord r;
      r.index = rh.at("index");
      r.y_true = rh.at("y_true");
      r.n_iter_used = rh.at("n_iter");
      r.budget_violations = rh.at("violations");
      r.error = rh.at("error");
      r.source_model = rh.at("source_model");
      if (!rh.at("y_target").is_null()) r.y_target = rh.at("y_target").get<std::size_t>();
      r.method = batch.method;
      r.epsilon = batch.epsilon;
      const std::size_t height = rh.at("height"), width = rh.at("width");
      r.x = detail::get_image(body, height, width);
      r.x_adv = detail::get_image(body, height, width);
      batch.records.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("records: bad header: ") + e.what());
  }
  if (!body.done()) throw CheckpointError("records: trailing bytes");
  return batch;
}

inline void save_batch(const AdvBatch& batch, const std::string& source_id, const std::filesystem::path& path) {
  const auto bytes = serialize_batch(batch, source_id);
  write_file(path, bytes.data(), bytes.size());
}

inline AdvBatch load_batch(const std::filesystem::path& path) { return deserialize_batch(read_file(path)); }

}  // namespace cloakbench
