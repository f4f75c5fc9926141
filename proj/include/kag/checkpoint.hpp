#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "kag/config.hpp"
#include "kag/tensor.hpp"

namespace kag {

class CheckpointError : public Error {
 public:
  using Error::Error;
};
class BadMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class BadVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class TruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

// Named tensors in a fixed file order, plus the config snapshot and training
// counters (carried inside the JSON block).
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> records;
  RunConfig config;
  int epoch = 0;
  int64_t adam_step = 0;

  const Tensor& find(const std::string& name) const {
    for (const auto& [n, t] : records)
      if (n == name) return t;
    throw CheckpointError("checkpoint is missing record '" + name + "'");
  }
};

namespace detail {

// binary layout: magic "KAGP", u32 version, u32 record count, records of
// (u16 name length, name bytes, u8 rank, u32 dims..., fp64 LE values), then a
// u32-length-prefixed UTF-8 JSON text block. All integers little-endian.
constexpr char kMagic[4] = {'K', 'A', 'G', 'P'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw TruncatedError("checkpoint file is truncated");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open '" + path + "' for writing");
  os.write(detail::kMagic, 4);
  detail::write_raw(os, detail::kVersion);
  detail::write_raw(os, static_cast<uint32_t>(ckpt.records.size()));
  for (const auto& [name, tensor] : ckpt.records) {
    detail::write_raw(os, static_cast<uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_raw(os, static_cast<uint8_t>(tensor.rank()));
    for (int d : tensor.shape) detail::write_raw(os, static_cast<uint32_t>(d));
    os.write(reinterpret_cast<const char*>(tensor.data->data()),
             static_cast<std::streamsize>(tensor.data->size() * sizeof(double)));
  }
  nlohmann::json meta = config_to_json(ckpt.config);
  meta["epoch"] = ckpt.epoch;
  meta["adam_step"] = ckpt.adam_step;
  std::string text = meta.dump();
  detail::write_raw(os, static_cast<uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!os) throw CheckpointError("write to '" + path + "' failed");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is) throw TruncatedError("checkpoint file is truncated");
  if (std::memcmp(magic, detail::kMagic, 4) != 0)
    throw BadMagicError("'" + path + "' is not a checkpoint file (bad magic)");
  uint32_t version = detail::read_raw<uint32_t>(is);
  if (version != detail::kVersion)
    throw BadVersionError("unsupported checkpoint version " + std::to_string(version));
  uint32_t count = detail::read_raw<uint32_t>(is);
  Checkpoint ckpt;
  for (uint32_t r = 0; r < count; ++r) {
    uint16_t name_len = detail::read_raw<uint16_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw TruncatedError("checkpoint file is truncated");
    uint8_t rank = detail::read_raw<uint8_t>(is);
    if (rank > 4) throw CheckpointError("record '" + name + "' has invalid rank");
    Shape shape;
    for (int d = 0; d < rank; ++d) shape.push_back(static_cast<int>(detail::read_raw<uint32_t>(is)));
    std::vector<double> values(static_cast<size_t>(numel(shape)));
    is.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!is) throw TruncatedError("checkpoint file is truncated");
    ckpt.records.emplace_back(std::move(name), Tensor::leaf(std::move(shape), std::move(values)));
  }
  uint32_t text_len = detail::read_raw<uint32_t>(is);
  std::string text(text_len, '\0');
  is.read(text.data(), text_len);
  if (!is) throw TruncatedError("checkpoint file is truncated");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    throw CheckpointError("checkpoint config block is not valid JSON");
  }
  ckpt.config = config_from_json(meta);
  ckpt.epoch = meta.at("epoch").get<int>();
  ckpt.adam_step = meta.at("adam_step").get<int64_t>();
  return ckpt;
}

}  // namespace kag
