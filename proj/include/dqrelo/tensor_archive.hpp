#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dqrelo/errors.hpp"
#include "dqrelo/float_codec.hpp"
#include "dqrelo/types.hpp"

// Named-tensor checkpoint archives. The on-disk layout is the single-file
// safetensors layout: an 8-byte little-endian header length, a UTF-8 JSON
// header mapping tensor names to {dtype, shape, data_offsets}, then the raw
// payload. Files written by the wider safetensors ecosystem load here as long
// as every tensor is F16, BF16 or F32.

namespace dqrelo {

struct TensorRecord {
  std::vector<std::int64_t> shape;
  Dtype dtype = Dtype::kF32;
  std::vector<std::uint8_t> data;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (const std::int64_t d : shape) n *= d;
    return n;
  }

  std::size_t expected_bytes() const {
    return static_cast<std::size_t>(numel()) *
           (static_cast<std::size_t>(dtype_bits(dtype)) / 8);
  }
};

class TensorArchive {
 public:
  void add(std::string name, TensorRecord record) {
    if (index_.count(name)) {
      throw FormatError("duplicate tensor name \"" + name + "\"");
    }
    if (record.shape.empty()) {
      throw FormatError("tensor \"" + name + "\" has an empty shape");
    }
    for (const std::int64_t d : record.shape) {
      if (d < 1) {
        throw FormatError("tensor \"" + name + "\" has a dimension < 1");
      }
    }
    if (record.data.size() != record.expected_bytes()) {
      throw CorruptTensorError(
          "tensor \"" + name + "\": payload is " +
          std::to_string(record.data.size()) + " bytes, shape/dtype imply " +
          std::to_string(record.expected_bytes()));
    }
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(record));
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const TensorRecord& at(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) {
      throw FormatError("no tensor named \"" + name + "\"");
    }
    return entries_[it->second].second;
  }

  const std::vector<std::pair<std::string, TensorRecord>>& entries() const {
    return entries_;
  }

  std::size_t size() const { return entries_.size(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, rec] : entries_) out.push_back(name);
    return out;
  }

  std::int64_t total_params() const {
    std::int64_t n = 0;
    for (const auto& [name, rec] : entries_) n += rec.numel();
    return n;
  }

  /// Bits per weight of the stored precision: the bit width holding the
  /// majority of elements. Empty archives and ties report 16.
  int source_precision_bits() const {
    std::int64_t n16 = 0;
    std::int64_t n32 = 0;
    for (const auto& [name, rec] : entries_) {
      (dtype_bits(rec.dtype) == 16 ? n16 : n32) += rec.numel();
    }
    return n32 > n16 ? 32 : 16;
  }

 private:
  std::vector<std::pair<std::string, TensorRecord>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct LoadOptions {
  /// Reject tensors containing NaN. Off by default: some checkpoints carry
  /// sentinel buffers on purpose.
  bool validate_values = false;
};

namespace detail {

inline constexpr std::uint64_t kMaxHeaderBytes = 1ull << 28;

inline std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t len) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline bool buffer_has_nan(const std::uint8_t* data, std::int64_t count,
                           Dtype d) {
  const std::size_t step = static_cast<std::size_t>(dtype_bits(d)) / 8;
  for (std::int64_t i = 0; i < count; ++i) {
    if (std::isnan(decode_scalar(data + static_cast<std::size_t>(i) * step, d)))
      return true;
  }
  return false;
}

}  // namespace detail

/// The canonical serialized header for `archive`: entries in archive order,
/// payload offsets assigned contiguously, padded with spaces to a multiple of
/// 8 bytes. save_archive writes exactly these bytes, and the base-model
/// fingerprint hashes them, so the fingerprint is independent of how a foreign
/// file happened to format its header.
inline std::vector<std::uint8_t> canonical_header_bytes(
    const TensorArchive& archive) {
  nlohmann::ordered_json header = nlohmann::ordered_json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, rec] : archive.entries()) {
    nlohmann::ordered_json entry;
    entry["dtype"] = dtype_name(rec.dtype);
    entry["shape"] = rec.shape;
    entry["data_offsets"] = {offset, offset + rec.data.size()};
    header[name] = std::move(entry);
    offset += rec.data.size();
  }
  std::string text = header.dump();
  while (text.size() % 8 != 0) text.push_back(' ');
  return std::vector<std::uint8_t>(text.begin(), text.end());
}

inline std::string archive_fingerprint(const TensorArchive& archive) {
  const auto header = canonical_header_bytes(archive);
  const std::uint64_t h = detail::fnv1a64(header.data(), header.size());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

inline TensorArchive load_archive(const std::filesystem::path& path,
                                  const LoadOptions& options = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open \"" + path.string() + "\" for reading");
  in.seekg(0, std::ios::end);
  const std::uint64_t file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0);

  std::uint64_t header_len = 0;
  if (file_size < 8 ||
      !in.read(reinterpret_cast<char*>(&header_len), sizeof header_len)) {
    throw FormatError("\"" + path.string() + "\": file too short for a header");
  }
  if (header_len > detail::kMaxHeaderBytes || header_len > file_size - 8) {
    throw FormatError("\"" + path.string() + "\": header length " +
                      std::to_string(header_len) + " exceeds file size");
  }

  std::string header_text(header_len, '\0');
  if (!in.read(header_text.data(), static_cast<std::streamsize>(header_len))) {
    throw FormatError("\"" + path.string() + "\": truncated header");
  }
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("\"" + path.string() +
                      "\": header is not valid JSON: " + e.what());
  }
  if (!header.is_object()) {
    throw FormatError("\"" + path.string() + "\": header is not a JSON object");
  }

  const std::uint64_t payload_size = file_size - 8 - header_len;
  const std::uint64_t payload_start = 8 + header_len;

  TensorArchive archive;
  for (const auto& [name, meta] : header.items()) {
    if (name == "__metadata__") continue;
    if (!meta.is_object() || !meta.contains("dtype") || !meta.contains("shape") ||
        !meta.contains("data_offsets")) {
      throw FormatError("tensor \"" + name + "\": incomplete header entry");
    }
    TensorRecord rec;
    rec.dtype = parse_dtype(meta["dtype"].get<std::string>());
    if (!meta["shape"].is_array() || meta["shape"].empty()) {
      throw FormatError("tensor \"" + name + "\": shape must be a non-empty array");
    }
    for (const auto& d : meta["shape"]) {
      const std::int64_t dim = d.get<std::int64_t>();
      if (dim < 1) throw FormatError("tensor \"" + name + "\": dimension < 1");
      rec.shape.push_back(dim);
    }
    const auto& offs = meta["data_offsets"];
    if (!offs.is_array() || offs.size() != 2) {
      throw FormatError("tensor \"" + name + "\": data_offsets must be [begin, end]");
    }
    const std::uint64_t begin = offs[0].get<std::uint64_t>();
    const std::uint64_t end = offs[1].get<std::uint64_t>();
    if (begin > end || end > payload_size) {
      throw CorruptTensorError("tensor \"" + name +
                               "\": data_offsets outside the payload");
    }
    if (end - begin != rec.expected_bytes()) {
      throw CorruptTensorError(
          "tensor \"" + name + "\": payload is " + std::to_string(end - begin) +
          " bytes, shape/dtype imply " + std::to_string(rec.expected_bytes()));
    }
    rec.data.resize(end - begin);
    in.seekg(static_cast<std::streamoff>(payload_start + begin));
    if (!in.read(reinterpret_cast<char*>(rec.data.data()),
                 static_cast<std::streamsize>(rec.data.size()))) {
      throw CorruptTensorError("tensor \"" + name + "\": truncated payload");
    }
    if (options.validate_values &&
        detail::buffer_has_nan(rec.data.data(), rec.numel(), rec.dtype)) {
      throw CorruptTensorError("tensor \"" + name + "\" contains NaN values");
    }
    archive.add(name, std::move(rec));
  }
  return archive;
}

inline void save_archive(const TensorArchive& archive,
                         const std::filesystem::path& path) {
  const auto header = canonical_header_bytes(archive);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open \"" + path.string() + "\" for writing");
  const std::uint64_t header_len = header.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof header_len);
  out.write(reinterpret_cast<const char*>(header.data()),
            static_cast<std::streamsize>(header.size()));
  for (const auto& [name, rec] : archive.entries()) {
    out.write(reinterpret_cast<const char*>(rec.data.data()),
              static_cast<std::streamsize>(rec.data.size()));
  }
  out.flush();
  if (!out) throw IoError("short write to \"" + path.string() + "\"");
}

/// Float32 working copy of one tensor. Rank-1 tensors become a 1 x len row;
/// rank >= 3 tensors fold trailing dimensions into columns.
struct FloatTensor {
  ShapeClass shape_class = ShapeClass::kMatrix;
  Matrix values;
  std::vector<std::int64_t> original_shape;

  bool is_vector() const { return shape_class == ShapeClass::kVector; }
  Index rows() const { return values.rows(); }
  Index cols() const { return values.cols(); }

  Eigen::Map<const VectorF> vec() const {
    return Eigen::Map<const VectorF>(values.data(), values.size());
  }
};

inline FloatTensor as_matrix(const TensorRecord& record) {
  FloatTensor out;
  out.original_shape = record.shape;
  const std::vector<float> f32 =
      decode_to_f32(record.data.data(), static_cast<std::size_t>(record.numel()),
                    record.dtype);
  Index rows = 1;
  Index cols = 1;
  if (record.shape.size() == 1) {
    out.shape_class = ShapeClass::kVector;
    cols = record.shape[0];
  } else {
    out.shape_class = record.shape.size() == 2 ? ShapeClass::kMatrix
                                               : ShapeClass::kReshapedMatrix;
    rows = record.shape[0];
    cols = record.numel() / record.shape[0];
  }
  out.values = Eigen::Map<const Matrix>(f32.data(), rows, cols);
  return out;
}

/// Encode a float32 working view back into a TensorRecord of dtype `d`.
inline TensorRecord to_record(const Matrix& values,
                              const std::vector<std::int64_t>& shape, Dtype d) {
  TensorRecord rec;
  rec.shape = shape;
  rec.dtype = d;
  rec.data = encode_from_f32(values.data(),
                             static_cast<std::size_t>(values.size()), d);
  return rec;
}

}  // namespace dqrelo
