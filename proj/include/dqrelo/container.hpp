#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dqrelo/compressor.hpp"
#include "dqrelo/errors.hpp"
#include "dqrelo/version.hpp"

// The ".dqr" compressed-delta container: 4-byte magic "DQR1", an 8-byte
// little-endian manifest length, a UTF-8 JSON manifest, then concatenated
// binary blobs. Every blob carries a CRC32 in the manifest. The normative
// byte layout is documented in FORMAT.md.

namespace dqrelo {

inline constexpr char kContainerMagic[4] = {'D', 'Q', 'R', '1'};
inline constexpr int kContainerFormatVersion = 1;

struct ContainerMeta {
  std::string method;
  nlohmann::ordered_json config_echo = nlohmann::ordered_json::object();
  std::string base_fingerprint;
  int source_precision_bits = 16;
};

struct ContainerFile {
  ContainerMeta meta;
  std::string tool;
  std::vector<CompressedEntry> entries;
};

/// Manifest echo of a compression configuration.
inline nlohmann::ordered_json config_to_json(const CompressionConfig& cfg) {
  nlohmann::ordered_json j;
  j["method"] = method_name(cfg.method);
  j["rho1"] = cfg.rho1.str();
  j["bits"] = cfg.bits_b;
  j["vector_rho"] = cfg.effective_vector_rho().str();
  if (cfg.layer_range) {
    j["layer_range"] = {cfg.layer_range->first, cfg.layer_range->second};
  }
  if (!cfg.include_patterns.empty()) j["include"] = cfg.include_patterns;
  if (!cfg.exclude_patterns.empty()) j["exclude"] = cfg.exclude_patterns;
  j["seed"] = cfg.seed;
  return j;
}

namespace detail {

inline void append_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
  }
}

inline void append_f32(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  append_u32(out, bits);
}

inline std::uint16_t read_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::uint32_t read_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

inline float read_f32(const std::uint8_t* p) {
  const std::uint32_t bits = read_u32(p);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

inline std::uint32_t blob_crc32(const std::vector<std::uint8_t>& bytes) {
  return static_cast<std::uint32_t>(
      crc32_z(crc32_z(0, nullptr, 0), bytes.data(), bytes.size()));
}

inline std::vector<std::uint8_t> quant_blob(const QuantizedDelta& q) {
  std::vector<std::uint8_t> out;
  out.reserve(4 + q.signs.packed().size());
  append_f32(out, q.alpha);
  out.insert(out.end(), q.signs.packed().begin(), q.signs.packed().end());
  return out;
}

inline std::vector<std::uint8_t> factors_blob(const LowRankPayload& f) {
  std::vector<std::uint8_t> out;
  out.reserve(2 * (f.u_bits.size() + f.sigma_bits.size() + f.vt_bits.size()));
  for (const std::uint16_t b : f.u_bits) append_u16(out, b);
  for (const std::uint16_t b : f.sigma_bits) append_u16(out, b);
  for (const std::uint16_t b : f.vt_bits) append_u16(out, b);
  return out;
}

inline std::vector<std::uint8_t> sparse_blob(const std::vector<SparseItem>& items) {
  std::vector<std::uint8_t> out;
  out.reserve(6 * items.size());
  for (const SparseItem& item : items) {
    append_u32(out, item.index);
    append_u16(out, item.value_bits);
  }
  return out;
}

/// Named payload blobs of one entry, in serialization order.
inline std::vector<std::pair<std::string, std::vector<std::uint8_t>>>
entry_blobs(const CompressedEntry& e) {
  std::vector<std::pair<std::string, std::vector<std::uint8_t>>> blobs;
  if (e.quant) blobs.emplace_back("quant", quant_blob(*e.quant));
  if (e.factors) blobs.emplace_back("factors", factors_blob(*e.factors));
  if (!e.sparse.empty() || e.kind == EntryKind::kSparseVector) {
    blobs.emplace_back("sparse", sparse_blob(e.sparse));
  }
  if (e.kind == EntryKind::kRawPassthrough) blobs.emplace_back("raw", e.raw);
  return blobs;
}

}  // namespace detail

inline void write_container(const std::filesystem::path& path,
                            const std::vector<CompressedEntry>& entries,
                            const ContainerMeta& meta) {
  nlohmann::ordered_json manifest;
  manifest["format_version"] = kContainerFormatVersion;
  manifest["tool"] = std::string(kToolName) + " " + kVersionString;
  manifest["method"] = meta.method;
  manifest["config"] = meta.config_echo;
  manifest["base_fingerprint"] = meta.base_fingerprint;
  manifest["source_precision_bits"] = meta.source_precision_bits;

  std::vector<std::uint8_t> payload;
  nlohmann::ordered_json jentries = nlohmann::ordered_json::array();
  for (const CompressedEntry& e : entries) {
    nlohmann::ordered_json je;
    je["name"] = e.name;
    je["kind"] = entry_kind_name(e.kind);
    je["shape"] = e.shape;
    je["dtype"] = dtype_name(e.original_dtype);
    if (e.quant) je["alpha"] = e.quant->alpha;
    if (e.factors) je["rank"] = e.factors->rank;
    if (e.absolute) je["absolute"] = true;
    je["stored_bits"] = e.stored_bits;
    nlohmann::ordered_json jblobs = nlohmann::ordered_json::object();
    for (auto& [name, bytes] : detail::entry_blobs(e)) {
      nlohmann::ordered_json jb;
      jb["offset"] = payload.size();
      jb["length"] = bytes.size();
      jb["crc32"] = detail::blob_crc32(bytes);
      jblobs[name] = std::move(jb);
      payload.insert(payload.end(), bytes.begin(), bytes.end());
    }
    je["blobs"] = std::move(jblobs);
    jentries.push_back(std::move(je));
  }
  manifest["entries"] = std::move(jentries);

  const std::string manifest_text = manifest.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open \"" + path.string() + "\" for writing");
  out.write(kContainerMagic, 4);
  const std::uint64_t manifest_len = manifest_text.size();
  out.write(reinterpret_cast<const char*>(&manifest_len), sizeof manifest_len);
  out.write(manifest_text.data(), static_cast<std::streamsize>(manifest_text.size()));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
  out.flush();
  if (!out) throw IoError("short write to \"" + path.string() + "\"");
}

namespace detail {

struct BlobRef {
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
  std::uint32_t crc = 0;
};

inline BlobRef parse_blob_ref(const nlohmann::ordered_json& jb) {
  BlobRef ref;
  ref.offset = jb.at("offset").get<std::uint64_t>();
  ref.length = jb.at("length").get<std::uint64_t>();
  ref.crc = jb.at("crc32").get<std::uint32_t>();
  return ref;
}

inline std::vector<std::uint8_t> load_blob(const std::vector<std::uint8_t>& payload,
                                           const BlobRef& ref,
                                           const std::string& tensor_name) {
  if (ref.offset > payload.size() || ref.length > payload.size() - ref.offset) {
    throw CorruptEntryError("tensor \"" + tensor_name +
                            "\": payload blob extends past end of file");
  }
  std::vector<std::uint8_t> bytes(payload.begin() + static_cast<std::ptrdiff_t>(ref.offset),
                                  payload.begin() + static_cast<std::ptrdiff_t>(ref.offset + ref.length));
  if (blob_crc32(bytes) != ref.crc) {
    throw CorruptEntryError("tensor \"" + tensor_name + "\": checksum mismatch");
  }
  return bytes;
}

}  // namespace detail

inline ContainerFile read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open \"" + path.string() + "\" for reading");
  std::vector<std::uint8_t> file((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  if (file.size() < 12 || std::memcmp(file.data(), kContainerMagic, 4) != 0) {
    throw FormatError("\"" + path.string() + "\" is not a DQR1 container");
  }
  std::uint64_t manifest_len = 0;
  std::memcpy(&manifest_len, file.data() + 4, 8);
  if (manifest_len > file.size() - 12) {
    throw FormatError("\"" + path.string() + "\": manifest length exceeds file size");
  }
  nlohmann::ordered_json manifest;
  try {
    manifest = nlohmann::ordered_json::parse(
        file.begin() + 12, file.begin() + 12 + static_cast<std::ptrdiff_t>(manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("\"" + path.string() +
                      "\": manifest is not valid JSON: " + e.what());
  }
  if (manifest.value("format_version", -1) != kContainerFormatVersion) {
    throw FormatError("\"" + path.string() + "\": unsupported format version");
  }

  const std::vector<std::uint8_t> payload(
      file.begin() + 12 + static_cast<std::ptrdiff_t>(manifest_len), file.end());

  ContainerFile out;
  out.tool = manifest.value("tool", "");
  out.meta.method = manifest.value("method", "");
  out.meta.config_echo = manifest.value("config", nlohmann::ordered_json::object());
  out.meta.base_fingerprint = manifest.value("base_fingerprint", "");
  out.meta.source_precision_bits = manifest.value("source_precision_bits", 16);

  // Reject overlapping payload ranges before decoding anything.
  std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
  for (const auto& je : manifest.at("entries")) {
    for (const auto& [bname, jb] : je.at("blobs").items()) {
      const auto ref = detail::parse_blob_ref(jb);
      if (ref.length > 0) ranges.emplace_back(ref.offset, ref.offset + ref.length);
    }
  }
  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    if (ranges[i].first < ranges[i - 1].second) {
      throw FormatError("\"" + path.string() + "\": overlapping payload ranges");
    }
  }

  for (const auto& je : manifest.at("entries")) {
    CompressedEntry e;
    e.name = je.at("name").get<std::string>();
    e.kind = parse_entry_kind(je.at("kind").get<std::string>());
    e.shape = je.at("shape").get<std::vector<std::int64_t>>();
    if (e.shape.empty()) {
      throw FormatError("tensor \"" + e.name + "\": empty shape in manifest");
    }
    e.original_dtype = parse_dtype(je.at("dtype").get<std::string>());
    e.absolute = je.value("absolute", false);
    const auto& jblobs = je.at("blobs");
    const auto [n, m] = e.view_dims();

    if (e.kind == EntryKind::kDqrelo || e.kind == EntryKind::kOnebit) {
      if (!jblobs.contains("quant")) {
        throw CorruptEntryError("tensor \"" + e.name + "\": missing quant blob");
      }
      const auto bytes =
          detail::load_blob(payload, detail::parse_blob_ref(jblobs.at("quant")), e.name);
      if (bytes.size() != 4 + SignMatrix::packed_size(n, m)) {
        throw CorruptEntryError("tensor \"" + e.name + "\": quant blob length mismatch");
      }
      QuantizedDelta q;
      q.alpha = detail::read_f32(bytes.data());
      q.signs = SignMatrix::from_packed(
          std::vector<std::uint8_t>(bytes.begin() + 4, bytes.end()), n, m);
      e.quant = std::move(q);
    }
    if (e.kind == EntryKind::kDqrelo || e.kind == EntryKind::kLowRank) {
      if (!jblobs.contains("factors") || !je.contains("rank")) {
        throw CorruptEntryError("tensor \"" + e.name + "\": missing factors");
      }
      const int rank = je.at("rank").get<int>();
      const auto bytes = detail::load_blob(
          payload, detail::parse_blob_ref(jblobs.at("factors")), e.name);
      const std::size_t expected =
          2 * static_cast<std::size_t>(rank) * static_cast<std::size_t>(n + m + 1);
      if (rank < 1 || bytes.size() != expected) {
        throw CorruptEntryError("tensor \"" + e.name + "\": factors blob length mismatch");
      }
      LowRankPayload f;
      f.rank = rank;
      const std::uint8_t* p = bytes.data();
      f.u_bits.resize(static_cast<std::size_t>(n) * rank);
      for (auto& b : f.u_bits) { b = detail::read_u16(p); p += 2; }
      f.sigma_bits.resize(static_cast<std::size_t>(rank));
      for (auto& b : f.sigma_bits) { b = detail::read_u16(p); p += 2; }
      f.vt_bits.resize(static_cast<std::size_t>(rank) * m);
      for (auto& b : f.vt_bits) { b = detail::read_u16(p); p += 2; }
      e.factors = std::move(f);
    }
    if (e.kind == EntryKind::kSparseVector) {
      if (!jblobs.contains("sparse")) {
        throw CorruptEntryError("tensor \"" + e.name + "\": missing sparse blob");
      }
      const auto bytes = detail::load_blob(
          payload, detail::parse_blob_ref(jblobs.at("sparse")), e.name);
      if (bytes.size() % 6 != 0) {
        throw CorruptEntryError("tensor \"" + e.name + "\": sparse blob length mismatch");
      }
      e.sparse.resize(bytes.size() / 6);
      for (std::size_t i = 0; i < e.sparse.size(); ++i) {
        e.sparse[i].index = detail::read_u32(bytes.data() + 6 * i);
        e.sparse[i].value_bits = detail::read_u16(bytes.data() + 6 * i + 4);
      }
    }
    if (e.kind == EntryKind::kRawPassthrough) {
      if (!jblobs.contains("raw")) {
        throw CorruptEntryError("tensor \"" + e.name + "\": missing raw blob");
      }
      e.raw = detail::load_blob(payload, detail::parse_blob_ref(jblobs.at("raw")), e.name);
    }

    e.stored_bits = entry_payload_bits(e);
    if (je.contains("stored_bits") &&
        je.at("stored_bits").get<std::uint64_t>() != e.stored_bits) {
      throw CorruptEntryError("tensor \"" + e.name +
                              "\": stored_bits disagrees with payload");
    }
    out.entries.push_back(std::move(e));
  }
  return out;
}

}  // namespace dqrelo
