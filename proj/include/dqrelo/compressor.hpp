#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <regex>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dqrelo/errors.hpp"
#include "dqrelo/float_codec.hpp"
#include "dqrelo/linalg.hpp"
#include "dqrelo/sign_pack.hpp"
#include "dqrelo/tensor_archive.hpp"
#include "dqrelo/types.hpp"

// The delta compression pipeline: one-bit sign quantization with the
// Frobenius-optimal scalar scale, truncated SVD of the quantization residual,
// and the data-free baselines (SVD-only, one-bit-only, magnitude and random
// pruning) at equal total bit budget. Vector parameters keep their top
// entries by magnitude. Everything here is a pure function of its inputs,
// including the seeded random pruner.

namespace dqrelo {

// -- one-bit quantization -----------------------------------------------------

struct QuantizedDelta {
  SignMatrix signs;
  float alpha = 0.0f;  // mean |delta|; every dequantized entry is +-alpha

  Matrix dequantize() const {
    Matrix m(signs.rows(), signs.cols());
    for (std::int64_t i = 0; i < signs.rows(); ++i) {
      for (std::int64_t j = 0; j < signs.cols(); ++j) {
        m(i, j) = signs.positive(i, j) ? alpha : -alpha;
      }
    }
    return m;
  }
};

/// Sign bit is 1 iff the entry is strictly positive; zero quantizes to -1.
inline QuantizedDelta sign_quantize(const Matrix& delta) {
  if (!delta.allFinite()) {
    throw NumericError("sign_quantize: non-finite entry");
  }
  QuantizedDelta q;
  q.signs = SignMatrix(delta.rows(), delta.cols());
  double abs_sum = 0.0;
  for (Index i = 0; i < delta.rows(); ++i) {
    for (Index j = 0; j < delta.cols(); ++j) {
      const float v = delta(i, j);
      if (v > 0.0f) q.signs.set(i, j, true);
      abs_sum += std::abs(static_cast<double>(v));
    }
  }
  q.alpha = static_cast<float>(abs_sum / static_cast<double>(delta.size()));
  return q;
}

inline Matrix residual(const Matrix& delta, const QuantizedDelta& quant) {
  if (delta.rows() != quant.signs.rows() || delta.cols() != quant.signs.cols()) {
    throw ShapeError("residual: delta and quantized shapes differ");
  }
  Matrix r(delta.rows(), delta.cols());
  for (Index i = 0; i < delta.rows(); ++i) {
    for (Index j = 0; j < delta.cols(); ++j) {
      r(i, j) = delta(i, j) - (quant.signs.positive(i, j) ? quant.alpha : -quant.alpha);
    }
  }
  return r;
}

// -- configuration ------------------------------------------------------------

enum class Method {
  kDqrelo,
  kSvdOnly,
  kOnebitOnly,
  kMagnitudePrune,
  kRandomPrune,
};

inline const char* method_name(Method m) {
  switch (m) {
    case Method::kDqrelo: return "dqrelo";
    case Method::kSvdOnly: return "svd_only";
    case Method::kOnebitOnly: return "onebit_only";
    case Method::kMagnitudePrune: return "magnitude_prune";
    case Method::kRandomPrune: return "random_prune";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "dqrelo") return Method::kDqrelo;
  if (s == "svd_only") return Method::kSvdOnly;
  if (s == "onebit_only") return Method::kOnebitOnly;
  if (s == "magnitude_prune") return Method::kMagnitudePrune;
  if (s == "random_prune") return Method::kRandomPrune;
  throw ConfigError("unknown method \"" + s +
                    "\" (dqrelo, svd_only, onebit_only, magnitude_prune, "
                    "random_prune)");
}

struct CompressionConfig {
  Method method = Method::kDqrelo;
  Rational rho1{1, 16};  // low-rank budget as a fraction of n*m
  int bits_b = 16;       // bits per full-precision weight of the source
  std::optional<Rational> vector_rho;  // 1-D keep ratio; defaults to total_rho
  std::optional<std::pair<double, double>> layer_range;  // [lo, hi) depth fractions
  std::vector<std::string> include_patterns;
  std::vector<std::string> exclude_patterns;
  std::uint64_t seed = 0;  // random_prune reproducibility

  /// Total ratio rho = rho1 + 1/b, kept exact.
  Rational total_rho() const { return rho1 + Rational(1, bits_b); }

  Rational effective_vector_rho() const {
    return vector_rho ? *vector_rho : total_rho();
  }

  void validate() const {
    if (bits_b < 2) throw ConfigError("bits must be >= 2");
    if (rho1.num <= 0) throw ConfigError("rho1 must be > 0");
    const Rational rho = total_rho();
    if (rho.num >= rho.den) {
      throw ConfigError("budget infeasible: rho1 + 1/bits = " + rho.str() +
                        " >= 1");
    }
    const Rational vrho = effective_vector_rho();
    if (vrho.num <= 0 || vrho.num > vrho.den) {
      throw ConfigError("vector rho must lie in (0, 1]");
    }
    if (layer_range) {
      const auto [lo, hi] = *layer_range;
      if (!(lo >= 0.0 && lo <= hi && hi <= 1.0)) {
        throw ConfigError("layer range must satisfy 0 <= lo <= hi <= 1");
      }
    }
  }
};

// -- compressed entries -------------------------------------------------------

enum class EntryKind {
  kDqrelo,
  kLowRank,
  kOnebit,
  kSparseVector,
  kRawPassthrough,
};

inline const char* entry_kind_name(EntryKind k) {
  switch (k) {
    case EntryKind::kDqrelo: return "dqrelo";
    case EntryKind::kLowRank: return "lowrank";
    case EntryKind::kOnebit: return "onebit";
    case EntryKind::kSparseVector: return "sparse_vector";
    case EntryKind::kRawPassthrough: return "raw_passthrough";
  }
  return "?";
}

inline EntryKind parse_entry_kind(const std::string& s) {
  if (s == "dqrelo") return EntryKind::kDqrelo;
  if (s == "lowrank") return EntryKind::kLowRank;
  if (s == "onebit") return EntryKind::kOnebit;
  if (s == "sparse_vector") return EntryKind::kSparseVector;
  if (s == "raw_passthrough") return EntryKind::kRawPassthrough;
  throw FormatError("unknown entry kind \"" + s + "\"");
}

/// (flattened row-major index, float16 value) pair of a sparse delta.
struct SparseItem {
  std::uint32_t index = 0;
  std::uint16_t value_bits = 0;

  bool operator==(const SparseItem& o) const {
    return index == o.index && value_bits == o.value_bits;
  }
};

/// Truncated factors stored as float16 bit patterns, the exact form that
/// reaches disk. Row-major U (n x r), sigma (r), Vt (r x m).
struct LowRankPayload {
  int rank = 0;
  std::vector<std::uint16_t> u_bits;
  std::vector<std::uint16_t> sigma_bits;
  std::vector<std::uint16_t> vt_bits;

  static LowRankPayload from_factors(const LowRankFactors& f) {
    LowRankPayload p;
    p.rank = f.rank;
    p.u_bits.resize(static_cast<std::size_t>(f.u.size()));
    for (Index i = 0; i < f.u.size(); ++i) {
      p.u_bits[static_cast<std::size_t>(i)] = float_to_half_bits(f.u.data()[i]);
    }
    p.sigma_bits.resize(static_cast<std::size_t>(f.sigma.size()));
    for (Index i = 0; i < f.sigma.size(); ++i) {
      p.sigma_bits[static_cast<std::size_t>(i)] = float_to_half_bits(f.sigma[i]);
    }
    p.vt_bits.resize(static_cast<std::size_t>(f.vt.size()));
    for (Index i = 0; i < f.vt.size(); ++i) {
      p.vt_bits[static_cast<std::size_t>(i)] = float_to_half_bits(f.vt.data()[i]);
    }
    return p;
  }

  LowRankFactors to_factors(std::int64_t n, std::int64_t m) const {
    const auto r = static_cast<std::size_t>(rank);
    if (rank < 1 || u_bits.size() != static_cast<std::size_t>(n) * r ||
        sigma_bits.size() != r || vt_bits.size() != r * static_cast<std::size_t>(m)) {
      throw CorruptEntryError("low-rank payload sizes disagree with shape/rank");
    }
    LowRankFactors f;
    f.rank = rank;
    f.u.resize(n, rank);
    for (Index i = 0; i < f.u.size(); ++i) {
      f.u.data()[i] = half_bits_to_float(u_bits[static_cast<std::size_t>(i)]);
    }
    f.sigma.resize(rank);
    for (int i = 0; i < rank; ++i) {
      f.sigma[i] = half_bits_to_float(sigma_bits[static_cast<std::size_t>(i)]);
    }
    f.vt.resize(rank, m);
    for (Index i = 0; i < f.vt.size(); ++i) {
      f.vt.data()[i] = half_bits_to_float(vt_bits[static_cast<std::size_t>(i)]);
    }
    return f;
  }
};

struct CompressedEntry {
  std::string name;
  EntryKind kind = EntryKind::kRawPassthrough;
  std::vector<std::int64_t> shape;
  Dtype original_dtype = Dtype::kF16;
  std::optional<QuantizedDelta> quant;    // dqrelo, onebit
  std::optional<LowRankPayload> factors;  // dqrelo, lowrank
  std::vector<SparseItem> sparse;         // sparse_vector
  std::vector<std::uint8_t> raw;          // raw_passthrough
  /// raw_passthrough only: raw holds verbatim fine-tuned values in
  /// original_dtype rather than a float16 delta.
  bool absolute = false;
  std::uint64_t stored_bits = 0;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (const std::int64_t d : shape) n *= d;
    return n;
  }

  /// Working-view dimensions under the same folding rule as as_matrix.
  std::pair<std::int64_t, std::int64_t> view_dims() const {
    if (shape.size() == 1) return {1, shape[0]};
    return {shape[0], numel() / shape[0]};
  }
};

/// Serialized payload size in bits; stored_bits always equals this.
inline std::uint64_t entry_payload_bits(const CompressedEntry& e) {
  std::uint64_t bytes = 0;
  if (e.quant) bytes += 4 + e.quant->signs.packed().size();  // alpha + signs
  if (e.factors) {
    bytes += 2 * (e.factors->u_bits.size() + e.factors->sigma_bits.size() +
                  e.factors->vt_bits.size());
  }
  bytes += 6 * e.sparse.size();
  bytes += e.raw.size();
  return bytes * 8;
}

// -- budget -------------------------------------------------------------------

/// Rank meeting the fractional budget: ceil(n*m*rho1 / (n+m)), clamped to
/// [1, min(n, m)]. `clamped` reports whether clamping changed the value.
inline int rank_for_budget(std::int64_t n, std::int64_t m, const Rational& rho1,
                           bool* clamped = nullptr) {
  if (n < 1 || m < 1) throw ConfigError("rank_for_budget: empty matrix");
  if (rho1.num <= 0 || rho1.num >= rho1.den) {
    throw ConfigError("rank_for_budget: rho1 must lie in (0, 1)");
  }
  const __int128 p = static_cast<__int128>(n) * m * rho1.num;
  const __int128 q = static_cast<__int128>(n + m) * rho1.den;
  std::int64_t r = static_cast<std::int64_t>((p + q - 1) / q);
  const std::int64_t lo = 1;
  const std::int64_t hi = std::min(n, m);
  const std::int64_t clamped_r = std::clamp(r, lo, hi);
  if (clamped) *clamped = clamped_r != r;
  return static_cast<int>(clamped_r);
}

// -- per-tensor compression ---------------------------------------------------

namespace detail {

inline std::vector<SparseItem> top_k_sparse(const float* values,
                                            std::int64_t count,
                                            std::int64_t k) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), 0);
  const auto better = [&](std::int64_t a, std::int64_t b) {
    const float fa = std::abs(values[a]);
    const float fb = std::abs(values[b]);
    if (fa != fb) return fa > fb;
    return a < b;  // ties keep the lower index
  };
  if (k < count) {
    std::nth_element(order.begin(), order.begin() + k, order.end(), better);
    order.resize(static_cast<std::size_t>(k));
  }
  std::sort(order.begin(), order.end());
  std::vector<SparseItem> out;
  out.reserve(order.size());
  for (const std::int64_t idx : order) {
    out.push_back({static_cast<std::uint32_t>(idx),
                   float_to_half_bits(values[idx])});
  }
  return out;
}

/// k distinct indices in [0, count), uniform, deterministic in `seed`
/// (Floyd's sampling algorithm).
inline std::vector<SparseItem> random_sparse(const float* values,
                                             std::int64_t count, std::int64_t k,
                                             std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::unordered_set<std::int64_t> chosen;
  chosen.reserve(static_cast<std::size_t>(k) * 2);
  for (std::int64_t j = count - k; j < count; ++j) {
    std::uniform_int_distribution<std::int64_t> dist(0, j);
    const std::int64_t t = dist(gen);
    if (!chosen.insert(t).second) chosen.insert(j);
  }
  std::vector<std::int64_t> order(chosen.begin(), chosen.end());
  std::sort(order.begin(), order.end());
  std::vector<SparseItem> out;
  out.reserve(order.size());
  for (const std::int64_t idx : order) {
    out.push_back({static_cast<std::uint32_t>(idx),
                   float_to_half_bits(values[idx])});
  }
  return out;
}

}  // namespace detail

inline CompressedEntry compress_matrix(const Matrix& delta,
                                       const CompressionConfig& cfg,
                                       std::vector<std::string>* warnings = nullptr) {
  cfg.validate();
  const std::int64_t n = delta.rows();
  const std::int64_t m = delta.cols();
  CompressedEntry entry;
  switch (cfg.method) {
    case Method::kDqrelo: {
      entry.kind = EntryKind::kDqrelo;
      entry.quant = sign_quantize(delta);
      bool clamped = false;
      const int r = rank_for_budget(n, m, cfg.rho1, &clamped);
      if (clamped && warnings) {
        warnings->push_back("rank clamped to " + std::to_string(r) + " for " +
                            std::to_string(n) + "x" + std::to_string(m));
      }
      const Matrix res = residual(delta, *entry.quant);
      entry.factors = LowRankPayload::from_factors(truncated_svd(res, r));
      break;
    }
    case Method::kSvdOnly: {
      entry.kind = EntryKind::kLowRank;
      bool clamped = false;
      // Equal budget: SVD-only spends the whole rho = rho1 + 1/b on rank.
      const int r = rank_for_budget(n, m, cfg.total_rho(), &clamped);
      if (clamped && warnings) {
        warnings->push_back("rank clamped to " + std::to_string(r) + " for " +
                            std::to_string(n) + "x" + std::to_string(m));
      }
      entry.factors = LowRankPayload::from_factors(truncated_svd(delta, r));
      break;
    }
    case Method::kOnebitOnly: {
      entry.kind = EntryKind::kOnebit;
      entry.quant = sign_quantize(delta);
      break;
    }
    case Method::kMagnitudePrune:
    case Method::kRandomPrune: {
      if (!delta.allFinite()) throw NumericError("compress_matrix: non-finite entry");
      entry.kind = EntryKind::kSparseVector;
      const std::int64_t count = n * m;
      const std::int64_t k =
          std::min(count, cfg.total_rho().ceil_mul(count));
      entry.sparse = cfg.method == Method::kMagnitudePrune
                         ? detail::top_k_sparse(delta.data(), count, k)
                         : detail::random_sparse(delta.data(), count, k, cfg.seed);
      break;
    }
  }
  entry.stored_bits = entry_payload_bits(entry);
  return entry;
}

/// Vector parameters keep the ceil(rho * len) largest-|value| entries
/// (ties keep the lower index), stored as index-sorted (uint32, float16)
/// pairs; dropped entries reconstruct as zero delta.
inline CompressedEntry compress_vector(const Eigen::Ref<const VectorF>& delta,
                                       const CompressionConfig& cfg) {
  cfg.validate();
  const std::int64_t len = delta.size();
  if (len < 1) throw ConfigError("compress_vector: empty vector");
  if (!delta.allFinite()) throw NumericError("compress_vector: non-finite entry");
  const std::int64_t k =
      std::min(len, cfg.effective_vector_rho().ceil_mul(len));
  CompressedEntry entry;
  entry.kind = EntryKind::kSparseVector;
  entry.sparse = detail::top_k_sparse(delta.data(), len, k);
  entry.stored_bits = entry_payload_bits(entry);
  return entry;
}

/// Raw passthrough of a float32 delta, stored as float16.
inline CompressedEntry passthrough_delta(const Matrix& delta) {
  CompressedEntry entry;
  entry.kind = EntryKind::kRawPassthrough;
  entry.raw = encode_from_f32(delta.data(), static_cast<std::size_t>(delta.size()),
                              Dtype::kF16);
  entry.stored_bits = entry_payload_bits(entry);
  return entry;
}

/// Verbatim passthrough of a tensor that has no counterpart in the base
/// archive: the original bytes, emitted unchanged at reconstruction.
inline CompressedEntry passthrough_absolute(const TensorRecord& record) {
  CompressedEntry entry;
  entry.kind = EntryKind::kRawPassthrough;
  entry.absolute = true;
  entry.raw = record.data;
  entry.stored_bits = entry_payload_bits(entry);
  return entry;
}

/// Dense float32 delta (or verbatim values, when absolute) for one entry.
inline FloatTensor decompress_entry(const CompressedEntry& entry) {
  if (entry.shape.empty()) throw CorruptEntryError("entry with empty shape");
  const auto [n, m] = entry.view_dims();
  FloatTensor out;
  out.original_shape = entry.shape;
  out.shape_class = entry.shape.size() == 1 ? ShapeClass::kVector
                    : entry.shape.size() == 2 ? ShapeClass::kMatrix
                                              : ShapeClass::kReshapedMatrix;
  switch (entry.kind) {
    case EntryKind::kDqrelo:
    case EntryKind::kOnebit: {
      if (!entry.quant) throw CorruptEntryError("quantized entry without signs");
      const SignMatrix& signs = entry.quant->signs;
      if (signs.rows() != n || signs.cols() != m) {
        throw CorruptEntryError("sign matrix dimensions disagree with shape");
      }
      if (entry.kind == EntryKind::kDqrelo) {
        if (!entry.factors) throw CorruptEntryError("dqrelo entry without factors");
        out.values = assemble(entry.factors->to_factors(n, m));
      } else {
        out.values = Matrix::Zero(n, m);
      }
      const float alpha = entry.quant->alpha;
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < m; ++j) {
          out.values(i, j) += signs.positive(i, j) ? alpha : -alpha;
        }
      }
      break;
    }
    case EntryKind::kLowRank: {
      if (!entry.factors) throw CorruptEntryError("lowrank entry without factors");
      out.values = assemble(entry.factors->to_factors(n, m));
      break;
    }
    case EntryKind::kSparseVector: {
      out.values = Matrix::Zero(n, m);
      const std::int64_t count = n * m;
      for (const SparseItem& item : entry.sparse) {
        if (item.index >= static_cast<std::uint64_t>(count)) {
          throw CorruptEntryError("sparse index out of range");
        }
        out.values.data()[item.index] = half_bits_to_float(item.value_bits);
      }
      break;
    }
    case EntryKind::kRawPassthrough: {
      const Dtype d = entry.absolute ? entry.original_dtype : Dtype::kF16;
      const std::size_t expected = static_cast<std::size_t>(entry.numel()) *
                                   (static_cast<std::size_t>(dtype_bits(d)) / 8);
      if (entry.raw.size() != expected) {
        throw CorruptEntryError("raw payload length disagrees with shape");
      }
      const std::vector<float> f32 =
          decode_to_f32(entry.raw.data(), static_cast<std::size_t>(entry.numel()), d);
      out.values = Eigen::Map<const Matrix>(f32.data(), n, m);
      break;
    }
  }
  return out;
}

// -- target selection ---------------------------------------------------------

struct TargetPartition {
  std::vector<std::string> compress;
  std::vector<std::string> passthrough;
};

namespace detail {

/// fnmatch-style glob with '*' and '?'.
inline std::regex glob_to_regex(const std::string& pattern) {
  std::string re;
  re.reserve(pattern.size() * 2);
  for (const char c : pattern) {
    switch (c) {
      case '*': re += ".*"; break;
      case '?': re += '.'; break;
      default:
        if (std::isalnum(static_cast<unsigned char>(c)) || c == '_') {
          re += c;
        } else {
          re += '\\';
          re += c;
        }
    }
  }
  try {
    return std::regex(re);
  } catch (const std::regex_error& e) {
    throw ConfigError("bad pattern \"" + pattern + "\": " + e.what());
  }
}

inline bool matches_any(const std::string& name,
                        const std::vector<std::regex>& patterns) {
  for (const std::regex& re : patterns) {
    if (std::regex_match(name, re)) return true;
  }
  return false;
}

}  // namespace detail

/// Layer index from common checkpoint naming ("model.layers.12.",
/// "transformer.h.3.", "blk.7.", "encoder.blocks.0.").
inline std::optional<int> parse_layer_index(const std::string& name) {
  static const std::regex re(R"((?:^|\.)(?:layers?|blocks?|h|blk)\.(\d+)(?:\.|$))");
  std::smatch match;
  if (std::regex_search(name, match, re)) {
    return std::stoi(match[1].str());
  }
  return std::nullopt;
}

using LayerIndexFn = std::function<std::optional<int>(const std::string&)>;

/// One past the highest layer index any name parses to; 0 when none do.
inline int infer_num_layers(const std::vector<std::string>& names,
                            const LayerIndexFn& layer_index_of = parse_layer_index) {
  int num = 0;
  for (const std::string& name : names) {
    if (const auto idx = layer_index_of(name)) num = std::max(num, *idx + 1);
  }
  return num;
}

/// A tensor is compressed iff it matches the include patterns (empty list
/// means everything), fails every exclude pattern, and — when a layer range
/// is set — parses to a layer whose depth fraction lies inside [lo, hi).
/// Everything else is passthrough.
inline TargetPartition select_targets(const std::vector<std::string>& names,
                                      const CompressionConfig& cfg,
                                      const LayerIndexFn& layer_index_of,
                                      int num_layers) {
  std::vector<std::regex> include;
  std::vector<std::regex> exclude;
  for (const std::string& p : cfg.include_patterns) {
    include.push_back(detail::glob_to_regex(p));
  }
  for (const std::string& p : cfg.exclude_patterns) {
    exclude.push_back(detail::glob_to_regex(p));
  }

  TargetPartition out;
  for (const std::string& name : names) {
    bool selected = include.empty() || detail::matches_any(name, include);
    if (selected && detail::matches_any(name, exclude)) selected = false;
    if (selected && cfg.layer_range) {
      const auto idx = layer_index_of(name);
      if (!idx || num_layers <= 0) {
        selected = false;
      } else {
        const double fraction =
            static_cast<double>(*idx) / static_cast<double>(num_layers);
        const auto [lo, hi] = *cfg.layer_range;
        selected = fraction >= lo && fraction < hi;
      }
    }
    (selected ? out.compress : out.passthrough).push_back(name);
  }
  return out;
}

// -- ratio accounting ---------------------------------------------------------

struct StorageAccounting {
  double achieved_rho = 0.0;
  double projected_total = 0.0;  // parameters-equivalent for K variants
};

inline StorageAccounting storage_accounting(
    const std::vector<CompressedEntry>& entries, std::int64_t model_params,
    int bits_b, int num_variants) {
  std::uint64_t stored = 0;
  for (const CompressedEntry& e : entries) stored += e.stored_bits;
  StorageAccounting out;
  out.achieved_rho = static_cast<double>(stored) /
                     (static_cast<double>(model_params) * bits_b);
  out.projected_total =
      (1.0 + out.achieved_rho * num_variants) * static_cast<double>(model_params);
  return out;
}

}  // namespace dqrelo
