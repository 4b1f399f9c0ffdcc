#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dqrelo/errors.hpp"
#include "dqrelo/linalg.hpp"
#include "dqrelo/tensor_archive.hpp"

// Delta extraction (fine-tuned minus base) and the diagnostics over deltas:
// pooled mean |delta|, mean singular value across 2-D deltas, and per-tensor
// histogram entropy. Also the retention/drop arithmetic used to score
// compressed checkpoints against base and fine-tuned evaluations.

namespace dqrelo {

struct DeltaTensor {
  std::string name;
  FloatTensor values;     // float32 working view, fine-tuned minus base
  Dtype original_dtype = Dtype::kF16;
};

struct ExtractOptions {
  /// Strict mode insists on identical name sets and shapes. Relaxed mode
  /// skips mismatches and records one warning per skipped tensor.
  bool strict = true;
};

struct ExtractResult {
  std::vector<DeltaTensor> deltas;
  std::vector<std::string> warnings;
};

inline ExtractResult extract_deltas(const TensorArchive& base,
                                    const TensorArchive& finetuned,
                                    const ExtractOptions& options = {}) {
  std::vector<std::string> mismatches;
  for (const auto& [name, rec] : base.entries()) {
    if (!finetuned.contains(name)) {
      mismatches.push_back(name + " (missing from fine-tuned)");
    } else if (finetuned.at(name).shape != rec.shape) {
      mismatches.push_back(name + " (shape differs)");
    }
  }
  for (const auto& [name, rec] : finetuned.entries()) {
    if (!base.contains(name)) mismatches.push_back(name + " (missing from base)");
  }
  if (options.strict && !mismatches.empty()) {
    std::string msg = "archives do not align:";
    for (const auto& m : mismatches) msg += " " + m + ";";
    throw ArchitectureMismatchError(msg);
  }

  ExtractResult out;
  out.warnings = std::move(mismatches);
  for (const auto& [name, rec] : base.entries()) {
    if (!finetuned.contains(name)) continue;
    const TensorRecord& ft = finetuned.at(name);
    if (ft.shape != rec.shape) continue;
    DeltaTensor delta;
    delta.name = name;
    delta.original_dtype = rec.dtype;
    delta.values = as_matrix(ft);
    const FloatTensor base_view = as_matrix(rec);
    delta.values.values -= base_view.values;
    out.deltas.push_back(std::move(delta));
  }
  return out;
}

struct TensorStats {
  double mean_abs = 0.0;
  std::optional<double> mean_singular_value;  // 2-D deltas only
  double entropy_bits = 0.0;
};

struct DeltaStats {
  double mean_abs = 0.0;             // pooled over every scalar element
  double mean_singular_value = 0.0;  // averaged across 2-D deltas
  double entropy_bits = 0.0;         // averaged across tensors
  int num_bins = 0;
  std::map<std::string, TensorStats> per_tensor;
};

namespace detail {

/// Shannon entropy in bits of an equal-width histogram over [min, max].
/// The bounds travel with the data, so rescaling a tensor leaves its
/// entropy unchanged.
inline double histogram_entropy_bits(const Matrix& values, int num_bins) {
  const float lo = values.minCoeff();
  const float hi = values.maxCoeff();
  if (!(lo < hi)) return 0.0;  // constant tensor: one occupied bin
  std::vector<std::int64_t> counts(static_cast<std::size_t>(num_bins), 0);
  const double width = (static_cast<double>(hi) - lo) / num_bins;
  const float* data = values.data();
  const Index total = values.size();
  for (Index i = 0; i < total; ++i) {
    auto bin = static_cast<std::int64_t>((static_cast<double>(data[i]) - lo) / width);
    bin = std::clamp<std::int64_t>(bin, 0, num_bins - 1);
    ++counts[static_cast<std::size_t>(bin)];
  }
  double h = 0.0;
  for (const std::int64_t c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log2(p);
  }
  return h;
}

}  // namespace detail

inline DeltaStats compute_stats(const std::vector<DeltaTensor>& deltas,
                                int num_bins = 4096) {
  if (deltas.empty()) throw EmptyInputError("compute_stats: no deltas");
  if (num_bins < 1) throw ConfigError("compute_stats: num_bins must be >= 1");

  DeltaStats stats;
  stats.num_bins = num_bins;
  double abs_sum = 0.0;
  std::int64_t element_count = 0;
  double sv_mean_sum = 0.0;
  int matrix_count = 0;
  double entropy_sum = 0.0;

  for (const DeltaTensor& d : deltas) {
    if (!d.values.values.allFinite()) {
      throw NumericError("compute_stats: tensor \"" + d.name +
                         "\" has non-finite values");
    }
    TensorStats ts;
    const Matrix& m = d.values.values;
    ts.mean_abs = m.cast<double>().cwiseAbs().sum() / m.size();
    abs_sum += m.cast<double>().cwiseAbs().sum();
    element_count += m.size();
    if (!d.values.is_vector()) {
      const VectorF sv = singular_values(m);
      ts.mean_singular_value = sv.cast<double>().sum() / sv.size();
      sv_mean_sum += *ts.mean_singular_value;
      ++matrix_count;
    }
    ts.entropy_bits = detail::histogram_entropy_bits(m, num_bins);
    entropy_sum += ts.entropy_bits;
    stats.per_tensor.emplace(d.name, ts);
  }

  stats.mean_abs = abs_sum / static_cast<double>(element_count);
  stats.mean_singular_value =
      matrix_count > 0 ? sv_mean_sum / matrix_count : 0.0;
  stats.entropy_bits = entropy_sum / static_cast<double>(deltas.size());
  return stats;
}

struct RetentionResult {
  double retention = 0.0;
  double drop = 0.0;
};

inline RetentionResult performance_retention(double base_score,
                                             double sft_score,
                                             double compressed_score) {
  if (sft_score == base_score) {
    throw DegenerateBaselineError(
        "performance_retention: fine-tuned score equals base score");
  }
  RetentionResult out;
  out.retention = (compressed_score - base_score) / (sft_score - base_score);
  out.drop = 1.0 - out.retention;
  return out;
}

}  // namespace dqrelo
