#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "dqrelo/compressor.hpp"
#include "dqrelo/container.hpp"
#include "dqrelo/delta_stats.hpp"
#include "dqrelo/errors.hpp"
#include "dqrelo/linalg.hpp"
#include "dqrelo/tensor_archive.hpp"

// Rebuilds an approximate fine-tuned checkpoint as base + decompressed delta,
// cast back to each tensor's original dtype, and reports per-tensor and
// global reconstruction error.

namespace dqrelo {

struct ReconstructOptions {
  /// Skip the base-archive fingerprint check.
  bool force = false;
};

inline TensorArchive reconstruct(const TensorArchive& base,
                                 const ContainerFile& container,
                                 const ReconstructOptions& options = {}) {
  if (!options.force) {
    const std::string actual = archive_fingerprint(base);
    if (container.meta.base_fingerprint != actual) {
      throw BaseMismatchError(
          "base archive fingerprint " + actual + " does not match container's " +
          container.meta.base_fingerprint + " (pass --force to override)");
    }
  }

  std::map<std::string, const CompressedEntry*> by_name;
  for (const CompressedEntry& e : container.entries) by_name.emplace(e.name, &e);

  TensorArchive out;
  for (const auto& [name, rec] : base.entries()) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) {
      out.add(name, rec);  // absent from the container: copied unchanged
      continue;
    }
    const CompressedEntry& entry = *it->second;
    if (entry.absolute) {
      throw ShapeError("tensor \"" + name +
                       "\" is marked absolute but exists in the base archive");
    }
    if (entry.shape != rec.shape) {
      throw ShapeError("tensor \"" + name + "\": container shape disagrees with base");
    }
    const FloatTensor delta = decompress_entry(entry);
    FloatTensor result = as_matrix(rec);
    result.values += delta.values;
    out.add(name, to_record(result.values, rec.shape, rec.dtype));
    by_name.erase(it);
  }
  // Tensors with no base counterpart were stored verbatim; emit them as-is.
  for (const CompressedEntry& e : container.entries) {
    if (!by_name.count(e.name)) continue;
    if (!e.absolute) {
      throw ShapeError("tensor \"" + e.name +
                       "\" holds a delta but the base archive has no such tensor");
    }
    TensorRecord rec;
    rec.shape = e.shape;
    rec.dtype = e.original_dtype;
    rec.data = e.raw;
    out.add(e.name, std::move(rec));
  }
  return out;
}

struct TensorError {
  double frobenius_error = 0.0;
  double relative_error = 0.0;
  std::string kind;
};

struct ReconstructionReport {
  std::map<std::string, TensorError> per_tensor;
  double global_relative_error = 0.0;
  std::vector<std::string> skipped;
};

inline constexpr double kRelativeErrorFloor = 1e-12;

/// Per-tensor Frobenius error of the reconstruction against the fine-tuned
/// archive, relative to each tensor's delta norm; global error is the
/// energy-weighted aggregate sqrt(sum err^2 / sum ||delta||^2).
inline ReconstructionReport error_report(const TensorArchive& base,
                                         const TensorArchive& finetuned,
                                         const TensorArchive& reconstructed,
                                         bool strict = true) {
  ReconstructionReport report;
  std::vector<std::string> mismatched;
  double err_sq_sum = 0.0;
  double delta_sq_sum = 0.0;

  for (const auto& [name, ft_rec] : finetuned.entries()) {
    if (!base.contains(name) || !reconstructed.contains(name) ||
        base.at(name).shape != ft_rec.shape ||
        reconstructed.at(name).shape != ft_rec.shape) {
      mismatched.push_back(name);
      continue;
    }
    const Matrix ft = as_matrix(ft_rec).values;
    const Matrix delta = ft - as_matrix(base.at(name)).values;
    const Matrix err = as_matrix(reconstructed.at(name)).values - ft;
    TensorError te;
    te.frobenius_error = frobenius_norm(err);
    const double delta_norm = frobenius_norm(delta);
    te.relative_error =
        te.frobenius_error / std::max(delta_norm, kRelativeErrorFloor);
    report.per_tensor.emplace(name, te);
    err_sq_sum += te.frobenius_error * te.frobenius_error;
    delta_sq_sum += delta_norm * delta_norm;
  }
  for (const auto& [name, rec] : base.entries()) {
    if (!finetuned.contains(name)) mismatched.push_back(name);
  }
  for (const auto& [name, rec] : reconstructed.entries()) {
    if (!finetuned.contains(name)) mismatched.push_back(name);
  }

  if (strict && !mismatched.empty()) {
    std::string msg = "archives do not align:";
    for (const auto& m : mismatched) msg += " " + m + ";";
    throw ArchitectureMismatchError(msg);
  }
  report.skipped = std::move(mismatched);
  report.global_relative_error =
      std::sqrt(err_sq_sum / std::max(delta_sq_sum, kRelativeErrorFloor));
  return report;
}

/// Pairwise archive difference: per-tensor ||a - b||_F relative to ||a||_F.
inline ReconstructionReport diff_report(const TensorArchive& a,
                                        const TensorArchive& b) {
  ReconstructionReport report;
  std::vector<std::string> mismatched;
  double err_sq_sum = 0.0;
  double ref_sq_sum = 0.0;
  for (const auto& [name, a_rec] : a.entries()) {
    if (!b.contains(name) || b.at(name).shape != a_rec.shape) {
      mismatched.push_back(name);
      continue;
    }
    const Matrix av = as_matrix(a_rec).values;
    const Matrix diff = as_matrix(b.at(name)).values - av;
    TensorError te;
    te.frobenius_error = frobenius_norm(diff);
    const double ref = frobenius_norm(av);
    te.relative_error = te.frobenius_error / std::max(ref, kRelativeErrorFloor);
    report.per_tensor.emplace(name, te);
    err_sq_sum += te.frobenius_error * te.frobenius_error;
    ref_sq_sum += ref * ref;
  }
  for (const auto& [name, rec] : b.entries()) {
    if (!a.contains(name)) mismatched.push_back(name);
  }
  report.skipped = std::move(mismatched);
  report.global_relative_error =
      std::sqrt(err_sq_sum / std::max(ref_sq_sum, kRelativeErrorFloor));
  return report;
}

}  // namespace dqrelo
