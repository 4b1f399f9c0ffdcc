#pragma once

#include <atomic>
#include <cstdlib>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "dqrelo/compressor.hpp"
#include "dqrelo/container.hpp"
#include "dqrelo/errors.hpp"
#include "dqrelo/tensor_archive.hpp"

// Whole-archive compression: target selection, per-tensor compression (run
// concurrently up to the DQRELO_THREADS cap, merged back in archive order),
// passthrough handling, and the container metadata that goes with the result.

namespace dqrelo {

inline int thread_cap() {
  if (const char* env = std::getenv("DQRELO_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(std::min(hw, 8u));
}

namespace detail {

template <typename Fn>
void parallel_indexed(std::size_t count, int threads, Fn&& fn) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  const int n = std::min<std::size_t>(static_cast<std::size_t>(threads), count);
  pool.reserve(static_cast<std::size_t>(n));
  for (int t = 0; t < n; ++t) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace detail

struct CompressionResult {
  std::vector<CompressedEntry> entries;  // base-archive order, then ft-only
  std::map<std::string, int> kind_counts;
  std::vector<std::string> warnings;
  std::string base_fingerprint;
  std::int64_t model_params = 0;  // total elements of the base archive
  int source_precision_bits = 16;

  ContainerMeta meta(const CompressionConfig& cfg) const {
    ContainerMeta m;
    m.method = method_name(cfg.method);
    m.config_echo = config_to_json(cfg);
    m.base_fingerprint = base_fingerprint;
    m.source_precision_bits = source_precision_bits;
    return m;
  }
};

inline CompressionResult compress_archives(const TensorArchive& base,
                                           const TensorArchive& finetuned,
                                           const CompressionConfig& cfg) {
  cfg.validate();

  CompressionResult result;
  result.base_fingerprint = archive_fingerprint(base);
  result.model_params = base.total_params();
  result.source_precision_bits = base.source_precision_bits();

  std::vector<std::string> shared;
  for (const auto& [name, rec] : base.entries()) {
    if (!finetuned.contains(name)) {
      result.warnings.push_back("tensor \"" + name +
                                "\" missing from fine-tuned archive; the "
                                "reconstruction will keep the base values");
      continue;
    }
    if (finetuned.at(name).shape != rec.shape) {
      throw ArchitectureMismatchError("tensor \"" + name +
                                      "\": base and fine-tuned shapes differ");
    }
    shared.push_back(name);
  }

  const int num_layers = infer_num_layers(shared);
  const TargetPartition targets =
      select_targets(shared, cfg, parse_layer_index, num_layers);
  std::unordered_set<std::string> passthrough(targets.passthrough.begin(),
                                              targets.passthrough.end());

  std::vector<CompressedEntry> entries(shared.size());
  std::vector<std::vector<std::string>> task_warnings(shared.size());
  detail::parallel_indexed(shared.size(), thread_cap(), [&](std::size_t i) {
    const std::string& name = shared[i];
    const TensorRecord& base_rec = base.at(name);
    FloatTensor delta = as_matrix(finetuned.at(name));
    delta.values -= as_matrix(base_rec).values;

    CompressedEntry entry;
    if (passthrough.count(name)) {
      entry = passthrough_delta(delta.values);
    } else if (delta.is_vector()) {
      entry = compress_vector(delta.vec(), cfg);
    } else {
      entry = compress_matrix(delta.values, cfg, &task_warnings[i]);
    }
    entry.name = name;
    entry.shape = base_rec.shape;
    entry.original_dtype = base_rec.dtype;
    entries[i] = std::move(entry);
  });
  for (auto& w : task_warnings) {
    result.warnings.insert(result.warnings.end(), w.begin(), w.end());
  }
  result.entries = std::move(entries);

  // Fine-tuned tensors with no base counterpart are stored verbatim.
  for (const auto& [name, rec] : finetuned.entries()) {
    if (base.contains(name)) continue;
    CompressedEntry entry = passthrough_absolute(rec);
    entry.name = name;
    entry.shape = rec.shape;
    entry.original_dtype = rec.dtype;
    result.warnings.push_back("tensor \"" + name +
                              "\" has no base counterpart; stored verbatim");
    result.entries.push_back(std::move(entry));
  }

  for (const CompressedEntry& e : result.entries) {
    ++result.kind_counts[entry_kind_name(e.kind)];
  }
  return result;
}

}  // namespace dqrelo
