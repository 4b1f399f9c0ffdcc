#pragma once

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dqrelo/dqrelo.hpp"

// Command-line surface: compress, decompress, stats, diff, retention,
// selftest. Exit codes: 0 success, 1 user error, 2 data corruption,
// 3 numeric failure. All data output goes to stdout as key/value lines
// ("key = value" by default, "key=value" with --format kv); warnings and
// errors go to stderr.

namespace dqrelo::cli {

inline std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string fmt_f4(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

class KvWriter {
 public:
  KvWriter(std::ostream& out, bool kv_mode) : out_(out), kv_mode_(kv_mode) {}
  void emit(const std::string& key, const std::string& value) {
    out_ << key << (kv_mode_ ? "=" : " = ") << value << "\n";
  }
  void emit(const std::string& key, double value) { emit(key, fmt_g(value)); }
  void emit(const std::string& key, std::uint64_t value) {
    emit(key, std::to_string(value));
  }
  void emit(const std::string& key, int value) { emit(key, std::to_string(value)); }

 private:
  std::ostream& out_;
  bool kv_mode_;
};

inline int exit_code_for(const Error& e) {
  if (dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const CorruptTensorError*>(&e) ||
      dynamic_cast<const CorruptEntryError*>(&e) ||
      dynamic_cast<const BaseMismatchError*>(&e)) {
    return 2;
  }
  if (dynamic_cast<const NumericError*>(&e) ||
      dynamic_cast<const RankError*>(&e) ||
      dynamic_cast<const ConvergenceError*>(&e)) {
    return 3;
  }
  return 1;  // config, io, mismatch, degenerate input
}

inline std::pair<double, double> parse_layer_range(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) {
    throw ConfigError("layer range must be LO:HI, got \"" + text + "\"");
  }
  try {
    return {std::stod(text.substr(0, colon)), std::stod(text.substr(colon + 1))};
  } catch (const std::exception&) {
    throw ConfigError("cannot parse layer range \"" + text + "\"");
  }
}

/// key = value config file; include/exclude keys may repeat. CLI flags
/// override whatever the file sets.
inline CompressionConfig parse_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file \"" + path.string() + "\"");
  CompressionConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto strip = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string stripped = strip(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": expected key = value");
    }
    const std::string key = strip(stripped.substr(0, eq));
    const std::string value = strip(stripped.substr(eq + 1));
    if (key == "method") {
      cfg.method = parse_method(value);
    } else if (key == "rho1") {
      cfg.rho1 = Rational::parse(value);
    } else if (key == "bits") {
      cfg.bits_b = std::stoi(value);
    } else if (key == "vector_rho") {
      cfg.vector_rho = Rational::parse(value);
    } else if (key == "layer_range") {
      cfg.layer_range = parse_layer_range(value);
    } else if (key == "include") {
      cfg.include_patterns.push_back(value);
    } else if (key == "exclude") {
      cfg.exclude_patterns.push_back(value);
    } else if (key == "seed") {
      cfg.seed = std::stoull(value);
    } else {
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": unknown key \"" + key + "\"");
    }
  }
  return cfg;
}

inline void write_error_report(KvWriter& kv, const ReconstructionReport& report,
                               const std::map<std::string, std::string>& kinds = {}) {
  kv.emit("global_relative_error", report.global_relative_error);
  for (const auto& [name, te] : report.per_tensor) {
    kv.emit("tensor." + name + ".frobenius_error", te.frobenius_error);
    kv.emit("tensor." + name + ".relative_error", te.relative_error);
    const auto it = kinds.find(name);
    if (it != kinds.end()) kv.emit("tensor." + name + ".kind", it->second);
  }
  if (!report.skipped.empty()) {
    std::string joined;
    for (const auto& s : report.skipped) {
      if (!joined.empty()) joined += ",";
      joined += s;
    }
    kv.emit("skipped", joined);
  }
}

namespace detail {

struct SelftestReporter {
  std::ostream& out;
  bool all_ok = true;
  void check(const std::string& name, bool ok) {
    out << (ok ? "[PASS] " : "[FAIL] ") << name << "\n";
    all_ok = all_ok && ok;
  }
};

/// Built-in invariant checks on synthetic matrices, for field debugging.
inline int run_selftest(std::ostream& out) {
  SelftestReporter t{out};

  t.check("rank formula 4096x4096 rho1=1/16 -> 128",
          rank_for_budget(4096, 4096, Rational(1, 16)) == 128);
  t.check("rank formula 1024x4096 rho1=1/16 -> 52",
          rank_for_budget(1024, 4096, Rational(1, 16)) == 52);
  t.check("rank formula 8x8 rho1=1/16 -> 1",
          rank_for_budget(8, 8, Rational(1, 16)) == 1);

  Matrix example(2, 2);
  example << 1, -2, 3, -4;
  const QuantizedDelta q = sign_quantize(example);
  t.check("sign_quantize alpha = 2.5", q.alpha == 2.5f);
  t.check("sign_quantize signs", q.signs.positive(0, 0) && !q.signs.positive(0, 1) &&
                                     q.signs.positive(1, 0) && !q.signs.positive(1, 1));

  const Matrix gauss = dqrelo::detail::gaussian_matrix(32, 48, 7);
  const QuantizedDelta gq = sign_quantize(gauss);
  const double best = frobenius_norm_sq(residual(gauss, gq));
  bool optimal = true;
  for (int i = 0; i <= 20; ++i) {
    QuantizedDelta probe = gq;
    probe.alpha = gq.alpha * (0.8f + 0.02f * static_cast<float>(i));
    optimal = optimal &&
              frobenius_norm_sq(residual(gauss, probe)) >= best * (1.0 - 1e-7);
  }
  t.check("alpha minimizes the quantization error on a 21-point grid", optimal);

  // Known-spectrum matrix: truncation error must equal the discarded tail.
  const Matrix qu = dqrelo::detail::thin_q(dqrelo::detail::gaussian_matrix(48, 12, 11));
  const Matrix qv = dqrelo::detail::thin_q(dqrelo::detail::gaussian_matrix(32, 12, 13));
  VectorF sigma(12);
  for (int i = 0; i < 12; ++i) sigma[i] = std::pow(2.0f, -static_cast<float>(i) / 2);
  const Matrix known = qu * sigma.asDiagonal() * qv.transpose();
  const Matrix approx = assemble(truncated_svd(known, 5));
  double tail = 0.0;
  for (int i = 5; i < 12; ++i) tail += static_cast<double>(sigma[i]) * sigma[i];
  const double err = frobenius_norm_sq(known - approx);
  t.check("truncation error equals the discarded sigma^2 sum",
          std::abs(err - tail) <= 1e-3 * tail);

  SignMatrix signs(5, 7);
  std::mt19937 gen(99);
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 7; ++j) signs.set(i, j, gen() & 1);
  }
  t.check("pack/unpack signs round-trips",
          unpack_signs(pack_signs(signs), 5, 7) == signs);

  const RetentionResult r = performance_retention(5.45, 88.93, 84.84);
  t.check("retention + drop == 1", r.retention + r.drop == 1.0);

  out << (t.all_ok ? "selftest: OK\n" : "selftest: FAILED\n");
  return t.all_ok ? 0 : 3;
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out,
                   std::ostream& err) {
  CLI::App app{"delta-compress fine-tuned checkpoints against a base model"};
  app.set_version_flag("--version", std::string(kToolName) + " " + kVersionString);
  app.require_subcommand(1);

  std::string format = "text";
  app.add_option("--format", format, "output format: text or kv")
      ->check(CLI::IsMember({"text", "kv"}));

  // compress
  auto* c = app.add_subcommand("compress", "compress a fine-tuned delta");
  std::string c_base, c_ft, c_out, c_method, c_rho1, c_vrho, c_layer, c_config,
      c_report;
  int c_bits = 16;
  int c_variants = 1;
  std::uint64_t c_seed = 0;
  std::vector<std::string> c_include, c_exclude;
  bool c_validate = false;
  c->add_option("--base", c_base, "base checkpoint archive")->required();
  c->add_option("--finetuned", c_ft, "fine-tuned checkpoint archive")->required();
  c->add_option("--out", c_out, "output .dqr container")->required();
  auto* o_method = c->add_option("--method", c_method,
                                 "dqrelo, svd_only, onebit_only, magnitude_prune, "
                                 "random_prune");
  auto* o_rho1 = c->add_option("--rho1", c_rho1, "low-rank budget (p/q or decimal)");
  auto* o_bits = c->add_option("--bits", c_bits, "bits per full-precision weight");
  auto* o_vrho = c->add_option("--vector-rho", c_vrho, "keep ratio for 1-D tensors");
  auto* o_layer = c->add_option("--layer-range", c_layer,
                                "compress only layers with depth fraction in LO:HI");
  auto* o_include = c->add_option("--include", c_include, "glob of tensors to compress");
  auto* o_exclude = c->add_option("--exclude", c_exclude, "glob of tensors to pass through");
  auto* o_seed = c->add_option("--seed", c_seed, "seed for random_prune");
  c->add_option("--config", c_config, "key = value config file (flags override)");
  c->add_option("--report", c_report, "write a reconstruction error report here");
  c->add_option("--num-variants", c_variants, "K for projected storage accounting");
  c->add_flag("--validate", c_validate, "reject NaN values while loading");

  // decompress
  auto* d = app.add_subcommand("decompress", "rebuild a fine-tuned checkpoint");
  std::string d_base, d_delta, d_out, d_ft;
  bool d_force = false;
  bool d_verify = false;
  d->add_option("--base", d_base, "base checkpoint archive")->required();
  d->add_option("--delta", d_delta, ".dqr container")->required();
  d->add_option("--out", d_out, "output checkpoint archive")->required();
  d->add_flag("--force", d_force, "skip the base fingerprint check");
  d->add_flag("--verify", d_verify, "report error against --finetuned");
  d->add_option("--finetuned", d_ft, "reference fine-tuned archive for --verify");

  // stats
  auto* s = app.add_subcommand("stats", "delta diagnostics");
  std::string s_base, s_ft;
  int s_bins = 4096;
  s->add_option("--base", s_base, "base checkpoint archive")->required();
  s->add_option("--finetuned", s_ft, "fine-tuned checkpoint archive")->required();
  s->add_option("--bins", s_bins, "histogram bins for entropy");

  // diff
  auto* f = app.add_subcommand("diff", "compare two archives");
  std::string f_a, f_b;
  f->add_option("--a", f_a, "first archive")->required();
  f->add_option("--b", f_b, "second archive")->required();

  // retention
  auto* r = app.add_subcommand("retention", "performance retention arithmetic");
  double r_base = 0.0, r_sft = 0.0, r_comp = 0.0;
  r->add_option("--base-score", r_base, "base model score")->required();
  r->add_option("--sft-score", r_sft, "fine-tuned model score")->required();
  r->add_option("--compressed-score", r_comp, "compressed model score")->required();

  auto* st = app.add_subcommand("selftest", "run built-in invariant checks");
  (void)st;

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream sink;
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  KvWriter kv(out, format == "kv");
  try {
    if (app.got_subcommand(c)) {
      CompressionConfig cfg;
      if (!c_config.empty()) cfg = parse_config_file(c_config);
      if (o_method->count()) cfg.method = parse_method(c_method);
      if (o_rho1->count()) cfg.rho1 = Rational::parse(c_rho1);
      if (o_bits->count()) cfg.bits_b = c_bits;
      if (o_vrho->count()) cfg.vector_rho = Rational::parse(c_vrho);
      if (o_layer->count()) cfg.layer_range = parse_layer_range(c_layer);
      if (o_include->count()) cfg.include_patterns = c_include;
      if (o_exclude->count()) cfg.exclude_patterns = c_exclude;
      if (o_seed->count()) cfg.seed = c_seed;
      cfg.validate();

      LoadOptions load_options;
      load_options.validate_values = c_validate;
      const TensorArchive base = load_archive(c_base, load_options);
      const TensorArchive ft = load_archive(c_ft, load_options);
      const CompressionResult result = compress_archives(base, ft, cfg);
      write_container(c_out, result.entries, result.meta(cfg));
      for (const std::string& w : result.warnings) err << "warning: " << w << "\n";

      const StorageAccounting acc = storage_accounting(
          result.entries, result.model_params, cfg.bits_b, c_variants);
      kv.emit("method", std::string(method_name(cfg.method)));
      kv.emit("tensors.total", static_cast<std::uint64_t>(result.entries.size()));
      for (const auto& [kind, count] : result.kind_counts) {
        kv.emit("entries." + kind, count);
      }
      kv.emit("target_rho", cfg.total_rho().value());
      kv.emit("achieved_rho", acc.achieved_rho);
      kv.emit("projected_total_params", acc.projected_total);
      std::uint64_t stored = 0;
      for (const auto& e : result.entries) stored += e.stored_bits;
      kv.emit("stored_bits", stored);
      kv.emit("original_bits",
              static_cast<std::uint64_t>(result.model_params) * cfg.bits_b);
      kv.emit("container_bytes",
              static_cast<std::uint64_t>(std::filesystem::file_size(c_out)));
      kv.emit("base_fingerprint", result.base_fingerprint);

      if (!c_report.empty()) {
        const ContainerFile written = read_container(c_out);
        const TensorArchive recon = reconstruct(base, written);
        const ReconstructionReport report = error_report(base, ft, recon);
        std::map<std::string, std::string> kinds;
        for (const auto& e : result.entries) kinds[e.name] = entry_kind_name(e.kind);
        std::ofstream rf(c_report);
        if (!rf) throw IoError("cannot open report file \"" + c_report + "\"");
        KvWriter rkv(rf, format == "kv");
        write_error_report(rkv, report, kinds);
      }
      return 0;
    }

    if (app.got_subcommand(d)) {
      const TensorArchive base = load_archive(d_base);
      const ContainerFile container = read_container(d_delta);
      ReconstructOptions options;
      options.force = d_force;
      const TensorArchive recon = reconstruct(base, container, options);
      save_archive(recon, d_out);
      kv.emit("tensors", static_cast<std::uint64_t>(recon.size()));
      kv.emit("output", d_out);
      if (d_verify) {
        if (d_ft.empty()) {
          throw ConfigError("--verify requires --finetuned");
        }
        const TensorArchive ft = load_archive(d_ft);
        const ReconstructionReport report = error_report(base, ft, recon);
        kv.emit("global_relative_error", report.global_relative_error);
      }
      return 0;
    }

    if (app.got_subcommand(s)) {
      const TensorArchive base = load_archive(s_base);
      const TensorArchive ft = load_archive(s_ft);
      const ExtractResult extracted = extract_deltas(base, ft);
      const DeltaStats stats = compute_stats(extracted.deltas, s_bins);
      kv.emit("tensors", static_cast<std::uint64_t>(extracted.deltas.size()));
      kv.emit("bins", stats.num_bins);
      kv.emit("global.mean_abs", stats.mean_abs);
      kv.emit("global.mean_singular_value", stats.mean_singular_value);
      kv.emit("global.entropy_bits", stats.entropy_bits);
      for (const auto& [name, ts] : stats.per_tensor) {
        kv.emit("tensor." + name + ".mean_abs", ts.mean_abs);
        if (ts.mean_singular_value) {
          kv.emit("tensor." + name + ".mean_singular_value", *ts.mean_singular_value);
        }
        kv.emit("tensor." + name + ".entropy_bits", ts.entropy_bits);
      }
      return 0;
    }

    if (app.got_subcommand(f)) {
      const TensorArchive a = load_archive(f_a);
      const TensorArchive b = load_archive(f_b);
      const ReconstructionReport report = diff_report(a, b);
      write_error_report(kv, report);
      return 0;
    }

    if (app.got_subcommand(r)) {
      const RetentionResult result = performance_retention(r_base, r_sft, r_comp);
      kv.emit("retention", result.retention);
      kv.emit("drop", result.drop);
      kv.emit("drop_percent", fmt_f4(result.drop * 100.0));
      return 0;
    }

    if (app.got_subcommand(st)) {
      return detail::run_selftest(out);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace dqrelo::cli
