#pragma once

// Test-only reference implementations and generators. The Jacobi SVD and the
// minimal archive reader here deliberately share no code with the library
// paths they check.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "dqrelo/types.hpp"

namespace oracles {

/// Singular values by one-sided (Hestenes) Jacobi in double precision,
/// descending. Independent of the library's Eigen-based SVD path.
inline std::vector<double> jacobi_singular_values(const dqrelo::Matrix& input) {
  Eigen::MatrixXd a = input.cast<double>();
  if (a.rows() < a.cols()) a = a.transpose().eval();
  const int n = static_cast<int>(a.cols());
  bool changed = true;
  int sweeps = 0;
  while (changed && sweeps < 80) {
    changed = false;
    ++sweeps;
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double app = a.col(p).squaredNorm();
        const double aqq = a.col(q).squaredNorm();
        const double apq = a.col(p).dot(a.col(q));
        if (std::abs(apq) <= 1e-14 * std::sqrt(app * aqq)) continue;
        changed = true;
        const double tau = (aqq - app) / (2.0 * apq);
        const double t =
            (tau >= 0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        const Eigen::VectorXd tmp = a.col(p);
        a.col(p) = c * tmp - s * a.col(q);
        a.col(q) = s * tmp + c * a.col(q);
      }
    }
  }
  std::vector<double> sv(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) sv[static_cast<std::size_t>(i)] = a.col(i).norm();
  std::sort(sv.begin(), sv.end(), std::greater<double>());
  return sv;
}

inline double tail_sum_sq(const std::vector<double>& sigma, int r) {
  double s = 0.0;
  for (std::size_t i = static_cast<std::size_t>(r); i < sigma.size(); ++i) {
    s += sigma[i] * sigma[i];
  }
  return s;
}

// -- generators ---------------------------------------------------------------

inline dqrelo::Matrix gaussian(std::int64_t rows, std::int64_t cols,
                               std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> dist(0.0, scale);
  dqrelo::Matrix m(rows, cols);
  for (dqrelo::Index i = 0; i < rows; ++i) {
    for (dqrelo::Index j = 0; j < cols; ++j) {
      m(i, j) = static_cast<float>(dist(gen));
    }
  }
  return m;
}

/// Student-t with 2 degrees of freedom: heavy tails, finite values.
inline dqrelo::Matrix heavy_tailed(std::int64_t rows, std::int64_t cols,
                                   std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 gen(seed);
  std::student_t_distribution<double> dist(2.0);
  dqrelo::Matrix m(rows, cols);
  for (dqrelo::Index i = 0; i < rows; ++i) {
    for (dqrelo::Index j = 0; j < cols; ++j) {
      m(i, j) = static_cast<float>(scale * dist(gen));
    }
  }
  return m;
}

inline dqrelo::Matrix orthonormal_columns(std::int64_t rows, std::int64_t cols,
                                          std::uint64_t seed) {
  const dqrelo::Matrix g = gaussian(rows, cols, seed);
  Eigen::HouseholderQR<dqrelo::Matrix> qr(g);
  return qr.householderQ() * dqrelo::Matrix::Identity(rows, cols);
}

/// Matrix with an exactly known singular spectrum (given descending).
inline dqrelo::Matrix with_spectrum(std::int64_t rows, std::int64_t cols,
                                    const std::vector<float>& sigma,
                                    std::uint64_t seed) {
  const auto k = static_cast<std::int64_t>(sigma.size());
  const dqrelo::Matrix u = orthonormal_columns(rows, k, seed);
  const dqrelo::Matrix v = orthonormal_columns(cols, k, seed + 1);
  dqrelo::VectorF s(k);
  for (std::int64_t i = 0; i < k; ++i) s[i] = sigma[static_cast<std::size_t>(i)];
  return u * s.asDiagonal() * v.transpose();
}

// -- filesystem helpers -------------------------------------------------------

inline std::filesystem::path temp_dir() {
  static int counter = 0;
  const auto dir = std::filesystem::temp_directory_path() /
                   ("dqrelo_test_" + std::to_string(::getpid()) + "_" +
                    std::to_string(counter++));
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& p,
                       const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

// -- independent archive reader -----------------------------------------------

struct RawTensor {
  std::string dtype;
  std::vector<std::int64_t> shape;
  std::vector<std::uint8_t> bytes;
};

/// Minimal safetensors-layout reader sharing no code with the library.
inline std::map<std::string, RawTensor> independent_read_archive(
    const std::filesystem::path& path) {
  const std::vector<std::uint8_t> file = read_file(path);
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, file.data(), 8);
  const auto header = nlohmann::json::parse(
      file.begin() + 8, file.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  std::map<std::string, RawTensor> out;
  for (const auto& [name, meta] : header.items()) {
    if (name == "__metadata__") continue;
    RawTensor t;
    t.dtype = meta.at("dtype").get<std::string>();
    t.shape = meta.at("shape").get<std::vector<std::int64_t>>();
    const std::uint64_t begin = meta.at("data_offsets")[0].get<std::uint64_t>();
    const std::uint64_t end = meta.at("data_offsets")[1].get<std::uint64_t>();
    const std::uint64_t payload_start = 8 + header_len;
    t.bytes.assign(file.begin() + static_cast<std::ptrdiff_t>(payload_start + begin),
                   file.begin() + static_cast<std::ptrdiff_t>(payload_start + end));
    out.emplace(name, std::move(t));
  }
  return out;
}

}  // namespace oracles
