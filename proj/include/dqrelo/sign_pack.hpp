#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dqrelo/errors.hpp"
#include "dqrelo/types.hpp"

// Packed sign matrices: one bit per element, row-major, 8 signs per byte with
// the most significant bit first, final byte zero-padded. Bit 1 means +1,
// bit 0 means -1. The in-memory layout below is byte-identical to the
// serialized form, so pack/unpack are exact by construction.

namespace dqrelo {

class SignMatrix {
 public:
  SignMatrix() = default;
  SignMatrix(std::int64_t rows, std::int64_t cols)
      : rows_(rows), cols_(cols), bytes_(packed_size(rows, cols), 0) {}

  static std::size_t packed_size(std::int64_t rows, std::int64_t cols) {
    return static_cast<std::size_t>((rows * cols + 7) / 8);
  }

  static SignMatrix from_packed(std::vector<std::uint8_t> bytes,
                                std::int64_t rows, std::int64_t cols) {
    if (bytes.size() != packed_size(rows, cols)) {
      throw CorruptEntryError(
          "sign matrix: expected " + std::to_string(packed_size(rows, cols)) +
          " packed bytes for " + std::to_string(rows) + "x" +
          std::to_string(cols) + ", got " + std::to_string(bytes.size()));
    }
    SignMatrix s;
    s.rows_ = rows;
    s.cols_ = cols;
    s.bytes_ = std::move(bytes);
    return s;
  }

  std::int64_t rows() const { return rows_; }
  std::int64_t cols() const { return cols_; }
  std::int64_t size() const { return rows_ * cols_; }

  bool positive(std::int64_t i, std::int64_t j) const {
    const std::int64_t idx = i * cols_ + j;
    return (bytes_[static_cast<std::size_t>(idx >> 3)] >> (7 - (idx & 7))) & 1;
  }

  void set(std::int64_t i, std::int64_t j, bool positive) {
    const std::int64_t idx = i * cols_ + j;
    const std::uint8_t mask =
        static_cast<std::uint8_t>(1u << (7 - (idx & 7)));
    if (positive) {
      bytes_[static_cast<std::size_t>(idx >> 3)] |= mask;
    } else {
      bytes_[static_cast<std::size_t>(idx >> 3)] &= static_cast<std::uint8_t>(~mask);
    }
  }

  float sign_value(std::int64_t i, std::int64_t j) const {
    return positive(i, j) ? 1.0f : -1.0f;
  }

  /// Dense float32 matrix of +-1.
  Matrix dense() const {
    Matrix m(rows_, cols_);
    for (std::int64_t i = 0; i < rows_; ++i) {
      for (std::int64_t j = 0; j < cols_; ++j) {
        m(i, j) = sign_value(i, j);
      }
    }
    return m;
  }

  const std::vector<std::uint8_t>& packed() const { return bytes_; }

  bool operator==(const SignMatrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && bytes_ == o.bytes_;
  }

 private:
  std::int64_t rows_ = 0;
  std::int64_t cols_ = 0;
  std::vector<std::uint8_t> bytes_;
};

inline std::vector<std::uint8_t> pack_signs(const SignMatrix& signs) {
  return signs.packed();
}

inline SignMatrix unpack_signs(std::vector<std::uint8_t> bytes,
                               std::int64_t rows, std::int64_t cols) {
  return SignMatrix::from_packed(std::move(bytes), rows, cols);
}

}  // namespace dqrelo
