#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <random>

#include "dqrelo/errors.hpp"
#include "dqrelo/types.hpp"

// Numerical kernels: Frobenius norms, truncated SVD, factor assembly.
// The SVD contract is accuracy, not algorithm: the squared truncation error
// must equal the discarded-sigma^2 sum to 1e-4 relative. Matrices with
// min(n, m) <= 512 go through a deterministic full decomposition; larger ones
// use seeded randomized subspace iteration, iterated until the top singular
// values stabilize below 1e-6 relative change (1000-iteration cap).

namespace dqrelo {

struct SvdResult {
  Matrix u;                  // n x k, orthonormal columns
  VectorF singular_values;   // k, non-increasing, >= 0
  Matrix vt;                 // k x m, orthonormal rows
};

struct LowRankFactors {
  Matrix u;        // n x r
  VectorF sigma;   // r
  Matrix vt;       // r x m
  int rank = 0;
};

inline double frobenius_norm_sq(const Matrix& m) {
  if (!m.allFinite()) {
    throw NumericError("frobenius_norm_sq: non-finite entry");
  }
  return m.cast<double>().squaredNorm();
}

inline double frobenius_norm(const Matrix& m) {
  return std::sqrt(frobenius_norm_sq(m));
}

namespace detail {

inline constexpr Index kFullSvdMaxDim = 512;
inline constexpr Index kOversample = 10;
inline constexpr int kMaxPowerIterations = 1000;
inline constexpr double kSigmaConvergenceTol = 1e-6;

/// Thin Q factor of a Householder QR.
inline Matrix thin_q(const Matrix& a) {
  Eigen::HouseholderQR<Matrix> qr(a);
  return qr.householderQ() * Matrix::Identity(a.rows(), a.cols());
}

inline Matrix gaussian_matrix(Index rows, Index cols, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) {
      m(i, j) = static_cast<float>(dist(gen));
    }
  }
  return m;
}

inline SvdResult full_svd(const Matrix& m) {
  Eigen::BDCSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  SvdResult out;
  out.u = svd.matrixU();
  out.singular_values = svd.singularValues();
  out.vt = svd.matrixV().transpose();
  return out;
}

/// Randomized subspace iteration for the top-k range of `a`.
inline SvdResult randomized_svd(const Matrix& a, Index r) {
  const Index n = a.rows();
  const Index m = a.cols();
  const Index minmn = std::min(n, m);
  const Index k = std::min(minmn, r + kOversample);

  // Fixed seed keeps truncated_svd a pure function of its inputs.
  Matrix q = thin_q(a * gaussian_matrix(m, k, 0x06d5a3f9u));

  VectorF prev;
  int iterations = 0;
  bool converged = false;
  while (iterations < kMaxPowerIterations) {
    ++iterations;
    const Matrix qz = thin_q(a.transpose() * q);
    const Matrix y = a * qz;
    Eigen::HouseholderQR<Matrix> qr(y);
    q = qr.householderQ() * Matrix::Identity(n, k);
    const Matrix ry = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
    VectorF sigma = Eigen::BDCSVD<Matrix>(ry).singularValues();
    if (prev.size() == sigma.size()) {
      const double scale =
          std::max(static_cast<double>(sigma[0]), 1e-30);
      const double change =
          (sigma.head(r) - prev.head(r)).cwiseAbs().maxCoeff() / scale;
      if (change < kSigmaConvergenceTol) {
        converged = true;
        break;
      }
    }
    prev = std::move(sigma);
  }
  if (!converged) {
    throw ConvergenceError("randomized SVD: singular values did not stabilize",
                           iterations);
  }

  const Matrix b = q.transpose() * a;  // k x m
  Eigen::BDCSVD<Matrix> svd(b, Eigen::ComputeThinU | Eigen::ComputeThinV);
  SvdResult out;
  out.u = q * svd.matrixU();
  out.singular_values = svd.singularValues();
  out.vt = svd.matrixV().transpose();
  return out;
}

}  // namespace detail

/// All singular values of `m`, descending. Always uses the deterministic
/// full decomposition (needed where the whole spectrum matters, e.g. stats).
inline VectorF singular_values(const Matrix& m) {
  if (!m.allFinite()) throw NumericError("singular_values: non-finite entry");
  return Eigen::BDCSVD<Matrix>(m).singularValues();
}

inline LowRankFactors truncated_svd(const Matrix& m, int r) {
  const Index n = m.rows();
  const Index cols = m.cols();
  const Index minmn = std::min(n, cols);
  if (r < 1 || r > minmn) {
    throw RankError("truncated_svd: rank " + std::to_string(r) +
                    " outside [1, " + std::to_string(minmn) + "]");
  }
  if (!m.allFinite()) throw NumericError("truncated_svd: non-finite entry");

  const SvdResult svd = minmn <= detail::kFullSvdMaxDim
                            ? detail::full_svd(m)
                            : detail::randomized_svd(m, r);
  LowRankFactors out;
  out.rank = r;
  out.u = svd.u.leftCols(r);
  out.sigma = svd.singular_values.head(r);
  out.vt = svd.vt.topRows(r);
  return out;
}

inline Matrix assemble(const LowRankFactors& f) {
  if (f.rank < 1 || f.u.cols() != f.rank || f.vt.rows() != f.rank ||
      f.sigma.size() != f.rank) {
    throw ShapeError("assemble: inconsistent factor shapes");
  }
  return f.u * f.sigma.asDiagonal() * f.vt;
}

}  // namespace dqrelo
