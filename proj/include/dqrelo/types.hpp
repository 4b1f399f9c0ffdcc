#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <numeric>
#include <string>

#include "dqrelo/errors.hpp"

namespace dqrelo {

// Row-major so float32 working views share the layout of checkpoint buffers.
using Matrix =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorF = Eigen::VectorXf;

using Index = Eigen::Index;

enum class ShapeClass { kMatrix, kVector, kReshapedMatrix };

inline const char* shape_class_name(ShapeClass c) {
  switch (c) {
    case ShapeClass::kMatrix: return "matrix";
    case ShapeClass::kVector: return "vector";
    case ShapeClass::kReshapedMatrix: return "reshaped-matrix";
  }
  return "?";
}

inline ShapeClass parse_shape_class(const std::string& s) {
  if (s == "matrix") return ShapeClass::kMatrix;
  if (s == "vector") return ShapeClass::kVector;
  if (s == "reshaped-matrix") return ShapeClass::kReshapedMatrix;
  throw FormatError("unknown shape class \"" + s + "\"");
}

/// Exact ratio, so budgets like 1/16 never pick up binary-decimal drift.
struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  Rational() = default;
  Rational(std::int64_t n, std::int64_t d) : num(n), den(d) {
    if (den == 0) throw ConfigError("rational with zero denominator");
    if (den < 0) {
      num = -num;
      den = -den;
    }
    reduce();
  }

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }

  Rational operator+(const Rational& o) const {
    return Rational(num * o.den + o.num * den, den * o.den);
  }

  bool operator==(const Rational& o) const { return num == o.num && den == o.den; }

  /// ceil(x * num / den) in exact integer arithmetic, x >= 0.
  std::int64_t ceil_mul(std::int64_t x) const {
    const __int128 p = static_cast<__int128>(x) * num;
    const __int128 q = den;
    if (p <= 0) return 0;
    return static_cast<std::int64_t>((p + q - 1) / q);
  }

  std::string str() const {
    if (den == 1) return std::to_string(num);
    return std::to_string(num) + "/" + std::to_string(den);
  }

  /// Accepts "p/q", integers, and plain decimals ("0.0625" -> 625/10000).
  static Rational parse(const std::string& text) {
    if (text.empty()) throw ConfigError("empty fraction");
    const auto slash = text.find('/');
    try {
      if (slash != std::string::npos) {
        const std::int64_t p = std::stoll(text.substr(0, slash));
        const std::int64_t q = std::stoll(text.substr(slash + 1));
        return Rational(p, q);
      }
      const auto dot = text.find('.');
      if (dot == std::string::npos) {
        return Rational(std::stoll(text), 1);
      }
      const std::string whole = text.substr(0, dot);
      const std::string frac = text.substr(dot + 1);
      if (frac.size() > 15) throw ConfigError("too many decimal digits: " + text);
      std::int64_t den = 1;
      for (std::size_t i = 0; i < frac.size(); ++i) den *= 10;
      const std::int64_t w = whole.empty() || whole == "-" ? 0 : std::stoll(whole);
      std::int64_t f = frac.empty() ? 0 : std::stoll(frac);
      const bool negative = !whole.empty() && whole[0] == '-';
      if (negative) f = -f;
      return Rational(w * den + f, den);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError("cannot parse fraction \"" + text + "\"");
    }
  }

 private:
  void reduce() {
    const std::int64_t g = std::gcd(num < 0 ? -num : num, den);
    if (g > 1) {
      num /= g;
      den /= g;
    }
  }
};

}  // namespace dqrelo
