#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "dqrelo/errors.hpp"

// Scalar conversions between float32 and the two 16-bit storage formats
// (IEEE binary16 and bfloat16). All float32 -> 16-bit conversions use
// round-to-nearest-even; the 16 -> 32 direction is exact.

namespace dqrelo {

static_assert(std::endian::native == std::endian::little,
              "dqrelo file formats assume a little-endian host");

enum class Dtype { kF16, kBF16, kF32 };

inline int dtype_bits(Dtype d) { return d == Dtype::kF32 ? 32 : 16; }

inline const char* dtype_name(Dtype d) {
  switch (d) {
    case Dtype::kF16: return "F16";
    case Dtype::kBF16: return "BF16";
    case Dtype::kF32: return "F32";
  }
  return "?";
}

inline Dtype parse_dtype(const std::string& s) {
  if (s == "F16") return Dtype::kF16;
  if (s == "BF16") return Dtype::kBF16;
  if (s == "F32") return Dtype::kF32;
  throw UnsupportedDtypeError("unsupported dtype \"" + s +
                              "\" (supported: F16, BF16, F32)");
}

inline std::uint16_t float_to_half_bits(float value) {
  std::uint32_t bits;
  std::memcpy(&bits, &value, sizeof bits);
  const std::uint16_t sign = static_cast<std::uint16_t>((bits >> 16) & 0x8000u);
  const std::uint32_t abs = bits & 0x7fffffffu;

  if (abs >= 0x7f800000u) {  // inf / nan
    if (abs > 0x7f800000u) return sign | 0x7e00u;  // canonical quiet nan
    return sign | 0x7c00u;
  }
  if (abs >= 0x38800000u) {  // normal half range, exponent >= -14
    const std::uint32_t rounded = abs + 0x00000fffu + ((abs >> 13) & 1u);
    if (rounded >= 0x47800000u) return sign | 0x7c00u;  // overflow to inf
    return sign | static_cast<std::uint16_t>((rounded - 0x38000000u) >> 13);
  }
  if (abs >= 0x33000000u) {  // subnormal half range, |x| >= 2^-25
    const std::uint32_t shift = 126u - (abs >> 23);  // 14..24
    const std::uint32_t mant = (abs & 0x007fffffu) | 0x00800000u;
    std::uint32_t q = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1u);
    const std::uint32_t half = 1u << (shift - 1u);
    if (rem > half || (rem == half && (q & 1u))) ++q;
    // a carry out of q lands in the exponent field, which is exactly the
    // subnormal -> smallest-normal transition
    return sign | static_cast<std::uint16_t>(q);
  }
  return sign;  // underflow to signed zero
}

inline float half_bits_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  const std::uint32_t em = h & 0x7fffu;
  std::uint32_t out;
  if (em == 0) {
    out = sign;
  } else if (em >= 0x7c00u) {  // inf / nan
    out = sign | 0x7f800000u | ((em & 0x3ffu) << 13);
  } else if (em >= 0x0400u) {  // normal
    out = sign | (((em >> 10) + 112u) << 23) | ((em & 0x3ffu) << 13);
  } else {  // subnormal: value = em * 2^-24, normalize the leading bit
    std::uint32_t p = 9;
    while (!(em & (1u << p))) --p;
    out = sign | ((p + 103u) << 23) | ((em << (23u - p)) & 0x007fffffu);
  }
  float f;
  std::memcpy(&f, &out, sizeof f);
  return f;
}

inline std::uint16_t float_to_bfloat16_bits(float value) {
  std::uint32_t bits;
  std::memcpy(&bits, &value, sizeof bits);
  if ((bits & 0x7fffffffu) > 0x7f800000u) {  // nan: keep it quiet
    return static_cast<std::uint16_t>((bits >> 16) | 0x0040u);
  }
  const std::uint32_t lsb = (bits >> 16) & 1u;
  bits += 0x7fffu + lsb;
  return static_cast<std::uint16_t>(bits >> 16);
}

inline float bfloat16_bits_to_float(std::uint16_t b) {
  const std::uint32_t bits = static_cast<std::uint32_t>(b) << 16;
  float f;
  std::memcpy(&f, &bits, sizeof f);
  return f;
}

inline float decode_scalar(const std::uint8_t* p, Dtype d) {
  switch (d) {
    case Dtype::kF32: {
      float f;
      std::memcpy(&f, p, 4);
      return f;
    }
    case Dtype::kF16: {
      std::uint16_t b;
      std::memcpy(&b, p, 2);
      return half_bits_to_float(b);
    }
    case Dtype::kBF16: {
      std::uint16_t b;
      std::memcpy(&b, p, 2);
      return bfloat16_bits_to_float(b);
    }
  }
  return 0.0f;
}

/// Decode a raw little-endian buffer into float32 values.
inline std::vector<float> decode_to_f32(const std::uint8_t* data,
                                        std::size_t count, Dtype d) {
  std::vector<float> out(count);
  const std::size_t step = static_cast<std::size_t>(dtype_bits(d)) / 8;
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = decode_scalar(data + i * step, d);
  }
  return out;
}

/// Encode float32 values into the raw little-endian representation of `d`.
inline std::vector<std::uint8_t> encode_from_f32(const float* values,
                                                 std::size_t count, Dtype d) {
  const std::size_t step = static_cast<std::size_t>(dtype_bits(d)) / 8;
  std::vector<std::uint8_t> out(count * step);
  for (std::size_t i = 0; i < count; ++i) {
    switch (d) {
      case Dtype::kF32:
        std::memcpy(out.data() + i * 4, &values[i], 4);
        break;
      case Dtype::kF16: {
        const std::uint16_t b = float_to_half_bits(values[i]);
        std::memcpy(out.data() + i * 2, &b, 2);
        break;
      }
      case Dtype::kBF16: {
        const std::uint16_t b = float_to_bfloat16_bits(values[i]);
        std::memcpy(out.data() + i * 2, &b, 2);
        break;
      }
    }
  }
  return out;
}

}  // namespace dqrelo
