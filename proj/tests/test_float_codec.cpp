#include <Eigen/Core>
#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <cstring>
#include <random>

#include "dqrelo/float_codec.hpp"

using namespace dqrelo;

namespace {

std::uint16_t eigen_half_bits(float f) {
  const Eigen::half h(f);
  std::uint16_t b;
  std::memcpy(&b, &h, 2);
  return b;
}

std::uint16_t eigen_bf16_bits(float f) {
  const Eigen::bfloat16 h(f);
  std::uint16_t b;
  std::memcpy(&b, &h, 2);
  return b;
}

float bits_to_float(std::uint32_t bits) {
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace

TEST_CASE("half decode/encode round-trips every bit pattern") {
  for (std::uint32_t b = 0; b <= 0xffff; ++b) {
    const auto bits = static_cast<std::uint16_t>(b);
    const float f = half_bits_to_float(bits);
    if (std::isnan(f)) {
      CHECK(std::isnan(half_bits_to_float(float_to_half_bits(f))));
    } else {
      CHECK(float_to_half_bits(f) == bits);
    }
  }
}

TEST_CASE("half decode matches the Eigen reference on every pattern") {
  for (std::uint32_t b = 0; b <= 0xffff; ++b) {
    const auto bits = static_cast<std::uint16_t>(b);
    Eigen::half h;
    std::memcpy(&h, &bits, 2);
    const float ours = half_bits_to_float(bits);
    const float ref = static_cast<float>(h);
    if (std::isnan(ref)) {
      CHECK(std::isnan(ours));
    } else {
      CHECK(ours == ref);
    }
  }
}

TEST_CASE("float32 -> half rounding matches the Eigen reference") {
  std::mt19937_64 gen(42);
  std::uniform_int_distribution<std::uint32_t> dist;
  int checked = 0;
  for (int i = 0; i < 2000000; ++i) {
    const float f = bits_to_float(dist(gen));
    if (std::isnan(f)) continue;
    CHECK(float_to_half_bits(f) == eigen_half_bits(f));
    ++checked;
  }
  REQUIRE(checked > 1000000);

  // boundary cases around the subnormal range, overflow, and exact ties
  const float cases[] = {0.0f,
                         -0.0f,
                         65504.0f,
                         65520.0f,  // ties to inf
                         65519.996f,
                         std::ldexp(1.0f, -14),
                         std::ldexp(1.0f, -24),
                         std::ldexp(1.0f, -25),  // tie, rounds to even (zero)
                         std::ldexp(1.0f, -25) * 1.0001f,
                         std::ldexp(1.0f, -26),
                         1.0f + std::ldexp(1.0f, -11),  // tie at the mantissa edge
                         1.0f + std::ldexp(3.0f, -11),
                         std::numeric_limits<float>::infinity(),
                         -std::numeric_limits<float>::infinity()};
  for (const float f : cases) {
    CHECK(float_to_half_bits(f) == eigen_half_bits(f));
  }
}

TEST_CASE("float32 -> bfloat16 rounding matches the Eigen reference") {
  std::mt19937_64 gen(7);
  std::uniform_int_distribution<std::uint32_t> dist;
  for (int i = 0; i < 2000000; ++i) {
    const float f = bits_to_float(dist(gen));
    if (std::isnan(f)) {
      CHECK(std::isnan(bfloat16_bits_to_float(float_to_bfloat16_bits(f))));
      continue;
    }
    CHECK(float_to_bfloat16_bits(f) == eigen_bf16_bits(f));
  }
  for (std::uint32_t b = 0; b <= 0xffff; ++b) {
    const auto bits = static_cast<std::uint16_t>(b);
    const float f = bfloat16_bits_to_float(bits);
    if (!std::isnan(f)) CHECK(float_to_bfloat16_bits(f) == bits);
  }
}

TEST_CASE("buffer encode/decode round-trips values representable in each dtype") {
  std::mt19937_64 gen(3);
  std::normal_distribution<float> dist(0.0f, 2.0f);
  std::vector<float> values(257);
  for (auto& v : values) v = dist(gen);

  for (const Dtype d : {Dtype::kF16, Dtype::kBF16, Dtype::kF32}) {
    // snap to the target grid first so the round trip is exact
    std::vector<float> snapped(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      snapped[i] = decode_scalar(
          encode_from_f32(&values[i], 1, d).data(), d);
    }
    const auto bytes = encode_from_f32(snapped.data(), snapped.size(), d);
    REQUIRE(bytes.size() == snapped.size() * (dtype_bits(d) / 8));
    const auto decoded = decode_to_f32(bytes.data(), snapped.size(), d);
    for (std::size_t i = 0; i < snapped.size(); ++i) {
      CHECK(decoded[i] == snapped[i]);
    }
  }
}

TEST_CASE("dtype names parse and print") {
  CHECK(parse_dtype("F16") == Dtype::kF16);
  CHECK(parse_dtype("BF16") == Dtype::kBF16);
  CHECK(parse_dtype("F32") == Dtype::kF32);
  CHECK_THROWS_AS(parse_dtype("I8"), UnsupportedDtypeError);
  CHECK(std::string(dtype_name(Dtype::kBF16)) == "BF16");
  CHECK(dtype_bits(Dtype::kF32) == 32);
}
