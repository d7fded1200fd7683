#include "mpode/precision.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

using namespace mpode;

namespace {
const double kInf = std::numeric_limits<double>::infinity();
}

TEST_CASE("format constants") {
  CHECK(kFloat16.unit_roundoff() == 0x1p-11);
  CHECK(kBFloat16.unit_roundoff() == 0x1p-8);
  CHECK(kFloat32.unit_roundoff() == 0x1p-24);
  CHECK(kFloat16.max_finite() == 65504.0);
  CHECK(kFloat16.min_normal() == 0x1p-14);
  CHECK(kFloat16.min_subnormal() == 0x1p-24);
  CHECK(kBFloat16.max_finite() == std::ldexp(255.0, 120));
  CHECK(kFloat32.max_finite() == static_cast<double>(std::numeric_limits<float>::max()));
  CHECK(format_by_name("bfloat16") == kBFloat16);
  CHECK_THROWS(format_by_name("float8"));
}

TEST_CASE("quantize examples") {
  CHECK(quantize(1.0, kFloat16) == 1.0);
  CHECK(quantize(65504.0 * (1 + 1e-9), kFloat16) == 65504.0);
  CHECK(quantize(65519.99, kFloat16) == 65504.0);
  CHECK(quantize(65520.0, kFloat16) == kInf);
  CHECK(quantize(-65520.0, kFloat16) == -kInf);
  CHECK(quantize(1.0 + 0x1p-11, kFloat16) == 1.0);
  CHECK(quantize(1.0 + 3 * 0x1p-11, kFloat16) == 1.0 + 0x1p-9);
  CHECK(quantize(0x1p-25, kFloat16) == 0.0);
  CHECK(quantize(3 * 0x1p-25, kFloat16) == 0x1p-23);
  CHECK(std::signbit(quantize(-0x1p-26, kFloat16)));
  CHECK(std::isnan(quantize(std::nan(""), kBFloat16)));
  CHECK(quantize(kInf, kFloat16) == kInf);
  // float64 is the identity
  CHECK(quantize(0.1, kFloat64) == 0.1);
  CHECK(quantize(1.0 / 3.0, kFloat32) == static_cast<double>(1.0f / 3.0f));
}

TEST_CASE("low ops examples") {
  const LowArith h(kFloat16);
  CHECK(h.add(1.0, 0x1p-12) == 1.0);
  CHECK(h.mul(2.0, 3.0) == 6.0);
  CHECK(h.add(65504.0, 65504.0) == kInf);
  CHECK(h.div(1.0, 3.0) == oracle::round_to_format(1.0 / 3.0, 5, 10));
  CHECK(h.abs(-2.0) == 2.0);
  CHECK(h.max(-1.0, 0.5) == 0.5);
  CHECK(h.tanh(0.5) == oracle::round_to_format(std::tanh(0.5), 5, 10));
  CHECK(h.exp(1.0) == oracle::round_to_format(std::exp(1.0), 5, 10));
  // dot rounds every product and partial sum: 1 + 2^-12 + 2^-12 stays 1
  const Eigen::Vector3d a(1.0, 0x1p-12, 0x1p-12);
  const Eigen::Vector3d ones = Eigen::Vector3d::Ones();
  CHECK(h.dot(a, ones) == 1.0);
  // axpy: product and sum rounded separately
  const Eigen::VectorXd y = Eigen::VectorXd::Constant(1, 1.0);
  const Eigen::VectorXd x = Eigen::VectorXd::Constant(1, 1.0 / 3.0);
  const double prod = oracle::round_to_format(0.1 * oracle::round_to_format(1.0 / 3.0, 5, 10), 5, 10);
  CHECK(h.axpy(0.1, quantize(x, kFloat16), y)[0] == oracle::round_to_format(1.0 + prod, 5, 10));
}

TEST_CASE("exhaustive float16 decode and idempotence") {
  for (std::uint32_t bits = 0; bits < 65536; ++bits) {
    const double v = decode_bits(bits, kFloat16);
    const double ref = oracle::decode(bits, 5, 10);
    if (std::isnan(ref)) {
      REQUIRE(std::isnan(v));
      continue;
    }
    REQUIRE(v == ref);
    REQUIRE(quantize(v, kFloat16) == v);
    REQUIRE(std::signbit(quantize(v, kFloat16)) == std::signbit(v));
    REQUIRE(encode_bits(v, kFloat16) == bits);
  }
}

TEST_CASE("random values match the integer significand oracle") {
  std::mt19937_64 rng(2024);
  for (const auto* fmt : {&kFloat16, &kBFloat16, &kFloat32}) {
    const int lo = fmt->min_exponent() - fmt->mantissa_bits - 3;
    const int hi = fmt->max_exponent() + 2;
    std::uniform_int_distribution<int> ex(lo, hi);
    std::uniform_real_distribution<double> mant(1.0, 2.0);
    for (int k = 0; k < 20000; ++k) {
      const double x = (k & 1 ? -1.0 : 1.0) * std::ldexp(mant(rng), ex(rng));
      const double ref = oracle::round_to_format(x, fmt->exponent_bits, fmt->mantissa_bits);
      REQUIRE(quantize(x, *fmt) == ref);
    }
  }
}

TEST_CASE("monotone, bounded relative error, power-of-two invariant") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> mant(1.0, 2.0);
  std::uniform_int_distribution<int> ex(-10, 10);
  for (const auto* fmt : {&kFloat16, &kBFloat16}) {
    for (int k = 0; k < 5000; ++k) {
      const double x = std::ldexp(mant(rng), ex(rng));
      const double y = x * (1.0 + 1e-6);
      CHECK(quantize(x, *fmt) <= quantize(y, *fmt));
      CHECK(std::abs(quantize(x, *fmt) - x) <= fmt->unit_roundoff() * std::abs(x));
      const double s = 0x1p3;
      CHECK(quantize(s * x, *fmt) == s * quantize(x, *fmt));
    }
  }
}

TEST_CASE("range events") {
  RangeEventScope outer;
  {
    RangeEventScope inner;
    (void)quantize(1e6, kFloat16);
    (void)quantize(1e-6, kFloat16);
    (void)quantize(1.0, kFloat16);
    CHECK(inner.overflows() == 1);
    CHECK(inner.underflows() == 1);
    CHECK_FALSE(inner.clean());
  }
  CHECK(outer.clean());  // only the innermost scope records
  (void)quantize(kInf, kFloat16);  // already infinite: not an event
  (void)quantize(0.0, kFloat16);
  CHECK(outer.clean());
  (void)quantize(-1e6, kFloat16);
  CHECK(outer.overflows() == 1);
}
