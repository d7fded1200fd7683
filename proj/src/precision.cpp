#include "mpode/precision.hpp"

#include <bit>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mpode {

namespace {

thread_local RangeEventScope* g_range_scope = nullptr;

constexpr std::uint64_t kSignMask = 0x8000'0000'0000'0000ULL;
constexpr std::uint64_t kExpMask = 0x7FF0'0000'0000'0000ULL;
constexpr int kCarrierFraction = 52;
constexpr int kCarrierBias = 1023;

double canonical_nan() { return std::numeric_limits<double>::quiet_NaN(); }

}  // namespace

double FloatFormat::unit_roundoff() const { return std::ldexp(1.0, -(mantissa_bits + 1)); }

double FloatFormat::max_finite() const {
  if (is_carrier()) return std::numeric_limits<double>::max();
  // (2 - 2^-m) * 2^emax
  return std::ldexp(2.0 - std::ldexp(1.0, -mantissa_bits), max_exponent());
}

double FloatFormat::min_normal() const { return std::ldexp(1.0, min_exponent()); }

double FloatFormat::min_subnormal() const {
  return std::ldexp(1.0, min_exponent() - mantissa_bits);
}

const FloatFormat& format_by_name(std::string_view name) {
  if (name == kFloat16.name || name == "fp16" || name == "half") return kFloat16;
  if (name == kBFloat16.name || name == "bf16") return kBFloat16;
  if (name == kFloat32.name || name == "fp32" || name == "single") return kFloat32;
  if (name == kFloat64.name || name == "fp64" || name == "double") return kFloat64;
  throw std::invalid_argument("unknown floating-point format: " + std::string(name));
}

std::string to_string(const FloatFormat& fmt) { return std::string(fmt.name); }

double quantize(double x, const FloatFormat& fmt) noexcept {
  if (fmt.is_carrier()) return std::isnan(x) ? canonical_nan() : x;

  const auto bits = std::bit_cast<std::uint64_t>(x);
  const std::uint64_t sign = bits & kSignMask;
  const std::uint64_t mag = bits & ~kSignMask;

  if (mag >= kExpMask) return mag == kExpMask ? x : canonical_nan();
  if (mag == 0) return x;

  const int exponent = static_cast<int>(mag >> kCarrierFraction) - kCarrierBias;
  double result;

  if (exponent >= fmt.min_exponent()) {
    // Normal in the target: clear the low fraction bits with ties-to-even.
    // A carry out of the fraction bumps the exponent, which is exactly right.
    const int shift = kCarrierFraction - fmt.mantissa_bits;
    const std::uint64_t half = std::uint64_t{1} << (shift - 1);
    const std::uint64_t lsb = (mag >> shift) & 1U;
    std::uint64_t rounded = mag + (half - 1) + lsb;
    rounded &= ~((std::uint64_t{1} << shift) - 1);
    const int rounded_exponent = static_cast<int>(rounded >> kCarrierFraction) - kCarrierBias;
    if (rounded_exponent > fmt.max_exponent()) {
      if (g_range_scope != nullptr) g_range_scope->note_overflow();
      return sign != 0 ? -std::numeric_limits<double>::infinity()
                       : std::numeric_limits<double>::infinity();
    }
    result = std::bit_cast<double>(rounded | sign);
  } else {
    // Subnormal range of the target: fixed quantum 2^(emin - m).
    // Scaling by a power of two is exact here, nearbyint rounds ties-to-even.
    const int quantum_exp = fmt.min_exponent() - fmt.mantissa_bits;
    const double steps = std::nearbyint(std::ldexp(std::fabs(x), -quantum_exp));
    result = std::copysign(std::ldexp(steps, quantum_exp), x);
    if (g_range_scope != nullptr && std::fabs(result) < fmt.min_normal()) {
      g_range_scope->note_underflow();
    }
  }
  return result;
}

bool is_representable(const Eigen::Ref<const Eigen::VectorXd>& x, const FloatFormat& fmt) {
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x[i];
    if (std::isnan(v)) continue;
    if (quantize(v, fmt) != v) return false;
  }
  return true;
}

bool all_finite(const Eigen::Ref<const Eigen::VectorXd>& x) {
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) return false;
  }
  return true;
}

double decode_bits(std::uint64_t bits, const FloatFormat& fmt) {
  if (fmt.width() >= 64) throw std::invalid_argument("decode_bits: carrier-width format");
  const int m = fmt.mantissa_bits;
  const std::uint64_t exp_all = (std::uint64_t{1} << fmt.exponent_bits) - 1;
  const bool negative = ((bits >> (fmt.width() - 1)) & 1U) != 0;
  const std::uint64_t biased = (bits >> m) & exp_all;
  const std::uint64_t fraction = bits & ((std::uint64_t{1} << m) - 1);

  double magnitude;
  if (biased == exp_all) {
    if (fraction != 0) return canonical_nan();
    magnitude = std::numeric_limits<double>::infinity();
  } else if (biased == 0) {
    magnitude = std::ldexp(static_cast<double>(fraction), fmt.min_exponent() - m);
  } else {
    const auto significand = static_cast<double>((std::uint64_t{1} << m) | fraction);
    magnitude = std::ldexp(significand, static_cast<int>(biased) - fmt.bias() - m);
  }
  return negative ? -magnitude : magnitude;
}

std::uint64_t encode_bits(double x, const FloatFormat& fmt) {
  if (fmt.width() >= 64) throw std::invalid_argument("encode_bits: carrier-width format");
  const int m = fmt.mantissa_bits;
  const std::uint64_t exp_all = (std::uint64_t{1} << fmt.exponent_bits) - 1;
  if (std::isnan(x)) return (exp_all << m) | (std::uint64_t{1} << (m - 1));
  if (quantize(x, fmt) != x) throw std::invalid_argument("encode_bits: value not representable");

  const std::uint64_t sign = std::signbit(x) ? std::uint64_t{1} << (fmt.width() - 1) : 0;
  const double a = std::fabs(x);
  if (std::isinf(a)) return sign | (exp_all << m);
  if (a < fmt.min_normal()) {
    const auto steps = static_cast<std::uint64_t>(std::ldexp(a, m - fmt.min_exponent()));
    return sign | steps;
  }
  int e2 = 0;
  const double frac = std::frexp(a, &e2);  // a = frac * 2^e2, frac in [0.5, 1)
  const int exponent = e2 - 1;
  const auto significand = static_cast<std::uint64_t>(std::ldexp(frac, m + 1));
  const auto biased = static_cast<std::uint64_t>(exponent + fmt.bias());
  return sign | (biased << m) | (significand & ((std::uint64_t{1} << m) - 1));
}

RangeEventScope::RangeEventScope() : previous_(g_range_scope) { g_range_scope = this; }

RangeEventScope::~RangeEventScope() { g_range_scope = previous_; }

double LowArith::tanh(double a) const { return round(std::tanh(a)); }

double LowArith::exp(double a) const { return round(std::exp(a)); }

double LowArith::max(double a, double b) const {
  if (std::isnan(a) || std::isnan(b)) return canonical_nan();
  return a < b ? b : a;
}

double LowArith::dot(std::span<const double> a, std::span<const double> b) const {
  double acc = 0.0;
  const std::size_t n = a.size() < b.size() ? a.size() : b.size();
  for (std::size_t i = 0; i < n; ++i) acc = add(acc, mul(a[i], b[i]));
  return acc;
}

double LowArith::dot(const Eigen::Ref<const Eigen::VectorXd>& a,
                     const Eigen::Ref<const Eigen::VectorXd>& b) const {
  return dot(std::span<const double>(a.data(), static_cast<std::size_t>(a.size())),
             std::span<const double>(b.data(), static_cast<std::size_t>(b.size())));
}

Eigen::VectorXd LowArith::add(const Eigen::Ref<const Eigen::VectorXd>& a,
                              const Eigen::Ref<const Eigen::VectorXd>& b) const {
  Eigen::VectorXd out(a.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) out[i] = add(a[i], b[i]);
  return out;
}

Eigen::VectorXd LowArith::sub(const Eigen::Ref<const Eigen::VectorXd>& a,
                              const Eigen::Ref<const Eigen::VectorXd>& b) const {
  Eigen::VectorXd out(a.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) out[i] = sub(a[i], b[i]);
  return out;
}

Eigen::VectorXd LowArith::scale(double s, const Eigen::Ref<const Eigen::VectorXd>& x) const {
  Eigen::VectorXd out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) out[i] = mul(s, x[i]);
  return out;
}

Eigen::VectorXd LowArith::axpy(double s, const Eigen::Ref<const Eigen::VectorXd>& x,
                               const Eigen::Ref<const Eigen::VectorXd>& y) const {
  Eigen::VectorXd out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) out[i] = add(y[i], mul(s, x[i]));
  return out;
}

}  // namespace mpode
