// Software emulation of low-precision IEEE-style binary formats.
//
// Emulated values live in a double carrier constrained to the values that are
// representable in the target format. Every emulated primitive computes its
// result in the carrier and then rounds once (round-to-nearest, ties-to-even).
// For +, -, *, / the double carrier has at least 2p+2 significand bits for
// every supported format below float64, so the double-then-format rounding is
// the correctly rounded result.

#ifndef MPODE_PRECISION_HPP
#define MPODE_PRECISION_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace mpode {

/// Bit-level description of a binary floating-point format.
struct FloatFormat {
  std::string_view name;
  int exponent_bits = 0;
  int mantissa_bits = 0;  // stored fraction bits, implicit leading bit excluded

  [[nodiscard]] constexpr int bias() const { return (1 << (exponent_bits - 1)) - 1; }
  [[nodiscard]] constexpr int min_exponent() const { return 1 - bias(); }
  [[nodiscard]] constexpr int max_exponent() const { return bias(); }
  [[nodiscard]] constexpr bool is_carrier() const { return mantissa_bits >= 52; }

  /// 2^-(mantissa_bits+1)
  [[nodiscard]] double unit_roundoff() const;
  [[nodiscard]] double max_finite() const;
  [[nodiscard]] double min_normal() const;
  [[nodiscard]] double min_subnormal() const;
  /// Total storage width in bits (1 sign + exponent + mantissa).
  [[nodiscard]] constexpr int width() const { return 1 + exponent_bits + mantissa_bits; }

  friend constexpr bool operator==(const FloatFormat& a, const FloatFormat& b) {
    return a.exponent_bits == b.exponent_bits && a.mantissa_bits == b.mantissa_bits;
  }
};

inline constexpr FloatFormat kFloat16{"float16", 5, 10};
inline constexpr FloatFormat kBFloat16{"bfloat16", 8, 7};
inline constexpr FloatFormat kFloat32{"float32", 8, 23};
inline constexpr FloatFormat kFloat64{"float64", 11, 52};

/// Looks up one of the four built-in formats by name. Throws
/// std::invalid_argument for unknown names.
const FloatFormat& format_by_name(std::string_view name);

/// Rounds x to the nearest value representable in fmt (ties-to-even).
/// Magnitudes at or above the overflow midpoint become +-inf, NaN becomes the
/// canonical quiet NaN and the sign of zero is kept.
[[nodiscard]] double quantize(double x, const FloatFormat& fmt) noexcept;

/// Element-wise quantize.
template <typename Derived>
[[nodiscard]] Eigen::VectorXd quantize(const Eigen::MatrixBase<Derived>& x, const FloatFormat& fmt) {
  Eigen::VectorXd out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) out[i] = quantize(x.derived().coeff(i), fmt);
  return out;
}

/// True when every element of x is exactly representable in fmt.
[[nodiscard]] bool is_representable(const Eigen::Ref<const Eigen::VectorXd>& x, const FloatFormat& fmt);

/// Interprets the low width() bits of `bits` as an encoding in fmt.
/// fmt must be narrower than 64 bits.
[[nodiscard]] double decode_bits(std::uint64_t bits, const FloatFormat& fmt);

/// Encoding of a value representable in fmt (inverse of decode_bits for
/// everything but NaN payloads, which encode as the canonical quiet NaN).
[[nodiscard]] std::uint64_t encode_bits(double x, const FloatFormat& fmt);

[[nodiscard]] bool all_finite(const Eigen::Ref<const Eigen::VectorXd>& x);

/// Counts range events (overflow to inf from a finite input, and results that
/// fall below the smallest normal magnitude from a nonzero input) produced by
/// quantize() on the current thread while an instance is alive. Scopes nest;
/// only the innermost one records.
class RangeEventScope {
 public:
  RangeEventScope();
  ~RangeEventScope();
  RangeEventScope(const RangeEventScope&) = delete;
  RangeEventScope& operator=(const RangeEventScope&) = delete;

  [[nodiscard]] std::uint64_t overflows() const { return overflows_; }
  [[nodiscard]] std::uint64_t underflows() const { return underflows_; }
  [[nodiscard]] bool clean() const { return overflows_ == 0 && underflows_ == 0; }

  void note_overflow() { ++overflows_; }
  void note_underflow() { ++underflows_; }

 private:
  RangeEventScope* previous_;
  std::uint64_t overflows_ = 0;
  std::uint64_t underflows_ = 0;
};

/// Correctly rounded primitives of one emulated format.
///
/// Reductions round after every product and every partial sum, left to right.
class LowArith {
 public:
  explicit constexpr LowArith(const FloatFormat& fmt) : fmt_(fmt) {}

  [[nodiscard]] const FloatFormat& format() const { return fmt_; }

  [[nodiscard]] double round(double x) const { return quantize(x, fmt_); }
  [[nodiscard]] double add(double a, double b) const { return round(a + b); }
  [[nodiscard]] double sub(double a, double b) const { return round(a - b); }
  [[nodiscard]] double mul(double a, double b) const { return round(a * b); }
  [[nodiscard]] double div(double a, double b) const { return round(a / b); }
  [[nodiscard]] double tanh(double a) const;
  [[nodiscard]] double exp(double a) const;
  [[nodiscard]] double abs(double a) const { return a < 0 ? -a : (a == 0 ? 0.0 : a); }
  [[nodiscard]] double max(double a, double b) const;

  /// sum_i a_i*b_i, rounding every product and partial sum.
  [[nodiscard]] double dot(std::span<const double> a, std::span<const double> b) const;
  [[nodiscard]] double dot(const Eigen::Ref<const Eigen::VectorXd>& a,
                           const Eigen::Ref<const Eigen::VectorXd>& b) const;

  // Element-wise vector forms.
  [[nodiscard]] Eigen::VectorXd add(const Eigen::Ref<const Eigen::VectorXd>& a,
                                    const Eigen::Ref<const Eigen::VectorXd>& b) const;
  [[nodiscard]] Eigen::VectorXd sub(const Eigen::Ref<const Eigen::VectorXd>& a,
                                    const Eigen::Ref<const Eigen::VectorXd>& b) const;
  /// s*x for scalar s.
  [[nodiscard]] Eigen::VectorXd scale(double s, const Eigen::Ref<const Eigen::VectorXd>& x) const;
  /// y + s*x with the product and the sum rounded separately.
  [[nodiscard]] Eigen::VectorXd axpy(double s, const Eigen::Ref<const Eigen::VectorXd>& x,
                                     const Eigen::Ref<const Eigen::VectorXd>& y) const;

 private:
  FloatFormat fmt_;
};

std::string to_string(const FloatFormat& fmt);

}  // namespace mpode

#endif  // MPODE_PRECISION_HPP
