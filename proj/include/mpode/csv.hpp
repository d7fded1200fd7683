#ifndef MPODE_CSV_HPP
#define MPODE_CSV_HPP

#include <cmath>
#include <cstdio>
#include <string>

namespace mpode {

/// 17 significant digits, "inf"/"-inf"/"nan" for non-finite values.
inline std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace mpode

#endif  // MPODE_CSV_HPP
