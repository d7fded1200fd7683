// Velocity fields f(t, y, theta) evaluated under an emulated precision.

#ifndef MPODE_DYNAMICS_HPP
#define MPODE_DYNAMICS_HPP

#include "mpode/precision.hpp"

#include <Eigen/Dense>

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

namespace mpode {

/// Parameters with a high-precision master copy. The low-precision view is
/// produced on demand.
struct Params {
  Eigen::VectorXd master;

  [[nodiscard]] Eigen::Index size() const { return master.size(); }
  [[nodiscard]] Eigen::VectorXd quantized(const FloatFormat& fmt) const { return quantize(master, fmt); }
};

/// Reverse-mode products a^T df/dy, a^T df/dt, a^T df/dtheta.
struct FieldVjp {
  Eigen::VectorXd dy;
  double dt = 0.0;
  Eigen::VectorXd dtheta;
};

/// One recorded evaluation of a field. Holds whatever intermediate values the
/// reverse sweep needs, so vjp() can be called repeatedly with different
/// cotangents without re-evaluating the field.
class FieldTape {
 public:
  virtual ~FieldTape() = default;
  [[nodiscard]] virtual const Eigen::VectorXd& output() const = 0;
  [[nodiscard]] virtual FieldVjp vjp(const Eigen::VectorXd& cotangent) const = 0;
};

class VelocityField {
 public:
  virtual ~VelocityField() = default;

  [[nodiscard]] virtual Eigen::Index dim_state() const = 0;
  [[nodiscard]] virtual Eigen::Index dim_params() const = 0;

  /// Evaluates f with every primitive rounded in fmt and records the tape.
  /// y and theta must be representable in fmt. t is quantized to fmt where it
  /// multiplies low-precision values.
  [[nodiscard]] virtual std::unique_ptr<FieldTape> linearize(double t, const Eigen::VectorXd& y,
                                                             const Eigen::VectorXd& theta,
                                                             const FloatFormat& fmt) const = 0;

  [[nodiscard]] Eigen::VectorXd eval(double t, const Eigen::VectorXd& y, const Eigen::VectorXd& theta,
                                     const FloatFormat& fmt) const {
    return linearize(t, y, theta, fmt)->output();
  }

  [[nodiscard]] FieldVjp vjp(double t, const Eigen::VectorXd& y, const Eigen::VectorXd& theta,
                             const Eigen::VectorXd& cotangent, const FloatFormat& fmt) const {
    return linearize(t, y, theta, fmt)->vjp(cotangent);
  }
};

/// f(t, y, theta) = -(theta1 t^2 + theta2 t + theta3) y, applied to every
/// component of y.
class PolyDecayField final : public VelocityField {
 public:
  explicit PolyDecayField(Eigen::Index dim = 1) : dim_(dim) {}

  [[nodiscard]] Eigen::Index dim_state() const override { return dim_; }
  [[nodiscard]] Eigen::Index dim_params() const override { return 3; }
  [[nodiscard]] std::unique_ptr<FieldTape> linearize(double t, const Eigen::VectorXd& y,
                                                     const Eigen::VectorXd& theta,
                                                     const FloatFormat& fmt) const override;

 private:
  Eigen::Index dim_;
};

/// f(t, y, theta) = A y where theta holds A in row-major order.
class LinearField final : public VelocityField {
 public:
  explicit LinearField(Eigen::Index dim) : dim_(dim) {}

  [[nodiscard]] Eigen::Index dim_state() const override { return dim_; }
  [[nodiscard]] Eigen::Index dim_params() const override { return dim_ * dim_; }
  [[nodiscard]] std::unique_ptr<FieldTape> linearize(double t, const Eigen::VectorXd& y,
                                                     const Eigen::VectorXd& theta,
                                                     const FloatFormat& fmt) const override;

  [[nodiscard]] static Eigen::VectorXd pack(const Eigen::MatrixXd& a);
  [[nodiscard]] Eigen::MatrixXd unpack(const Eigen::VectorXd& theta) const;

 private:
  Eigen::Index dim_;
};

/// Time-augmented tanh MLP. widths = {n, hidden..., n}; the first layer sees
/// [y; t] so its input width is n + 1. Hidden layers use tanh, the output
/// layer is affine.
///
/// Parameter packing, layer by layer: W (out x in, row-major) followed by b.
class MlpField final : public VelocityField {
 public:
  explicit MlpField(std::vector<Eigen::Index> widths);

  [[nodiscard]] Eigen::Index dim_state() const override { return widths_.front(); }
  [[nodiscard]] Eigen::Index dim_params() const override { return param_count_; }
  [[nodiscard]] std::unique_ptr<FieldTape> linearize(double t, const Eigen::VectorXd& y,
                                                     const Eigen::VectorXd& theta,
                                                     const FloatFormat& fmt) const override;

  [[nodiscard]] const std::vector<Eigen::Index>& widths() const { return widths_; }
  [[nodiscard]] std::size_t num_layers() const { return widths_.size() - 1; }
  [[nodiscard]] Eigen::Index layer_input(std::size_t layer) const;
  [[nodiscard]] Eigen::Index layer_output(std::size_t layer) const { return widths_[layer + 1]; }
  /// Offset of layer l's weight block in the packed vector. The bias block
  /// follows immediately after out*in weights.
  [[nodiscard]] Eigen::Index layer_offset(std::size_t layer) const { return offsets_[layer]; }
  [[nodiscard]] Eigen::Index layer_size(std::size_t layer) const {
    return offsets_[layer + 1] - offsets_[layer];
  }

  /// Uniform(-g/sqrt(in), g/sqrt(in)) weights, zero biases, deterministic in
  /// seed.
  [[nodiscard]] Params init_params(std::uint64_t seed, double gain = 1.0) const;

 private:
  std::vector<Eigen::Index> widths_;
  std::vector<Eigen::Index> offsets_;
  Eigen::Index param_count_ = 0;
};

/// Forwards to another field and counts linearize() calls (one call is one
/// field evaluation).
class CountingField final : public VelocityField {
 public:
  explicit CountingField(const VelocityField& inner) : inner_(inner) {}

  [[nodiscard]] Eigen::Index dim_state() const override { return inner_.dim_state(); }
  [[nodiscard]] Eigen::Index dim_params() const override { return inner_.dim_params(); }
  [[nodiscard]] std::unique_ptr<FieldTape> linearize(double t, const Eigen::VectorXd& y,
                                                     const Eigen::VectorXd& theta,
                                                     const FloatFormat& fmt) const override {
    evaluations_.fetch_add(1, std::memory_order_relaxed);
    return inner_.linearize(t, y, theta, fmt);
  }

  [[nodiscard]] std::uint64_t evaluations() const { return evaluations_.load(); }
  void reset() { evaluations_.store(0); }

 private:
  const VelocityField& inner_;
  mutable std::atomic<std::uint64_t> evaluations_{0};
};

/// Writes theta as little-endian IEEE binary64 values to `path` and a JSON
/// sidecar `path` + ".json" holding {"widths": [...], "count": p,
/// "encoding": "float64-le"}.
void save_mlp_weights(const std::filesystem::path& path, const MlpField& field, const Params& theta);

struct LoadedMlp {
  MlpField field;
  Params theta;
};

/// Inverse of save_mlp_weights. Throws std::runtime_error on a malformed or
/// inconsistent pair of files.
[[nodiscard]] LoadedMlp load_mlp_weights(const std::filesystem::path& path);

}  // namespace mpode

#endif  // MPODE_DYNAMICS_HPP
