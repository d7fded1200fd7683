#include "mpode/dynamics.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>
#include <utility>

namespace mpode {

namespace {

// --- PolyDecayField -------------------------------------------------------

class PolyDecayTape final : public FieldTape {
 public:
  PolyDecayTape(LowArith arith, double t, Eigen::VectorXd y, const Eigen::VectorXd& theta)
      : arith_(arith), y_(std::move(y)), theta_(theta) {
    tq_ = arith_.round(t);
    t2_ = arith_.mul(tq_, tq_);
    lambda_ = arith_.add(arith_.add(arith_.mul(theta_[0], t2_), arith_.mul(theta_[1], tq_)), theta_[2]);
    out_.resize(y_.size());
    for (Eigen::Index i = 0; i < y_.size(); ++i) out_[i] = -arith_.mul(lambda_, y_[i]);
  }

  const Eigen::VectorXd& output() const override { return out_; }

  FieldVjp vjp(const Eigen::VectorXd& a) const override {
    FieldVjp r;
    r.dy.resize(a.size());
    for (Eigen::Index i = 0; i < a.size(); ++i) r.dy[i] = -arith_.mul(lambda_, a[i]);
    const double lambda_bar = -arith_.dot(y_, a);
    const double t2_bar = arith_.mul(lambda_bar, theta_[0]);
    const double t_from_t2 = arith_.mul(t2_bar, tq_);
    r.dt = arith_.add(arith_.mul(lambda_bar, theta_[1]), arith_.add(t_from_t2, t_from_t2));
    r.dtheta.resize(3);
    r.dtheta << arith_.mul(lambda_bar, t2_), arith_.mul(lambda_bar, tq_), lambda_bar;
    return r;
  }

 private:
  LowArith arith_;
  Eigen::VectorXd y_;
  Eigen::Vector3d theta_;
  double tq_ = 0.0;
  double t2_ = 0.0;
  double lambda_ = 0.0;
  Eigen::VectorXd out_;
};

// --- LinearField ----------------------------------------------------------

class LinearTape final : public FieldTape {
 public:
  LinearTape(LowArith arith, Eigen::VectorXd y, const Eigen::VectorXd& theta)
      : arith_(arith), y_(std::move(y)), theta_(theta) {
    const Eigen::Index n = y_.size();
    out_.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      out_[i] = arith_.dot(theta_.segment(i * n, n), y_);
    }
  }

  const Eigen::VectorXd& output() const override { return out_; }

  FieldVjp vjp(const Eigen::VectorXd& a) const override {
    const Eigen::Index n = y_.size();
    FieldVjp r;
    r.dy = Eigen::VectorXd::Zero(n);
    // Column j of A against a, accumulated over rows in order.
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        r.dy[j] = arith_.add(r.dy[j], arith_.mul(theta_[i * n + j], a[i]));
      }
    }
    r.dtheta.resize(n * n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) r.dtheta[i * n + j] = arith_.mul(a[i], y_[j]);
    }
    return r;
  }

 private:
  LowArith arith_;
  Eigen::VectorXd y_;
  Eigen::VectorXd theta_;
  Eigen::VectorXd out_;
};

// --- MlpField -------------------------------------------------------------

class MlpTape final : public FieldTape {
 public:
  MlpTape(const MlpField& field, LowArith arith, double t, const Eigen::VectorXd& y,
          const Eigen::VectorXd& theta)
      : field_(field), arith_(arith), theta_(theta) {
    const Eigen::Index n = y.size();
    Eigen::VectorXd input(n + 1);
    input.head(n) = y;
    input[n] = arith_.round(t);
    acts_.push_back(std::move(input));

    const std::size_t layers = field_.num_layers();
    for (std::size_t l = 0; l < layers; ++l) {
      const Eigen::Index in = field_.layer_input(l);
      const Eigen::Index out = field_.layer_output(l);
      const Eigen::Index w0 = field_.layer_offset(l);
      const Eigen::Index b0 = w0 + out * in;
      const Eigen::VectorXd& u = acts_.back();
      Eigen::VectorXd z(out);
      for (Eigen::Index i = 0; i < out; ++i) {
        z[i] = arith_.add(arith_.dot(theta_.segment(w0 + i * in, in), u), theta_[b0 + i]);
      }
      if (l + 1 < layers) {
        // tanh' = 1 - tanh^2 belongs to the linearization, so vjp only does
        // work that scales with the cotangent.
        Eigen::VectorXd slope(out);
        for (Eigen::Index i = 0; i < out; ++i) {
          z[i] = arith_.tanh(z[i]);
          slope[i] = arith_.sub(1.0, arith_.mul(z[i], z[i]));
        }
        slopes_.push_back(std::move(slope));
      }
      acts_.push_back(std::move(z));
    }
  }

  const Eigen::VectorXd& output() const override { return acts_.back(); }

  FieldVjp vjp(const Eigen::VectorXd& a) const override {
    const std::size_t layers = field_.num_layers();
    FieldVjp r;
    r.dtheta = Eigen::VectorXd::Zero(theta_.size());

    Eigen::VectorXd upstream = a;  // cotangent of acts_[l + 1]
    for (std::size_t l = layers; l-- > 0;) {
      const Eigen::Index in = field_.layer_input(l);
      const Eigen::Index out = field_.layer_output(l);
      const Eigen::Index w0 = field_.layer_offset(l);
      const Eigen::Index b0 = w0 + out * in;
      const Eigen::VectorXd& u_in = acts_[l];

      Eigen::VectorXd z_bar = upstream;
      if (l + 1 < layers) {
        for (Eigen::Index i = 0; i < out; ++i) z_bar[i] = arith_.mul(upstream[i], slopes_[l][i]);
      }
      for (Eigen::Index i = 0; i < out; ++i) {
        r.dtheta[b0 + i] = z_bar[i];
        for (Eigen::Index j = 0; j < in; ++j) {
          r.dtheta[w0 + i * in + j] = arith_.mul(z_bar[i], u_in[j]);
        }
      }
      Eigen::VectorXd u_bar = Eigen::VectorXd::Zero(in);
      for (Eigen::Index i = 0; i < out; ++i) {
        for (Eigen::Index j = 0; j < in; ++j) {
          u_bar[j] = arith_.add(u_bar[j], arith_.mul(theta_[w0 + i * in + j], z_bar[i]));
        }
      }
      upstream = std::move(u_bar);
    }
    const Eigen::Index n = upstream.size() - 1;
    r.dy = upstream.head(n);
    r.dt = upstream[n];
    return r;
  }

 private:
  const MlpField& field_;
  LowArith arith_;
  Eigen::VectorXd theta_;
  std::vector<Eigen::VectorXd> acts_;
  std::vector<Eigen::VectorXd> slopes_;  // per hidden layer
};

}  // namespace

// --- field definitions ----------------------------------------------------

std::unique_ptr<FieldTape> PolyDecayField::linearize(double t, const Eigen::VectorXd& y,
                                                     const Eigen::VectorXd& theta,
                                                     const FloatFormat& fmt) const {
  if (theta.size() != 3) throw std::invalid_argument("PolyDecayField: expected 3 parameters");
  return std::make_unique<PolyDecayTape>(LowArith(fmt), t, y, theta);
}

std::unique_ptr<FieldTape> LinearField::linearize(double /*t*/, const Eigen::VectorXd& y,
                                                  const Eigen::VectorXd& theta,
                                                  const FloatFormat& fmt) const {
  if (theta.size() != dim_ * dim_) throw std::invalid_argument("LinearField: parameter size mismatch");
  return std::make_unique<LinearTape>(LowArith(fmt), y, theta);
}

Eigen::VectorXd LinearField::pack(const Eigen::MatrixXd& a) {
  Eigen::VectorXd theta(a.size());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) theta[i * a.cols() + j] = a(i, j);
  }
  return theta;
}

Eigen::MatrixXd LinearField::unpack(const Eigen::VectorXd& theta) const {
  Eigen::MatrixXd a(dim_, dim_);
  for (Eigen::Index i = 0; i < dim_; ++i) {
    for (Eigen::Index j = 0; j < dim_; ++j) a(i, j) = theta[i * dim_ + j];
  }
  return a;
}

MlpField::MlpField(std::vector<Eigen::Index> widths) : widths_(std::move(widths)) {
  if (widths_.size() < 2) throw std::invalid_argument("MlpField: need at least input and output widths");
  if (widths_.front() != widths_.back()) {
    throw std::invalid_argument("MlpField: output width must equal state width");
  }
  for (Eigen::Index w : widths_) {
    if (w <= 0) throw std::invalid_argument("MlpField: widths must be positive");
  }
  offsets_.push_back(0);
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    param_count_ += layer_output(l) * layer_input(l) + layer_output(l);
    offsets_.push_back(param_count_);
  }
}

Eigen::Index MlpField::layer_input(std::size_t layer) const {
  return layer == 0 ? widths_[0] + 1 : widths_[layer];
}

std::unique_ptr<FieldTape> MlpField::linearize(double t, const Eigen::VectorXd& y,
                                               const Eigen::VectorXd& theta,
                                               const FloatFormat& fmt) const {
  if (theta.size() != param_count_) throw std::invalid_argument("MlpField: parameter size mismatch");
  if (y.size() != dim_state()) throw std::invalid_argument("MlpField: state size mismatch");
  return std::make_unique<MlpTape>(*this, LowArith(fmt), t, y, theta);
}

Params MlpField::init_params(std::uint64_t seed, double gain) const {
  std::mt19937_64 rng(seed);
  Params p{Eigen::VectorXd::Zero(param_count_)};
  for (std::size_t l = 0; l < num_layers(); ++l) {
    const Eigen::Index in = layer_input(l);
    const Eigen::Index out = layer_output(l);
    const double bound = gain / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index k = 0; k < out * in; ++k) p.master[offsets_[l] + k] = dist(rng);
  }
  return p;
}

// --- weight files ---------------------------------------------------------

void save_mlp_weights(const std::filesystem::path& path, const MlpField& field, const Params& theta) {
  if (theta.size() != field.dim_params()) throw std::invalid_argument("save_mlp_weights: size mismatch");
  std::ofstream bin(path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open " + path.string());
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    auto word = std::bit_cast<std::uint64_t>(theta.master[i]);
    unsigned char bytes[8];
    for (int b = 0; b < 8; ++b) bytes[b] = static_cast<unsigned char>((word >> (8 * b)) & 0xFFU);
    bin.write(reinterpret_cast<const char*>(bytes), 8);
  }

  nlohmann::json meta;
  meta["widths"] = field.widths();
  meta["count"] = theta.size();
  meta["encoding"] = "float64-le";
  std::ofstream side(path.string() + ".json");
  if (!side) throw std::runtime_error("cannot open sidecar for " + path.string());
  side << meta.dump(2) << '\n';
}

LoadedMlp load_mlp_weights(const std::filesystem::path& path) {
  std::ifstream side(path.string() + ".json");
  if (!side) throw std::runtime_error("missing sidecar " + path.string() + ".json");
  nlohmann::json meta;
  try {
    side >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("malformed sidecar: ") + e.what());
  }
  if (meta.value("encoding", "") != "float64-le") throw std::runtime_error("unsupported weight encoding");
  MlpField field(meta.at("widths").get<std::vector<Eigen::Index>>());
  const auto count = meta.at("count").get<Eigen::Index>();
  if (count != field.dim_params()) throw std::runtime_error("sidecar count does not match widths");

  std::ifstream bin(path, std::ios::binary);
  if (!bin) throw std::runtime_error("cannot open " + path.string());
  Params theta{Eigen::VectorXd(count)};
  for (Eigen::Index i = 0; i < count; ++i) {
    unsigned char bytes[8];
    if (!bin.read(reinterpret_cast<char*>(bytes), 8)) throw std::runtime_error("weight file truncated");
    std::uint64_t word = 0;
    for (int b = 0; b < 8; ++b) word |= std::uint64_t{bytes[b]} << (8 * b);
    theta.master[i] = std::bit_cast<double>(word);
  }
  if (bin.peek() != std::char_traits<char>::eof()) throw std::runtime_error("weight file has trailing bytes");
  return {std::move(field), std::move(theta)};
}

}  // namespace mpode
