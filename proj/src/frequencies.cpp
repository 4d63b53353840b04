#include "pcfs/frequencies.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "pcfs/errors.hpp"
#include "pcfs/rng.hpp"

namespace pcfs {

FrequencyVector make_loglinear(int d, double theta) {
  if (d < 1) throw InvalidArgument("frequency count must be >= 1");
  if (!(theta > 0.0)) {
    throw InvalidArgument("log-linear base must be positive, got " +
                          std::to_string(theta));
  }
  FrequencyVector out;
  out.spec = {FreqDistribution::LogLinear, theta};
  out.values.resize(d);
  for (int i = 1; i <= d; ++i) {
    out.values[i - 1] = std::pow(theta, static_cast<double>(i) / d);
  }
  return out;
}

FrequencyVector make_random(int d, FrequencySpec spec, std::uint64_t seed) {
  if (d < 1) throw InvalidArgument("frequency count must be >= 1");
  if (spec.kind == FreqDistribution::LogLinear) {
    FrequencyVector out = make_loglinear(d, spec.param);
    out.seed = seed;
    return out;
  }
  // Zero dispersion degenerates to all-zero frequencies; negative is an error.
  if (spec.param < 0.0) {
    throw InvalidArgument("dispersion parameter must be >= 0, got " +
                          std::to_string(spec.param));
  }
  FrequencyVector out;
  out.spec = spec;
  out.seed = seed;
  out.values.resize(d);
  Rng rng(seed);
  switch (spec.kind) {
    case FreqDistribution::Gaussian: {
      const double stddev = std::sqrt(spec.param);  // param is the variance
      for (int i = 0; i < d; ++i) out.values[i] = stddev * rng.normal();
      break;
    }
    case FreqDistribution::Uniform:
      for (int i = 0; i < d; ++i) {
        out.values[i] = rng.uniform_in(-spec.param, spec.param);
      }
      break;
    case FreqDistribution::Laplacian:
      for (int i = 0; i < d; ++i) {
        out.values[i] = spec.param == 0.0 ? 0.0 : rng.laplace(spec.param);
      }
      break;
    case FreqDistribution::LogLinear:
      break;  // handled above
  }
  return out;
}

Eigen::VectorXd embed(const Eigen::RowVector3d& x, const FrequencyVector& freqs) {
  const int d = static_cast<int>(freqs.values.size());
  Eigen::VectorXd out(6 * d);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  for (int i = 0; i < d; ++i) {
    const double scale = two_pi * freqs.values[i];
    for (int axis = 0; axis < 3; ++axis) {
      const double t = scale * x[axis];
      out[3 * i + axis] = std::sin(t);
      out[3 * d + 3 * i + axis] = std::cos(t);
    }
  }
  return out;
}

Eigen::MatrixXd embed_rows(const Eigen::MatrixX3d& xs, const FrequencyVector& freqs) {
  const Eigen::Index rows = xs.rows();
  const int d = static_cast<int>(freqs.values.size());
  Eigen::MatrixXd out(rows, 6 * d);
  for (Eigen::Index r = 0; r < rows; ++r) {
    out.row(r) = embed(xs.row(r), freqs).transpose();
  }
  return out;
}

}  // namespace pcfs
