#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

namespace pcfs {

enum class FreqDistribution { LogLinear, Gaussian, Uniform, Laplacian };

/// Parameter meaning depends on the distribution:
///   LogLinear: base theta (values theta^(i/d), i = 1..d)
///   Gaussian:  variance
///   Uniform:   half-range r, values on [-r, r]
///   Laplacian: scale b
struct FrequencySpec {
  FreqDistribution kind = FreqDistribution::Gaussian;
  double param = 0.1;
};

struct FrequencyVector {
  std::vector<double> values;  // cycles per unit input
  FrequencySpec spec;
  std::uint64_t seed = 0;
};

FrequencyVector make_loglinear(int d, double theta);

/// Draws d frequencies from the named distribution, reproducibly from seed.
/// LogLinear ignores the seed (deterministic closed form).
FrequencyVector make_random(int d, FrequencySpec spec, std::uint64_t seed);

/// Trigonometric embedding of a 3-vector: sine block then cosine block,
/// frequency-major / coordinate-minor within each block. Length 6d.
Eigen::VectorXd embed(const Eigen::RowVector3d& x, const FrequencyVector& freqs);

/// Row-wise embed; output is rows(xs) x 6d.
Eigen::MatrixXd embed_rows(const Eigen::MatrixX3d& xs, const FrequencyVector& freqs);

}  // namespace pcfs
