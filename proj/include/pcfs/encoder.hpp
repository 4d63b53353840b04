#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "pcfs/core_types.hpp"
#include "pcfs/frequencies.hpp"

namespace pcfs {

/// How the offset embedding modulates the concatenated group feature in the
/// local embedding layers.
enum class PeMode { None, Add, Multiply, AddMultiply };

struct EncoderConfig {
  int d = 15;            // frequency count of the initial embedding layer
  double theta = 20.0;   // log-linear base for the initial frequencies
  double alpha = 0.8;    // weight of coordinates vs colors
  int k = 8;             // neighbors for grouping and interpolation
  PeMode pe_mode = PeMode::AddMultiply;
  bool use_color = true;
  FrequencySpec local_freqs{FreqDistribution::Gaussian, 0.1};
  std::uint64_t seed = 0;
  bool normalize_coords = true;  // min-max rescale each block to [0,1]^3

  int feature_dim() const { return 90 * d; }
};

/// Per-axis min-max rescale to the unit cube; degenerate axes collapse to 0.
Eigen::MatrixX3d normalize_unit_cube(const Eigen::MatrixX3d& coords);

/// Layer 0: alpha-weighted sum of the coordinate and color embeddings under
/// the shared log-linear frequencies. Output is M x 6d. Coordinates are
/// embedded as given (encode() applies normalization first).
Eigen::MatrixXd initial_embed(const PointCloud& cloud, const EncoderConfig& cfg);

struct LocalLayerResult {
  std::vector<int> sample_indices;  // centers, into the parent level
  Eigen::MatrixXd feats;            // centers x (2^level * 6d)
};

/// One local embedding layer (level 1..3): FPS to half the points, group k
/// neighbors, concat center+neighbor features, modulate with the offset
/// embeddings, then max+avg pool over the group.
LocalLayerResult local_embed_layer(int level, const Eigen::MatrixXd& parent_feats,
                                   const Eigen::MatrixX3d& parent_coords,
                                   const Eigen::MatrixX3d& parent_colors,
                                   const EncoderConfig& cfg);

/// One upsampling layer (level 4..6): inverse-distance interpolation of child
/// features at the target points, concatenated after the skip features.
Eigen::MatrixXd upsample_layer(int level, const Eigen::MatrixXd& child_feats,
                               const Eigen::MatrixX3d& child_coords,
                               const Eigen::MatrixX3d& target_coords,
                               const Eigen::MatrixXd& skip_feats,
                               const EncoderConfig& cfg);

/// Full training-free encoder: initial embedding, three local embedding
/// layers over an FPS pyramid, three upsampling layers with skip concat.
/// Requires M >= 8k. Deterministic given (cloud, cfg).
EncodedCloud encode(const PointCloud& cloud, const EncoderConfig& cfg);

}  // namespace pcfs
