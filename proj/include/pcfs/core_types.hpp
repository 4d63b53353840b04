#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "pcfs/errors.hpp"

namespace pcfs {

/// One block of points. Coordinates are block-local meters, colors are
/// normalized to [0,1]. Labels are optional; -1 marks an unlabeled point.
/// Value object: never mutated after construction, safe to share.
struct PointCloud {
  Eigen::MatrixX3d coords;
  Eigen::MatrixX3d colors;
  std::vector<std::int32_t> labels;  // empty = no label channel

  Eigen::Index size() const { return coords.rows(); }
  bool has_labels() const { return !labels.empty(); }
};

/// Throws InvalidArgument if the cloud violates its invariants
/// (empty, non-finite coords, colors outside [0,1], label length mismatch).
void validate(const PointCloud& cloud);

/// Dense per-point features, rows are points and columns are channels.
using FeatureMatrix = Eigen::MatrixXd;

/// One resolution level of the encoder pyramid.
struct PyramidLevel {
  std::vector<int> sample_indices;  // into the parent level (identity at level 0)
  Eigen::MatrixX3d coords;          // retained point coordinates
  Eigen::MatrixX3d colors;          // retained point colors
  FeatureMatrix feats;              // points x (2^level * 6d)
};

struct EncodedCloud {
  FeatureMatrix final;                // M x D with D = 90 * d
  std::vector<PyramidLevel> pyramid;  // levels 0..3
};

/// One N-way K-shot task. After remap_episode_labels, support labels live in
/// {0..N} (0 = background) and query labels in {-1, 0..N} (-1 = ignore).
struct Episode {
  int n_way = 0;
  int k_shot = 0;
  std::vector<std::vector<PointCloud>> support;  // [class][shot]
  std::vector<PointCloud> query;
  std::vector<int> target_classes;  // dataset class ids, one per way
};

/// Maps dataset class ids into episode label space: target_classes[i] -> i+1,
/// anything else -> 0. Unlabeled query points (-1) stay -1 so the metrics can
/// skip them. Support clouds must be fully labeled.
Episode remap_episode_labels(const Episode& raw);

/// Per-class mean feature vectors, row 0 is the background class.
struct PrototypeSet {
  Eigen::MatrixXd prototypes;    // (N+1) x D, invalid rows are zero
  Eigen::MatrixXd label_onehot;  // (N+1) x (N+1) identity
  std::vector<bool> valid_mask;  // false when a class had no support points
};

}  // namespace pcfs
