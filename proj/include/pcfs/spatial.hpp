#pragma once

#include <Eigen/Core>
#include <vector>

namespace pcfs {

/// k nearest neighbors for a batch of query points against a reference set.
/// Each row is sorted ascending by (distance, neighbor coordinate
/// lexicographic, neighbor index), so results are stable under permutation
/// of the reference points.
struct NeighborTable {
  Eigen::MatrixXi indices;    // queries x k, into the reference set
  Eigen::MatrixXd distances;  // queries x k, Euclidean
};

/// Farthest point sampling with a canonical start: the first point is the
/// lexicographically smallest coordinate, each following point maximizes the
/// minimum distance to the already selected set (ties broken by coordinate,
/// then index). Deterministic and permutation-invariant up to index renaming.
std::vector<int> farthest_point_sample(const Eigen::MatrixX3d& coords, int count);

/// Exact k-NN (kd-tree internally). Throws InvalidArgument if k exceeds the
/// reference size. A query point that coincides with a reference point is its
/// own nearest neighbor at distance zero.
NeighborTable knn(const Eigen::MatrixX3d& query_coords,
                  const Eigen::MatrixX3d& ref_coords, int k);

/// Normalized inverse-distance weights: w_j = (1/(d_j+eps)) / sum_i 1/(d_i+eps)
/// with eps = 1e-8. Always sums to 1.
Eigen::VectorXd inverse_distance_weights(const Eigen::VectorXd& distances);

}  // namespace pcfs
