#include "pcfs/spatial.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <queue>
#include <string>
#include <vector>

#include "pcfs/errors.hpp"

namespace pcfs {

namespace {

inline bool coord_less(const Eigen::RowVector3d& a, const Eigen::RowVector3d& b) {
  if (a[0] != b[0]) return a[0] < b[0];
  if (a[1] != b[1]) return a[1] < b[1];
  return a[2] < b[2];
}

inline double dist2(const Eigen::RowVector3d& a, const Eigen::RowVector3d& b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

/// Total order on neighbor candidates: distance, then coordinate, then index.
struct Candidate {
  double d2;
  Eigen::RowVector3d coord;
  int index;

  bool better_than(const Candidate& o) const {
    if (d2 != o.d2) return d2 < o.d2;
    if (coord[0] != o.coord[0]) return coord[0] < o.coord[0];
    if (coord[1] != o.coord[1]) return coord[1] < o.coord[1];
    if (coord[2] != o.coord[2]) return coord[2] < o.coord[2];
    return index < o.index;
  }
};

struct WorstFirst {
  bool operator()(const Candidate& a, const Candidate& b) const {
    return a.better_than(b);  // priority_queue keeps the worst on top
  }
};

using CandidateHeap = std::priority_queue<Candidate, std::vector<Candidate>, WorstFirst>;

/// Static kd-tree over a reference point set. Exact queries: a subtree is
/// only skipped when its bounding box is strictly farther than the current
/// k-th candidate, so distance ties still surface for tie-breaking.
class KdTree {
 public:
  explicit KdTree(const Eigen::MatrixX3d& pts) : pts_(pts), order_(pts.rows()) {
    std::iota(order_.begin(), order_.end(), 0);
    nodes_.reserve(2 * order_.size() / kLeafSize + 2);
    if (!order_.empty()) root_ = build(0, static_cast<int>(order_.size()));
  }

  void query(const Eigen::RowVector3d& q, int k, CandidateHeap& heap) const {
    search(root_, q, static_cast<std::size_t>(k), heap);
  }

 private:
  static constexpr int kLeafSize = 16;

  struct Node {
    Eigen::RowVector3d lo, hi;
    int left = -1, right = -1;
    int begin = 0, end = 0;  // leaf range into order_
  };

  int build(int begin, int end) {
    Node node;
    node.lo = pts_.row(order_[begin]);
    node.hi = node.lo;
    for (int i = begin + 1; i < end; ++i) {
      node.lo = node.lo.cwiseMin(pts_.row(order_[i]));
      node.hi = node.hi.cwiseMax(pts_.row(order_[i]));
    }
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    if (end - begin <= kLeafSize) {
      nodes_[id].begin = begin;
      nodes_[id].end = end;
      return id;
    }
    int axis = 0;
    const Eigen::RowVector3d extent = node.hi - node.lo;
    if (extent[1] > extent[axis]) axis = 1;
    if (extent[2] > extent[axis]) axis = 2;
    const int mid = (begin + end) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid,
                     order_.begin() + end, [&](int a, int b) {
                       if (pts_(a, axis) != pts_(b, axis)) {
                         return pts_(a, axis) < pts_(b, axis);
                       }
                       return a < b;
                     });
    const int left = build(begin, mid);
    const int right = build(mid, end);
    nodes_[id].left = left;
    nodes_[id].right = right;
    return id;
  }

  double box_dist2(const Node& node, const Eigen::RowVector3d& q) const {
    double acc = 0.0;
    for (int a = 0; a < 3; ++a) {
      double d = 0.0;
      if (q[a] < node.lo[a]) d = node.lo[a] - q[a];
      else if (q[a] > node.hi[a]) d = q[a] - node.hi[a];
      acc += d * d;
    }
    return acc;
  }

  void search(int id, const Eigen::RowVector3d& q, std::size_t k,
              CandidateHeap& heap) const {
    const Node& node = nodes_[id];
    if (heap.size() == k && box_dist2(node, q) > heap.top().d2) return;
    if (node.left < 0) {
      for (int i = node.begin; i < node.end; ++i) {
        const int p = order_[i];
        Candidate c{dist2(q, pts_.row(p)), pts_.row(p), p};
        if (heap.size() < k) {
          heap.push(c);
        } else if (c.better_than(heap.top())) {
          heap.pop();
          heap.push(c);
        }
      }
      return;
    }
    const double dl = box_dist2(nodes_[node.left], q);
    const double dr = box_dist2(nodes_[node.right], q);
    if (dl <= dr) {
      search(node.left, q, k, heap);
      search(node.right, q, k, heap);
    } else {
      search(node.right, q, k, heap);
      search(node.left, q, k, heap);
    }
  }

  const Eigen::MatrixX3d& pts_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

}  // namespace

std::vector<int> farthest_point_sample(const Eigen::MatrixX3d& coords, int count) {
  const int p = static_cast<int>(coords.rows());
  if (count < 1 || count > p) {
    throw InvalidArgument("farthest_point_sample: count " + std::to_string(count) +
                          " outside [1, " + std::to_string(p) + "]");
  }
  // Canonical start: lexicographically smallest coordinate.
  int start = 0;
  for (int i = 1; i < p; ++i) {
    if (coord_less(coords.row(i), coords.row(start))) start = i;
  }

  std::vector<int> selected;
  selected.reserve(count);
  selected.push_back(start);
  std::vector<double> min_d2(p);
  std::vector<char> taken(p, 0);
  taken[start] = 1;
  for (int i = 0; i < p; ++i) min_d2[i] = dist2(coords.row(i), coords.row(start));

  while (static_cast<int>(selected.size()) < count) {
    int best = -1;
    for (int i = 0; i < p; ++i) {
      if (taken[i]) continue;
      if (best < 0 || min_d2[i] > min_d2[best] ||
          (min_d2[i] == min_d2[best] && coord_less(coords.row(i), coords.row(best)))) {
        best = i;
      }
    }
    taken[best] = 1;
    selected.push_back(best);
    for (int i = 0; i < p; ++i) {
      if (!taken[i]) min_d2[i] = std::min(min_d2[i], dist2(coords.row(i), coords.row(best)));
    }
  }
  return selected;
}

NeighborTable knn(const Eigen::MatrixX3d& query_coords,
                  const Eigen::MatrixX3d& ref_coords, int k) {
  const int nq = static_cast<int>(query_coords.rows());
  const int nr = static_cast<int>(ref_coords.rows());
  if (k < 1 || k > nr) {
    throw InvalidArgument("knn: k " + std::to_string(k) + " outside [1, " +
                          std::to_string(nr) + "]");
  }
  KdTree tree(ref_coords);
  NeighborTable out;
  out.indices.resize(nq, k);
  out.distances.resize(nq, k);
  std::vector<Candidate> row(k);
  for (int q = 0; q < nq; ++q) {
    CandidateHeap heap;
    tree.query(query_coords.row(q), k, heap);
    for (int j = k - 1; j >= 0; --j) {
      row[j] = heap.top();
      heap.pop();
    }
    for (int j = 0; j < k; ++j) {
      out.indices(q, j) = row[j].index;
      out.distances(q, j) = std::sqrt(row[j].d2);
    }
  }
  return out;
}

Eigen::VectorXd inverse_distance_weights(const Eigen::VectorXd& distances) {
  constexpr double eps = 1e-8;
  if ((distances.array() < 0.0).any()) {
    throw InvalidArgument("inverse_distance_weights: negative distance");
  }
  Eigen::VectorXd w = (distances.array() + eps).inverse();
  return w / w.sum();
}

}  // namespace pcfs
