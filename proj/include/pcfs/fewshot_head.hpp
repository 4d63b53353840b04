#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "pcfs/core_types.hpp"

namespace pcfs {

struct HeadConfig {
  double gamma = 400.0;  // similarity activation scale
};

/// Masked average pooling of support features into (N+1) class prototypes.
/// Class n >= 1 pools label-n points of its own shots; the background row
/// pools label-0 points across all shots of all classes. Classes without any
/// matching point get valid_mask = false and a zero row.
PrototypeSet compute_prototypes(
    const std::vector<std::vector<FeatureMatrix>>& support_feats,
    const std::vector<std::vector<std::vector<std::int32_t>>>& support_labels,
    int n_way);

/// Cosine similarity of each query point against each prototype. Rows of both
/// sides are L2-normalized (zero vectors stay zero). Columns of invalid
/// prototypes are set to -infinity so they can never win the argmax.
Eigen::MatrixXd cosine_scores(const FeatureMatrix& query_feats,
                              const PrototypeSet& protos);

struct Prediction {
  Eigen::MatrixXd logits;          // M x (N+1), exp(-gamma * (1 - score))
  std::vector<std::int32_t> labels;  // M, episode label space
};

/// Activates scores with exp(-gamma*(1-s)) and takes the per-point argmax.
/// The argmax is evaluated on the raw scores (the activation is strictly
/// increasing), which keeps predicted labels independent of gamma even where
/// the activation underflows. Ties resolve to the lowest class index.
Prediction predict(const Eigen::MatrixXd& scores, const HeadConfig& cfg);

}  // namespace pcfs
