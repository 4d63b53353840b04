#include "pcfs/fewshot_head.hpp"

#include <limits>
#include <string>

namespace pcfs {

PrototypeSet compute_prototypes(
    const std::vector<std::vector<FeatureMatrix>>& support_feats,
    const std::vector<std::vector<std::vector<std::int32_t>>>& support_labels,
    int n_way) {
  if (n_way < 1) throw InvalidArgument("compute_prototypes: n_way must be >= 1");
  if (support_feats.size() != static_cast<std::size_t>(n_way) ||
      support_labels.size() != static_cast<std::size_t>(n_way)) {
    throw InvalidArgument("compute_prototypes: class dimension mismatch");
  }
  Eigen::Index dim = -1;
  for (int n = 0; n < n_way; ++n) {
    if (support_feats[n].size() != support_labels[n].size()) {
      throw InvalidArgument("compute_prototypes: shot dimension mismatch");
    }
    for (std::size_t k = 0; k < support_feats[n].size(); ++k) {
      const FeatureMatrix& f = support_feats[n][k];
      if (dim < 0) dim = f.cols();
      if (f.cols() != dim) {
        throw InvalidArgument("compute_prototypes: channel count mismatch");
      }
      if (support_labels[n][k].size() != static_cast<std::size_t>(f.rows())) {
        throw InvalidArgument("compute_prototypes: label length mismatch");
      }
    }
  }

  PrototypeSet out;
  out.prototypes = Eigen::MatrixXd::Zero(n_way + 1, dim);
  out.label_onehot = Eigen::MatrixXd::Identity(n_way + 1, n_way + 1);
  out.valid_mask.assign(n_way + 1, false);
  std::vector<long long> counts(n_way + 1, 0);

  for (int n = 0; n < n_way; ++n) {
    for (std::size_t k = 0; k < support_feats[n].size(); ++k) {
      const FeatureMatrix& f = support_feats[n][k];
      const auto& labels = support_labels[n][k];
      for (Eigen::Index m = 0; m < f.rows(); ++m) {
        const int lab = labels[m];
        // Background pools across every shot of every class; class n >= 1
        // pools only within its own shots.
        if (lab == 0) {
          out.prototypes.row(0) += f.row(m);
          ++counts[0];
        } else if (lab == n + 1) {
          out.prototypes.row(n + 1) += f.row(m);
          ++counts[n + 1];
        }
      }
    }
  }
  for (int n = 0; n <= n_way; ++n) {
    if (counts[n] > 0) {
      out.prototypes.row(n) /= static_cast<double>(counts[n]);
      out.valid_mask[n] = true;
    }
  }
  return out;
}

Eigen::MatrixXd cosine_scores(const FeatureMatrix& query_feats,
                              const PrototypeSet& protos) {
  if (query_feats.cols() != protos.prototypes.cols()) {
    throw InvalidArgument("cosine_scores: channel count mismatch");
  }
  Eigen::MatrixXd qn = query_feats;
  for (Eigen::Index r = 0; r < qn.rows(); ++r) {
    const double norm = qn.row(r).norm();
    if (norm > 0.0) qn.row(r) /= norm;
  }
  Eigen::MatrixXd pn = protos.prototypes;
  for (Eigen::Index r = 0; r < pn.rows(); ++r) {
    const double norm = pn.row(r).norm();
    if (norm > 0.0) pn.row(r) /= norm;
  }
  Eigen::MatrixXd scores = qn * pn.transpose();
  for (Eigen::Index c = 0; c < scores.cols(); ++c) {
    if (!protos.valid_mask[static_cast<std::size_t>(c)]) {
      scores.col(c).setConstant(-std::numeric_limits<double>::infinity());
    }
  }
  return scores;
}

Prediction predict(const Eigen::MatrixXd& scores, const HeadConfig& cfg) {
  if (!(cfg.gamma > 0.0)) throw InvalidArgument("predict: gamma must be positive");
  Prediction out;
  out.logits = (-cfg.gamma * (1.0 - scores.array())).exp();
  out.labels.resize(scores.rows());
  for (Eigen::Index m = 0; m < scores.rows(); ++m) {
    // Argmax on the raw scores: the activation is monotone, and raw scores
    // never underflow the way exp(-gamma(1-s)) can at large gamma.
    int best = 0;
    for (Eigen::Index c = 1; c < scores.cols(); ++c) {
      if (scores(m, c) > scores(m, best)) best = static_cast<int>(c);
    }
    out.labels[m] = best;
  }
  return out;
}

}  // namespace pcfs
