#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pcfs/core_types.hpp"

namespace pcfs {

/// Global intersection/union tallies keyed by dataset class id. Merging is
/// associative and commutative, so episodes can be evaluated in parallel and
/// combined afterwards.
struct MetricAccumulator {
  struct Counts {
    long long intersection = 0;
    long long union_count = 0;
    long long truth_points = 0;
  };
  std::map<int, Counts> per_class;

  void merge(const MetricAccumulator& other);
};

/// Tallies one query cloud. pred and truth are in episode label space
/// ({0..N}, truth may carry -1 = ignore); target_classes maps episode labels
/// back to dataset ids. Background (0) is not tracked as a class but feeds
/// the unions of the targets through false predictions.
void accumulate(MetricAccumulator& acc, const std::vector<std::int32_t>& pred,
                const std::vector<std::int32_t>& truth,
                const std::vector<int>& target_classes);

struct ClassIoU {
  int class_id = 0;
  long long intersection = 0;
  long long union_count = 0;
  double iou = 0.0;
};

struct MiouResult {
  double miou = 0.0;
  std::vector<ClassIoU> per_class;   // classes with union > 0
  std::vector<int> never_encountered;
};

/// Mean IoU over classes with non-empty union. Throws EmptyEvaluation when
/// every union is zero.
MiouResult miou(const MetricAccumulator& acc);

/// Per-channel histogram KL(support || query) averaged over channels. Both
/// sides are histogrammed over the shared per-channel range with `bins` bins
/// and additive smoothing. Always >= 0; 0 for identical inputs.
double kl_divergence_diagnostic(const Eigen::MatrixXd& support_feats,
                                const Eigen::MatrixXd& query_feats, int bins = 32,
                                double smoothing = 1e-3);

// --- reports ----------------------------------------------------------------

struct EvalReport {
  std::uint64_t seed = 0;
  int n_way = 0, k_shot = 0, queries = 0, points = 0;
  long long episodes = 0;
  std::string config_summary;
  std::string checkpoint;  // empty = training-free
  MiouResult result;
  double per_episode_miou = -1.0;  // mean of per-episode mIoU, < 0 if unset
  std::map<int, std::string> class_names;
};

/// Plain-text summary. Content is a pure function of the inputs (no
/// timestamps), so equal runs produce byte-identical reports.
void write_report(const std::filesystem::path& path, const EvalReport& report);

/// Machine-readable table: class,intersection,union,iou rows.
void write_iou_csv(const std::filesystem::path& path, const MiouResult& result);

/// Text point format with a trailing predicted-label column.
void write_predictions(const std::filesystem::path& path, const PointCloud& cloud,
                       const std::vector<std::int32_t>& labels);

}  // namespace pcfs
