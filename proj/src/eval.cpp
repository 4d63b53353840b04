#include "pcfs/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

namespace pcfs {

void MetricAccumulator::merge(const MetricAccumulator& other) {
  for (const auto& [id, counts] : other.per_class) {
    Counts& mine = per_class[id];
    mine.intersection += counts.intersection;
    mine.union_count += counts.union_count;
    mine.truth_points += counts.truth_points;
  }
}

void accumulate(MetricAccumulator& acc, const std::vector<std::int32_t>& pred,
                const std::vector<std::int32_t>& truth,
                const std::vector<int>& target_classes) {
  if (pred.size() != truth.size()) {
    throw InvalidArgument("accumulate: prediction/truth length mismatch");
  }
  const int n = static_cast<int>(target_classes.size());
  for (int c = 0; c < n; ++c) acc.per_class[target_classes[c]];  // register class
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (truth[i] < 0) continue;  // unlabeled point, excluded from the metric
    for (int c = 1; c <= n; ++c) {
      const bool in_pred = pred[i] == c;
      const bool in_truth = truth[i] == c;
      if (!in_pred && !in_truth) continue;
      auto& counts = acc.per_class[target_classes[c - 1]];
      counts.union_count += 1;
      if (in_pred && in_truth) counts.intersection += 1;
      if (in_truth) counts.truth_points += 1;
    }
  }
}

MiouResult miou(const MetricAccumulator& acc) {
  MiouResult out;
  double sum = 0.0;
  int counted = 0;
  for (const auto& [id, counts] : acc.per_class) {
    if (counts.union_count <= 0) {
      out.never_encountered.push_back(id);
      continue;
    }
    ClassIoU entry;
    entry.class_id = id;
    entry.intersection = counts.intersection;
    entry.union_count = counts.union_count;
    entry.iou = static_cast<double>(counts.intersection) /
                static_cast<double>(counts.union_count);
    out.per_class.push_back(entry);
    sum += entry.iou;
    ++counted;
  }
  if (counted == 0) throw EmptyEvaluation("miou: no class with a non-empty union");
  out.miou = sum / counted;
  return out;
}

double kl_divergence_diagnostic(const Eigen::MatrixXd& support_feats,
                                const Eigen::MatrixXd& query_feats, int bins,
                                double smoothing) {
  if (support_feats.cols() != query_feats.cols()) {
    throw InvalidArgument("kl diagnostic: channel count mismatch");
  }
  if (bins < 2) throw InvalidArgument("kl diagnostic: need at least two bins");
  if (smoothing <= 0.0) throw InvalidArgument("kl diagnostic: smoothing must be > 0");
  if (support_feats.rows() < 1 || query_feats.rows() < 1) {
    throw InvalidArgument("kl diagnostic: empty sample");
  }
  const Eigen::Index channels = support_feats.cols();
  std::vector<double> p(bins), q(bins);
  double total = 0.0;
  for (Eigen::Index c = 0; c < channels; ++c) {
    const double lo = std::min(support_feats.col(c).minCoeff(), query_feats.col(c).minCoeff());
    const double hi = std::max(support_feats.col(c).maxCoeff(), query_feats.col(c).maxCoeff());
    if (!(hi > lo)) continue;  // degenerate channel, identical histograms
    const double width = (hi - lo) / bins;
    std::fill(p.begin(), p.end(), smoothing);
    std::fill(q.begin(), q.end(), smoothing);
    auto bin_of = [&](double x) {
      const int b = static_cast<int>((x - lo) / width);
      return std::clamp(b, 0, bins - 1);
    };
    for (Eigen::Index r = 0; r < support_feats.rows(); ++r) {
      p[bin_of(support_feats(r, c))] += 1.0;
    }
    for (Eigen::Index r = 0; r < query_feats.rows(); ++r) {
      q[bin_of(query_feats(r, c))] += 1.0;
    }
    const double p_total = static_cast<double>(support_feats.rows()) + bins * smoothing;
    const double q_total = static_cast<double>(query_feats.rows()) + bins * smoothing;
    double kl = 0.0;
    for (int b = 0; b < bins; ++b) {
      const double pp = p[b] / p_total;
      const double qq = q[b] / q_total;
      kl += pp * std::log(pp / qq);
    }
    total += std::max(kl, 0.0);
  }
  return total / static_cast<double>(channels);
}

// --- reports ------------------------------------------------------------------

void write_report(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  char buf[256];
  out << "# evaluation report\n";
  out << "seed: " << report.seed << "\n";
  out << "n_way: " << report.n_way << "\nk_shot: " << report.k_shot
      << "\nqueries: " << report.queries << "\npoints: " << report.points << "\n";
  out << "episodes: " << report.episodes << "\n";
  out << "config: " << report.config_summary << "\n";
  out << "checkpoint: " << (report.checkpoint.empty() ? "none" : report.checkpoint)
      << "\n\n";
  out << "class  name  intersection  union  iou\n";
  for (const ClassIoU& c : report.result.per_class) {
    auto name_it = report.class_names.find(c.class_id);
    std::snprintf(buf, sizeof(buf), "%d  %s  %lld  %lld  %.6f\n", c.class_id,
                  name_it == report.class_names.end() ? "?" : name_it->second.c_str(),
                  c.intersection, c.union_count, c.iou);
    out << buf;
  }
  for (int id : report.result.never_encountered) {
    out << id << "  never-encountered\n";
  }
  std::snprintf(buf, sizeof(buf), "\nmIoU: %.6f\n", report.result.miou);
  out << buf;
  if (report.per_episode_miou >= 0.0) {
    std::snprintf(buf, sizeof(buf), "per-episode mIoU: %.6f\n", report.per_episode_miou);
    out << buf;
  }
  if (!out) throw IoError("short write to " + path.string());
}

void write_iou_csv(const std::filesystem::path& path, const MiouResult& result) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "class,intersection,union,iou\n";
  char buf[128];
  for (const ClassIoU& c : result.per_class) {
    std::snprintf(buf, sizeof(buf), "%d,%lld,%lld,%.6f\n", c.class_id, c.intersection,
                  c.union_count, c.iou);
    out << buf;
  }
  if (!out) throw IoError("short write to " + path.string());
}

void write_predictions(const std::filesystem::path& path, const PointCloud& cloud,
                       const std::vector<std::int32_t>& labels) {
  if (labels.size() != static_cast<std::size_t>(cloud.size())) {
    throw InvalidArgument("write_predictions: label count mismatch");
  }
  PointCloud labeled = cloud;
  labeled.labels = labels;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  char buf[256];
  for (Eigen::Index i = 0; i < labeled.size(); ++i) {
    const int len =
        std::snprintf(buf, sizeof(buf), "%.9g %.9g %.9g %.9g %.9g %.9g %d\n",
                      labeled.coords(i, 0), labeled.coords(i, 1), labeled.coords(i, 2),
                      labeled.colors(i, 0), labeled.colors(i, 1), labeled.colors(i, 2),
                      labeled.labels[i]);
    out.write(buf, len);
  }
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace pcfs
