#include "pcfs/core_types.hpp"

#include <cmath>
#include <string>
#include <unordered_map>

namespace pcfs {

void validate(const PointCloud& cloud) {
  const Eigen::Index m = cloud.coords.rows();
  if (m < 1) throw InvalidArgument("point cloud is empty");
  if (cloud.colors.rows() != m) {
    throw InvalidArgument("color row count " + std::to_string(cloud.colors.rows()) +
                          " does not match point count " + std::to_string(m));
  }
  if (!cloud.coords.allFinite()) throw InvalidArgument("non-finite coordinate");
  if (!cloud.colors.allFinite()) throw InvalidArgument("non-finite color");
  if ((cloud.colors.array() < 0.0).any() || (cloud.colors.array() > 1.0).any()) {
    throw InvalidArgument("color channel outside [0,1]");
  }
  if (cloud.has_labels() && cloud.labels.size() != static_cast<std::size_t>(m)) {
    throw InvalidArgument("label count " + std::to_string(cloud.labels.size()) +
                          " does not match point count " + std::to_string(m));
  }
}

namespace {

std::vector<std::int32_t> remap_labels(const std::vector<std::int32_t>& labels,
                                       const std::unordered_map<int, int>& to_episode,
                                       bool keep_ignore) {
  std::vector<std::int32_t> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (keep_ignore && labels[i] == -1) {
      out[i] = -1;
      continue;
    }
    auto it = to_episode.find(labels[i]);
    out[i] = it == to_episode.end() ? 0 : it->second;
  }
  return out;
}

}  // namespace

Episode remap_episode_labels(const Episode& raw) {
  const int n = static_cast<int>(raw.target_classes.size());
  if (n < 1) throw InvalidEpisode("episode has no target classes");
  if (raw.support.size() != static_cast<std::size_t>(n)) {
    throw InvalidEpisode("support class count does not match target classes");
  }
  if (raw.query.empty()) throw InvalidEpisode("episode has no query clouds");

  std::unordered_map<int, int> to_episode;
  for (int i = 0; i < n; ++i) {
    if (!to_episode.emplace(raw.target_classes[i], i + 1).second) {
      throw InvalidEpisode("duplicate target class " +
                           std::to_string(raw.target_classes[i]));
    }
  }

  Episode out = raw;
  out.n_way = n;
  for (auto& shots : out.support) {
    for (auto& cloud : shots) {
      if (!cloud.has_labels()) {
        throw InvalidEpisode("support cloud is missing labels");
      }
      validate(cloud);
      cloud.labels = remap_labels(cloud.labels, to_episode, /*keep_ignore=*/false);
    }
  }
  for (auto& cloud : out.query) {
    validate(cloud);
    if (cloud.has_labels()) {
      cloud.labels = remap_labels(cloud.labels, to_episode, /*keep_ignore=*/true);
    }
  }
  if (!out.support.empty()) out.k_shot = static_cast<int>(out.support[0].size());
  return out;
}

}  // namespace pcfs
