#include "pcfs/encoder.hpp"

#include <numeric>
#include <string>

#include "pcfs/rng.hpp"
#include "pcfs/spatial.hpp"

namespace pcfs {

namespace {

constexpr double kRadiusEps = 1e-8;

void check_config(const EncoderConfig& cfg) {
  if (cfg.d < 1) throw InvalidArgument("encoder: d must be >= 1");
  if (cfg.k < 1) throw InvalidArgument("encoder: k must be >= 1");
  if (cfg.alpha < 0.0 || cfg.alpha > 1.0) {
    throw InvalidArgument("encoder: alpha must lie in [0,1]");
  }
}

Eigen::RowVectorXd modulate(const Eigen::RowVectorXd& group,
                            const Eigen::RowVectorXd& pe, PeMode mode) {
  switch (mode) {
    case PeMode::None:
      return group;
    case PeMode::Add:
      return group + pe;
    case PeMode::Multiply:
      return group.cwiseProduct(pe);
    case PeMode::AddMultiply:
      return (group + pe).cwiseProduct(pe);
  }
  throw InvalidArgument("encoder: unknown pe mode");
}

Eigen::MatrixX3d gather3(const Eigen::MatrixX3d& rows, const std::vector<int>& idx) {
  Eigen::MatrixX3d out(static_cast<Eigen::Index>(idx.size()), 3);
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(i) = rows.row(idx[i]);
  return out;
}

}  // namespace

Eigen::MatrixX3d normalize_unit_cube(const Eigen::MatrixX3d& coords) {
  Eigen::RowVector3d lo = coords.colwise().minCoeff();
  Eigen::RowVector3d hi = coords.colwise().maxCoeff();
  Eigen::MatrixX3d out(coords.rows(), 3);
  for (int a = 0; a < 3; ++a) {
    const double extent = hi[a] - lo[a];
    if (extent > 0.0) {
      out.col(a) = (coords.col(a).array() - lo[a]) / extent;
    } else {
      out.col(a).setZero();
    }
  }
  return out;
}

Eigen::MatrixXd initial_embed(const PointCloud& cloud, const EncoderConfig& cfg) {
  check_config(cfg);
  const FrequencyVector u = make_loglinear(cfg.d, cfg.theta);
  Eigen::MatrixXd coord_pe = embed_rows(cloud.coords, u);
  if (!cfg.use_color) return coord_pe;
  const Eigen::MatrixXd color_pe = embed_rows(cloud.colors, u);
  return cfg.alpha * coord_pe + (1.0 - cfg.alpha) * color_pe;
}

LocalLayerResult local_embed_layer(int level, const Eigen::MatrixXd& parent_feats,
                                   const Eigen::MatrixX3d& parent_coords,
                                   const Eigen::MatrixX3d& parent_colors,
                                   const EncoderConfig& cfg) {
  check_config(cfg);
  if (level < 1 || level > 3) throw InvalidArgument("local layer level must be 1..3");
  const int parent_count = static_cast<int>(parent_coords.rows());
  if (parent_count < 2 * cfg.k) {
    throw EncodeError("local layer " + std::to_string(level) + ": " +
                      std::to_string(parent_count) + " points cannot support k=" +
                      std::to_string(cfg.k));
  }
  const int center_count = parent_count / 2;
  const int in_channels = static_cast<int>(parent_feats.cols());
  const int out_channels = 2 * in_channels;

  LocalLayerResult res;
  res.sample_indices = farthest_point_sample(parent_coords, center_count);
  const Eigen::MatrixX3d centers = gather3(parent_coords, res.sample_indices);
  const NeighborTable nt = knn(centers, parent_coords, cfg.k);

  // One frequency vector per layer, shared by the coordinate and color paths.
  const int freq_count = (1 << level) * cfg.d;
  const FrequencyVector v =
      make_random(freq_count, cfg.local_freqs, cfg.seed ^ static_cast<std::uint64_t>(level));

  res.feats.resize(center_count, out_channels);
  Eigen::MatrixXd group(cfg.k, out_channels);
  for (int c = 0; c < center_count; ++c) {
    const int center_parent = res.sample_indices[c];
    const Eigen::RowVector3d center_coord = parent_coords.row(center_parent);
    const Eigen::RowVector3d center_color = parent_colors.row(center_parent);
    const double radius = std::max(nt.distances(c, cfg.k - 1), kRadiusEps);
    for (int j = 0; j < cfg.k; ++j) {
      const int nbr = nt.indices(c, j);
      Eigen::RowVectorXd concat(out_channels);
      concat << parent_feats.row(center_parent), parent_feats.row(nbr);
      const Eigen::RowVector3d dp = (parent_coords.row(nbr) - center_coord) / radius;
      const Eigen::RowVectorXd coord_pe = embed(dp, v).transpose();
      Eigen::RowVectorXd fused = modulate(concat, coord_pe, cfg.pe_mode);
      if (cfg.use_color) {
        const Eigen::RowVector3d dc = parent_colors.row(nbr) - center_color;
        const Eigen::RowVectorXd color_pe = embed(dc, v).transpose();
        fused = cfg.alpha * fused +
                (1.0 - cfg.alpha) * modulate(concat, color_pe, cfg.pe_mode);
      }
      group.row(j) = fused;
    }
    res.feats.row(c) = group.colwise().maxCoeff() + group.colwise().mean();
  }
  return res;
}

Eigen::MatrixXd upsample_layer(int level, const Eigen::MatrixXd& child_feats,
                               const Eigen::MatrixX3d& child_coords,
                               const Eigen::MatrixX3d& target_coords,
                               const Eigen::MatrixXd& skip_feats,
                               const EncoderConfig& cfg) {
  check_config(cfg);
  if (level < 4 || level > 6) throw InvalidArgument("upsample level must be 4..6");
  if (child_feats.rows() != child_coords.rows()) {
    throw EncodeError("upsample: child features and coordinates disagree");
  }
  if (skip_feats.rows() != target_coords.rows()) {
    throw EncodeError("upsample: skip features do not match the target resolution");
  }
  if (child_coords.rows() < cfg.k) {
    throw EncodeError("upsample: fewer child points than k");
  }
  const Eigen::Index targets = target_coords.rows();
  const Eigen::Index child_channels = child_feats.cols();
  const NeighborTable nt = knn(target_coords, child_coords, cfg.k);

  Eigen::MatrixXd out(targets, skip_feats.cols() + child_channels);
  out.leftCols(skip_feats.cols()) = skip_feats;
  for (Eigen::Index t = 0; t < targets; ++t) {
    const Eigen::VectorXd w = inverse_distance_weights(nt.distances.row(t));
    Eigen::RowVectorXd interp = Eigen::RowVectorXd::Zero(child_channels);
    for (int j = 0; j < cfg.k; ++j) {
      interp += w[j] * child_feats.row(nt.indices(t, j));
    }
    out.row(t).tail(child_channels) = interp;
  }
  return out;
}

EncodedCloud encode(const PointCloud& cloud, const EncoderConfig& cfg) {
  check_config(cfg);
  validate(cloud);
  const Eigen::Index m = cloud.size();
  if (m < 8 * cfg.k) {
    throw EncodeError("encode: need at least 8*k = " + std::to_string(8 * cfg.k) +
                      " points, got " + std::to_string(m));
  }

  EncodedCloud out;
  out.pyramid.resize(4);
  PyramidLevel& base = out.pyramid[0];
  base.sample_indices.resize(m);
  std::iota(base.sample_indices.begin(), base.sample_indices.end(), 0);
  base.coords = cfg.normalize_coords ? normalize_unit_cube(cloud.coords) : cloud.coords;
  base.colors = cloud.colors;
  PointCloud working{base.coords, base.colors, {}};
  base.feats = initial_embed(working, cfg);

  for (int level = 1; level <= 3; ++level) {
    const PyramidLevel& parent = out.pyramid[level - 1];
    LocalLayerResult res =
        local_embed_layer(level, parent.feats, parent.coords, parent.colors, cfg);
    PyramidLevel& cur = out.pyramid[level];
    cur.coords = gather3(parent.coords, res.sample_indices);
    cur.colors = gather3(parent.colors, res.sample_indices);
    cur.feats = std::move(res.feats);
    cur.sample_indices = std::move(res.sample_indices);
  }

  Eigen::MatrixXd feats = out.pyramid[3].feats;
  Eigen::MatrixX3d coords = out.pyramid[3].coords;
  for (int level = 4; level <= 6; ++level) {
    const PyramidLevel& target = out.pyramid[6 - level];
    feats = upsample_layer(level, feats, coords, target.coords, target.feats, cfg);
    coords = target.coords;
  }
  out.final = std::move(feats);
  if (out.final.cols() != cfg.feature_dim()) {
    throw EncodeError("encode: channel bookkeeping failure, got " +
                      std::to_string(out.final.cols()) + " channels, expected " +
                      std::to_string(cfg.feature_dim()));
  }
  return out;
}

}  // namespace pcfs
