#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pcfs/core_types.hpp"

namespace pcfs {

/// Reads a point block. Binary files carry the "PCB1" header; files ending in
/// .txt or .xyz are parsed as whitespace text (x y z r g b [label] per line).
PointCloud read_block(const std::filesystem::path& path);

/// Writes a block in the format implied by the extension. Binary payloads are
/// float32 and round trip losslessly.
void write_block(const std::filesystem::path& path, const PointCloud& cloud);

/// Dataset description: class names, the seen/unseen split, and per-class
/// lists of qualifying blocks. query_blocks, when non-empty for a class,
/// forms a separate pool that only query sampling draws from.
struct SplitManifest {
  std::map<int, std::string> class_names;
  std::vector<int> seen;
  std::vector<int> unseen;
  int presence_threshold = 100;  // min points of a class for a block to qualify
  std::map<int, std::vector<std::filesystem::path>> blocks;
  std::map<int, std::vector<std::filesystem::path>> query_blocks;
};

SplitManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const SplitManifest& manifest);

/// Scans blocks and indexes each under every class with at least `threshold`
/// labeled points in it.
std::map<int, std::vector<std::filesystem::path>> index_blocks(
    const std::vector<std::filesystem::path>& paths, int threshold);

/// A sampled episode before any file is touched: block paths plus the seed
/// that drives point resampling. Plans are cheap, deterministic, and can be
/// materialized concurrently.
struct EpisodePlan {
  std::vector<int> target_classes;
  std::vector<std::vector<std::filesystem::path>> support;  // N x K
  std::vector<std::filesystem::path> query;                 // Q
  std::uint64_t resample_seed = 0;
};

/// Test protocol: every N-combination of the unseen classes in lexicographic
/// order, episodes_per_combination episodes each. Support blocks are drawn
/// per class, query block q from class target[q mod N]; no block path repeats
/// within an episode. Throws SamplingError naming the class that ran out.
std::vector<EpisodePlan> sample_test_episode_plans(const SplitManifest& manifest,
                                                   int n_way, int k_shot, int queries,
                                                   int episodes_per_combination,
                                                   std::uint64_t seed);

/// Training episode i: a random N-combination of the seen classes, otherwise
/// the same draw rules as test episodes.
EpisodePlan sample_train_episode_plan(const SplitManifest& manifest, int n_way,
                                      int k_shot, int queries, std::uint64_t seed,
                                      long long iteration);

/// Loads the planned blocks, resamples every cloud to exactly m_points
/// (without replacement when long, with replacement when short) and remaps
/// labels into episode space.
Episode materialize_episode(const EpisodePlan& plan, int m_points);

// --- synthetic scenes -------------------------------------------------------

struct ClusterSpec {
  Eigen::RowVector3d center;
  Eigen::RowVector3d extent;  // per-axis standard deviation at noise 1
  Eigen::RowVector3d color;
  int count = 0;
  int label = -1;
};

/// Gaussian clusters: point = center + noise_sigma * extent .* N(0,1), color
/// exactly as specified, label = generating cluster. Deterministic from seed.
PointCloud synth_scene(const std::vector<ClusterSpec>& clusters, double noise_sigma,
                       std::uint64_t seed);

struct SynthClass {
  int id = 0;
  std::string name;
  Eigen::RowVector3d color;
};

/// Recipe for a synthetic block dataset. Every block contains one cluster per
/// class plus a background cluster. With fixed placement the cluster centers
/// sit on a deterministic layout shared by all blocks; with random placement
/// they are re-drawn per block with at least `separation` between centers.
/// A non-zero query_color_shift emits a second, color-shifted pool that only
/// query sampling uses.
struct SynthDatasetSpec {
  std::vector<SynthClass> classes;
  std::vector<int> seen;
  std::vector<int> unseen;
  // true: every block holds every class cluster plus clutter.
  // false: each block holds a single class cluster plus clutter, and every
  // class gets its own run of `blocks` block files.
  bool all_classes_per_block = true;
  int background_label = 99;
  std::string background_name = "clutter";
  Eigen::RowVector3d background_color{0.5, 0.5, 0.5};
  int blocks = 16;
  int points_per_cluster = 160;
  double extent = 0.08;
  double separation = 0.5;
  double noise = 1.0;
  bool fixed_placement = true;
  Eigen::RowVector3d query_color_shift{0.0, 0.0, 0.0};
  // When positive, each query block instead gets its own shift drawn
  // uniformly from [-m, m] per channel (added to query_color_shift).
  double query_color_shift_random = 0.0;
  // Flip the fixed shift's sign at random per query block.
  bool query_color_shift_signed = false;
  int presence_threshold = 100;
  std::uint64_t seed = 0;
};

SynthDatasetSpec parse_synth_spec(const std::filesystem::path& path);

/// Writes blocks/ (and qblocks/ when shifted) plus manifest.txt under out_dir
/// and returns the manifest. Byte-identical output for identical spec+seed.
SplitManifest generate_synth_dataset(const SynthDatasetSpec& spec,
                                     const std::filesystem::path& out_dir);

}  // namespace pcfs
