#include "pcfs/episodes_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

#include "pcfs/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "block files are little-endian; big-endian hosts are unsupported");

namespace pcfs {

namespace {

constexpr char kBlockMagic[4] = {'P', 'C', 'B', '1'};
constexpr std::uint32_t kBlockVersion = 1;

bool is_text_extension(const std::filesystem::path& path) {
  const std::string ext = path.extension().string();
  return ext == ".txt" || ext == ".xyz";
}

PointCloud read_block_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::array<double, 6>> rows;
  std::vector<std::int32_t> labels;
  int expected_fields = 0;
  std::string line;
  long long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::vector<double> fields;
    double value = 0.0;
    while (ss >> value) fields.push_back(value);
    if (fields.empty()) continue;  // blank line
    if (fields.size() != 6 && fields.size() != 7) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) +
                       ": expected 6 or 7 fields, got " + std::to_string(fields.size()));
    }
    if (expected_fields == 0) expected_fields = static_cast<int>(fields.size());
    if (static_cast<int>(fields.size()) != expected_fields) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) +
                       ": inconsistent field count");
    }
    rows.push_back({fields[0], fields[1], fields[2], fields[3], fields[4], fields[5]});
    if (expected_fields == 7) {
      labels.push_back(static_cast<std::int32_t>(std::llround(fields[6])));
    }
  }
  if (rows.empty()) throw ParseError(path.string() + ": no points");

  PointCloud cloud;
  cloud.coords.resize(static_cast<Eigen::Index>(rows.size()), 3);
  cloud.colors.resize(static_cast<Eigen::Index>(rows.size()), 3);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    cloud.coords.row(i) << rows[i][0], rows[i][1], rows[i][2];
    cloud.colors.row(i) << rows[i][3], rows[i][4], rows[i][5];
  }
  cloud.labels = std::move(labels);
  validate(cloud);
  return cloud;
}

PointCloud read_block_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::size_t offset = 0;
  auto read_raw = [&](void* dst, std::size_t bytes, const char* what) {
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(bytes));
    if (static_cast<std::size_t>(in.gcount()) != bytes) {
      throw ParseError(path.string() + ": truncated while reading " + std::string(what) +
                       " at byte offset " + std::to_string(offset + in.gcount()));
    }
    offset += bytes;
  };

  char magic[4];
  read_raw(magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kBlockMagic, sizeof(kBlockMagic)) != 0) {
    throw ParseError(path.string() + ": bad magic, not a block file");
  }
  std::uint32_t version = 0;
  read_raw(&version, sizeof(version), "version");
  if (version != kBlockVersion) {
    throw ParseError(path.string() + ": unsupported block version " +
                     std::to_string(version));
  }
  std::uint32_t count = 0;
  read_raw(&count, sizeof(count), "point count");
  if (count == 0) throw ParseError(path.string() + ": zero points");
  std::uint8_t has_labels = 0;
  read_raw(&has_labels, sizeof(has_labels), "label flag");
  if (has_labels > 1) {
    throw ParseError(path.string() + ": label flag must be 0 or 1");
  }

  PointCloud cloud;
  cloud.coords.resize(count, 3);
  cloud.colors.resize(count, 3);
  if (has_labels) cloud.labels.resize(count);
  float xyzrgb[6];
  for (std::uint32_t i = 0; i < count; ++i) {
    read_raw(xyzrgb, sizeof(xyzrgb), "point record");
    cloud.coords.row(i) << xyzrgb[0], xyzrgb[1], xyzrgb[2];
    cloud.colors.row(i) << xyzrgb[3], xyzrgb[4], xyzrgb[5];
    if (has_labels) {
      std::int32_t label = 0;
      read_raw(&label, sizeof(label), "point label");
      cloud.labels[i] = label;
    }
  }
  validate(cloud);
  return cloud;
}

void write_block_text(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  char buf[256];
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    int len = std::snprintf(buf, sizeof(buf), "%.9g %.9g %.9g %.9g %.9g %.9g",
                            cloud.coords(i, 0), cloud.coords(i, 1), cloud.coords(i, 2),
                            cloud.colors(i, 0), cloud.colors(i, 1), cloud.colors(i, 2));
    out.write(buf, len);
    if (cloud.has_labels()) {
      len = std::snprintf(buf, sizeof(buf), " %d", cloud.labels[i]);
      out.write(buf, len);
    }
    out.put('\n');
  }
  if (!out) throw IoError("short write to " + path.string());
}

void write_block_binary(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kBlockMagic, sizeof(kBlockMagic));
  out.write(reinterpret_cast<const char*>(&kBlockVersion), sizeof(kBlockVersion));
  const std::uint32_t count = static_cast<std::uint32_t>(cloud.size());
  out.write(reinterpret_cast<const char*>(&count), sizeof(count));
  const std::uint8_t has_labels = cloud.has_labels() ? 1 : 0;
  out.write(reinterpret_cast<const char*>(&has_labels), sizeof(has_labels));
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    const float rec[6] = {
        static_cast<float>(cloud.coords(i, 0)), static_cast<float>(cloud.coords(i, 1)),
        static_cast<float>(cloud.coords(i, 2)), static_cast<float>(cloud.colors(i, 0)),
        static_cast<float>(cloud.colors(i, 1)), static_cast<float>(cloud.colors(i, 2))};
    out.write(reinterpret_cast<const char*>(rec), sizeof(rec));
    if (has_labels) {
      out.write(reinterpret_cast<const char*>(&cloud.labels[i]), sizeof(std::int32_t));
    }
  }
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace

PointCloud read_block(const std::filesystem::path& path) {
  return is_text_extension(path) ? read_block_text(path) : read_block_binary(path);
}

void write_block(const std::filesystem::path& path, const PointCloud& cloud) {
  validate(cloud);
  if (is_text_extension(path)) {
    write_block_text(path, cloud);
  } else {
    write_block_binary(path, cloud);
  }
}

// --- manifest ----------------------------------------------------------------

namespace {

std::vector<std::string> tokenize(const std::string& line) {
  std::istringstream ss(line);
  std::vector<std::string> out;
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

int parse_int(const std::string& s, const std::string& context) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(context + ": not an integer: " + s);
  }
}

double parse_double(const std::string& s, const std::string& context) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(context + ": not a number: " + s);
  }
}

}  // namespace

SplitManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  const std::filesystem::path base = path.parent_path();
  SplitManifest m;
  std::string line;
  long long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::vector<std::string> tok = tokenize(line);
    if (tok.empty()) continue;
    const std::string context = path.string() + ":" + std::to_string(line_no);
    if (tok[0] == "class") {
      if (tok.size() != 3) throw ParseError(context + ": class wants <id> <name>");
      m.class_names[parse_int(tok[1], context)] = tok[2];
    } else if (tok[0] == "seen" || tok[0] == "unseen") {
      auto& dst = tok[0] == "seen" ? m.seen : m.unseen;
      for (std::size_t i = 1; i < tok.size(); ++i) {
        dst.push_back(parse_int(tok[i], context));
      }
    } else if (tok[0] == "threshold") {
      if (tok.size() != 2) throw ParseError(context + ": threshold wants one value");
      m.presence_threshold = parse_int(tok[1], context);
    } else if (tok[0] == "block" || tok[0] == "qblock") {
      if (tok.size() != 3) throw ParseError(context + ": block wants <class> <path>");
      auto& dst = tok[0] == "block" ? m.blocks : m.query_blocks;
      dst[parse_int(tok[1], context)].push_back(base / tok[2]);
    } else {
      throw ParseError(context + ": unknown key '" + tok[0] + "'");
    }
  }
  std::set<int> seen_set(m.seen.begin(), m.seen.end());
  for (int id : m.unseen) {
    if (seen_set.contains(id)) {
      throw ParseError(path.string() + ": class " + std::to_string(id) +
                       " is both seen and unseen");
    }
  }
  return m;
}

void write_manifest(const std::filesystem::path& path, const SplitManifest& manifest) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const std::filesystem::path base = path.parent_path();
  out << "# point block dataset manifest\n";
  for (const auto& [id, name] : manifest.class_names) {
    out << "class " << id << " " << name << "\n";
  }
  auto write_ids = [&out](const char* key, const std::vector<int>& ids) {
    if (ids.empty()) return;
    out << key;
    for (int id : ids) out << " " << id;
    out << "\n";
  };
  write_ids("seen", manifest.seen);
  write_ids("unseen", manifest.unseen);
  out << "threshold " << manifest.presence_threshold << "\n";
  auto write_blocks = [&](const char* key,
                          const std::map<int, std::vector<std::filesystem::path>>& blocks) {
    for (const auto& [id, paths] : blocks) {
      for (const auto& p : paths) {
        out << key << " " << id << " "
            << std::filesystem::relative(p, base).generic_string() << "\n";
      }
    }
  };
  write_blocks("block", manifest.blocks);
  write_blocks("qblock", manifest.query_blocks);
  if (!out) throw IoError("short write to " + path.string());
}

std::map<int, std::vector<std::filesystem::path>> index_blocks(
    const std::vector<std::filesystem::path>& paths, int threshold) {
  std::map<int, std::vector<std::filesystem::path>> index;
  for (const auto& path : paths) {
    const PointCloud cloud = read_block(path);
    if (!cloud.has_labels()) continue;
    std::map<int, int> histogram;
    for (std::int32_t label : cloud.labels) {
      if (label >= 0) ++histogram[label];
    }
    for (const auto& [label, count] : histogram) {
      if (count >= threshold) index[label].push_back(path);
    }
  }
  return index;
}

// --- episode sampling ---------------------------------------------------------

namespace {

std::vector<std::vector<int>> combinations(const std::vector<int>& items, int choose) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur;
  std::function<void(std::size_t)> rec = [&](std::size_t start) {
    if (static_cast<int>(cur.size()) == choose) {
      out.push_back(cur);
      return;
    }
    for (std::size_t i = start; i < items.size(); ++i) {
      cur.push_back(items[i]);
      rec(i + 1);
      cur.pop_back();
    }
  };
  rec(0);
  return out;
}

const std::vector<std::filesystem::path>& pool_for(
    const SplitManifest& manifest, int class_id, bool query) {
  static const std::vector<std::filesystem::path> empty;
  if (query) {
    auto it = manifest.query_blocks.find(class_id);
    if (it != manifest.query_blocks.end() && !it->second.empty()) return it->second;
  }
  auto it = manifest.blocks.find(class_id);
  return it == manifest.blocks.end() ? empty : it->second;
}

std::filesystem::path draw_block(const SplitManifest& manifest, int class_id,
                                 bool query, std::set<std::string>& used, Rng& rng) {
  const auto& pool = pool_for(manifest, class_id, query);
  std::vector<int> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  for (int idx : order) {
    const std::string key = pool[idx].string();
    if (!used.contains(key)) {
      used.insert(key);
      return pool[idx];
    }
  }
  throw SamplingError("class " + std::to_string(class_id) +
                      ": not enough distinct blocks for this episode");
}

EpisodePlan plan_episode(const SplitManifest& manifest, const std::vector<int>& targets,
                         int k_shot, int queries, std::uint64_t episode_seed) {
  EpisodePlan plan;
  plan.target_classes = targets;
  plan.resample_seed = mix_seed(episode_seed, 0x9e11);
  Rng rng(mix_seed(episode_seed, 0x5a3f));
  std::set<std::string> used;
  const int n = static_cast<int>(targets.size());
  plan.support.resize(n);
  for (int c = 0; c < n; ++c) {
    for (int k = 0; k < k_shot; ++k) {
      plan.support[c].push_back(draw_block(manifest, targets[c], false, used, rng));
    }
  }
  for (int q = 0; q < queries; ++q) {
    plan.query.push_back(draw_block(manifest, targets[q % n], true, used, rng));
  }
  return plan;
}

void check_sampling_args(int n_way, int k_shot, int queries) {
  if (n_way < 1) throw InvalidArgument("episode sampling: n_way must be >= 1");
  if (k_shot < 1) throw InvalidArgument("episode sampling: k_shot must be >= 1");
  if (queries < 1) throw InvalidArgument("episode sampling: queries must be >= 1");
}

}  // namespace

std::vector<EpisodePlan> sample_test_episode_plans(const SplitManifest& manifest,
                                                   int n_way, int k_shot, int queries,
                                                   int episodes_per_combination,
                                                   std::uint64_t seed) {
  check_sampling_args(n_way, k_shot, queries);
  if (episodes_per_combination < 1) {
    throw InvalidArgument("episode sampling: episodes_per_combination must be >= 1");
  }
  if (static_cast<int>(manifest.unseen.size()) < n_way) {
    throw SamplingError("test sampling: fewer unseen classes than n_way");
  }
  std::vector<int> unseen = manifest.unseen;
  std::sort(unseen.begin(), unseen.end());
  const std::vector<std::vector<int>> combos = combinations(unseen, n_way);

  std::vector<EpisodePlan> plans;
  plans.reserve(combos.size() * episodes_per_combination);
  for (std::size_t ci = 0; ci < combos.size(); ++ci) {
    for (int e = 0; e < episodes_per_combination; ++e) {
      const std::uint64_t episode_seed =
          mix_seed(mix_seed(seed, ci), static_cast<std::uint64_t>(e));
      plans.push_back(plan_episode(manifest, combos[ci], k_shot, queries, episode_seed));
    }
  }
  return plans;
}

EpisodePlan sample_train_episode_plan(const SplitManifest& manifest, int n_way,
                                      int k_shot, int queries, std::uint64_t seed,
                                      long long iteration) {
  check_sampling_args(n_way, k_shot, queries);
  if (static_cast<int>(manifest.seen.size()) < n_way) {
    throw SamplingError("train sampling: fewer seen classes than n_way");
  }
  const std::uint64_t episode_seed =
      mix_seed(mix_seed(seed, 0x7e57), static_cast<std::uint64_t>(iteration));
  std::vector<int> pool = manifest.seen;
  std::sort(pool.begin(), pool.end());
  Rng rng(mix_seed(episode_seed, 0xc0b));
  rng.shuffle(pool);
  std::vector<int> targets(pool.begin(), pool.begin() + n_way);
  return plan_episode(manifest, targets, k_shot, queries, episode_seed);
}

namespace {

PointCloud resample_to(const PointCloud& cloud, int m_points, Rng& rng) {
  const int p = static_cast<int>(cloud.size());
  std::vector<int> pick(m_points);
  if (p >= m_points) {
    std::vector<int> order(p);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::copy(order.begin(), order.begin() + m_points, pick.begin());
  } else {
    for (int i = 0; i < m_points; ++i) {
      pick[i] = static_cast<int>(rng.below(static_cast<std::uint64_t>(p)));
    }
  }
  PointCloud out;
  out.coords.resize(m_points, 3);
  out.colors.resize(m_points, 3);
  if (cloud.has_labels()) out.labels.resize(m_points);
  for (int i = 0; i < m_points; ++i) {
    out.coords.row(i) = cloud.coords.row(pick[i]);
    out.colors.row(i) = cloud.colors.row(pick[i]);
    if (cloud.has_labels()) out.labels[i] = cloud.labels[pick[i]];
  }
  return out;
}

}  // namespace

Episode materialize_episode(const EpisodePlan& plan, int m_points) {
  if (m_points < 1) throw InvalidArgument("materialize_episode: m_points must be >= 1");
  Episode raw;
  raw.target_classes = plan.target_classes;
  raw.n_way = static_cast<int>(plan.target_classes.size());
  Rng rng(plan.resample_seed);
  raw.support.resize(plan.support.size());
  for (std::size_t n = 0; n < plan.support.size(); ++n) {
    for (const auto& path : plan.support[n]) {
      raw.support[n].push_back(resample_to(read_block(path), m_points, rng));
    }
  }
  for (const auto& path : plan.query) {
    raw.query.push_back(resample_to(read_block(path), m_points, rng));
  }
  return remap_episode_labels(raw);
}

// --- synthetic scenes ----------------------------------------------------------

PointCloud synth_scene(const std::vector<ClusterSpec>& clusters, double noise_sigma,
                       std::uint64_t seed) {
  long long total = 0;
  for (const ClusterSpec& c : clusters) total += std::max(c.count, 0);
  if (total < 1) throw InvalidArgument("synth_scene: no points requested");
  PointCloud cloud;
  cloud.coords.resize(total, 3);
  cloud.colors.resize(total, 3);
  cloud.labels.resize(total);
  Rng rng(seed);
  Eigen::Index row = 0;
  for (const ClusterSpec& c : clusters) {
    for (int i = 0; i < c.count; ++i, ++row) {
      for (int a = 0; a < 3; ++a) {
        cloud.coords(row, a) = c.center[a] + noise_sigma * c.extent[a] * rng.normal();
      }
      cloud.colors.row(row) = c.color;
      cloud.labels[row] = c.label;
    }
  }
  validate(cloud);
  return cloud;
}

namespace {

/// Deterministic well-separated layout: corners of a cube with edge
/// `separation`, then a second shifted shell for up to 16 clusters.
Eigen::RowVector3d fixed_center(int index, double separation) {
  const int base = index % 8;
  const int shell = index / 8;
  Eigen::RowVector3d p(static_cast<double>(base & 1), static_cast<double>((base >> 1) & 1),
                       static_cast<double>((base >> 2) & 1));
  return separation * p + shell * Eigen::RowVector3d(0.5, 0.5, 0.5) * separation;
}

std::vector<Eigen::RowVector3d> random_centers(int count, double separation, Rng& rng) {
  std::vector<Eigen::RowVector3d> centers;
  centers.reserve(count);
  const double span = std::max(1.0, separation * std::cbrt(static_cast<double>(count)));
  for (int i = 0; i < count; ++i) {
    Eigen::RowVector3d best;
    double best_min = -1.0;
    for (int attempt = 0; attempt < 200; ++attempt) {
      Eigen::RowVector3d cand(rng.uniform() * span, rng.uniform() * span,
                              rng.uniform() * span);
      double min_d = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) min_d = std::min(min_d, (cand - c).norm());
      if (min_d >= separation) {
        best = cand;
        best_min = min_d;
        break;
      }
      if (min_d > best_min) {
        best = cand;
        best_min = min_d;
      }
    }
    centers.push_back(best);
  }
  return centers;
}

}  // namespace

SplitManifest generate_synth_dataset(const SynthDatasetSpec& spec,
                                     const std::filesystem::path& out_dir) {
  if (spec.classes.empty()) throw InvalidArgument("synth dataset: no classes");
  if (spec.blocks < 1) throw InvalidArgument("synth dataset: blocks must be >= 1");
  std::filesystem::create_directories(out_dir / "blocks");
  const bool shifted =
      spec.query_color_shift.norm() > 0.0 || spec.query_color_shift_random > 0.0;
  if (shifted) std::filesystem::create_directories(out_dir / "qblocks");

  // Which class clusters each emitted block contains.
  std::vector<std::vector<std::size_t>> contents;
  if (spec.all_classes_per_block) {
    std::vector<std::size_t> all(spec.classes.size());
    std::iota(all.begin(), all.end(), 0);
    contents.assign(spec.blocks, all);
  } else {
    for (std::size_t ci = 0; ci < spec.classes.size(); ++ci) {
      for (int b = 0; b < spec.blocks; ++b) contents.push_back({ci});
    }
  }

  std::vector<std::filesystem::path> support_paths, query_paths;
  for (std::size_t b = 0; b < contents.size(); ++b) {
    const auto& members = contents[b];
    const int cluster_count = static_cast<int>(members.size()) + 1;
    Rng layout_rng(mix_seed(spec.seed, 0xb10c + static_cast<std::uint64_t>(b)));
    std::vector<Eigen::RowVector3d> centers;
    if (spec.fixed_placement) {
      for (int i = 0; i < cluster_count; ++i) {
        centers.push_back(fixed_center(i, spec.separation));
      }
    } else {
      centers = random_centers(cluster_count, spec.separation, layout_rng);
    }

    auto make_clusters = [&](const Eigen::RowVector3d& shift) {
      std::vector<ClusterSpec> clusters;
      for (std::size_t i = 0; i < members.size(); ++i) {
        ClusterSpec c;
        c.center = centers[i];
        c.extent = Eigen::RowVector3d::Constant(spec.extent);
        c.color = (spec.classes[members[i]].color + shift).cwiseMax(0.0).cwiseMin(1.0);
        c.count = spec.points_per_cluster;
        c.label = spec.classes[members[i]].id;
        clusters.push_back(c);
      }
      ClusterSpec bg;
      bg.center = centers.back();
      bg.extent = Eigen::RowVector3d::Constant(spec.extent);
      bg.color = (spec.background_color + shift).cwiseMax(0.0).cwiseMin(1.0);
      bg.count = spec.points_per_cluster;
      bg.label = spec.background_label;
      clusters.push_back(bg);
      return clusters;
    };

    char name[64];
    std::snprintf(name, sizeof(name), "block_%04zu.pcb", b);
    const auto support_path = out_dir / "blocks" / name;
    write_block(support_path,
                synth_scene(make_clusters(Eigen::RowVector3d::Zero()), spec.noise,
                            mix_seed(spec.seed, 0x5ce0 + 2ull * b)));
    support_paths.push_back(support_path);
    if (shifted) {
      Eigen::RowVector3d shift = spec.query_color_shift;
      Rng shift_rng(mix_seed(spec.seed, 0x5f7 + static_cast<std::uint64_t>(b)));
      if (spec.query_color_shift_signed && shift_rng.uniform() < 0.5) shift = -shift;
      if (spec.query_color_shift_random > 0.0) {
        for (int a = 0; a < 3; ++a) {
          shift[a] += shift_rng.uniform_in(-spec.query_color_shift_random,
                                           spec.query_color_shift_random);
        }
      }
      std::snprintf(name, sizeof(name), "qblock_%04zu.pcb", b);
      const auto query_path = out_dir / "qblocks" / name;
      write_block(query_path, synth_scene(make_clusters(shift), spec.noise,
                                          mix_seed(spec.seed, 0x5ce0 + 2ull * b + 1)));
      query_paths.push_back(query_path);
    }
  }

  SplitManifest manifest;
  for (const SynthClass& c : spec.classes) manifest.class_names[c.id] = c.name;
  manifest.class_names[spec.background_label] = spec.background_name;
  manifest.seen = spec.seen;
  manifest.unseen = spec.unseen;
  manifest.presence_threshold = spec.presence_threshold;
  manifest.blocks = index_blocks(support_paths, spec.presence_threshold);
  manifest.blocks.erase(spec.background_label);
  if (shifted) {
    manifest.query_blocks = index_blocks(query_paths, spec.presence_threshold);
    manifest.query_blocks.erase(spec.background_label);
  }
  write_manifest(out_dir / "manifest.txt", manifest);
  return manifest;
}

SynthDatasetSpec parse_synth_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  SynthDatasetSpec spec;
  std::string line;
  long long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::vector<std::string> tok = tokenize(line);
    if (tok.empty()) continue;
    const std::string context = path.string() + ":" + std::to_string(line_no);
    auto want = [&](std::size_t n) {
      if (tok.size() != n + 1) {
        throw ParseError(context + ": '" + tok[0] + "' wants " + std::to_string(n) +
                         " value(s)");
      }
    };
    if (tok[0] == "seed") {
      want(1);
      spec.seed = static_cast<std::uint64_t>(parse_int(tok[1], context));
    } else if (tok[0] == "blocks") {
      want(1);
      spec.blocks = parse_int(tok[1], context);
    } else if (tok[0] == "points-per-cluster") {
      want(1);
      spec.points_per_cluster = parse_int(tok[1], context);
    } else if (tok[0] == "extent") {
      want(1);
      spec.extent = parse_double(tok[1], context);
    } else if (tok[0] == "separation") {
      want(1);
      spec.separation = parse_double(tok[1], context);
    } else if (tok[0] == "noise") {
      want(1);
      spec.noise = parse_double(tok[1], context);
    } else if (tok[0] == "placement") {
      want(1);
      if (tok[1] == "fixed") spec.fixed_placement = true;
      else if (tok[1] == "random") spec.fixed_placement = false;
      else throw ParseError(context + ": placement must be fixed or random");
    } else if (tok[0] == "block-content") {
      want(1);
      if (tok[1] == "all") spec.all_classes_per_block = true;
      else if (tok[1] == "single") spec.all_classes_per_block = false;
      else throw ParseError(context + ": block-content must be all or single");
    } else if (tok[0] == "threshold") {
      want(1);
      spec.presence_threshold = parse_int(tok[1], context);
    } else if (tok[0] == "background-label") {
      want(1);
      spec.background_label = parse_int(tok[1], context);
    } else if (tok[0] == "background-color") {
      want(3);
      spec.background_color << parse_double(tok[1], context),
          parse_double(tok[2], context), parse_double(tok[3], context);
    } else if (tok[0] == "color-shift") {
      want(3);
      spec.query_color_shift << parse_double(tok[1], context),
          parse_double(tok[2], context), parse_double(tok[3], context);
    } else if (tok[0] == "color-shift-random") {
      want(1);
      spec.query_color_shift_random = parse_double(tok[1], context);
    } else if (tok[0] == "color-shift-signed") {
      want(1);
      spec.query_color_shift_signed = parse_int(tok[1], context) != 0;
    } else if (tok[0] == "class") {
      want(5);
      SynthClass c;
      c.id = parse_int(tok[1], context);
      c.name = tok[2];
      c.color << parse_double(tok[3], context), parse_double(tok[4], context),
          parse_double(tok[5], context);
      spec.classes.push_back(c);
    } else if (tok[0] == "seen" || tok[0] == "unseen") {
      auto& dst = tok[0] == "seen" ? spec.seen : spec.unseen;
      for (std::size_t i = 1; i < tok.size(); ++i) {
        dst.push_back(parse_int(tok[i], context));
      }
    } else {
      throw ParseError(context + ": unknown key '" + tok[0] + "'");
    }
  }
  if (spec.classes.empty()) throw ParseError(path.string() + ": no classes defined");
  return spec;
}

}  // namespace pcfs
