#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "pcfs/checkpoint.hpp"
#include "pcfs/encoder.hpp"
#include "pcfs/episodes_io.hpp"
#include "pcfs/eval.hpp"
#include "pcfs/pipeline.hpp"
#include "pcfs/quest.hpp"

namespace fs = std::filesystem;
using namespace pcfs;

namespace {

struct CliOptions {
  EncoderConfig enc;
  HeadConfig head;
  QuestConfig quest;
  std::uint64_t seed = 0;
  int threads = 1;
  double freq_param = -1.0;  // <0 means: use the distribution default
  std::string freq_dist = "gaussian";
  std::string pe_mode = "add_multiply";
  std::string combine = "mean";
  bool no_color = false;
  bool no_normalize = false;
  double delta = 0.1;
};

int default_threads() {
  if (const char* env = std::getenv("PCFS_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  return 1;
}

void add_common_options(CLI::App& app, CliOptions& opt) {
  app.add_option("--seed", opt.seed, "random seed (printed in every report)");
  app.add_option("--threads", opt.threads, "worker threads for evaluation")
      ->default_val(default_threads());
  app.add_option("--d", opt.enc.d, "initial embedding frequency count");
  app.add_option("--theta", opt.enc.theta, "log-linear frequency base");
  app.add_option("--delta", opt.delta, "variance of the local Gaussian frequencies");
  app.add_option("--alpha", opt.enc.alpha, "coordinate/color mixing weight");
  app.add_option("--k", opt.enc.k, "neighborhood size");
  app.add_option("--gamma", opt.head.gamma, "similarity activation scale");
  app.add_option("--pe-mode", opt.pe_mode, "none|add|multiply|add_multiply")
      ->check(CLI::IsMember({"none", "add", "multiply", "add_multiply"}));
  app.add_option("--freq-dist", opt.freq_dist,
                 "local frequency distribution: loglinear|gaussian|uniform|laplacian")
      ->check(CLI::IsMember({"loglinear", "gaussian", "uniform", "laplacian"}));
  app.add_option("--freq-param", opt.freq_param,
                 "override the local distribution parameter");
  app.add_flag("--no-color", opt.no_color, "encode coordinates only");
  app.add_flag("--no-normalize-coords", opt.no_normalize,
               "skip per-block min-max coordinate normalization");
  app.add_option("--pool-kernel", opt.quest.pool_kernel, "statistic pooling kernel");
  app.add_option("--pool-stride", opt.quest.pool_stride, "statistic pooling stride");
  app.add_option("--fc-depth", opt.quest.fc_depth, "linear stages in the shared FC");
  app.add_option("--combine", opt.combine, "shot combination: mean|sum")
      ->check(CLI::IsMember({"mean", "sum"}));
  app.add_option("--lr", opt.quest.lr, "initial learning rate");
  app.add_option("--weight-decay", opt.quest.weight_decay, "AdamW weight decay");
  app.add_option("--lr-halve-every", opt.quest.lr_halve_every,
                 "iterations between learning-rate halvings");
}

void finalize_options(CliOptions& opt) {
  opt.enc.seed = opt.seed;
  opt.quest.seed = opt.seed;
  opt.enc.use_color = !opt.no_color;
  opt.enc.normalize_coords = !opt.no_normalize;
  opt.quest.combine = opt.combine == "sum" ? ShotCombine::Sum : ShotCombine::Mean;
  if (opt.pe_mode == "none") opt.enc.pe_mode = PeMode::None;
  else if (opt.pe_mode == "add") opt.enc.pe_mode = PeMode::Add;
  else if (opt.pe_mode == "multiply") opt.enc.pe_mode = PeMode::Multiply;
  else opt.enc.pe_mode = PeMode::AddMultiply;

  FrequencySpec spec;
  if (opt.freq_dist == "loglinear") {
    spec = {FreqDistribution::LogLinear, opt.enc.theta};
  } else if (opt.freq_dist == "uniform") {
    spec = {FreqDistribution::Uniform, 0.55};
  } else if (opt.freq_dist == "laplacian") {
    spec = {FreqDistribution::Laplacian, 0.22};
  } else {
    spec = {FreqDistribution::Gaussian, opt.delta};
  }
  if (opt.freq_param >= 0.0) spec.param = opt.freq_param;
  opt.enc.local_freqs = spec;
}

std::string config_summary(const CliOptions& opt) {
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "d=%d theta=%g delta=%g alpha=%g k=%d pe=%s dist=%s color=%s "
                "norm=%s gamma=%g",
                opt.enc.d, opt.enc.theta, opt.enc.local_freqs.param, opt.enc.alpha,
                opt.enc.k, opt.pe_mode.c_str(), opt.freq_dist.c_str(),
                opt.enc.use_color ? "on" : "off",
                opt.enc.normalize_coords ? "on" : "off", opt.head.gamma);
  return buf;
}

int cmd_encode(const CliOptions& opt, const fs::path& input, const fs::path& output) {
  const PointCloud cloud = read_block(input);
  const EncodedCloud encoded = encode(cloud, opt.enc);
  TensorRecord rec;
  rec.name = "features";
  rec.dims = {static_cast<std::uint64_t>(encoded.final.rows()),
              static_cast<std::uint64_t>(encoded.final.cols())};
  rec.data.resize(encoded.final.size());
  for (Eigen::Index r = 0; r < encoded.final.rows(); ++r) {
    for (Eigen::Index c = 0; c < encoded.final.cols(); ++c) {
      rec.data[r * encoded.final.cols() + c] = encoded.final(r, c);
    }
  }
  write_record_file(output, {rec});
  std::printf("encoded %lld points x %lld channels -> %s\n",
              static_cast<long long>(encoded.final.rows()),
              static_cast<long long>(encoded.final.cols()), output.string().c_str());
  return 0;
}

int cmd_segment(const CliOptions& opt, const std::vector<std::string>& support_args,
                const fs::path& query_path, const fs::path& output) {
  Episode raw;
  std::map<int, std::vector<fs::path>> by_class;
  std::vector<int> order;
  for (const std::string& arg : support_args) {
    const auto eq = arg.find('=');
    if (eq == std::string::npos) {
      throw InvalidArgument("--support wants <class_id>=<path>, got " + arg);
    }
    const int id = std::stoi(arg.substr(0, eq));
    if (!by_class.count(id)) order.push_back(id);
    by_class[id].push_back(arg.substr(eq + 1));
  }
  if (order.empty()) throw InvalidArgument("segment: no support clouds given");
  raw.target_classes = order;
  for (int id : order) {
    std::vector<PointCloud> shots;
    for (const auto& path : by_class[id]) shots.push_back(read_block(path));
    raw.support.push_back(std::move(shots));
  }
  raw.query.push_back(read_block(query_path));

  const Episode episode = remap_episode_labels(raw);
  const EpisodeOutcome outcome = run_episode(episode, opt.enc, opt.head);

  // Back to dataset ids; background has no dataset class and maps to -1.
  std::vector<std::int32_t> labels(outcome.pred[0].size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int e = outcome.pred[0][i];
    labels[i] = e == 0 ? -1 : episode.target_classes[e - 1];
  }
  write_predictions(output, raw.query[0], labels);
  std::printf("segmented %zu points -> %s\n", labels.size(), output.string().c_str());
  return 0;
}

int cmd_train(const CliOptions& opt, const fs::path& manifest_path, int n_way,
              int k_shot, int queries, int m_points, int iters,
              const fs::path& checkpoint_out, const fs::path& history_out) {
  const SplitManifest manifest = read_manifest(manifest_path);
  const int q = queries > 0 ? queries : n_way;
  auto episode_at = [&](int iteration) {
    const EpisodePlan plan =
        sample_train_episode_plan(manifest, n_way, k_shot, q, opt.seed, iteration);
    return materialize_episode(plan, m_points);
  };
  const TrainResult result =
      train(episode_at, opt.enc, opt.head, opt.quest, iters, m_points);
  save_checkpoint(checkpoint_out, result.params);
  if (!history_out.empty()) {
    std::ofstream out(history_out, std::ios::trunc);
    if (!out) throw IoError("cannot open " + history_out.string() + " for writing");
    out << "iteration,loss\n";
    char buf[64];
    for (std::size_t i = 0; i < result.history.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%zu,%.9g\n", i, result.history[i]);
      out << buf;
    }
  }
  std::printf("trained %d iterations (seed %llu), checkpoint -> %s\n", iters,
              static_cast<unsigned long long>(opt.seed),
              checkpoint_out.string().c_str());
  if (!result.history.empty()) {
    std::printf("first loss %.6f, last loss %.6f\n", result.history.front(),
                result.history.back());
  }
  return 0;
}

int cmd_eval(const CliOptions& opt, const fs::path& manifest_path, int n_way, int k_shot,
             int queries, int episodes_per_comb, int m_points,
             const fs::path& checkpoint_path, const fs::path& report_path,
             const fs::path& csv_path, const fs::path& episode_log,
             bool per_episode_miou) {
  const SplitManifest manifest = read_manifest(manifest_path);
  const auto plans = sample_test_episode_plans(manifest, n_way, k_shot, queries,
                                               episodes_per_comb, opt.seed);
  QuestParameters params;
  const bool with_quest = !checkpoint_path.empty();
  if (with_quest) {
    params = load_checkpoint(checkpoint_path);
    if (params.dim != opt.enc.feature_dim()) {
      throw QuestError("checkpoint feature dimension " + std::to_string(params.dim) +
                       " does not match encoder dimension " +
                       std::to_string(opt.enc.feature_dim()));
    }
    if (params.stats != opt.quest.pooled_rows(m_points)) {
      throw QuestError("checkpoint was trained for a different point count");
    }
  }
  const EvaluationRun run = run_evaluation(
      plans, m_points, opt.enc, opt.head, with_quest ? &params : nullptr,
      with_quest ? &opt.quest : nullptr, /*want_kl=*/with_quest && !episode_log.empty(),
      opt.threads);

  EvalReport report;
  report.seed = opt.seed;
  report.n_way = n_way;
  report.k_shot = k_shot;
  report.queries = queries;
  report.points = m_points;
  report.episodes = run.episodes;
  report.config_summary = config_summary(opt);
  report.checkpoint = checkpoint_path.string();
  report.class_names = manifest.class_names;
  report.result = miou(run.acc);
  if (per_episode_miou) {
    double sum = 0.0;
    long long defined = 0;
    for (double v : run.episode_mious) {
      if (v >= 0.0) {
        sum += v;
        ++defined;
      }
    }
    report.per_episode_miou = defined > 0 ? sum / defined : -1.0;
  }
  if (!report_path.empty()) write_report(report_path, report);
  if (!csv_path.empty()) write_iou_csv(csv_path, report.result);
  if (!episode_log.empty()) {
    std::ofstream out(episode_log, std::ios::trunc);
    if (!out) throw IoError("cannot open " + episode_log.string() + " for writing");
    out << "episode,miou,kl_raw,kl_adjusted\n";
    char buf[128];
    for (std::size_t i = 0; i < run.episode_mious.size(); ++i) {
      const double kl_raw = i < run.kl_raw.size() ? run.kl_raw[i] : -1.0;
      const double kl_adj = i < run.kl_adjusted.size() ? run.kl_adjusted[i] : -1.0;
      std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g\n", i, run.episode_mious[i],
                    kl_raw, kl_adj);
      out << buf;
    }
  }
  std::printf("episodes: %lld\nmIoU: %.6f\n", run.episodes, report.result.miou);
  for (const ClassIoU& c : report.result.per_class) {
    std::printf("class %d iou %.6f\n", c.class_id, c.iou);
  }
  return 0;
}

int cmd_synth(const fs::path& spec_path, const fs::path& out_dir) {
  const SynthDatasetSpec spec = parse_synth_spec(spec_path);
  const SplitManifest manifest = generate_synth_dataset(spec, out_dir);
  long long blocks = 0;
  for (const auto& [id, paths] : manifest.blocks) blocks += paths.size();
  std::printf("wrote %d blocks (%lld class index entries) -> %s\n", spec.blocks, blocks,
              (out_dir / "manifest.txt").string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"training-free few-shot point cloud segmentation"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config");

  CliOptions opt;
  add_common_options(app, opt);

  // encode
  auto* encode_cmd = app.add_subcommand("encode", "encode one block to a feature dump");
  std::string encode_in, encode_out;
  encode_cmd->add_option("--input", encode_in, "block file")->required();
  encode_cmd->add_option("--output", encode_out, "feature record file")->required();

  // segment
  auto* segment_cmd =
      app.add_subcommand("segment", "training-free segmentation of one query cloud");
  std::vector<std::string> support_args;
  std::string query_arg, segment_out;
  segment_cmd->add_option("--support", support_args, "<class_id>=<path>, repeatable")
      ->required();
  segment_cmd->add_option("--query", query_arg, "query block")->required();
  segment_cmd->add_option("--output", segment_out, "predicted labels (text points)")
      ->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "episodic training of the attention head");
  std::string train_manifest, train_ckpt, train_history;
  int train_n = 2, train_k = 1, train_q = 0, train_m = 2048, train_iters = 100;
  train_cmd->add_option("--manifest", train_manifest)->required();
  train_cmd->add_option("--n", train_n, "ways");
  train_cmd->add_option("--k", train_k, "shots");
  train_cmd->add_option("--q", train_q, "queries per episode (default: n)");
  train_cmd->add_option("--m", train_m, "points per cloud");
  train_cmd->add_option("--iters", train_iters, "training iterations");
  train_cmd->add_option("--out", train_ckpt, "checkpoint path")->required();
  train_cmd->add_option("--history", train_history, "per-iteration loss csv");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "episodic evaluation, mIoU report");
  std::string eval_manifest, eval_ckpt, eval_report, eval_csv, eval_log;
  int eval_n = 2, eval_k = 1, eval_q = 1, eval_episodes = 100, eval_m = 2048;
  bool eval_per_episode = false;
  eval_cmd->add_option("--manifest", eval_manifest)->required();
  eval_cmd->add_option("--n", eval_n, "ways");
  eval_cmd->add_option("--k", eval_k, "shots");
  eval_cmd->add_option("--q", eval_q, "queries per episode");
  eval_cmd->add_option("--episodes", eval_episodes, "episodes per class combination");
  eval_cmd->add_option("--m", eval_m, "points per cloud");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "trained attention checkpoint");
  eval_cmd->add_option("--report", eval_report, "text report path");
  eval_cmd->add_option("--csv", eval_csv, "per-class table path");
  eval_cmd->add_option("--episode-log", eval_log, "per-episode csv path");
  eval_cmd->add_flag("--per-episode-miou", eval_per_episode,
                     "also report the per-episode mIoU average");

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic block dataset");
  std::string synth_spec, synth_out;
  synth_cmd->add_option("--spec", synth_spec, "scene spec file")->required();
  synth_cmd->add_option("--out", synth_out, "output directory")->required();

  try {
    app.parse(argc, argv);
    finalize_options(opt);
    if (*encode_cmd) return cmd_encode(opt, encode_in, encode_out);
    if (*segment_cmd) return cmd_segment(opt, support_args, query_arg, segment_out);
    if (*train_cmd) {
      return cmd_train(opt, train_manifest, train_n, train_k, train_q, train_m,
                       train_iters, train_ckpt, train_history);
    }
    if (*eval_cmd) {
      return cmd_eval(opt, eval_manifest, eval_n, eval_k, eval_q, eval_episodes, eval_m,
                      eval_ckpt, eval_report, eval_csv, eval_log, eval_per_episode);
    }
    if (*synth_cmd) return cmd_synth(synth_spec, synth_out);
    std::fprintf(stderr, "no command given\n");
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const TrainingError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 1;
  }
}
