#include "pcfs/pipeline.hpp"

#include <atomic>
#include <mutex>
#include <thread>

namespace pcfs {

namespace {

/// The head compares directions, so the divergence diagnostic does too.
Eigen::MatrixXd l2_rows(const Eigen::MatrixXd& m) {
  Eigen::MatrixXd out = m;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double n = out.row(r).norm();
    if (n > 0.0) out.row(r) /= n;
  }
  return out;
}

}  // namespace

EpisodeOutcome run_episode(const Episode& episode, const EncoderConfig& enc_cfg,
                           const HeadConfig& head_cfg, const QuestParameters* params,
                           const QuestConfig* quest_cfg, bool want_kl) {
  const int n_way = static_cast<int>(episode.target_classes.size());
  std::vector<std::vector<FeatureMatrix>> support_feats(episode.support.size());
  std::vector<std::vector<std::vector<std::int32_t>>> support_labels(
      episode.support.size());
  for (std::size_t n = 0; n < episode.support.size(); ++n) {
    for (const PointCloud& cloud : episode.support[n]) {
      support_feats[n].push_back(encode(cloud, enc_cfg).final);
      support_labels[n].push_back(cloud.labels);
    }
  }
  std::vector<FeatureMatrix> query_feats;
  for (const PointCloud& cloud : episode.query) {
    query_feats.push_back(encode(cloud, enc_cfg).final);
  }

  EpisodeOutcome out;
  if (params != nullptr) {
    if (quest_cfg == nullptr) {
      throw QuestError("run_episode: parameters given without a config");
    }
    // Trainable path: shared FC on every cloud, attention-adjusted prototypes.
    for (auto& shots : support_feats) {
      for (auto& f : shots) f = fc_forward(f, params->values, params->fc_depth);
    }
    std::vector<std::vector<Eigen::MatrixXd>> pooled_class(support_feats.size());
    for (std::size_t n = 0; n < support_feats.size(); ++n) {
      for (const auto& f : support_feats[n]) {
        pooled_class[n].push_back(
            local_max_pool(f, quest_cfg->pool_kernel, quest_cfg->pool_stride));
      }
    }
    std::vector<Eigen::MatrixXd> query_pooled;
    for (auto& f : query_feats) {
      f = fc_forward(f, params->values, params->fc_depth);
      query_pooled.push_back(
          local_max_pool(f, quest_cfg->pool_kernel, quest_cfg->pool_stride));
    }
    const PrototypeSet protos = compute_prototypes(support_feats, support_labels, n_way);
    const auto support_pooled = assemble_support_pooled(pooled_class);
    const auto adjusted = quest_forward(support_pooled, query_pooled, protos,
                                        params->values, *quest_cfg);
    double kl_raw_sum = 0.0, kl_adj_sum = 0.0;
    for (std::size_t q = 0; q < query_feats.size(); ++q) {
      PrototypeSet adjusted_set = protos;
      adjusted_set.prototypes = adjusted[q];
      const Eigen::MatrixXd scores = cosine_scores(query_feats[q], adjusted_set);
      out.pred.push_back(predict(scores, head_cfg).labels);
      if (want_kl) {
        const Eigen::MatrixXd query_dirs = l2_rows(query_feats[q]);
        kl_raw_sum += kl_divergence_diagnostic(l2_rows(protos.prototypes), query_dirs);
        kl_adj_sum += kl_divergence_diagnostic(l2_rows(adjusted[q]), query_dirs);
      }
    }
    if (want_kl) {
      out.kl_raw = kl_raw_sum / static_cast<double>(query_feats.size());
      out.kl_adjusted = kl_adj_sum / static_cast<double>(query_feats.size());
    }
  } else {
    // Training-free path: raw encoder features, plain prototypes.
    const PrototypeSet protos = compute_prototypes(support_feats, support_labels, n_way);
    for (const auto& f : query_feats) {
      const Eigen::MatrixXd scores = cosine_scores(f, protos);
      out.pred.push_back(predict(scores, head_cfg).labels);
    }
  }

  bool any_truth = false;
  for (std::size_t q = 0; q < episode.query.size(); ++q) {
    if (!episode.query[q].has_labels()) continue;
    any_truth = true;
    accumulate(out.acc, out.pred[q], episode.query[q].labels, episode.target_classes);
  }
  if (any_truth) {
    try {
      out.episode_miou = miou(out.acc).miou;
    } catch (const EmptyEvaluation&) {
      out.episode_miou = -1.0;
    }
  }
  return out;
}

EvaluationRun run_evaluation(const std::vector<EpisodePlan>& plans, int m_points,
                             const EncoderConfig& enc_cfg, const HeadConfig& head_cfg,
                             const QuestParameters* params, const QuestConfig* quest_cfg,
                             bool want_kl, int threads) {
  const std::size_t count = plans.size();
  std::vector<EpisodeOutcome> outcomes(count);
  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(count)));

  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto work = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        const Episode episode = materialize_episode(plans[i], m_points);
        outcomes[i] = run_episode(episode, enc_cfg, head_cfg, params, quest_cfg, want_kl);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  EvaluationRun run;
  run.episodes = static_cast<long long>(count);
  for (const EpisodeOutcome& o : outcomes) {
    run.acc.merge(o.acc);
    run.episode_mious.push_back(o.episode_miou);
    if (want_kl) {
      run.kl_raw.push_back(o.kl_raw);
      run.kl_adjusted.push_back(o.kl_adjusted);
    }
  }
  return run;
}

}  // namespace pcfs
