#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "pcfs/core_types.hpp"
#include "pcfs/encoder.hpp"
#include "pcfs/episodes_io.hpp"
#include "pcfs/eval.hpp"
#include "pcfs/fewshot_head.hpp"
#include "pcfs/quest.hpp"

namespace pcfs {

/// Outcome of running one episode through the segmentation pipeline.
struct EpisodeOutcome {
  std::vector<std::vector<std::int32_t>> pred;  // per query, episode space
  MetricAccumulator acc;                        // empty when truth is absent
  double episode_miou = -1.0;                   // -1 when undefined
  double kl_raw = -1.0;       // prototype-vs-query divergence before adjustment
  double kl_adjusted = -1.0;  // and after (attention mode only)
};

/// Runs one remapped episode. With params == nullptr this is the training-free
/// path (raw encoder features, plain prototypes); otherwise features pass
/// through the shared FC stack and prototypes through the attention module.
EpisodeOutcome run_episode(const Episode& episode, const EncoderConfig& enc_cfg,
                           const HeadConfig& head_cfg,
                           const QuestParameters* params = nullptr,
                           const QuestConfig* quest_cfg = nullptr,
                           bool want_kl = false);

struct EvaluationRun {
  MetricAccumulator acc;
  std::vector<double> episode_mious;  // undefined episodes recorded as -1
  std::vector<double> kl_raw, kl_adjusted;
  long long episodes = 0;
};

/// Materializes and evaluates every plan, optionally across worker threads.
/// Results are independent of the worker count.
EvaluationRun run_evaluation(const std::vector<EpisodePlan>& plans, int m_points,
                             const EncoderConfig& enc_cfg, const HeadConfig& head_cfg,
                             const QuestParameters* params = nullptr,
                             const QuestConfig* quest_cfg = nullptr,
                             bool want_kl = false, int threads = 1);

}  // namespace pcfs
