#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "pcfs/core_types.hpp"
#include "pcfs/encoder.hpp"
#include "pcfs/fewshot_head.hpp"

namespace pcfs {

enum class ShotCombine { Sum, Mean };

struct QuestConfig {
  int pool_kernel = 32;
  int pool_stride = 32;
  int fc_depth = 2;  // number of linear stages after the input normalization
  ShotCombine combine = ShotCombine::Mean;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-2;
  double adam_eps = 1e-8;
  int lr_halve_every = 7000;
  std::uint64_t seed = 0;

  int pooled_rows(int points) const {
    return (points + pool_stride - 1) / pool_stride;
  }
};

/// All learnable tensors. fc stage 0 is normalization only; stages 1..depth
/// each have a D x D linear weight followed by normalization. w_q and w_k act
/// on the pooled statistics axis (M' x M'), w_v and w_out on channels (D x D).
struct QuestTensors {
  std::vector<Eigen::MatrixXd> fc_weights;    // fc_depth entries, D x D
  std::vector<Eigen::VectorXd> norm_scale;    // fc_depth+1 entries, D
  std::vector<Eigen::VectorXd> norm_shift;    // fc_depth+1 entries, D
  Eigen::MatrixXd w_q, w_k;                   // M' x M'
  Eigen::MatrixXd w_v, w_out;                 // D x D

  void set_zero();
};

struct NamedTensor {
  std::string name;
  double* data;
  std::vector<std::uint64_t> dims;
  std::size_t size;
};

/// Flat views over every tensor, in a fixed order shared by the optimizer,
/// the checkpoint writer and the gradient checker.
std::vector<NamedTensor> named_tensors(QuestTensors& t);

struct QuestParameters {
  QuestTensors values;
  QuestTensors adam_m, adam_v;  // AdamW moment buffers
  long long adam_step = 0;
  int dim = 0;        // D
  int stats = 0;      // M'
  int fc_depth = 0;
};

/// Seeded init: w_out starts at zero so the adjusted prototypes coincide with
/// the plain prototypes at step 0; projections use uniform(+-1/sqrt(fan_in)).
QuestParameters init_quest_parameters(int dim, int stats, const QuestConfig& cfg);

// --- forward pieces -------------------------------------------------------

struct FcStage {
  Eigen::MatrixXd input;    // stage input (pre linear for stages >= 1)
  Eigen::MatrixXd xhat;     // normalized pre scale/shift
  Eigen::VectorXd inv_std;  // per channel
  Eigen::MatrixXd bn_out;   // pre ReLU
};

struct FcCache {
  std::vector<FcStage> stages;
};

/// Shared FC stack: normalize-over-points + ReLU, then fc_depth blocks of
/// linear + normalize + ReLU. Normalization statistics are recomputed from
/// the current input on every call (no running averages).
Eigen::MatrixXd fc_forward(const Eigen::MatrixXd& feats, const QuestTensors& params,
                           int fc_depth, FcCache* cache = nullptr);

/// Accumulates parameter gradients into grads; returns the input gradient.
Eigen::MatrixXd fc_backward(const FcCache& cache, const Eigen::MatrixXd& grad_out,
                            const QuestTensors& params, int fc_depth,
                            QuestTensors& grads);

/// Windowed per-channel max over the point axis. Window w covers rows
/// [w*stride, w*stride+kernel); the last window may be partial. With
/// kernel == stride the output has ceil(P/stride) rows. argmax (optional)
/// records the winning source row per output cell, first row wins ties.
Eigen::MatrixXd local_max_pool(const Eigen::MatrixXd& feats, int kernel, int stride,
                               Eigen::MatrixXi* argmax = nullptr);

struct QuestForwardCache {
  Eigen::MatrixXd v;                                      // (N+1) x D
  std::vector<Eigen::MatrixXd> q_mat;                     // [q] D x M'
  std::vector<std::vector<Eigen::MatrixXd>> k_mat;        // [n][k] D x M'
  std::vector<std::vector<std::vector<Eigen::MatrixXd>>> attn;  // [q][n][k] D x D
  std::vector<std::vector<std::vector<Eigen::VectorXd>>> av;    // [q][n][k] attn * v_n
};

/// Channel-as-token cross attention that adjusts each prototype toward the
/// query feature distribution. support_pooled is [class 0..N][shot] of
/// M' x D pooled statistics, query_pooled is [q] of M' x D. Returns one
/// adjusted (N+1) x D prototype matrix per query.
std::vector<Eigen::MatrixXd> quest_forward(
    const std::vector<std::vector<Eigen::MatrixXd>>& support_pooled,
    const std::vector<Eigen::MatrixXd>& query_pooled,
    const PrototypeSet& protos, const QuestTensors& params,
    const QuestConfig& cfg, QuestForwardCache* cache = nullptr);

struct QuestBackwardResult {
  std::vector<std::vector<Eigen::MatrixXd>> d_support_pooled;  // [n][k] M' x D
  std::vector<Eigen::MatrixXd> d_query_pooled;                 // [q] M' x D
  Eigen::MatrixXd d_protos;                                    // (N+1) x D
};

QuestBackwardResult quest_backward(
    const QuestForwardCache& cache,
    const std::vector<std::vector<Eigen::MatrixXd>>& support_pooled,
    const std::vector<Eigen::MatrixXd>& query_pooled,
    const PrototypeSet& protos, const QuestTensors& params,
    const QuestConfig& cfg, const std::vector<Eigen::MatrixXd>& d_adjusted,
    QuestTensors& grads);

// --- episode-level loss ----------------------------------------------------

/// Encoder outputs plus episode-space labels, the unit the trainable head
/// consumes. Feature matrices are M x D.
struct QuestBatch {
  std::vector<std::vector<FeatureMatrix>> support_feats;              // N x K
  std::vector<std::vector<std::vector<std::int32_t>>> support_labels; // N x K x M
  std::vector<FeatureMatrix> query_feats;                             // Q
  std::vector<std::vector<std::int32_t>> query_labels;                // Q x M
};

struct LossResult {
  double loss = 0.0;
  QuestTensors grads;  // empty unless gradients were requested
};

/// Forward: shared FC on every cloud, prototypes from the transformed support
/// features, pooled statistics, cross attention, cosine scores, softmax
/// cross-entropy over gamma-scaled scores averaged across labeled query
/// points. Backward (optional): exact reverse-mode gradients for every
/// parameter tensor; the features themselves are frozen inputs.
LossResult quest_episode_loss(const QuestBatch& batch, const QuestTensors& params,
                              const QuestConfig& cfg, double gamma,
                              bool want_grads);

/// Convenience wrapper: encodes the episode with the frozen encoder and
/// delegates to quest_episode_loss. Query clouds must be labeled.
LossResult episode_loss(const Episode& episode, const EncoderConfig& enc_cfg,
                        const HeadConfig& head_cfg, const QuestParameters& params,
                        const QuestConfig& cfg, bool want_grads = true);

/// One decoupled-weight-decay Adam update over every tensor. The learning
/// rate is cfg.lr halved every cfg.lr_halve_every steps.
void adamw_step(QuestParameters& params, const QuestTensors& grads,
                const QuestConfig& cfg);

struct TrainResult {
  QuestParameters params;
  std::vector<double> history;  // per-iteration loss
};

/// Episodic training: one AdamW update per episode drawn from episode_at(i).
/// Aborts with TrainingError on a non-finite loss.
TrainResult train(const std::function<Episode(int)>& episode_at,
                  const EncoderConfig& enc_cfg, const HeadConfig& head_cfg,
                  const QuestConfig& cfg, int max_iters, int expected_points);

// --- checkpoints -----------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const QuestParameters& params);

/// Throws QuestError naming the first missing, unknown or misshapen record.
QuestParameters load_checkpoint(const std::filesystem::path& path);

/// Builds the exact (N+1) x K pooled support tensor the attention consumes:
/// rows 1..N are the per-class pooled clouds, row 0 is their per-shot mean.
std::vector<std::vector<Eigen::MatrixXd>> assemble_support_pooled(
    const std::vector<std::vector<Eigen::MatrixXd>>& per_class_pooled);

}  // namespace pcfs
