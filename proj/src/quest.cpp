#include "pcfs/quest.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>

#include "pcfs/checkpoint.hpp"
#include "pcfs/rng.hpp"

namespace pcfs {

namespace {

constexpr double kNormEps = 1e-5;

void check_quest_config(const QuestConfig& cfg) {
  if (cfg.pool_kernel < 1 || cfg.pool_stride < 1) {
    throw InvalidArgument("quest: pooling kernel and stride must be >= 1");
  }
  if (cfg.fc_depth < 0) throw InvalidArgument("quest: fc_depth must be >= 0");
}

Eigen::MatrixXd uniform_init(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) {
      m(r, c) = rng.uniform_in(-bound, bound);
    }
  }
  return m;
}

/// Normalize per channel over the points of the current input.
void normalize_points(const Eigen::MatrixXd& x, const Eigen::VectorXd& scale,
                      const Eigen::VectorXd& shift, FcStage& stage) {
  const double p = static_cast<double>(x.rows());
  const Eigen::RowVectorXd mu = x.colwise().mean();
  Eigen::MatrixXd centered = x.rowwise() - mu;
  const Eigen::RowVectorXd var = centered.array().square().colwise().sum() / p;
  stage.inv_std = (var.array() + kNormEps).rsqrt().transpose();
  stage.xhat = centered.array().rowwise() * stage.inv_std.transpose().array();
  stage.bn_out =
      (stage.xhat.array().rowwise() * scale.transpose().array()).rowwise() +
      shift.transpose().array();
}

}  // namespace

void QuestTensors::set_zero() {
  for (auto& w : fc_weights) w.setZero();
  for (auto& s : norm_scale) s.setZero();
  for (auto& s : norm_shift) s.setZero();
  w_q.setZero();
  w_k.setZero();
  w_v.setZero();
  w_out.setZero();
}

std::vector<NamedTensor> named_tensors(QuestTensors& t) {
  std::vector<NamedTensor> out;
  auto add_mat = [&](const std::string& name, Eigen::MatrixXd& m) {
    out.push_back({name, m.data(),
                   {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())},
                   static_cast<std::size_t>(m.size())});
  };
  auto add_vec = [&](const std::string& name, Eigen::VectorXd& v) {
    out.push_back({name, v.data(), {static_cast<std::uint64_t>(v.size())},
                   static_cast<std::size_t>(v.size())});
  };
  for (std::size_t s = 0; s < t.norm_scale.size(); ++s) {
    add_vec("norm." + std::to_string(s) + ".scale", t.norm_scale[s]);
    add_vec("norm." + std::to_string(s) + ".shift", t.norm_shift[s]);
  }
  for (std::size_t s = 0; s < t.fc_weights.size(); ++s) {
    add_mat("fc." + std::to_string(s + 1) + ".weight", t.fc_weights[s]);
  }
  add_mat("wq", t.w_q);
  add_mat("wk", t.w_k);
  add_mat("wv", t.w_v);
  add_mat("w", t.w_out);
  return out;
}

namespace {

QuestTensors make_tensors(int dim, int stats, int fc_depth) {
  QuestTensors t;
  t.fc_weights.assign(fc_depth, Eigen::MatrixXd::Zero(dim, dim));
  t.norm_scale.assign(fc_depth + 1, Eigen::VectorXd::Zero(dim));
  t.norm_shift.assign(fc_depth + 1, Eigen::VectorXd::Zero(dim));
  t.w_q = Eigen::MatrixXd::Zero(stats, stats);
  t.w_k = Eigen::MatrixXd::Zero(stats, stats);
  t.w_v = Eigen::MatrixXd::Zero(dim, dim);
  t.w_out = Eigen::MatrixXd::Zero(dim, dim);
  return t;
}

}  // namespace

QuestParameters init_quest_parameters(int dim, int stats, const QuestConfig& cfg) {
  check_quest_config(cfg);
  if (dim < 1 || stats < 1) {
    throw InvalidArgument("quest: feature and statistic dimensions must be >= 1");
  }
  QuestParameters p;
  p.dim = dim;
  p.stats = stats;
  p.fc_depth = cfg.fc_depth;
  p.values = make_tensors(dim, stats, cfg.fc_depth);
  p.adam_m = make_tensors(dim, stats, cfg.fc_depth);
  p.adam_v = make_tensors(dim, stats, cfg.fc_depth);

  Rng rng(mix_seed(cfg.seed, 0x71e57u));
  for (auto& w : p.values.fc_weights) w = uniform_init(dim, dim, rng);
  for (auto& s : p.values.norm_scale) s.setOnes();
  p.values.w_q = uniform_init(stats, stats, rng);
  p.values.w_k = uniform_init(stats, stats, rng);
  p.values.w_v = uniform_init(dim, dim, rng);
  // w_out stays zero: the attention starts as an exact identity residual.
  return p;
}

Eigen::MatrixXd fc_forward(const Eigen::MatrixXd& feats, const QuestTensors& params,
                           int fc_depth, FcCache* cache) {
  if (static_cast<int>(params.fc_weights.size()) < fc_depth ||
      static_cast<int>(params.norm_scale.size()) < fc_depth + 1) {
    throw QuestError("fc_forward: parameter stage count does not match fc_depth");
  }
  FcCache local;
  FcCache& c = cache ? *cache : local;
  c.stages.assign(fc_depth + 1, FcStage{});

  Eigen::MatrixXd cur = feats;
  for (int s = 0; s <= fc_depth; ++s) {
    FcStage& stage = c.stages[s];
    stage.input = cur;
    const Eigen::MatrixXd pre = s == 0 ? cur : cur * params.fc_weights[s - 1];
    normalize_points(pre, params.norm_scale[s], params.norm_shift[s], stage);
    cur = stage.bn_out.cwiseMax(0.0);
  }
  return cur;
}

Eigen::MatrixXd fc_backward(const FcCache& cache, const Eigen::MatrixXd& grad_out,
                            const QuestTensors& params, int fc_depth,
                            QuestTensors& grads) {
  Eigen::MatrixXd d = grad_out;
  for (int s = fc_depth; s >= 0; --s) {
    const FcStage& stage = cache.stages[s];
    const double p = static_cast<double>(stage.xhat.rows());
    const Eigen::MatrixXd d_bn =
        (stage.bn_out.array() > 0.0).select(d, Eigen::MatrixXd::Zero(d.rows(), d.cols()));
    grads.norm_shift[s] += d_bn.colwise().sum().transpose();
    grads.norm_scale[s] += d_bn.cwiseProduct(stage.xhat).colwise().sum().transpose();

    const Eigen::MatrixXd d_xhat =
        d_bn.array().rowwise() * params.norm_scale[s].transpose().array();
    const Eigen::RowVectorXd mean_dxhat = d_xhat.colwise().sum() / p;
    const Eigen::RowVectorXd mean_dxhat_xhat =
        d_xhat.cwiseProduct(stage.xhat).colwise().sum() / p;
    Eigen::MatrixXd d_pre =
        ((d_xhat.rowwise() - mean_dxhat) -
         (stage.xhat.array().rowwise() * mean_dxhat_xhat.array()).matrix())
            .array()
            .rowwise() *
        stage.inv_std.transpose().array();

    if (s >= 1) {
      grads.fc_weights[s - 1] += stage.input.transpose() * d_pre;
      d = d_pre * params.fc_weights[s - 1].transpose();
    } else {
      d = std::move(d_pre);
    }
  }
  return d;
}

Eigen::MatrixXd local_max_pool(const Eigen::MatrixXd& feats, int kernel, int stride,
                               Eigen::MatrixXi* argmax) {
  if (kernel < 1 || stride < 1) {
    throw InvalidArgument("local_max_pool: kernel and stride must be >= 1");
  }
  const int points = static_cast<int>(feats.rows());
  const int channels = static_cast<int>(feats.cols());
  if (points < 1) throw InvalidArgument("local_max_pool: empty input");
  const int windows = (points + stride - 1) / stride;
  Eigen::MatrixXd out(windows, channels);
  if (argmax) argmax->resize(windows, channels);
  for (int w = 0; w < windows; ++w) {
    const int begin = w * stride;
    const int end = std::min(begin + kernel, points);
    for (int c = 0; c < channels; ++c) {
      int best = begin;
      for (int r = begin + 1; r < end; ++r) {
        if (feats(r, c) > feats(best, c)) best = r;
      }
      out(w, c) = feats(best, c);
      if (argmax) (*argmax)(w, c) = best;
    }
  }
  return out;
}

std::vector<Eigen::MatrixXd> quest_forward(
    const std::vector<std::vector<Eigen::MatrixXd>>& support_pooled,
    const std::vector<Eigen::MatrixXd>& query_pooled,
    const PrototypeSet& protos, const QuestTensors& params,
    const QuestConfig& cfg, QuestForwardCache* cache) {
  const int classes = static_cast<int>(support_pooled.size());
  const int q_count = static_cast<int>(query_pooled.size());
  if (classes != protos.prototypes.rows()) {
    throw QuestError("quest_forward: pooled support classes do not match prototypes");
  }
  if (classes < 1 || q_count < 1) throw QuestError("quest_forward: empty input");
  const int shots = static_cast<int>(support_pooled[0].size());
  const Eigen::Index dim = protos.prototypes.cols();
  const Eigen::Index stats = params.w_q.rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  for (const auto& shots_for_class : support_pooled) {
    if (static_cast<int>(shots_for_class.size()) != shots) {
      throw QuestError("quest_forward: ragged shot dimension");
    }
    for (const auto& m : shots_for_class) {
      if (m.rows() != stats || m.cols() != dim) {
        throw QuestError("quest_forward: pooled support shape mismatch");
      }
    }
  }
  for (const auto& m : query_pooled) {
    if (m.rows() != stats || m.cols() != dim) {
      throw QuestError("quest_forward: pooled query shape mismatch");
    }
  }
  if (params.w_v.rows() != dim || params.w_out.rows() != dim) {
    throw QuestError("quest_forward: projection dimensions do not match features");
  }

  QuestForwardCache local;
  QuestForwardCache& c = cache ? *cache : local;
  c.v = protos.prototypes * params.w_v;
  c.q_mat.resize(q_count);
  for (int q = 0; q < q_count; ++q) {
    c.q_mat[q] = query_pooled[q].transpose() * params.w_q;
  }
  c.k_mat.assign(classes, std::vector<Eigen::MatrixXd>(shots));
  for (int n = 0; n < classes; ++n) {
    for (int k = 0; k < shots; ++k) {
      c.k_mat[n][k] = support_pooled[n][k].transpose() * params.w_k;
    }
  }

  const double combine_scale =
      cfg.combine == ShotCombine::Mean ? 1.0 / static_cast<double>(shots) : 1.0;
  c.attn.assign(q_count, std::vector<std::vector<Eigen::MatrixXd>>(
                             classes, std::vector<Eigen::MatrixXd>(shots)));
  c.av.assign(q_count, std::vector<std::vector<Eigen::VectorXd>>(
                           classes, std::vector<Eigen::VectorXd>(shots)));

  std::vector<Eigen::MatrixXd> adjusted(q_count);
  for (int q = 0; q < q_count; ++q) {
    adjusted[q] = protos.prototypes;
    for (int n = 0; n < classes; ++n) {
      const Eigen::VectorXd v_n = c.v.row(n).transpose();
      for (int k = 0; k < shots; ++k) {
        Eigen::MatrixXd z = scale * (c.q_mat[q] * c.k_mat[n][k].transpose());
        // Row-wise softmax over the second channel axis.
        for (Eigen::Index r = 0; r < z.rows(); ++r) {
          Eigen::RowVectorXd row = z.row(r);
          const double zmax = row.maxCoeff();
          Eigen::RowVectorXd e = (row.array() - zmax).exp();
          z.row(r) = e / e.sum();
        }
        c.attn[q][n][k] = std::move(z);
        c.av[q][n][k] = c.attn[q][n][k] * v_n;
        adjusted[q].row(n) +=
            combine_scale * (params.w_out * c.av[q][n][k]).transpose();
      }
    }
  }
  return adjusted;
}

QuestBackwardResult quest_backward(
    const QuestForwardCache& cache,
    const std::vector<std::vector<Eigen::MatrixXd>>& support_pooled,
    const std::vector<Eigen::MatrixXd>& query_pooled,
    const PrototypeSet& protos, const QuestTensors& params,
    const QuestConfig& cfg, const std::vector<Eigen::MatrixXd>& d_adjusted,
    QuestTensors& grads) {
  const int classes = static_cast<int>(support_pooled.size());
  const int q_count = static_cast<int>(query_pooled.size());
  const int shots = static_cast<int>(support_pooled[0].size());
  const Eigen::Index dim = protos.prototypes.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
  const double combine_scale =
      cfg.combine == ShotCombine::Mean ? 1.0 / static_cast<double>(shots) : 1.0;

  QuestBackwardResult res;
  res.d_protos = Eigen::MatrixXd::Zero(classes, dim);
  res.d_query_pooled.assign(q_count, Eigen::MatrixXd());
  res.d_support_pooled.assign(classes, std::vector<Eigen::MatrixXd>(shots));

  Eigen::MatrixXd d_v = Eigen::MatrixXd::Zero(classes, dim);
  std::vector<Eigen::MatrixXd> d_qmat(
      q_count, Eigen::MatrixXd::Zero(dim, params.w_q.cols()));
  std::vector<std::vector<Eigen::MatrixXd>> d_kmat(
      classes, std::vector<Eigen::MatrixXd>(
                   shots, Eigen::MatrixXd::Zero(dim, params.w_k.cols())));

  for (int q = 0; q < q_count; ++q) {
    res.d_protos += d_adjusted[q];  // residual path
    for (int n = 0; n < classes; ++n) {
      const Eigen::VectorXd v_n = cache.v.row(n).transpose();
      for (int k = 0; k < shots; ++k) {
        const Eigen::VectorXd d_f = combine_scale * d_adjusted[q].row(n).transpose();
        grads.w_out += d_f * cache.av[q][n][k].transpose();
        const Eigen::VectorXd d_av = params.w_out.transpose() * d_f;

        const Eigen::MatrixXd& attn = cache.attn[q][n][k];
        d_v.row(n) += (attn.transpose() * d_av).transpose();

        // Softmax backward, rows independent. With dA = d_av * v_n^T the
        // per-row inner product <dA_r, A_r> collapses to d_av_r * (A v)_r.
        const Eigen::VectorXd dots = d_av.cwiseProduct(cache.av[q][n][k]);
        const Eigen::MatrixXd d_z =
            attn.cwiseProduct((d_av * v_n.transpose()).colwise() - dots);

        d_qmat[q] += scale * (d_z * cache.k_mat[n][k]);
        d_kmat[n][k] += scale * (d_z.transpose() * cache.q_mat[q]);
      }
    }
  }

  for (int q = 0; q < q_count; ++q) {
    grads.w_q += query_pooled[q] * d_qmat[q];
    res.d_query_pooled[q] = params.w_q * d_qmat[q].transpose();
  }
  for (int n = 0; n < classes; ++n) {
    for (int k = 0; k < shots; ++k) {
      grads.w_k += support_pooled[n][k] * d_kmat[n][k];
      res.d_support_pooled[n][k] = params.w_k * d_kmat[n][k].transpose();
    }
  }
  grads.w_v += protos.prototypes.transpose() * d_v;
  res.d_protos += d_v * params.w_v.transpose();
  return res;
}

std::vector<std::vector<Eigen::MatrixXd>> assemble_support_pooled(
    const std::vector<std::vector<Eigen::MatrixXd>>& per_class_pooled) {
  const int n_way = static_cast<int>(per_class_pooled.size());
  if (n_way < 1) throw QuestError("assemble_support_pooled: no support classes");
  const int shots = static_cast<int>(per_class_pooled[0].size());
  std::vector<std::vector<Eigen::MatrixXd>> out(
      static_cast<std::size_t>(n_way) + 1, std::vector<Eigen::MatrixXd>(shots));
  for (int k = 0; k < shots; ++k) {
    Eigen::MatrixXd bg = per_class_pooled[0][k];
    for (int n = 1; n < n_way; ++n) bg += per_class_pooled[n][k];
    out[0][k] = bg / static_cast<double>(n_way);
    for (int n = 0; n < n_way; ++n) out[n + 1][k] = per_class_pooled[n][k];
  }
  return out;
}

namespace {

struct EpisodeForward {
  std::vector<std::vector<FcCache>> fc_support;      // N x K
  std::vector<FcCache> fc_query;                     // Q
  std::vector<std::vector<Eigen::MatrixXd>> g_support;
  std::vector<Eigen::MatrixXd> g_query;
  std::vector<std::vector<Eigen::MatrixXi>> pool_arg_support;
  std::vector<Eigen::MatrixXi> pool_arg_query;
  std::vector<std::vector<Eigen::MatrixXd>> pooled_class;  // N x K (M' x D)
  std::vector<std::vector<Eigen::MatrixXd>> support_pooled;  // (N+1) x K
  std::vector<Eigen::MatrixXd> query_pooled;
  PrototypeSet protos;
  QuestForwardCache quest;
  std::vector<Eigen::MatrixXd> adjusted;  // Q x ((N+1) x D)
  // cosine caches, per query
  std::vector<Eigen::MatrixXd> q_normed;             // M x D
  std::vector<Eigen::VectorXd> q_norms;              // M
  std::vector<Eigen::MatrixXd> a_normed;             // (N+1) x D
  std::vector<Eigen::VectorXd> a_norms;              // N+1
  std::vector<Eigen::MatrixXd> scores;               // M x (N+1)
};

void normalize_rows(const Eigen::MatrixXd& x, Eigen::MatrixXd& normed,
                    Eigen::VectorXd& norms) {
  normed = x;
  norms.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    norms[r] = x.row(r).norm();
    if (norms[r] > 0.0) normed.row(r) /= norms[r];
  }
}

}  // namespace

LossResult quest_episode_loss(const QuestBatch& batch, const QuestTensors& params,
                              const QuestConfig& cfg, double gamma,
                              bool want_grads) {
  check_quest_config(cfg);
  const int n_way = static_cast<int>(batch.support_feats.size());
  const int q_count = static_cast<int>(batch.query_feats.size());
  if (n_way < 1 || q_count < 1) {
    throw QuestError("quest_episode_loss: empty support or query");
  }
  if (batch.query_labels.size() != static_cast<std::size_t>(q_count)) {
    throw TrainingError("quest_episode_loss: query labels are required");
  }
  const int shots = static_cast<int>(batch.support_feats[0].size());
  const Eigen::Index dim = batch.support_feats[0][0].cols();

  EpisodeForward fw;
  fw.fc_support.assign(n_way, std::vector<FcCache>(shots));
  fw.g_support.assign(n_way, std::vector<Eigen::MatrixXd>(shots));
  fw.pool_arg_support.assign(n_way, std::vector<Eigen::MatrixXi>(shots));
  fw.pooled_class.assign(n_way, std::vector<Eigen::MatrixXd>(shots));
  for (int n = 0; n < n_way; ++n) {
    if (static_cast<int>(batch.support_feats[n].size()) != shots) {
      throw QuestError("quest_episode_loss: ragged support shots");
    }
    for (int k = 0; k < shots; ++k) {
      fw.g_support[n][k] =
          fc_forward(batch.support_feats[n][k], params, cfg.fc_depth, &fw.fc_support[n][k]);
      fw.pooled_class[n][k] = local_max_pool(fw.g_support[n][k], cfg.pool_kernel,
                                             cfg.pool_stride, &fw.pool_arg_support[n][k]);
    }
  }
  fw.fc_query.resize(q_count);
  fw.g_query.resize(q_count);
  fw.pool_arg_query.resize(q_count);
  fw.query_pooled.resize(q_count);
  for (int q = 0; q < q_count; ++q) {
    fw.g_query[q] = fc_forward(batch.query_feats[q], params, cfg.fc_depth, &fw.fc_query[q]);
    fw.query_pooled[q] =
        local_max_pool(fw.g_query[q], cfg.pool_kernel, cfg.pool_stride, &fw.pool_arg_query[q]);
  }

  fw.protos = compute_prototypes(fw.g_support, batch.support_labels, n_way);
  fw.support_pooled = assemble_support_pooled(fw.pooled_class);
  fw.adjusted = quest_forward(fw.support_pooled, fw.query_pooled, fw.protos, params,
                              cfg, &fw.quest);

  // Cosine scores of each query against its own adjusted prototypes, then
  // softmax cross-entropy over gamma-scaled scores. Invalid classes are
  // excluded from the softmax.
  const int classes = n_way + 1;
  fw.q_normed.resize(q_count);
  fw.q_norms.resize(q_count);
  fw.a_normed.resize(q_count);
  fw.a_norms.resize(q_count);
  fw.scores.resize(q_count);

  double loss = 0.0;
  long long labeled = 0;
  std::vector<Eigen::MatrixXd> d_scores;
  if (want_grads) d_scores.assign(q_count, Eigen::MatrixXd());

  for (int q = 0; q < q_count; ++q) {
    normalize_rows(fw.g_query[q], fw.q_normed[q], fw.q_norms[q]);
    normalize_rows(fw.adjusted[q], fw.a_normed[q], fw.a_norms[q]);
    fw.scores[q] = fw.q_normed[q] * fw.a_normed[q].transpose();
    if (want_grads) {
      d_scores[q] = Eigen::MatrixXd::Zero(fw.scores[q].rows(), classes);
    }
  }

  std::vector<double> probs(classes);
  for (int q = 0; q < q_count; ++q) {
    const auto& labels = batch.query_labels[q];
    if (labels.size() != static_cast<std::size_t>(fw.g_query[q].rows())) {
      throw TrainingError("quest_episode_loss: query label length mismatch");
    }
    for (Eigen::Index m = 0; m < fw.scores[q].rows(); ++m) {
      const int y = labels[m];
      if (y < 0) continue;  // ignore point
      if (y >= classes || !fw.protos.valid_mask[y]) continue;
      double zmax = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < classes; ++c) {
        if (fw.protos.valid_mask[c]) zmax = std::max(zmax, gamma * fw.scores[q](m, c));
      }
      double denom = 0.0;
      for (int c = 0; c < classes; ++c) {
        probs[c] = fw.protos.valid_mask[c]
                       ? std::exp(gamma * fw.scores[q](m, c) - zmax)
                       : 0.0;
        denom += probs[c];
      }
      for (int c = 0; c < classes; ++c) probs[c] /= denom;
      loss -= std::log(std::max(probs[y], 1e-300));
      ++labeled;
      if (want_grads) {
        for (int c = 0; c < classes; ++c) {
          if (!fw.protos.valid_mask[c]) continue;
          d_scores[q](m, c) = gamma * (probs[c] - (c == y ? 1.0 : 0.0));
        }
      }
    }
  }
  if (labeled == 0) {
    throw TrainingError("quest_episode_loss: no labeled query points");
  }
  loss /= static_cast<double>(labeled);

  LossResult out;
  out.loss = loss;
  if (!want_grads) return out;

  const double inv_labeled = 1.0 / static_cast<double>(labeled);
  out.grads = make_tensors(static_cast<int>(dim), static_cast<int>(params.w_q.rows()),
                           cfg.fc_depth);

  // Cosine backward: project out the normalized direction, then rescale.
  std::vector<Eigen::MatrixXd> d_g_query(q_count);
  std::vector<Eigen::MatrixXd> d_adjusted(q_count);
  for (int q = 0; q < q_count; ++q) {
    d_scores[q] *= inv_labeled;
    const Eigen::MatrixXd d_qn = d_scores[q] * fw.a_normed[q];
    const Eigen::MatrixXd d_an = d_scores[q].transpose() * fw.q_normed[q];
    d_g_query[q] = Eigen::MatrixXd::Zero(fw.g_query[q].rows(), dim);
    d_adjusted[q] = Eigen::MatrixXd::Zero(classes, dim);
    for (Eigen::Index r = 0; r < d_qn.rows(); ++r) {
      if (fw.q_norms[q][r] > 0.0) {
        const double dot = d_qn.row(r).dot(fw.q_normed[q].row(r));
        d_g_query[q].row(r) =
            (d_qn.row(r) - dot * fw.q_normed[q].row(r)) / fw.q_norms[q][r];
      }
    }
    for (Eigen::Index r = 0; r < d_an.rows(); ++r) {
      if (fw.a_norms[q][r] > 0.0) {
        const double dot = d_an.row(r).dot(fw.a_normed[q].row(r));
        d_adjusted[q].row(r) =
            (d_an.row(r) - dot * fw.a_normed[q].row(r)) / fw.a_norms[q][r];
      }
    }
  }

  QuestBackwardResult qb =
      quest_backward(fw.quest, fw.support_pooled, fw.query_pooled, fw.protos, params,
                     cfg, d_adjusted, out.grads);

  // Pooled-statistics gradients back through the max pooling. The background
  // row is the per-shot mean of the class rows, so it spreads evenly.
  std::vector<std::vector<Eigen::MatrixXd>> d_g_support(
      n_way, std::vector<Eigen::MatrixXd>(shots));
  for (int n = 0; n < n_way; ++n) {
    for (int k = 0; k < shots; ++k) {
      d_g_support[n][k] = Eigen::MatrixXd::Zero(fw.g_support[n][k].rows(), dim);
    }
  }
  const double bg_share = 1.0 / static_cast<double>(n_way);
  for (int n = 0; n < n_way; ++n) {
    for (int k = 0; k < shots; ++k) {
      const Eigen::MatrixXd d_pooled =
          qb.d_support_pooled[n + 1][k] + bg_share * qb.d_support_pooled[0][k];
      const Eigen::MatrixXi& arg = fw.pool_arg_support[n][k];
      for (Eigen::Index w = 0; w < d_pooled.rows(); ++w) {
        for (Eigen::Index c = 0; c < d_pooled.cols(); ++c) {
          d_g_support[n][k](arg(w, c), c) += d_pooled(w, c);
        }
      }
    }
  }
  for (int q = 0; q < q_count; ++q) {
    const Eigen::MatrixXi& arg = fw.pool_arg_query[q];
    for (Eigen::Index w = 0; w < qb.d_query_pooled[q].rows(); ++w) {
      for (Eigen::Index c = 0; c < qb.d_query_pooled[q].cols(); ++c) {
        d_g_query[q](arg(w, c), c) += qb.d_query_pooled[q](w, c);
      }
    }
  }

  // Prototype gradients distribute to every contributing support point.
  std::vector<long long> counts(classes, 0);
  for (int n = 0; n < n_way; ++n) {
    for (int k = 0; k < shots; ++k) {
      const auto& labels = batch.support_labels[n][k];
      for (std::size_t m = 0; m < labels.size(); ++m) {
        if (labels[m] == 0) ++counts[0];
        else if (labels[m] == n + 1) ++counts[n + 1];
      }
    }
  }
  for (int n = 0; n < n_way; ++n) {
    for (int k = 0; k < shots; ++k) {
      const auto& labels = batch.support_labels[n][k];
      for (std::size_t m = 0; m < labels.size(); ++m) {
        const int lab = labels[m];
        if (lab == 0 && counts[0] > 0) {
          d_g_support[n][k].row(m) += qb.d_protos.row(0) / static_cast<double>(counts[0]);
        } else if (lab == n + 1 && counts[lab] > 0) {
          d_g_support[n][k].row(m) +=
              qb.d_protos.row(lab) / static_cast<double>(counts[lab]);
        }
      }
    }
  }

  for (int n = 0; n < n_way; ++n) {
    for (int k = 0; k < shots; ++k) {
      fc_backward(fw.fc_support[n][k], d_g_support[n][k], params, cfg.fc_depth, out.grads);
    }
  }
  for (int q = 0; q < q_count; ++q) {
    fc_backward(fw.fc_query[q], d_g_query[q], params, cfg.fc_depth, out.grads);
  }
  return out;
}

LossResult episode_loss(const Episode& episode, const EncoderConfig& enc_cfg,
                        const HeadConfig& head_cfg, const QuestParameters& params,
                        const QuestConfig& cfg, bool want_grads) {
  QuestBatch batch;
  batch.support_feats.resize(episode.support.size());
  batch.support_labels.resize(episode.support.size());
  for (std::size_t n = 0; n < episode.support.size(); ++n) {
    for (const PointCloud& cloud : episode.support[n]) {
      batch.support_feats[n].push_back(encode(cloud, enc_cfg).final);
      batch.support_labels[n].push_back(cloud.labels);
    }
  }
  for (const PointCloud& cloud : episode.query) {
    if (!cloud.has_labels()) {
      throw TrainingError("episode_loss: query cloud is missing labels");
    }
    batch.query_feats.push_back(encode(cloud, enc_cfg).final);
    batch.query_labels.push_back(cloud.labels);
  }
  return quest_episode_loss(batch, params.values, cfg, head_cfg.gamma, want_grads);
}

void adamw_step(QuestParameters& params, const QuestTensors& grads,
                const QuestConfig& cfg) {
  ++params.adam_step;
  const double t = static_cast<double>(params.adam_step);
  const long long halvings = (params.adam_step - 1) / std::max(cfg.lr_halve_every, 1);
  const double lr = cfg.lr * std::pow(0.5, static_cast<double>(halvings));
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);

  auto values = named_tensors(params.values);
  auto moments1 = named_tensors(params.adam_m);
  auto moments2 = named_tensors(params.adam_v);
  auto gvals = named_tensors(const_cast<QuestTensors&>(grads));
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].size != gvals[i].size) {
      throw QuestError("adamw_step: gradient shape mismatch for " + values[i].name);
    }
    double* p = values[i].data;
    double* m = moments1[i].data;
    double* v = moments2[i].data;
    const double* g = gvals[i].data;
    for (std::size_t j = 0; j < values[i].size; ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      p[j] -= lr * (m_hat / (std::sqrt(v_hat) + cfg.adam_eps) +
                    cfg.weight_decay * p[j]);
    }
  }
}

TrainResult train(const std::function<Episode(int)>& episode_at,
                  const EncoderConfig& enc_cfg, const HeadConfig& head_cfg,
                  const QuestConfig& cfg, int max_iters, int expected_points) {
  check_quest_config(cfg);
  if (max_iters < 0) throw InvalidArgument("train: max_iters must be >= 0");
  TrainResult out;
  out.params = init_quest_parameters(enc_cfg.feature_dim(),
                                     cfg.pooled_rows(expected_points), cfg);
  out.history.reserve(max_iters);
  for (int iter = 0; iter < max_iters; ++iter) {
    const Episode episode = episode_at(iter);
    LossResult step = episode_loss(episode, enc_cfg, head_cfg, out.params, cfg, true);
    if (!std::isfinite(step.loss)) {
      throw TrainingError("train: non-finite loss at iteration " + std::to_string(iter));
    }
    out.history.push_back(step.loss);
    adamw_step(out.params, step.grads, cfg);
  }
  return out;
}

namespace {

constexpr const char* kMetaName = "meta";

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const QuestParameters& params) {
  std::vector<TensorRecord> records;
  records.push_back({kMetaName,
                     {4},
                     {static_cast<double>(params.dim), static_cast<double>(params.stats),
                      static_cast<double>(params.fc_depth),
                      static_cast<double>(params.adam_step)}});
  auto dump = [&records](const char* prefix, QuestTensors& t) {
    for (const NamedTensor& nt : named_tensors(t)) {
      TensorRecord rec;
      rec.name = std::string(prefix) + nt.name;
      rec.dims = nt.dims;
      rec.data.resize(nt.size);
      if (nt.dims.size() == 2) {
        // Column-major in memory, row-major on disk.
        const std::uint64_t rows = nt.dims[0], cols = nt.dims[1];
        for (std::uint64_t r = 0; r < rows; ++r) {
          for (std::uint64_t c = 0; c < cols; ++c) {
            rec.data[r * cols + c] = nt.data[c * rows + r];
          }
        }
      } else {
        std::copy(nt.data, nt.data + nt.size, rec.data.begin());
      }
      records.push_back(std::move(rec));
    }
  };
  auto& mutable_params = const_cast<QuestParameters&>(params);
  dump("", mutable_params.values);
  dump("adam_m.", mutable_params.adam_m);
  dump("adam_v.", mutable_params.adam_v);
  write_record_file(path, records);
}

QuestParameters load_checkpoint(const std::filesystem::path& path) {
  const std::vector<TensorRecord> records = read_record_file(path);
  std::map<std::string, const TensorRecord*> by_name;
  for (const TensorRecord& rec : records) {
    if (!by_name.emplace(rec.name, &rec).second) {
      throw QuestError("checkpoint " + path.string() + ": duplicate record " + rec.name);
    }
  }
  auto meta_it = by_name.find(kMetaName);
  if (meta_it == by_name.end() || meta_it->second->data.size() != 4) {
    throw QuestError("checkpoint " + path.string() + ": missing record meta");
  }
  const auto& meta = meta_it->second->data;
  QuestParameters params;
  params.dim = static_cast<int>(meta[0]);
  params.stats = static_cast<int>(meta[1]);
  params.fc_depth = static_cast<int>(meta[2]);
  params.adam_step = static_cast<long long>(meta[3]);
  if (params.dim < 1 || params.stats < 1 || params.fc_depth < 0) {
    throw QuestError("checkpoint " + path.string() + ": invalid record meta");
  }
  params.values = make_tensors(params.dim, params.stats, params.fc_depth);
  params.adam_m = make_tensors(params.dim, params.stats, params.fc_depth);
  params.adam_v = make_tensors(params.dim, params.stats, params.fc_depth);

  std::set<std::string> consumed{kMetaName};
  auto load = [&](const char* prefix, QuestTensors& t) {
    for (NamedTensor nt : named_tensors(t)) {
      const std::string name = std::string(prefix) + nt.name;
      auto it = by_name.find(name);
      if (it == by_name.end()) {
        throw QuestError("checkpoint " + path.string() + ": missing record " + name);
      }
      const TensorRecord& rec = *it->second;
      if (rec.dims != nt.dims) {
        throw QuestError("checkpoint " + path.string() + ": record " + name +
                         " has unexpected shape");
      }
      if (nt.dims.size() == 2) {
        const std::uint64_t rows = nt.dims[0], cols = nt.dims[1];
        for (std::uint64_t r = 0; r < rows; ++r) {
          for (std::uint64_t c = 0; c < cols; ++c) {
            nt.data[c * rows + r] = rec.data[r * cols + c];
          }
        }
      } else {
        std::copy(rec.data.begin(), rec.data.end(), nt.data);
      }
      consumed.insert(name);
    }
  };
  load("", params.values);
  load("adam_m.", params.adam_m);
  load("adam_v.", params.adam_v);
  for (const TensorRecord& rec : records) {
    if (!consumed.contains(rec.name)) {
      throw QuestError("checkpoint " + path.string() + ": unknown record " + rec.name);
    }
  }
  return params;
}

}  // namespace pcfs
