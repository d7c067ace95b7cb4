#include "dpq/autograd.hpp"

#include <algorithm>

namespace dpq {

namespace {

Matrix gather_rows(const Matrix& m, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (Index r = 0; r < out.rows(); ++r) {
    const Index i = rows[static_cast<std::size_t>(r)];
    if (i < 0 || i >= m.rows()) throw InvalidArgument("batch row index out of range");
    out.row(r) = m.row(i);
  }
  return out;
}

struct SimilarityGrad {
  Matrix queries;  // B x s
  Matrix keys;     // K x s
};

// Back-propagates dlogits (B x K) through similarity(queries, keys, metric).
SimilarityGrad similarity_backward(const Matrix& queries, const Matrix& keys, Distance metric, const Matrix& dlogits) {
  SimilarityGrad g{Matrix::Zero(queries.rows(), queries.cols()), Matrix::Zero(keys.rows(), keys.cols())};
  switch (metric) {
    case Distance::dot:
      g.queries = dlogits * keys;
      g.keys = dlogits.transpose() * queries;
      break;
    case Distance::euclidean:
      // l = -|q - k|^2: dl/dq = -2(q - k), dl/dk = 2(q - k).
      for (Index i = 0; i < queries.rows(); ++i)
        for (Index k = 0; k < keys.rows(); ++k) {
          const double w = dlogits(i, k);
          if (w == 0.0) continue;
          const RowVector diff = queries.row(i) - keys.row(k);
          g.queries.row(i) -= 2.0 * w * diff;
          g.keys.row(k) += 2.0 * w * diff;
        }
      break;
    case Distance::cosine: {
      // l = <u, w> with u = q / max(|q|, eps): dl/dq = (w - l u) / |q| above the
      // floor and w / eps on it.
      const Index b = queries.rows();
      const Index kk = keys.rows();
      std::vector<double> qn(static_cast<std::size_t>(b)), kn(static_cast<std::size_t>(kk));
      std::vector<bool> q_floor(qn.size()), k_floor(kn.size());
      Matrix u(b, queries.cols()), w(kk, keys.cols());
      for (Index i = 0; i < b; ++i) {
        const double nrm = queries.row(i).norm();
        q_floor[static_cast<std::size_t>(i)] = nrm <= kCosineEps;
        qn[static_cast<std::size_t>(i)] = std::max(nrm, kCosineEps);
        u.row(i) = queries.row(i) / qn[static_cast<std::size_t>(i)];
      }
      for (Index k = 0; k < kk; ++k) {
        const double nrm = keys.row(k).norm();
        k_floor[static_cast<std::size_t>(k)] = nrm <= kCosineEps;
        kn[static_cast<std::size_t>(k)] = std::max(nrm, kCosineEps);
        w.row(k) = keys.row(k) / kn[static_cast<std::size_t>(k)];
      }
      for (Index i = 0; i < b; ++i)
        for (Index k = 0; k < kk; ++k) {
          const double dl = dlogits(i, k);
          if (dl == 0.0) continue;
          const double l = u.row(i).dot(w.row(k));
          const auto si = static_cast<std::size_t>(i);
          const auto sk = static_cast<std::size_t>(k);
          if (q_floor[si])
            g.queries.row(i) += dl * w.row(k) / qn[si];
          else
            g.queries.row(i) += dl * (w.row(k) - l * u.row(i)) / qn[si];
          if (k_floor[sk])
            g.keys.row(k) += dl * u.row(i) / kn[sk];
          else
            g.keys.row(k) += dl * (u.row(i) - l * w.row(k)) / kn[sk];
        }
      break;
    }
  }
  return g;
}

// Shared prefix of both forward passes: raw logits, optional normalization,
// and hard codes per group.
ForwardTrace begin_trace(const QuantizerState& state, const DpqConfig& cfg, std::span<const Index> batch,
                         bool training, Distance metric) {
  ForwardTrace t;
  t.mode = cfg.mode;
  t.rows.assign(batch.begin(), batch.end());
  t.queries = gather_rows(state.queries, batch);
  const Index b = t.queries.rows();
  t.normalized = cfg.batch_norm;
  if (t.normalized && !state.norm) throw InvalidState("batch normalization enabled but statistics are missing");
  if (t.normalized && training && b < 2) throw InvalidBatch("batch normalization needs at least two rows per batch");

  const Index s = cfg.sub_dim();
  t.groups.resize(static_cast<std::size_t>(cfg.num_groups));
  t.codes.resize(b, cfg.num_groups);
  for (Index j = 0; j < cfg.num_groups; ++j) {
    auto& g = t.groups[static_cast<std::size_t>(j)];
    g.logits = similarity(t.queries.middleCols(j * s, s), state.keys.group(j), metric);
    if (t.normalized) g.norm = bn_transform(g.logits, *state.norm, j, training);
    const Matrix& sel = t.normalized ? g.norm.output : g.logits;
    for (Index r = 0; r < b; ++r) t.codes(r, j) = static_cast<std::int32_t>(argmax_first(sel.row(r)));
  }
  return t;
}

const Matrix& selection_logits(const GroupTrace& g, bool normalized) { return normalized ? g.norm.output : g.logits; }

GradientBundle empty_bundle(const ForwardTrace& trace, const QuantizerState& state, const DpqConfig& cfg) {
  GradientBundle gb;
  gb.rows = trace.rows;
  gb.queries = Matrix::Zero(trace.queries.rows(), trace.queries.cols());
  gb.keys = Matrix::Zero(state.keys.data().rows(), state.keys.data().cols());
  gb.values = Matrix::Zero(state.values().data().rows(), state.values().data().cols());
  if (trace.normalized && cfg.bn_affine) {
    gb.bn_gamma = Matrix::Zero(cfg.num_groups, cfg.num_codes);
    gb.bn_beta = Matrix::Zero(cfg.num_groups, cfg.num_codes);
  }
  return gb;
}

void check_upstream(const ForwardTrace& trace, const Matrix& upstream) {
  if (upstream.rows() != trace.queries.rows() || upstream.cols() != trace.queries.cols())
    throw InvalidArgument("upstream gradient shape does not match the forward batch");
  require_finite(upstream, "upstream gradient");
}

}  // namespace

BnBatch bn_transform(const Matrix& logits, const DistanceNorm& norm, Index group, bool training) {
  BnBatch out;
  out.training = training;
  const Index b = logits.rows();
  const Index kk = logits.cols();
  if (training && b < 2) throw InvalidBatch("batch normalization needs at least two rows per batch");
  if (group < 0 || group >= norm.running_mean.rows() || kk != norm.running_mean.cols())
    throw InvalidArgument("bn_transform: statistics shape mismatch");
  out.mean.resize(kk);
  out.var.resize(kk);
  out.inv_std.resize(kk);
  out.centered.resize(b, kk);
  for (Index k = 0; k < kk; ++k) {
    double mean = norm.running_mean(group, k);
    double var = norm.running_var(group, k);
    if (training) {
      mean = logits.col(k).mean();
      var = (logits.col(k).array() - mean).square().mean();
    }
    out.mean(k) = mean;
    out.var(k) = var;
    out.inv_std(k) = 1.0 / std::sqrt(var + norm.eps);
    out.centered.col(k) = (logits.col(k).array() - mean) * out.inv_std(k);
  }
  out.output = out.centered;
  if (norm.affine)
    for (Index k = 0; k < kk; ++k)
      out.output.col(k) = out.centered.col(k).array() * norm.gamma(group, k) + norm.beta(group, k);
  return out;
}

BnBatch bn_normalize(const Matrix& logits, DistanceNorm& norm, Index group, bool training) {
  BnBatch out = bn_transform(logits, norm, group, training);
  if (training) bn_commit(norm, group, out);
  return out;
}

void bn_commit(DistanceNorm& norm, Index group, const BnBatch& batch) {
  if (!batch.training) return;
  const double m = norm.momentum;
  norm.running_mean.row(group) = m * norm.running_mean.row(group) + (1.0 - m) * batch.mean;
  norm.running_var.row(group) = m * norm.running_var.row(group) + (1.0 - m) * batch.var;
}

void commit_norm_stats(QuantizerState& state, const ForwardTrace& trace) {
  if (!trace.normalized || !state.norm) return;
  for (std::size_t j = 0; j < trace.groups.size(); ++j)
    bn_commit(*state.norm, static_cast<Index>(j), trace.groups[j].norm);
}

GradientBundle& GradientBundle::operator+=(const GradientBundle& other) {
  if (keys.size() == 0) {
    *this = other;
    return *this;
  }
  if (keys.rows() != other.keys.rows() || keys.cols() != other.keys.cols() || values.rows() != other.values.rows() ||
      values.cols() != other.values.cols() || queries.cols() != other.queries.cols())
    throw InvalidArgument("GradientBundle: shape mismatch");
  keys += other.keys;
  values += other.values;
  if (bn_gamma.size() != 0 && other.bn_gamma.size() != 0) {
    bn_gamma += other.bn_gamma;
    bn_beta += other.bn_beta;
  }
  Matrix q(queries.rows() + other.queries.rows(), queries.cols());
  q << queries, other.queries;
  queries = std::move(q);
  rows.insert(rows.end(), other.rows.begin(), other.rows.end());
  reg_loss += other.reg_loss;
  return *this;
}

Matrix GradientBundle::dense_queries(Index vocab_size) const {
  Matrix out = Matrix::Zero(vocab_size, queries.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(rows[r]) += queries.row(static_cast<Index>(r));
  return out;
}

ForwardTrace sx_forward(const QuantizerState& state, const DpqConfig& cfg, std::span<const Index> batch, bool training) {
  if (cfg.mode != Mode::sx) throw InvalidArgument("sx_forward requires SX mode");
  ForwardTrace t = begin_trace(state, cfg, batch, training, cfg.distance);
  const Index b = t.queries.rows();
  const Index s = cfg.sub_dim();
  const ProductTable& values = state.values();
  t.output.resize(b, cfg.dim);
  for (Index j = 0; j < cfg.num_groups; ++j) {
    auto& g = t.groups[static_cast<std::size_t>(j)];
    const Matrix& sel = selection_logits(g, t.normalized);
    g.soft = softmax_rows(sel, cfg.tau_backward);
    if (cfg.tau_forward > 0.0) {
      t.output.middleCols(j * s, s) = softmax_rows(sel, cfg.tau_forward) * values.group(j);
    } else {
      for (Index r = 0; r < b; ++r) t.output.row(r).segment(j * s, s) = values.group(j).row(t.codes(r, j));
    }
  }
  return t;
}

Matrix sx_soft_output(const QuantizerState& state, const DpqConfig& cfg, std::span<const Index> batch, bool training) {
  const ForwardTrace t = sx_forward(state, cfg, batch, training);
  const Index s = cfg.sub_dim();
  Matrix out(t.queries.rows(), cfg.dim);
  for (Index j = 0; j < cfg.num_groups; ++j)
    out.middleCols(j * s, s) = t.groups[static_cast<std::size_t>(j)].soft * state.values().group(j);
  return out;
}

GradientBundle sx_backward(const ForwardTrace& trace, const Matrix& upstream, const QuantizerState& state,
                           const DpqConfig& cfg) {
  if (trace.mode != Mode::sx) throw InvalidArgument("sx_backward requires an SX trace");
  check_upstream(trace, upstream);
  GradientBundle gb = empty_bundle(trace, state, cfg);
  const Index s = cfg.sub_dim();
  const ProductTable& values = state.values();
  const double inv_tau = 1.0 / cfg.tau_backward;

  for (Index j = 0; j < cfg.num_groups; ++j) {
    const auto& g = trace.groups[static_cast<std::size_t>(j)];
    const Matrix up = upstream.middleCols(j * s, s);
    const Matrix vj = values.group(j);

    gb.values.middleCols(values.block_col(j), s) += g.soft.transpose() * up;

    // Softmax backward: dy = (1/tau) p .* (dp - <p, dp>).
    const Matrix dp = up * vj.transpose();
    Matrix dy = g.soft.cwiseProduct(dp);
    const Eigen::VectorXd inner = dy.rowwise().sum();
    dy = inv_tau * g.soft.cwiseProduct(dp.colwise() - inner);

    Matrix dlogits = dy;
    if (trace.normalized) {
      const auto& bn = g.norm;
      const DistanceNorm& norm = *state.norm;
      Matrix dcentered = dy;
      for (Index k = 0; k < dy.cols(); ++k) {
        if (norm.affine) {
          gb.bn_gamma(j, k) += dy.col(k).dot(bn.centered.col(k));
          gb.bn_beta(j, k) += dy.col(k).sum();
          dcentered.col(k) *= norm.gamma(j, k);
        }
        if (bn.training) {
          const auto dc = dcentered.col(k).array();
          const auto xc = bn.centered.col(k).array();
          dlogits.col(k) = (bn.inv_std(k) * (dc - dc.mean() - xc * (dc * xc).mean())).matrix();
        } else {
          dlogits.col(k) = bn.inv_std(k) * dcentered.col(k);
        }
      }
    }

    const SimilarityGrad sg =
        similarity_backward(trace.queries.middleCols(j * s, s), state.keys.group(j), cfg.distance, dlogits);
    gb.queries.middleCols(j * s, s) += sg.queries;
    gb.keys.middleCols(state.keys.block_col(j), s) += sg.keys;
  }
  return gb;
}

ForwardTrace vq_forward(const QuantizerState& state, const DpqConfig& cfg, std::span<const Index> batch, bool training) {
  if (cfg.mode != Mode::vq) throw InvalidArgument("vq_forward requires VQ mode");
  ForwardTrace t = begin_trace(state, cfg, batch, training, Distance::euclidean);
  const Index b = t.queries.rows();
  const Index s = cfg.sub_dim();
  const ProductTable& values = state.values();
  t.output.resize(b, cfg.dim);
  for (Index j = 0; j < cfg.num_groups; ++j)
    for (Index r = 0; r < b; ++r) t.output.row(r).segment(j * s, s) = values.group(j).row(t.codes(r, j));
  return t;
}

GradientBundle vq_backward(const ForwardTrace& trace, const Matrix& upstream, const QuantizerState& state,
                           const DpqConfig& cfg) {
  if (trace.mode != Mode::vq) throw InvalidArgument("vq_backward requires a VQ trace");
  check_upstream(trace, upstream);
  GradientBundle gb = empty_bundle(trace, state, cfg);
  gb.queries = upstream;

  const Index s = cfg.sub_dim();
  const ProductTable& values = state.values();
  const double reg = cfg.reg_coefficient;
  if (reg == 0.0) return gb;
  for (Index j = 0; j < cfg.num_groups; ++j) {
    const Index col = values.block_col(j);
    for (Index r = 0; r < trace.queries.rows(); ++r) {
      const Index c = trace.codes(r, j);
      const RowVector diff = values.group(j).row(c) - trace.queries.row(r).segment(j * s, s);
      gb.reg_loss += reg * diff.squaredNorm();
      gb.values.row(c).segment(col, s) += 2.0 * reg * diff;
    }
  }
  return gb;
}

void ema_update(QuantizerState& state, const ForwardTrace& trace, double decay) {
  if (!state.ema) throw InvalidState("ema_update: EMA accumulators are absent");
  if (trace.mode != Mode::vq) throw InvalidArgument("ema_update requires a VQ trace");
  if (!(decay >= 0.0 && decay < 1.0)) throw InvalidArgument("ema_update: decay must lie in [0, 1)");
  ProductTable& table = state.values();
  EmaState& ema = *state.ema;
  const Index s = table.sub_dim();
  const Index kk = table.rows();

  Matrix members = Matrix::Zero(ema.counts.rows(), kk);
  Matrix sums = Matrix::Zero(ema.sums.rows(), ema.sums.cols());
  for (Index j = 0; j < table.groups(); ++j) {
    const Index block = table.shared() ? 0 : j;
    const Index col = table.block_col(j);
    for (Index r = 0; r < trace.queries.rows(); ++r) {
      const Index c = trace.codes(r, j);
      members(block, c) += 1.0;
      sums.row(c).segment(col, s) += trace.queries.row(r).segment(j * s, s);
    }
  }
  ema.counts = decay * ema.counts + (1.0 - decay) * members;
  ema.sums = decay * ema.sums + (1.0 - decay) * sums;
  for (Index block = 0; block < table.num_blocks(); ++block) {
    const Index col = block * s;
    for (Index k = 0; k < kk; ++k)
      table.data().row(k).segment(col, s) = ema.sums.row(k).segment(col, s) / (ema.counts(block, k) + kEmaEps);
  }
}

}  // namespace dpq
