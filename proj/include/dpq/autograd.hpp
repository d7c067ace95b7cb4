#ifndef DPQ_AUTOGRAD_HPP
#define DPQ_AUTOGRAD_HPP

#include <span>
#include <vector>

#include "dpq/core.hpp"

namespace dpq {

// Result of normalizing the B x K logits of one group.
struct BnBatch {
  Matrix output;    // after the optional affine transform
  Matrix centered;  // (x - mean) / sqrt(var + eps)
  RowVector mean;
  RowVector var;  // biased batch variance
  RowVector inv_std;
  bool training = false;
};

// Pure transform: batch statistics when training (B >= 2), running
// statistics otherwise.
BnBatch bn_transform(const Matrix& logits, const DistanceNorm& norm, Index group, bool training);

// bn_transform plus, when training, the running-statistics update
//   running <- momentum * running + (1 - momentum) * batch.
BnBatch bn_normalize(const Matrix& logits, DistanceNorm& norm, Index group, bool training);

// Folds the batch statistics recorded in `batch` into the running averages.
void bn_commit(DistanceNorm& norm, Index group, const BnBatch& batch);

struct GroupTrace {
  Matrix logits;  // raw similarities, B x K
  BnBatch norm;   // populated when normalization is active
  Matrix soft;    // SX: softmax(normalized / tau_backward)
};

struct ForwardTrace {
  Mode mode = Mode::sx;
  std::vector<Index> rows;
  Matrix queries;  // batch query rows at forward time, B x d
  std::vector<GroupTrace> groups;
  CodeMatrix codes;  // B x D hard codes
  Matrix output;     // emitted embedding rows, B x d
  bool normalized = false;
};

// Gradients with the shapes of QuantizerState. Query gradients are kept per
// batch row (rows outside the batch are implicitly zero). In tied mode the
// shared key/value storage receives keys + values.
struct GradientBundle {
  std::vector<Index> rows;
  Matrix queries;
  Matrix keys;
  Matrix values;
  Matrix bn_gamma;
  Matrix bn_beta;
  double reg_loss = 0.0;

  // Sums two bundles from disjoint or overlapping batch shards.
  GradientBundle& operator+=(const GradientBundle& other);
  // Scatters the per-row query gradients into an n x d matrix, accumulating duplicates.
  Matrix dense_queries(Index vocab_size) const;
};

// Forward pass of the softmax relaxation. The emitted rows are the hard
// (tau -> 0) lookups unless cfg.tau_forward > 0.
ForwardTrace sx_forward(const QuantizerState& state, const DpqConfig& cfg, std::span<const Index> batch,
                        bool training = true);

// Exact gradients of sum(upstream .* soft_output) where soft_output is the
// tau_backward relaxation, through normalization and similarity into
// queries, keys and values.
GradientBundle sx_backward(const ForwardTrace& trace, const Matrix& upstream, const QuantizerState& state,
                           const DpqConfig& cfg);

// The fully soft output at tau_backward (the function sx_backward differentiates).
Matrix sx_soft_output(const QuantizerState& state, const DpqConfig& cfg, std::span<const Index> batch,
                      bool training = true);

ForwardTrace vq_forward(const QuantizerState& state, const DpqConfig& cfg, std::span<const Index> batch,
                        bool training = true);

// Straight-through: query gradients equal upstream. Centroid gradients and
// reg_loss come from reg_coefficient * sum_i |centroid(i) - sg(q_i)|^2.
GradientBundle vq_backward(const ForwardTrace& trace, const Matrix& upstream, const QuantizerState& state,
                           const DpqConfig& cfg);

// Moving-average centroid update from the trace's assignments:
//   count <- decay * count + (1 - decay) * members
//   sum   <- decay * sum   + (1 - decay) * sum(member segments)
//   centroid <- sum / (count + kEmaEps)
inline constexpr double kEmaEps = 1e-5;
void ema_update(QuantizerState& state, const ForwardTrace& trace, double decay);

// Folds the trace's batch statistics into state.norm.
void commit_norm_stats(QuantizerState& state, const ForwardTrace& trace);

}  // namespace dpq

#endif  // DPQ_AUTOGRAD_HPP
