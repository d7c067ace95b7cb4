#ifndef DPQ_TRAINER_HPP
#define DPQ_TRAINER_HPP

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dpq/autograd.hpp"
#include "dpq/core.hpp"
#include "dpq/dataset.hpp"

namespace dpq {

// ---- optimizer ---------------------------------------------------------------

// Plain SGD with constant step; momentum keeps a velocity per parameter.
struct SgdOptions {
  double lr = 0.1;
  std::optional<double> query_lr;  // defaults to lr
  double momentum = 0.0;

  double query_step() const { return query_lr.value_or(lr); }
};

// Applies GradientBundles to a QuantizerState. With EMA enabled the centroid
// tables are owned by the moving averages and get no gradient step.
class QuantizerOptimizer {
public:
  QuantizerOptimizer(const QuantizerState& state, const DpqConfig& cfg, SgdOptions opt);
  void step(QuantizerState& state, const GradientBundle& g);

private:
  DpqConfig cfg_;
  SgdOptions opt_;
  Matrix v_queries_, v_keys_, v_values_, v_gamma_, v_beta_;
};

// ---- embedding layers ----------------------------------------------------------

enum class EmbeddingKind { full, sx, vq };
const char* to_string(EmbeddingKind k);
EmbeddingKind parse_embedding_kind(const std::string& s);

// Row lookup with a backward pass. The full table and both DPQ variants share
// this interface, so the surrounding model never changes shape or code path.
class EmbeddingLayer {
public:
  virtual ~EmbeddingLayer() = default;
  virtual EmbeddingKind kind() const = 0;
  virtual Index vocab_size() const = 0;
  virtual Index dim() const = 0;
  // Training lookup; remembers what backward needs.
  virtual Matrix lookup(std::span<const Index> rows) = 0;
  // Consumes dL/d(rows of the last lookup), updates parameters, returns the
  // regularizer loss added by the layer (0 for the full table).
  virtual double backward(const Matrix& upstream) = 0;
  // Inference table: n x d, from hard codes when quantized.
  virtual Matrix table() const = 0;
  virtual const QuantizerState* quantizer() const { return nullptr; }
  virtual const DpqConfig* config() const { return nullptr; }
};

class FullEmbedding final : public EmbeddingLayer {
public:
  FullEmbedding(Matrix table, SgdOptions opt);
  EmbeddingKind kind() const override { return EmbeddingKind::full; }
  Index vocab_size() const override { return table_.rows(); }
  Index dim() const override { return table_.cols(); }
  Matrix lookup(std::span<const Index> rows) override;
  double backward(const Matrix& upstream) override;
  Matrix table() const override { return table_; }

private:
  Matrix table_;
  Matrix velocity_;
  SgdOptions opt_;
  std::vector<Index> rows_;
};

// DPQ layer. With shards > 1 the batch is split into contiguous slices whose
// forward and backward passes run on separate threads; the GradientBundles
// are summed before the step.
class DpqEmbedding final : public EmbeddingLayer {
public:
  DpqEmbedding(QuantizerState state, DpqConfig cfg, SgdOptions opt, Index shards = 1);
  EmbeddingKind kind() const override { return cfg_.mode == Mode::sx ? EmbeddingKind::sx : EmbeddingKind::vq; }
  Index vocab_size() const override { return cfg_.vocab_size; }
  Index dim() const override { return cfg_.dim; }
  Matrix lookup(std::span<const Index> rows) override;
  double backward(const Matrix& upstream) override;
  Matrix table() const override;
  const QuantizerState* quantizer() const override { return &state_; }
  const DpqConfig* config() const override { return &cfg_; }
  QuantizerState& state() { return state_; }

private:
  QuantizerState state_;
  DpqConfig cfg_;
  QuantizerOptimizer optimizer_;
  Index shards_;
  std::vector<ForwardTrace> traces_;
};

// ---- reports -------------------------------------------------------------------

struct EpochRecord {
  Index epoch = 0;
  double loss = 0.0;           // mean training loss (per element for reconstruction)
  double metric = 0.0;         // reconstruction MSE, or training accuracy
  std::optional<double> heldout_accuracy;
  double reg_loss = 0.0;
  std::optional<double> code_change;  // fraction of codes changed since the previous record
};

struct TrainReport {
  std::string task;  // "recon" or "classify"
  std::vector<EpochRecord> epochs;
  std::optional<CompressionStats> compression;
  double wall_seconds = 0.0;  // not part of tsv(), which must be reproducible

  const EpochRecord& last() const { return epochs.back(); }
  std::string tsv() const;
};

// Called after every record (including the epoch-0 evaluation).
using EpochHook = std::function<void(const EpochRecord&, const EmbeddingLayer&)>;

struct TrainOptions {
  SgdOptions sgd;
  Index epochs = 10;
  Index batch = 32;
  std::uint64_t seed = 0;
  Index shards = 1;
  Index hidden = 32;                // classifier hidden width
  bool init_keys_from_data = true;  // reconstruction: centroids start at target segments
  EpochHook on_epoch;
};

// ---- reconstruction --------------------------------------------------------------

struct ReconstructionResult {
  QuantizerState state;
  Codebook codes;
  TrainReport report;
};

// Queries start at the target rows. Objective per batch: sum_i |h_i - t_i|^2 / B.
// Record 0 is the evaluation before any step.
ReconstructionResult train_reconstruction(const EmbeddingTable& target, const DpqConfig& cfg, const TrainOptions& opt,
                                          std::optional<QuantizerState> initial = std::nullopt);

// Reconstruction state: queries = target, centroids from distinct target
// segments (or the usual uniform init), values a copy of the keys.
QuantizerState reconstruction_init(const EmbeddingTable& target, const DpqConfig& cfg, bool keys_from_data, Rng& rng);

// ---- classifier ------------------------------------------------------------------

// Mean-pool of token embeddings, one rectified hidden layer, softmax output.
// Output weights stay dense whatever the embedding.
class ClassifierModel {
public:
  ClassifierModel(std::unique_ptr<EmbeddingLayer> embedding, Index hidden, int classes, Rng& rng, SgdOptions opt);

  EmbeddingLayer& embedding() { return *embedding_; }
  const EmbeddingLayer& embedding() const { return *embedding_; }
  // (name, rows, cols) of every parameter after the embedding.
  std::vector<std::tuple<std::string, Index, Index>> downstream_shapes() const;

  // One SGD step on a batch; returns {cross-entropy, regularizer}. A
  // non-finite forward pass returns NaN and leaves the parameters alone.
  std::pair<double, double> train_step(const TextDataset& data, std::span<const Index> docs);
  // Predicted class per document using the inference table.
  std::vector<int> predict(const TextDataset& data, const Matrix& table) const;
  double accuracy(const TextDataset& data, const Matrix& table) const;

private:
  Matrix pool(const TextDataset& data, std::span<const Index> docs, const Matrix& rows,
              const std::vector<Index>& position) const;

  std::unique_ptr<EmbeddingLayer> embedding_;
  Matrix w1_, b1_, w2_, b2_;  // w1: h x d, w2: classes x h, biases as 1 x m
  Matrix vw1_, vb1_, vw2_, vb2_;
  SgdOptions opt_;
};

std::unique_ptr<EmbeddingLayer> make_embedding(EmbeddingKind kind, const DpqConfig& cfg, const TrainOptions& opt,
                                               Rng& rng);

struct ClassifierResult {
  std::unique_ptr<ClassifierModel> model;
  TrainReport report;
};

// cfg.vocab_size must equal the dataset vocabulary size. For the full kind
// only vocab_size, dim and num_groups (initial scale) are read.
ClassifierResult train_classifier(const DatasetSplit& data, EmbeddingKind kind, const DpqConfig& cfg,
                                  const TrainOptions& opt);

// ---- oracles ---------------------------------------------------------------------

struct KMeansResult {
  ProductTable centroids;  // K x d, one block per group
  Codebook codes;
  double mse = 0.0;              // sum of squared errors / (n * d)
  std::vector<double> history;   // mse after each assignment step
};

// Independent Lloyd iterations per column group. Initial centroids are K
// distinct random rows; an emptied cluster is re-seeded at the member point
// farthest from its centroid (ties to the smaller row).
KMeansResult kmeans_oracle(const EmbeddingTable& target, Index num_codes, Index num_groups, Index iters,
                           std::uint64_t seed);

struct GradCheckSizes {
  Index vocab_size = 8;
  Index dim = 4;
  Index num_codes = 3;
  Index num_groups = 2;
};

struct GradCheckOptions {
  double h = 1e-6;
  bool flip_value_sign = false;  // mutation hook: negates the analytic value gradient
};

struct GradCheckResult {
  double max_rel_err_sx = 0.0;
  bool vq_identity_ok = false;
  double reg_grad_rel_err = 0.0;
  double reg_minimizer_grad = 0.0;  // max |dV| with centroids at their member means

  static constexpr double kSxTolerance = 1e-5;
  static constexpr double kRegTolerance = 1e-6;
  bool passed() const {
    return max_rel_err_sx < kSxTolerance && vq_identity_ok && reg_grad_rel_err < kRegTolerance &&
           reg_minimizer_grad < 1e-9;
  }
};

// Relative error with a 1e-3 floor on the denominator.
double grad_rel_err(const Matrix& analytic, const Matrix& numeric);

// SX is checked under cfg with mode sx; the VQ checks under cfg with mode vq
// and euclidean distance. Only the training switches of cfg are used; the
// sizes come from `sizes`.
GradCheckResult grad_check(const DpqConfig& cfg, std::uint64_t seed, const GradCheckSizes& sizes = {},
                           const GradCheckOptions& opt = {});

}  // namespace dpq

#endif  // DPQ_TRAINER_HPP
