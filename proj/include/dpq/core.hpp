#ifndef DPQ_CORE_HPP
#define DPQ_CORE_HPP

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dpq/numerics.hpp"

namespace dpq {

enum class Mode { sx, vq };

const char* to_string(Mode m);
Mode parse_mode(const std::string& s);

struct DpqConfig {
  Index vocab_size = 0;  // n
  Index dim = 0;         // d
  Index num_codes = 16;  // K, choices per group
  Index num_groups = 8;  // D
  Mode mode = Mode::sx;
  Distance distance = Distance::dot;
  bool subspace_sharing = false;
  double tau_forward = 0.0;  // 0 emits the hard code
  double tau_backward = 1.0;
  double reg_coefficient = 1.0;
  std::optional<double> ema_decay;  // VQ only; replaces gradient updates of the centroids

  // Normalization of per-centroid logits over the batch.
  bool batch_norm = false;
  bool bn_affine = false;
  double bn_momentum = 0.9;
  double bn_eps = 1e-5;

  Index sub_dim() const { return dim / num_groups; }
  Index num_blocks() const { return subspace_sharing ? 1 : num_groups; }
  bool tied() const { return mode == Mode::vq; }

  // Throws InvalidArgument on the first violated constraint.
  void validate() const;
};

// K x d matrix split into D column groups of width d/D. When shared, a single
// K x (d/D) block stands for every group.
class ProductTable {
public:
  ProductTable() = default;
  ProductTable(Matrix data, Index groups, bool shared);

  Index rows() const { return data_.rows(); }
  Index groups() const { return groups_; }
  Index sub_dim() const { return sub_dim_; }
  bool shared() const { return shared_; }
  Index num_blocks() const { return shared_ ? 1 : groups_; }
  Index full_dim() const { return sub_dim_ * groups_; }
  Index block_col(Index group) const { return shared_ ? 0 : group * sub_dim_; }

  auto group(Index j) const { return data_.middleCols(block_col(j), sub_dim_); }
  auto group(Index j) { return data_.middleCols(block_col(j), sub_dim_); }

  const Matrix& data() const { return data_; }
  Matrix& data() { return data_; }

  // Dense K x d view with shared blocks replicated.
  Matrix expanded() const;

private:
  Matrix data_;
  Index groups_ = 0;
  Index sub_dim_ = 0;
  bool shared_ = false;
};

// Running statistics (and optional affine parameters) of the per-centroid
// distance normalization; all matrices are D x K.
struct DistanceNorm {
  Matrix running_mean;
  Matrix running_var;
  Matrix gamma;
  Matrix beta;
  bool affine = false;
  double momentum = 0.9;
  double eps = 1e-5;

  static DistanceNorm identity(Index groups, Index num_codes, const DpqConfig& cfg);
  // Inference transform of the B x K logits of one group.
  Matrix apply_running(const Matrix& logits, Index group) const;
};

// Exponential-moving-average accumulators; counts is num_blocks x K and sums
// has the layout of the key table data.
struct EmaState {
  Matrix counts;
  Matrix sums;
};

struct QuantizerState {
  Matrix queries;  // n x d, training only
  ProductTable keys;
  std::optional<ProductTable> untied_values;  // empty when tied to keys
  std::optional<DistanceNorm> norm;
  std::optional<EmaState> ema;

  bool tied() const { return !untied_values.has_value(); }
  const ProductTable& values() const { return untied_values ? *untied_values : keys; }
  ProductTable& values() { return untied_values ? *untied_values : keys; }
};

// Seeded initialization: keys and values uniform in +-0.5/sqrt(d/D) per group.
// Queries are drawn the same way unless given.
QuantizerState init_state(const DpqConfig& cfg, Rng& rng, std::optional<Matrix> queries = std::nullopt);

using CodeMatrix = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// n x D codes in {0..K-1}.
struct Codebook {
  CodeMatrix codes;
  Index num_codes = 0;

  Index rows() const { return codes.rows(); }
  Index groups() const { return codes.cols(); }
  // Throws CorruptCodebook when any entry is outside {0..K-1}.
  void validate() const;
  bool operator==(const Codebook&) const = default;
};

using EmbeddingTable = Matrix;

// n x KD binary matrix with one one-hot block of width K per group.
Matrix one_hot(const Codebook& codes);

// Arg-selection per group over (normalized) similarity logits.
Codebook discretize(const QuantizerState& state, const DpqConfig& cfg, std::span<const Index> rows);
Codebook discretize_all(const QuantizerState& state, const DpqConfig& cfg);

// Pure indexing and concatenation of the value sub-rows selected by `codes`.
RowVector reverse_discretize(std::span<const std::int32_t> codes, const ProductTable& values);
EmbeddingTable build_table(const Codebook& codes, const ProductTable& values);

// Number of bits per stored code, ceil(log2 K).
int code_bits(Index num_codes);

struct CompressionStats {
  std::uint64_t full_bits = 0;
  std::uint64_t compressed_bits = 0;
  double ratio = 0.0;
};

CompressionStats compression_stats(Index vocab_size, Index dim, Index num_codes, Index num_groups, bool shared);
CompressionStats compression_stats(const DpqConfig& cfg);

struct RankCertificate {
  bool one_hot_full_rank = false;  // rank(B) = min(n, KD)
  bool values_full_rank = false;   // every V^(j) has rank min(K, d/D)
  bool enough_codes = false;       // KD >= d
  Index rank_one_hot = 0;
  Index rank_table = 0;
  Index expected_rank = 0;  // min(n, d)
  bool proposition_holds = false;

  bool conditions_hold() const { return one_hot_full_rank && values_full_rank && enough_codes; }
};

RankCertificate rank_certificate(const Codebook& codes, const ProductTable& values, double tol = 1e-9);

}  // namespace dpq

#endif  // DPQ_CORE_HPP
