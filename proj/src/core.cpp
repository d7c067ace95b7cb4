#include "dpq/core.hpp"

#include <algorithm>
#include <bit>

namespace dpq {

const char* to_string(Mode m) { return m == Mode::sx ? "sx" : "vq"; }

Mode parse_mode(const std::string& s) {
  if (s == "sx") return Mode::sx;
  if (s == "vq") return Mode::vq;
  throw InvalidArgument("unknown mode '" + s + "'");
}

void DpqConfig::validate() const {
  if (vocab_size < 1) throw InvalidArgument("vocabulary size must be positive");
  if (dim < 1) throw InvalidArgument("embedding dimension must be positive");
  if (num_codes < 2) throw InvalidArgument("K must be at least 2");
  if (num_groups < 1) throw InvalidArgument("D must be at least 1");
  if (dim % num_groups != 0) throw InvalidArgument("D must divide d");
  if (num_codes > (Index{1} << 31) - 1) throw InvalidArgument("K too large");
  if (mode == Mode::vq && distance != Distance::euclidean)
    throw InvalidArgument("VQ mode supports the euclidean distance only");
  if (!(tau_forward >= 0.0)) throw InvalidArgument("tau_forward must be non-negative");
  if (!(tau_backward > 0.0)) throw InvalidArgument("tau_backward must be positive");
  if (!(reg_coefficient >= 0.0)) throw InvalidArgument("reg_coefficient must be non-negative");
  if (ema_decay) {
    if (mode != Mode::vq) throw InvalidArgument("EMA centroid updates require VQ mode");
    if (!(*ema_decay >= 0.0 && *ema_decay < 1.0)) throw InvalidArgument("ema_decay must lie in [0, 1)");
  }
  if (!(bn_momentum >= 0.0 && bn_momentum < 1.0)) throw InvalidArgument("bn_momentum must lie in [0, 1)");
  if (!(bn_eps >= 0.0)) throw InvalidArgument("bn_eps must be non-negative");
}

ProductTable::ProductTable(Matrix data, Index groups, bool shared) : data_(std::move(data)), groups_(groups), shared_(shared) {
  if (groups < 1) throw InvalidArgument("ProductTable: groups must be positive");
  require_finite(data_, "ProductTable");
  if (shared) {
    sub_dim_ = data_.cols();
  } else {
    if (data_.cols() % groups != 0) throw InvalidArgument("ProductTable: groups must divide the column count");
    sub_dim_ = data_.cols() / groups;
  }
}

Matrix ProductTable::expanded() const {
  if (!shared_) return data_;
  Matrix out(rows(), full_dim());
  for (Index j = 0; j < groups_; ++j) out.middleCols(j * sub_dim_, sub_dim_) = data_;
  return out;
}

DistanceNorm DistanceNorm::identity(Index groups, Index num_codes, const DpqConfig& cfg) {
  DistanceNorm n;
  n.running_mean = Matrix::Zero(groups, num_codes);
  n.running_var = Matrix::Ones(groups, num_codes);
  n.gamma = Matrix::Ones(groups, num_codes);
  n.beta = Matrix::Zero(groups, num_codes);
  n.affine = cfg.bn_affine;
  n.momentum = cfg.bn_momentum;
  n.eps = cfg.bn_eps;
  return n;
}

Matrix DistanceNorm::apply_running(const Matrix& logits, Index group) const {
  Matrix out(logits.rows(), logits.cols());
  for (Index k = 0; k < logits.cols(); ++k) {
    const double inv = 1.0 / std::sqrt(running_var(group, k) + eps);
    out.col(k) = (logits.col(k).array() - running_mean(group, k)) * inv;
    if (affine) out.col(k) = out.col(k).array() * gamma(group, k) + beta(group, k);
  }
  return out;
}

QuantizerState init_state(const DpqConfig& cfg, Rng& rng, std::optional<Matrix> queries) {
  cfg.validate();
  const Index s = cfg.sub_dim();
  const double bound = 0.5 / std::sqrt(static_cast<double>(s));
  const Index width = s * cfg.num_blocks();

  QuantizerState st;
  if (queries) {
    if (queries->rows() != cfg.vocab_size || queries->cols() != cfg.dim)
      throw InvalidArgument("init_state: query matrix shape does not match the config");
    require_finite(*queries, "init_state");
    st.queries = std::move(*queries);
  } else {
    st.queries = rng.uniform_matrix(cfg.vocab_size, cfg.dim, -bound, bound);
  }
  st.keys = ProductTable(rng.uniform_matrix(cfg.num_codes, width, -bound, bound), cfg.num_groups, cfg.subspace_sharing);
  if (!cfg.tied())
    st.untied_values =
        ProductTable(rng.uniform_matrix(cfg.num_codes, width, -bound, bound), cfg.num_groups, cfg.subspace_sharing);
  if (cfg.batch_norm) st.norm = DistanceNorm::identity(cfg.num_groups, cfg.num_codes, cfg);
  if (cfg.ema_decay) {
    // Start from one virtual member sitting on each centroid.
    st.ema = EmaState{Matrix::Ones(cfg.num_blocks(), cfg.num_codes), st.keys.data()};
  }
  return st;
}

void Codebook::validate() const {
  if (num_codes < 1) throw CorruptCodebook("codebook: K must be positive");
  if (codes.size() == 0) return;
  if (codes.minCoeff() < 0 || codes.maxCoeff() >= num_codes)
    throw CorruptCodebook("codebook: code outside {0.." + std::to_string(num_codes - 1) + "}");
}

Matrix one_hot(const Codebook& codes) {
  codes.validate();
  const Index k = codes.num_codes;
  Matrix b = Matrix::Zero(codes.rows(), k * codes.groups());
  for (Index i = 0; i < codes.rows(); ++i)
    for (Index j = 0; j < codes.groups(); ++j) b(i, j * k + codes.codes(i, j)) = 1.0;
  return b;
}

Codebook discretize(const QuantizerState& state, const DpqConfig& cfg, std::span<const Index> rows) {
  const Index b = static_cast<Index>(rows.size());
  Codebook out{CodeMatrix(b, cfg.num_groups), cfg.num_codes};
  if (b == 0) return out;

  Matrix batch(b, cfg.dim);
  for (Index r = 0; r < b; ++r) {
    const Index i = rows[static_cast<std::size_t>(r)];
    if (i < 0 || i >= state.queries.rows()) throw InvalidArgument("discretize: row index out of range");
    batch.row(r) = state.queries.row(i);
  }
  const bool normalize = cfg.batch_norm && state.norm.has_value();
  const Index s = cfg.sub_dim();
  for (Index j = 0; j < cfg.num_groups; ++j) {
    Matrix logits = similarity(batch.middleCols(j * s, s), state.keys.group(j), cfg.distance);
    if (normalize) logits = state.norm->apply_running(logits, j);
    for (Index r = 0; r < b; ++r) out.codes(r, j) = static_cast<std::int32_t>(argmax_first(logits.row(r)));
  }
  return out;
}

Codebook discretize_all(const QuantizerState& state, const DpqConfig& cfg) {
  std::vector<Index> rows(static_cast<std::size_t>(state.queries.rows()));
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<Index>(i);
  return discretize(state, cfg, rows);
}

RowVector reverse_discretize(std::span<const std::int32_t> codes, const ProductTable& values) {
  if (static_cast<Index>(codes.size()) != values.groups())
    throw InvalidArgument("reverse_discretize: code length does not match the number of groups");
  const Index s = values.sub_dim();
  RowVector out(values.full_dim());
  for (Index j = 0; j < values.groups(); ++j) {
    const auto c = codes[static_cast<std::size_t>(j)];
    if (c < 0 || c >= values.rows()) throw CorruptCodebook("reverse_discretize: code " + std::to_string(c) + " out of range");
    out.segment(j * s, s) = values.group(j).row(c);
  }
  return out;
}

EmbeddingTable build_table(const Codebook& codes, const ProductTable& values) {
  if (codes.num_codes != values.rows()) throw InvalidArgument("build_table: K mismatch between codebook and values");
  EmbeddingTable h(codes.rows(), values.full_dim());
  for (Index i = 0; i < codes.rows(); ++i)
    h.row(i) = reverse_discretize(std::span<const std::int32_t>(codes.codes.row(i).data(), codes.groups()), values);
  return h;
}

int code_bits(Index num_codes) {
  if (num_codes < 2) throw InvalidArgument("code_bits: K must be at least 2");
  return static_cast<int>(std::bit_width(static_cast<std::uint64_t>(num_codes - 1)));
}

CompressionStats compression_stats(Index vocab_size, Index dim, Index num_codes, Index num_groups, bool shared) {
  const auto n = static_cast<std::uint64_t>(vocab_size);
  const auto d = static_cast<std::uint64_t>(dim);
  const auto k = static_cast<std::uint64_t>(num_codes);
  const auto g = static_cast<std::uint64_t>(num_groups);
  CompressionStats s;
  s.full_bits = 32 * n * d;
  const std::uint64_t value_bits = shared ? 32 * k * d / g : 32 * k * d;
  s.compressed_bits = n * g * static_cast<std::uint64_t>(code_bits(num_codes)) + value_bits;
  s.ratio = static_cast<double>(s.full_bits) / static_cast<double>(s.compressed_bits);
  return s;
}

CompressionStats compression_stats(const DpqConfig& cfg) {
  cfg.validate();
  return compression_stats(cfg.vocab_size, cfg.dim, cfg.num_codes, cfg.num_groups, cfg.subspace_sharing);
}

RankCertificate rank_certificate(const Codebook& codes, const ProductTable& values, double tol) {
  if (codes.groups() != values.groups() || codes.num_codes != values.rows())
    throw InvalidArgument("rank_certificate: codebook and value shapes disagree");
  const Index n = codes.rows();
  const Index k = codes.num_codes;
  const Index groups = codes.groups();
  const Index d = values.full_dim();

  RankCertificate cert;
  cert.rank_one_hot = matrix_rank(one_hot(codes), tol);
  cert.one_hot_full_rank = cert.rank_one_hot == std::min(n, k * groups);

  cert.values_full_rank = true;
  for (Index j = 0; j < groups; ++j) {
    const Matrix block = values.group(j);
    if (matrix_rank(block, tol) != std::min(block.rows(), block.cols())) cert.values_full_rank = false;
  }
  cert.enough_codes = k * groups >= d;

  cert.rank_table = matrix_rank(build_table(codes, values), tol);
  cert.expected_rank = std::min(n, d);
  cert.proposition_holds = cert.rank_table == cert.expected_rank;
  return cert;
}

}  // namespace dpq
