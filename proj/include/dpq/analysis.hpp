#ifndef DPQ_ANALYSIS_HPP
#define DPQ_ANALYSIS_HPP

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dpq/core.hpp"
#include "dpq/vocabulary.hpp"

namespace dpq {

using CountMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// counts(j, k) = number of rows whose group-j code is k.
struct CodeHistogram {
  CountMatrix counts;  // D x K
};

CodeHistogram code_distribution(const Codebook& codes);

struct CheckpointDelta {
  std::uint64_t step_from = 0;
  std::uint64_t step_to = 0;
  std::uint64_t changed = 0;  // code positions that differ
  std::uint64_t total = 0;    // n * D
  double fraction = 0.0;
};

CheckpointDelta code_change_rate(const Codebook& a, const Codebook& b, std::uint64_t step_from = 0,
                                 std::uint64_t step_to = 0);

struct Neighbor {
  Index token = 0;
  double similarity = 0.0;
};

struct NeighborList {
  std::vector<Neighbor> ranked;
  Index zero_norm_skipped = 0;  // rows left out because their norm is zero
};

// Cosine neighbours of `query`: the query itself first at exactly 1.0, then
// descending similarity with ties by token id.
NeighborList nearest_neighbors(const EmbeddingTable& table, Index query, Index top);

// TSV exports. Token columns use the vocabulary when given, the numeric id otherwise.
std::string histogram_tsv(const CodeHistogram& h);
std::string delta_tsv(std::span<const CheckpointDelta> deltas);
std::string neighbors_tsv(const NeighborList& list, const Vocabulary* vocab);
// Header "token c0 .. c{D-1}" then one row per id, in input order.
std::string export_code_table(const Codebook& codes, const Vocabulary* vocab, std::span<const Index> ids);

}  // namespace dpq

#endif  // DPQ_ANALYSIS_HPP
