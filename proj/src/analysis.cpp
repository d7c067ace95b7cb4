#include "dpq/analysis.hpp"

#include <algorithm>
#include <cstdio>

namespace dpq {

namespace {

std::string token_name(Index id, const Vocabulary* vocab) {
  if (vocab && id < vocab->size()) return vocab->token(id);
  return std::to_string(id);
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

CodeHistogram code_distribution(const Codebook& codes) {
  codes.validate();
  CodeHistogram h{CountMatrix::Zero(codes.groups(), codes.num_codes)};
  for (Index i = 0; i < codes.rows(); ++i)
    for (Index j = 0; j < codes.groups(); ++j) ++h.counts(j, codes.codes(i, j));
  return h;
}

CheckpointDelta code_change_rate(const Codebook& a, const Codebook& b, std::uint64_t step_from, std::uint64_t step_to) {
  if (a.rows() != b.rows() || a.groups() != b.groups())
    throw InvalidArgument("code_change_rate: codebook shapes differ");
  CheckpointDelta d;
  d.step_from = step_from;
  d.step_to = step_to;
  d.total = static_cast<std::uint64_t>(a.rows() * a.groups());
  d.changed = static_cast<std::uint64_t>((a.codes.array() != b.codes.array()).count());
  d.fraction = d.total == 0 ? 0.0 : static_cast<double>(d.changed) / static_cast<double>(d.total);
  return d;
}

NeighborList nearest_neighbors(const EmbeddingTable& table, Index query, Index top) {
  if (query < 0 || query >= table.rows()) throw InvalidArgument("nearest_neighbors: query id out of range");
  if (top < 0 || top > table.rows()) throw InvalidArgument("nearest_neighbors: top exceeds the vocabulary size");
  const double qn = table.row(query).norm();
  if (qn == 0.0) throw InvalidArgument("nearest_neighbors: query embedding has zero norm");

  NeighborList out;
  std::vector<Neighbor> others;
  for (Index i = 0; i < table.rows(); ++i) {
    if (i == query) continue;
    const double n = table.row(i).norm();
    if (n == 0.0) {
      ++out.zero_norm_skipped;
      continue;
    }
    const double sim = std::clamp(table.row(i).dot(table.row(query)) / (n * qn), -1.0, 1.0);
    others.push_back({i, sim});
  }
  std::sort(others.begin(), others.end(), [](const Neighbor& a, const Neighbor& b) {
    return a.similarity != b.similarity ? a.similarity > b.similarity : a.token < b.token;
  });
  if (top == 0) return out;
  out.ranked.push_back({query, 1.0});
  for (const Neighbor& nb : others) {
    if (static_cast<Index>(out.ranked.size()) >= top) break;
    out.ranked.push_back(nb);
  }
  return out;
}

std::string histogram_tsv(const CodeHistogram& h) {
  std::string out;
  for (Index j = 0; j < h.counts.rows(); ++j) {
    for (Index k = 0; k < h.counts.cols(); ++k) {
      if (k) out += '\t';
      out += std::to_string(h.counts(j, k));
    }
    out += '\n';
  }
  return out;
}

std::string delta_tsv(std::span<const CheckpointDelta> deltas) {
  std::string out = "step\tfraction\n";
  for (const auto& d : deltas) out += std::to_string(d.step_to) + '\t' + fixed(d.fraction, 6) + '\n';
  return out;
}

std::string neighbors_tsv(const NeighborList& list, const Vocabulary* vocab) {
  std::string out;
  for (const auto& nb : list.ranked) out += token_name(nb.token, vocab) + '\t' + fixed(nb.similarity, 3) + '\n';
  return out;
}

std::string export_code_table(const Codebook& codes, const Vocabulary* vocab, std::span<const Index> ids) {
  std::string out = "token";
  for (Index j = 0; j < codes.groups(); ++j) out += "\tc" + std::to_string(j);
  out += '\n';
  for (Index id : ids) {
    if (id < 0 || id >= codes.rows()) throw InvalidArgument("export_code_table: unknown token id " + std::to_string(id));
    out += token_name(id, vocab);
    for (Index j = 0; j < codes.groups(); ++j) out += '\t' + std::to_string(codes.codes(id, j));
    out += '\n';
  }
  return out;
}

}  // namespace dpq
