#include <gtest/gtest.h>

#include "dpq/analysis.hpp"
#include "support.hpp"

using namespace dpq;

namespace {

Codebook codes_of(std::initializer_list<std::initializer_list<int>> rows, Index k) {
  const Index n = static_cast<Index>(rows.size());
  const Index g = static_cast<Index>(rows.begin()->size());
  Codebook cb{CodeMatrix(n, g), k};
  Index i = 0;
  for (const auto& r : rows) {
    Index j = 0;
    for (int c : r) cb.codes(i, j++) = c;
    ++i;
  }
  return cb;
}

}  // namespace

TEST(CodeDistribution, HandCount) {
  const CodeHistogram h = code_distribution(codes_of({{0, 1}, {0, 0}, {1, 1}}, 2));
  CountMatrix want(2, 2);
  want << 2, 1, 1, 2;
  EXPECT_EQ(h.counts, want);
  EXPECT_EQ(histogram_tsv(h), "2\t1\n1\t2\n");
}

TEST(CodeDistribution, RowSumsEqualN) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 1 + static_cast<Index>(rng.below(80)), g = 1 + static_cast<Index>(rng.below(6));
    const Index k = 2 + static_cast<Index>(rng.below(10));
    Codebook cb{CodeMatrix(n, g), k};
    for (Index i = 0; i < n * g; ++i) cb.codes.data()[i] = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
    const CodeHistogram h = code_distribution(cb);
    for (Index j = 0; j < g; ++j) EXPECT_EQ(h.counts.row(j).sum(), n);
  }
  const CodeHistogram same = code_distribution(codes_of({{2, 1}, {2, 1}, {2, 1}}, 3));
  EXPECT_EQ(same.counts(0, 2), 3);
  EXPECT_EQ(same.counts.row(0).sum(), 3);
}

TEST(CodeChangeRate, Examples) {
  const Codebook a = codes_of({{0, 1, 1}, {1, 0, 0}}, 2);
  EXPECT_EQ(code_change_rate(a, a).fraction, 0.0);
  const Codebook half = codes_of({{1, 1, 0}, {1, 1, 0}}, 2);
  const CheckpointDelta d = code_change_rate(a, half, 100, 200);
  EXPECT_EQ(d.changed, 3u);
  EXPECT_EQ(d.total, 6u);
  EXPECT_EQ(d.fraction, 0.5);
  EXPECT_EQ(code_change_rate(half, a).fraction, d.fraction);
  const Codebook comp = codes_of({{1, 0, 0}, {0, 1, 1}}, 2);
  EXPECT_EQ(code_change_rate(a, comp).fraction, 1.0);
  EXPECT_THROW(code_change_rate(a, codes_of({{0, 1}}, 2)), InvalidArgument);
  const CheckpointDelta series[] = {d};
  EXPECT_EQ(delta_tsv(series), "step\tfraction\n200\t0.500000\n");
}

TEST(NearestNeighbors, SelfFirstOrthogonalAndTies) {
  Matrix t(5, 2);
  t << 1, 0,   //
      0, 1,    //
      1, 0,    // duplicate of row 0
      0, 0,    // zero norm
      1, 1;
  const NeighborList nl = nearest_neighbors(t, 2, 4);
  ASSERT_EQ(nl.ranked.size(), 4u);
  EXPECT_EQ(nl.ranked[0].token, 2);
  EXPECT_EQ(nl.ranked[0].similarity, 1.0);
  EXPECT_EQ(nl.ranked[1].token, 0);
  EXPECT_DOUBLE_EQ(nl.ranked[1].similarity, 1.0);
  EXPECT_EQ(nl.ranked[2].token, 4);
  EXPECT_NEAR(nl.ranked[2].similarity, std::sqrt(0.5), 1e-12);
  EXPECT_EQ(nl.ranked[3].token, 1);
  EXPECT_EQ(nl.ranked[3].similarity, 0.0);
  EXPECT_EQ(nl.zero_norm_skipped, 1);
  Vocabulary v = Vocabulary::numbered(5);
  EXPECT_EQ(neighbors_tsv(nl, &v).substr(0, 9), "w2\t1.000\n");
}

TEST(NearestNeighbors, Errors) {
  Matrix t = Matrix::Identity(3, 3);
  EXPECT_THROW(nearest_neighbors(t, 3, 1), InvalidArgument);
  EXPECT_THROW(nearest_neighbors(t, 0, 4), InvalidArgument);
  t.row(1).setZero();
  EXPECT_THROW(nearest_neighbors(t, 1, 2), InvalidArgument);
}

TEST(NearestNeighbors, TotallyOrdered) {
  Rng rng(21);
  const Matrix t = rng.normal_matrix(60, 5);
  const NeighborList nl = nearest_neighbors(t, 17, 60);
  ASSERT_EQ(nl.ranked.size(), 60u);
  for (std::size_t i = 2; i < nl.ranked.size(); ++i) {
    const auto& a = nl.ranked[i - 1];
    const auto& b = nl.ranked[i];
    EXPECT_TRUE(a.similarity > b.similarity || (a.similarity == b.similarity && a.token < b.token));
  }
  const NeighborList again = nearest_neighbors(t, 17, 60);
  for (std::size_t i = 0; i < nl.ranked.size(); ++i) EXPECT_EQ(again.ranked[i].token, nl.ranked[i].token);
}

TEST(ExportCodeTable, Shape) {
  Codebook cb{CodeMatrix::Zero(4, 8), 4};
  cb.codes(3, 7) = 2;
  const Index one[] = {3};
  const std::string s = export_code_table(cb, nullptr, one);
  const auto nl = s.find('\n');
  const std::string row = s.substr(nl + 1);
  EXPECT_EQ(std::count(row.begin(), row.end(), '\t'), 8);
  EXPECT_EQ(row, "3\t0\t0\t0\t0\t0\t0\t0\t2\n");
  EXPECT_EQ(export_code_table(cb, nullptr, {}), "token\tc0\tc1\tc2\tc3\tc4\tc5\tc6\tc7\n");
  Vocabulary v = Vocabulary::numbered(4);
  const Index order[] = {2, 0};
  const std::string two = export_code_table(cb, &v, order);
  EXPECT_NE(two.find("w2\t"), std::string::npos);
  EXPECT_LT(two.find("w2\t"), two.find("w0\t"));
  const Index bad[] = {4};
  EXPECT_THROW(export_code_table(cb, &v, bad), InvalidArgument);
}

TEST(Vocabulary, FrequencyOrderTiesByToken) {
  const Vocabulary v = Vocabulary::from_counts({{"b", 3}, {"a", 3}, {"c", 5}, {"rare", 1}}, 2);
  ASSERT_EQ(v.size(), 3);
  EXPECT_EQ(v.token(0), "c");
  EXPECT_EQ(v.token(1), "a");
  EXPECT_EQ(v.token(2), "b");
  EXPECT_FALSE(v.find("rare").has_value());
  EXPECT_EQ(*v.find("b"), 2);
}
