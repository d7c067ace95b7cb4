#include <gtest/gtest.h>

#include "dpq/core.hpp"
#include "support.hpp"

using namespace dpq;

namespace {

DpqConfig small_config(Index n, Index d, Index k, Index groups, Distance metric) {
  DpqConfig cfg;
  cfg.vocab_size = n;
  cfg.dim = d;
  cfg.num_codes = k;
  cfg.num_groups = groups;
  cfg.distance = metric;
  return cfg;
}

Codebook codebook(std::initializer_list<std::initializer_list<int>> rows, Index k) {
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

// V^(1) = [[1,2],[3,4]], V^(2) = [[5,6],[7,8]].
ProductTable two_group_values() {
  Matrix v(2, 4);
  v << 1, 2, 5, 6, 3, 4, 7, 8;
  return ProductTable(v, 2, false);
}

}  // namespace

TEST(Config, Validation) {
  DpqConfig cfg = small_config(10, 8, 4, 2, Distance::dot);
  EXPECT_NO_THROW(cfg.validate());
  cfg.num_groups = 3;
  EXPECT_THROW(cfg.validate(), InvalidArgument);
  cfg.num_groups = 2;
  cfg.num_codes = 1;
  EXPECT_THROW(cfg.validate(), InvalidArgument);
  cfg.num_codes = 4;
  cfg.mode = Mode::vq;
  EXPECT_THROW(cfg.validate(), InvalidArgument);  // VQ is euclidean only
  cfg.distance = Distance::euclidean;
  EXPECT_NO_THROW(cfg.validate());
  cfg.ema_decay = 1.0;
  EXPECT_THROW(cfg.validate(), InvalidArgument);
  cfg.ema_decay = 0.99;
  cfg.mode = Mode::sx;
  EXPECT_THROW(cfg.validate(), InvalidArgument);
}

TEST(Config, TiedAndSharedState) {
  DpqConfig cfg = small_config(5, 8, 4, 2, Distance::euclidean);
  cfg.mode = Mode::vq;
  cfg.subspace_sharing = true;
  Rng rng(1);
  QuantizerState st = init_state(cfg, rng);
  EXPECT_TRUE(st.tied());
  EXPECT_EQ(&st.values(), &st.keys);
  EXPECT_EQ(st.keys.data().cols(), 4);
  EXPECT_EQ(st.keys.group(0), st.keys.group(1));
  st.keys.data()(0, 0) = 9.0;
  EXPECT_EQ(st.values().group(1)(0, 0), 9.0);
}

TEST(Discretize, NearestCentroidEuclidean) {
  DpqConfig cfg = small_config(1, 2, 2, 1, Distance::euclidean);
  Rng rng(0);
  QuantizerState st = init_state(cfg, rng);
  st.keys.data() << 0, 0, 1, 1;
  st.queries << 0.9, 1.1;
  const std::vector<Index> rows{0};
  EXPECT_EQ(discretize(st, cfg, rows).codes(0, 0), 1);
}

TEST(Discretize, LargerDotProduct) {
  DpqConfig cfg = small_config(1, 2, 2, 1, Distance::dot);
  Rng rng(0);
  QuantizerState st = init_state(cfg, rng);
  st.keys.data() << 1, 0, 0, 1;
  st.queries << 2, 1;
  const std::vector<Index> rows{0};
  EXPECT_EQ(discretize(st, cfg, rows).codes(0, 0), 0);
}

TEST(Discretize, TieBreaksToSmallestIndex) {
  for (Distance metric : {Distance::euclidean, Distance::dot, Distance::cosine}) {
    DpqConfig cfg = small_config(1, 2, 3, 1, metric);
    Rng rng(0);
    QuantizerState st = init_state(cfg, rng);
    st.keys.data() << -1, 0, 1, 0, 1, 0;
    st.queries << 0, 1;
    const std::vector<Index> rows{0};
    EXPECT_EQ(discretize(st, cfg, rows).codes(0, 0), 0) << to_string(metric);
  }
}

TEST(Discretize, EmptyAndOutOfRange) {
  DpqConfig cfg = small_config(3, 4, 2, 2, Distance::dot);
  Rng rng(0);
  QuantizerState st = init_state(cfg, rng);
  EXPECT_EQ(discretize(st, cfg, std::vector<Index>{}).rows(), 0);
  EXPECT_THROW(discretize(st, cfg, std::vector<Index>{3}), InvalidArgument);
}

TEST(Discretize, Deterministic) {
  DpqConfig cfg = small_config(40, 8, 4, 4, Distance::cosine);
  Rng rng(3);
  const QuantizerState st = init_state(cfg, rng);
  EXPECT_EQ(discretize_all(st, cfg), discretize_all(st, cfg));
}

TEST(ReverseDiscretize, Concatenation) {
  const ProductTable v = two_group_values();
  const std::vector<std::int32_t> c10{1, 0}, c00{0, 0};
  EXPECT_EQ(reverse_discretize(c10, v), (RowVector(4) << 3, 4, 5, 6).finished());
  EXPECT_EQ(reverse_discretize(c00, v), (RowVector(4) << 1, 2, 5, 6).finished());
}

TEST(ReverseDiscretize, SharedBlock) {
  Matrix block(2, 2);
  block << 1, 2, 3, 4;
  const ProductTable v(block, 2, true);
  const std::vector<std::int32_t> c{1, 1};
  EXPECT_EQ(reverse_discretize(c, v), (RowVector(4) << 3, 4, 3, 4).finished());
}

TEST(ReverseDiscretize, CorruptCode) {
  const ProductTable v = two_group_values();
  const std::vector<std::int32_t> bad{2, 0};
  EXPECT_THROW(reverse_discretize(bad, v), CorruptCodebook);
}

TEST(ReverseDiscretize, ChangingOneGroupTouchesOnlyItsColumns) {
  Rng rng(17);
  const ProductTable v(rng.normal_matrix(5, 12), 4, false);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::int32_t> c(4);
    for (auto& x : c) x = static_cast<std::int32_t>(rng.below(5));
    const RowVector before = reverse_discretize(c, v);
    const auto j = static_cast<std::size_t>(rng.below(4));
    c[j] = (c[j] + 1 + static_cast<std::int32_t>(rng.below(4))) % 5;
    const RowVector after = reverse_discretize(c, v);
    for (Index col = 0; col < 12; ++col) {
      const bool inside = col / 3 == static_cast<Index>(j);
      if (!inside) EXPECT_EQ(before(col), after(col));
    }
    EXPECT_NE(before.segment(static_cast<Index>(j) * 3, 3), after.segment(static_cast<Index>(j) * 3, 3));
  }
}

TEST(BuildTable, StackedRows) {
  const ProductTable v = two_group_values();
  const Codebook cb = codebook({{1, 0}, {0, 0}, {1, 0}}, 2);
  const EmbeddingTable h = build_table(cb, v);
  Matrix expected(3, 4);
  expected << 3, 4, 5, 6, 1, 2, 5, 6, 3, 4, 5, 6;
  EXPECT_EQ(h, expected);
  EXPECT_EQ(h.row(0), h.row(2));
  const Codebook single = codebook({{0, 1}}, 2);
  const std::vector<std::int32_t> c01{0, 1};
  EXPECT_EQ(RowVector(build_table(single, v).row(0)), reverse_discretize(c01, v));
}

TEST(CompressionStats, SpotInstances) {
  const CompressionStats plain = compression_stats(10000, 64, 16, 8, false);
  EXPECT_EQ(plain.full_bits, 20'480'000u);
  EXPECT_EQ(plain.compressed_bits, 352'768u);
  EXPECT_NEAR(plain.ratio, 58.06, 0.01);
  const CompressionStats shared = compression_stats(10000, 64, 16, 8, true);
  EXPECT_EQ(shared.compressed_bits, 324'096u);
  EXPECT_NEAR(shared.ratio, 63.19, 0.01);
}

TEST(CompressionStats, BinaryCodesPerDimension) {
  for (Index n : {1, 7, 1000}) {
    const CompressionStats s = compression_stats(n, 16, 2, 16, false);
    EXPECT_EQ(s.compressed_bits - 32u * 2u * 16u, s.full_bits / 32u);
  }
}

TEST(CompressionStats, NonPowerOfTwoPadsCodes) {
  EXPECT_EQ(code_bits(2), 1);
  EXPECT_EQ(code_bits(3), 2);
  EXPECT_EQ(code_bits(16), 4);
  EXPECT_EQ(code_bits(17), 5);
  EXPECT_EQ(code_bits(100), 7);
  EXPECT_EQ(compression_stats(10, 4, 100, 2, false).compressed_bits, 10u * 2u * 7u + 32u * 100u * 4u);
}

TEST(CompressionStats, RatioAboveOneInCompactRegime) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const Index groups = Index{1} << rng.below(4);
    const Index d = groups * (1 + static_cast<Index>(rng.below(16)));
    const Index k = 2 + static_cast<Index>(rng.below(64));
    const Index n = 1 + static_cast<Index>(rng.below(100000));
    const CompressionStats s = compression_stats(n, d, k, groups, false);
    if (s.compressed_bits < s.full_bits) EXPECT_GT(s.ratio, 1.0);
  }
}

TEST(RankCertificate, FourRowExample) {
  const Codebook cb = codebook({{0, 0}, {0, 1}, {1, 0}, {1, 1}}, 2);
  Matrix v(2, 2);
  v << 1, 1, 2, 3;
  const RankCertificate cert = rank_certificate(cb, ProductTable(v, 2, false));
  EXPECT_EQ(cert.rank_table, 2);
  EXPECT_TRUE(cert.proposition_holds);
  EXPECT_TRUE(cert.values_full_rank);
  EXPECT_TRUE(cert.enough_codes);
  // Every one-hot row has exactly one 1 per group, so (1,1,-1,-1) is in the
  // null space of B: rank(B) = 3, below min(n, KD) = 4.
  EXPECT_EQ(cert.rank_one_hot, 3);
  EXPECT_FALSE(cert.one_hot_full_rank);
}

TEST(RankCertificate, RepeatedCodesAndTooFewCodes) {
  const Codebook same = codebook({{1, 0}, {1, 0}, {1, 0}}, 2);
  const RankCertificate rep = rank_certificate(same, two_group_values());
  EXPECT_EQ(rep.rank_one_hot, 1);
  EXPECT_FALSE(rep.one_hot_full_rank);

  Rng rng(2);
  const Codebook cb = codebook({{0}, {1}}, 2);
  const RankCertificate few = rank_certificate(cb, ProductTable(rng.normal_matrix(2, 3), 1, false));
  EXPECT_FALSE(few.enough_codes);
  EXPECT_FALSE(few.conditions_hold());
}

TEST(RankCertificate, PropertyHoldsUnderAllConditions) {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const auto c = check::make_rank_construction(rng, check::Violation::none);
    const RankCertificate cert = rank_certificate(c.codes, c.values);
    ASSERT_TRUE(cert.conditions_hold());
    EXPECT_EQ(cert.rank_table, std::min(c.codes.rows(), c.values.full_dim()));
    EXPECT_TRUE(cert.proposition_holds);
  }
}

TEST(OneHot, BlocksHaveSingleOne) {
  const Codebook cb = codebook({{0, 2, 1}, {1, 1, 0}}, 3);
  const Matrix b = one_hot(cb);
  ASSERT_EQ(b.cols(), 9);
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 3; ++j) EXPECT_EQ(b.row(i).segment(j * 3, 3).sum(), 1.0);
  EXPECT_EQ(b(0, 5), 1.0);
}
