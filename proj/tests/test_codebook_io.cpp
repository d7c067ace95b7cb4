#include <gtest/gtest.h>

#include <bit>
#include <cstring>
#include <filesystem>

#include <unistd.h>

#include "dpq/codebook_io.hpp"
#include "support.hpp"

using namespace dpq;

namespace {

Codebook row_codes(std::initializer_list<int> codes, Index groups, Index k) {
  const Index n = static_cast<Index>(codes.size()) / groups;
  Codebook cb{CodeMatrix(n, groups), k};
  Index at = 0;
  for (int c : codes) cb.codes(at / groups, at % groups) = c, ++at;
  return cb;
}

Codebook random_codes(Rng& rng, Index n, Index groups, Index k) {
  Codebook cb{CodeMatrix(n, groups), k};
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < groups; ++j) cb.codes(i, j) = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(k)));
  return cb;
}

// One bit at a time into a vector<bool>, then bytes: no shared code with pack_codes.
std::vector<std::uint8_t> naive_pack(const Codebook& cb) {
  int b = 0;
  while ((1 << b) < cb.num_codes) ++b;
  std::vector<bool> bits;
  for (Index i = 0; i < cb.rows(); ++i)
    for (Index j = 0; j < cb.groups(); ++j)
      for (int t = 0; t < b; ++t) bits.push_back((cb.codes(i, j) >> t) & 1);
  std::vector<std::uint8_t> out((bits.size() + 7) / 8, 0);
  for (std::size_t p = 0; p < bits.size(); ++p)
    if (bits[p]) out[p / 8] |= static_cast<std::uint8_t>(1u << (p % 8));
  return out;
}

DpqConfig io_config(Index n, Index d, Index k, Index groups, bool shared, Mode mode) {
  DpqConfig cfg;
  cfg.vocab_size = n;
  cfg.dim = d;
  cfg.num_codes = k;
  cfg.num_groups = groups;
  cfg.subspace_sharing = shared;
  cfg.mode = mode;
  cfg.distance = Distance::euclidean;
  return cfg;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("dpq_io_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST(PackCodes, NibblesLowFirst) {
  const auto bytes = pack_codes(row_codes({3, 10}, 2, 16));
  ASSERT_EQ(bytes.size(), 1u);
  EXPECT_EQ(bytes[0], 0xA3);
  EXPECT_EQ(unpack_codes(bytes, 1, 2, 16), row_codes({3, 10}, 2, 16));
}

TEST(PackCodes, SingleBitsLsbFirst) {
  const auto bytes = pack_codes(row_codes({1, 0, 1, 1, 0, 0, 0, 0}, 8, 2));
  ASSERT_EQ(bytes.size(), 1u);
  EXPECT_EQ(bytes[0], 0x0D);
}

TEST(PackCodes, ByteAlignedIsVerbatim) {
  Rng rng(3);
  const Codebook cb = random_codes(rng, 5, 3, 256);
  const auto bytes = pack_codes(cb);
  ASSERT_EQ(bytes.size(), 15u);
  for (Index i = 0; i < 15; ++i) EXPECT_EQ(bytes[static_cast<std::size_t>(i)], cb.codes(i / 3, i % 3));
}

TEST(PackCodes, MatchesBitwiseReference) {
  Rng rng(11);
  for (Index k : {2, 3, 5, 6, 7, 16, 100, 300}) {
    const Codebook cb = random_codes(rng, 13, 3, k);
    EXPECT_EQ(pack_codes(cb), naive_pack(cb)) << "K=" << k;
    EXPECT_EQ(pack_codes(cb).size(), packed_code_bytes(13, 3, k));
  }
}

TEST(UnpackCodes, ZerosAndTruncation) {
  const std::vector<std::uint8_t> zeros(packed_code_bytes(7, 4, 5), 0);
  const Codebook cb = unpack_codes(zeros, 7, 4, 5);
  EXPECT_TRUE((cb.codes.array() == 0).all());
  std::vector<std::uint8_t> shorter(zeros.begin(), zeros.end() - 1);
  EXPECT_THROW(unpack_codes(shorter, 7, 4, 5), CorruptFile);
}

TEST(UnpackCodes, CodeOutOfRange) {
  // K=5 uses 3 bits; 0b111 = 7 is not a valid code.
  std::vector<std::uint8_t> bytes = {0x07};
  EXPECT_THROW(unpack_codes(bytes, 1, 1, 5), CorruptFile);
}

TEST(UnpackCodes, RoundTripRandomizedK) {
  Rng rng(5);
  for (int trial = 0; trial < 40; ++trial) {
    for (Index k : {3, 5, 6, 100}) {
      const Index n = 1 + static_cast<Index>(rng.below(50));
      const Index g = 1 + static_cast<Index>(rng.below(9));
      const Codebook cb = random_codes(rng, n, g, k);
      const auto bytes = pack_codes(cb);
      const Codebook back = unpack_codes(bytes, n, g, k);
      ASSERT_EQ(back, cb);
      ASSERT_EQ(pack_codes(back), bytes);
    }
  }
}

TEST(Artifact, SaveLoadRoundTrip) {
  Rng rng(7);
  const DpqConfig cfg = io_config(40, 12, 6, 3, false, Mode::sx);
  const QuantizerState st = init_state(cfg, rng);
  const CompressedArtifact a = make_artifact(st, cfg);
  const auto path = temp_path("roundtrip.dpq");
  save_artifact(a, path);
  const CompressedArtifact b = load_artifact(path);
  EXPECT_EQ(b.codes, a.codes);
  EXPECT_EQ(b.values.data(), a.values.data());
  EXPECT_FALSE(b.tied);
  EXPECT_EQ(b.dim(), 12);
  // values survive as binary32
  for (Index i = 0; i < a.values.data().size(); ++i)
    EXPECT_EQ(a.values.data().data()[i], static_cast<double>(static_cast<float>(st.values().data().data()[i])));
  save_artifact(b, path);
  const auto again = read_file(path);
  EXPECT_EQ(again, serialize_artifact(a));
  std::filesystem::remove(path);
}

TEST(Artifact, DecodesWithoutTrainingState) {
  Rng rng(8);
  const DpqConfig cfg = io_config(20, 8, 4, 2, false, Mode::vq);
  const QuantizerState st = init_state(cfg, rng);
  const CompressedArtifact a = parse_artifact(serialize_artifact(make_artifact(st, cfg)));
  EXPECT_TRUE(a.tied);
  const Codebook direct = discretize_all(st, cfg);
  EXPECT_EQ(a.codes, direct);
  const Matrix emb = build_table(a.codes, a.values);
  EXPECT_EQ(emb.rows(), 20);
  EXPECT_EQ(emb.cols(), 8);
}

TEST(Artifact, PayloadMatchesCompressionStats) {
  Rng rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    const Index k = 2 + static_cast<Index>(rng.below(60));
    const Index g = 1 + static_cast<Index>(rng.below(6));
    const Index d = g * (1 + static_cast<Index>(rng.below(4)));
    const Index n = 1 + static_cast<Index>(rng.below(500));
    const bool shared = rng.below(2) == 1;
    const PayloadSize ps = payload_size(n, d, k, g, shared);
    const CompressionStats cs = compression_stats(n, d, k, g, shared);
    // only the code section can need padding; values are whole f32s
    EXPECT_GE(ps.payload_bits(), cs.compressed_bits);
    EXPECT_LT(ps.payload_bits() - cs.compressed_bits, 8u);
    const auto bytes = serialize_artifact(
        CompressedArtifact{random_codes(rng, n, g, k), ProductTable(Matrix::Zero(k, shared ? d / g : d), g, shared), false});
    EXPECT_EQ(bytes.size(), kArtifactHeaderBytes + ps.code_bytes + ps.value_bytes + 4);
  }
}

TEST(Artifact, SharedBlockServesEveryGroup) {
  Rng rng(10);
  const DpqConfig cfg = io_config(15, 12, 4, 3, true, Mode::sx);
  const QuantizerState st = init_state(cfg, rng);
  const CompressedArtifact a = parse_artifact(serialize_artifact(make_artifact(st, cfg)));
  EXPECT_TRUE(a.shared());
  EXPECT_EQ(a.values.data().cols(), 4);
  EXPECT_EQ(a.values.group(0), a.values.group(2));
  EXPECT_EQ(a.dim(), 12);
}

TEST(Artifact, RejectsBadHeaderAndCorruption) {
  Rng rng(12);
  const DpqConfig cfg = io_config(10, 4, 4, 2, false, Mode::sx);
  const auto good = serialize_artifact(make_artifact(init_state(cfg, rng), cfg));
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(parse_artifact(bad_magic), UnsupportedFile);
  auto bad_version = good;
  bad_version[8] = 2;
  EXPECT_THROW(parse_artifact(bad_version), UnsupportedFile);
  auto flipped = good;
  flipped[kArtifactHeaderBytes + 1] ^= 0x10;
  EXPECT_THROW(parse_artifact(flipped), CorruptFile);
  auto truncated = good;
  truncated.pop_back();
  EXPECT_THROW(parse_artifact(truncated), CorruptFile);
  EXPECT_THROW(parse_artifact(std::span<const std::uint8_t>(good.data(), 10)), CorruptFile);
}

TEST(ConfigFile, RoundTrip) {
  DpqConfig cfg = io_config(123, 24, 32, 6, true, Mode::vq);
  cfg.tau_forward = 0.1;
  cfg.tau_backward = 1.0 / 3.0;
  cfg.ema_decay = 0.99;
  cfg.reg_coefficient = 0.25;
  const auto path = temp_path("cfg.txt");
  write_key_values(config_to_key_values(cfg), path);
  DpqConfig back;
  apply_config_key_values(back, read_key_values(path));
  EXPECT_EQ(back.vocab_size, 123);
  EXPECT_EQ(back.num_groups, 6);
  EXPECT_TRUE(back.subspace_sharing);
  EXPECT_EQ(back.mode, Mode::vq);
  EXPECT_EQ(back.tau_backward, 1.0 / 3.0);
  ASSERT_TRUE(back.ema_decay.has_value());
  EXPECT_EQ(*back.ema_decay, 0.99);
  EXPECT_EQ(config_to_key_values(back), config_to_key_values(cfg));
  std::filesystem::remove(path);
}

TEST(ConfigFile, MalformedLine) {
  const auto path = temp_path("bad.txt");
  const std::string text = "# comment\nk\n";
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
  EXPECT_THROW(read_key_values(path), InvalidArgument);
  std::filesystem::remove(path);
}

TEST(TrainingState, RoundTrip) {
  Rng rng(13);
  DpqConfig cfg = io_config(9, 6, 3, 3, false, Mode::vq);
  cfg.ema_decay = 0.9;
  cfg.batch_norm = true;
  const QuantizerState st = init_state(cfg, rng);
  const auto path = temp_path("state.bin");
  save_training_state(st, path);
  const QuantizerState back = load_training_state(path);
  EXPECT_EQ(back.queries, st.queries);
  EXPECT_EQ(back.keys.data(), st.keys.data());
  EXPECT_TRUE(back.tied());
  ASSERT_TRUE(back.ema && back.norm);
  EXPECT_EQ(back.ema->counts, st.ema->counts);
  EXPECT_EQ(back.norm->running_var, st.norm->running_var);
  auto bytes = read_file(path);
  bytes[bytes.size() / 2] ^= 1;
  write_file(path, bytes);
  EXPECT_THROW(load_training_state(path), CorruptFile);
  std::filesystem::remove(path);
}
