#ifndef DPQ_CODEBOOK_IO_HPP
#define DPQ_CODEBOOK_IO_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dpq/core.hpp"

namespace dpq {

// Codes are written row-major (row outer, group inner), each in
// code_bits(K) bits, filling every byte from its least significant bit. The
// last byte is zero padded.
std::vector<std::uint8_t> pack_codes(const Codebook& codes);
Codebook unpack_codes(std::span<const std::uint8_t> bytes, Index rows, Index groups, Index num_codes);
std::size_t packed_code_bytes(Index rows, Index groups, Index num_codes);

inline constexpr char kArtifactMagic[8] = {'D', 'P', 'Q', 'C', 'B', 'K', '0', '1'};
inline constexpr std::uint16_t kArtifactVersion = 1;
inline constexpr std::size_t kArtifactHeaderBytes = 32;
inline constexpr std::uint16_t kFlagShared = 1u << 0;
inline constexpr std::uint16_t kFlagTied = 1u << 1;

// Everything inference needs: codes plus the binary32-representable value table.
//
// File layout (all integers little-endian):
//   magic "DPQCBK01" | version u16 | flags u16 | n u64 | d u32 | K u32 | D u32
//   packed codes     | values f32, row-major K x d (K x d/D when shared)
//   CRC-32 u32 of the two payload sections
struct CompressedArtifact {
  Codebook codes;
  ProductTable values;
  bool tied = false;

  Index vocab_size() const { return codes.rows(); }
  Index dim() const { return values.full_dim(); }
  Index num_codes() const { return codes.num_codes; }
  Index num_groups() const { return codes.groups(); }
  bool shared() const { return values.shared(); }
};

// Hard codes of every row plus the value table rounded to binary32.
CompressedArtifact make_artifact(const QuantizerState& state, const DpqConfig& cfg);

std::vector<std::uint8_t> serialize_artifact(const CompressedArtifact& artifact);
CompressedArtifact parse_artifact(std::span<const std::uint8_t> bytes);

void save_artifact(const CompressedArtifact& artifact, const std::filesystem::path& path);
CompressedArtifact load_artifact(const std::filesystem::path& path);

// Payload size excluding header and checksum. Each section rounds up to whole
// bytes, so payload_bits() - compression_stats().compressed_bits is in [0, 8).
struct PayloadSize {
  std::uint64_t code_bytes = 0;
  std::uint64_t value_bytes = 0;
  std::uint64_t payload_bits() const { return 8 * (code_bytes + value_bytes); }
};
PayloadSize payload_size(Index rows, Index dim, Index num_codes, Index groups, bool shared);

// Flat UTF-8 `key=value` files, one pair per line; '#' starts a comment line.
using KeyValues = std::map<std::string, std::string>;
KeyValues read_key_values(const std::filesystem::path& path);
void write_key_values(const KeyValues& kv, const std::filesystem::path& path);
std::string format_key_values(const KeyValues& kv);

// DpqConfig <-> key/value pairs under the CLI flag names (n, d, k, d-groups, ...).
KeyValues config_to_key_values(const DpqConfig& cfg);
// Overwrites the fields present in kv; unknown keys are left for the caller.
void apply_config_key_values(DpqConfig& cfg, const KeyValues& kv);
extern const std::vector<std::string> kConfigKeys;

// Full float64 training state (queries, tables, statistics) for checkpoint sidecars.
void save_training_state(const QuantizerState& state, const std::filesystem::path& path);
QuantizerState load_training_state(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace dpq

#endif  // DPQ_CODEBOOK_IO_HPP
