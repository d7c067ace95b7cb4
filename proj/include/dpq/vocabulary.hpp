#ifndef DPQ_VOCABULARY_HPP
#define DPQ_VOCABULARY_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dpq/numerics.hpp"

namespace dpq {

// Token <-> id map. Ids are assigned by descending frequency, ties broken by
// byte-wise token order.
class Vocabulary {
public:
  Vocabulary() = default;
  static Vocabulary from_counts(const std::map<std::string, std::uint64_t>& counts, std::uint64_t min_count);
  // Synthetic vocabularies name token i "w<i>".
  static Vocabulary numbered(Index size);

  Index size() const { return static_cast<Index>(tokens_.size()); }
  const std::string& token(Index id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::uint64_t count(Index id) const { return counts_.at(static_cast<std::size_t>(id)); }
  std::optional<Index> find(const std::string& token) const;

  // TSV: token <tab> count, one per line, in id order.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

private:
  void add(std::string token, std::uint64_t count);

  std::vector<std::string> tokens_;
  std::vector<std::uint64_t> counts_;
  std::unordered_map<std::string, Index> ids_;
};

}  // namespace dpq

#endif  // DPQ_VOCABULARY_HPP
