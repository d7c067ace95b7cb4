#include "dpq/vocabulary.hpp"

#include <algorithm>
#include <fstream>

namespace dpq {

void Vocabulary::add(std::string token, std::uint64_t count) {
  if (ids_.count(token)) throw InvalidDataset("duplicate vocabulary token '" + token + "'");
  ids_.emplace(token, size());
  tokens_.push_back(std::move(token));
  counts_.push_back(count);
}

Vocabulary Vocabulary::from_counts(const std::map<std::string, std::uint64_t>& counts, std::uint64_t min_count) {
  std::vector<std::pair<std::string, std::uint64_t>> kept;
  for (const auto& [tok, c] : counts)
    if (c >= min_count) kept.emplace_back(tok, c);
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (auto& [tok, c] : kept) v.add(std::move(tok), c);
  return v;
}

Vocabulary Vocabulary::numbered(Index size) {
  Vocabulary v;
  for (Index i = 0; i < size; ++i) v.add("w" + std::to_string(i), 0);
  return v;
}

std::optional<Index> Vocabulary::find(const std::string& token) const {
  const auto it = ids_.find(token);
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidArgument("cannot write " + path.string());
  for (std::size_t i = 0; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << counts_[i] << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidDataset("cannot open vocabulary " + path.string());
  Vocabulary v;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) throw InvalidDataset("vocabulary line without a tab: " + line);
    v.add(line.substr(0, tab), std::stoull(line.substr(tab + 1)));
  }
  return v;
}

}  // namespace dpq
