#include "dpq/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

namespace dpq {

namespace {

std::vector<std::string> split_ascii_whitespace(const std::string& text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  const auto space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; };
  while (i < text.size()) {
    while (i < text.size() && space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !space(text[i])) ++i;
    if (i > start) out.push_back(text.substr(start, i - start));
  }
  return out;
}

}  // namespace

void TextDataset::validate() const {
  if (documents.empty()) throw InvalidDataset("dataset has no documents");
  if (labels.size() != documents.size()) throw InvalidDataset("label count does not match document count");
  if (num_classes() < 2) throw InvalidDataset("classification needs at least 2 classes");
  std::vector<Index> per_class(class_names.size(), 0);
  for (std::size_t i = 0; i < documents.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes()) throw InvalidDataset("label out of range");
    ++per_class[static_cast<std::size_t>(labels[i])];
    for (Index t : documents[i])
      if (t < 0 || t >= vocab.size()) throw InvalidDataset("token id outside the vocabulary");
  }
  for (std::size_t c = 0; c < per_class.size(); ++c)
    if (per_class[c] == 0) throw InvalidDataset("class '" + class_names[c] + "' has no documents");
}

TextDataset TextDataset::subset(std::span<const Index> which) const {
  TextDataset out;
  out.class_names = class_names;
  out.vocab = vocab;
  for (Index i : which) {
    out.documents.push_back(documents.at(static_cast<std::size_t>(i)));
    out.labels.push_back(labels.at(static_cast<std::size_t>(i)));
  }
  return out;
}

TextDataset load_text_dataset(const std::filesystem::path& path, std::uint64_t min_count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidDataset("cannot open dataset " + path.string());
  std::vector<std::pair<std::string, std::vector<std::string>>> raw;
  std::map<std::string, std::uint64_t> counts;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0)
      throw InvalidDataset(path.string() + ":" + std::to_string(lineno) + ": expected <label>\\t<text>");
    auto tokens = split_ascii_whitespace(line.substr(tab + 1));
    for (const auto& t : tokens) ++counts[t];
    raw.emplace_back(line.substr(0, tab), std::move(tokens));
  }

  TextDataset data;
  data.vocab = Vocabulary::from_counts(counts, min_count);
  std::set<std::string> labels;
  for (const auto& r : raw) labels.insert(r.first);
  data.class_names.assign(labels.begin(), labels.end());
  for (auto& [label, tokens] : raw) {
    std::vector<Index> ids;
    for (const auto& t : tokens)
      if (auto id = data.vocab.find(t)) ids.push_back(*id);
    const auto pos = std::lower_bound(data.class_names.begin(), data.class_names.end(), label);
    data.labels.push_back(static_cast<int>(pos - data.class_names.begin()));
    data.documents.push_back(std::move(ids));
  }
  data.validate();
  return data;
}

DatasetSplit split_dataset(const TextDataset& data, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw InvalidArgument("train fraction must lie in (0, 1)");
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng(seed);
  rng.shuffle(order);
  const auto cut = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(order.size())));
  return {data.subset(std::span(order).first(cut)), data.subset(std::span(order).subspan(cut))};
}

TextDataset synthetic_corpus(const SyntheticCorpus& shape, std::uint64_t seed) {
  if (shape.classes < 2 || shape.vocab_size < shape.classes * shape.topic_words || shape.doc_length < 1 ||
      shape.topic_words < 1 || !(shape.topic_prob >= 0.0 && shape.topic_prob <= 1.0))
    throw InvalidArgument("synthetic corpus parameters are inconsistent");
  Rng rng(seed);
  std::vector<Index> perm(static_cast<std::size_t>(shape.vocab_size));
  std::iota(perm.begin(), perm.end(), Index{0});
  rng.shuffle(perm);

  TextDataset data;
  for (int c = 0; c < shape.classes; ++c) data.class_names.push_back("c" + std::to_string(c));
  data.vocab = Vocabulary::numbered(shape.vocab_size);
  for (Index i = 0; i < shape.documents; ++i) {
    const int label = static_cast<int>(rng.below(static_cast<std::uint64_t>(shape.classes)));
    std::vector<Index> doc(static_cast<std::size_t>(shape.doc_length));
    for (auto& t : doc) {
      if (rng.uniform() < shape.topic_prob)
        t = perm[static_cast<std::size_t>(label * shape.topic_words +
                                          static_cast<Index>(rng.below(static_cast<std::uint64_t>(shape.topic_words))))];
      else
        t = static_cast<Index>(rng.below(static_cast<std::uint64_t>(shape.vocab_size)));
    }
    data.documents.push_back(std::move(doc));
    data.labels.push_back(label);
  }
  return data;
}

}  // namespace dpq
