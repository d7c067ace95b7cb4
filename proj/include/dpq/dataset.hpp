#ifndef DPQ_DATASET_HPP
#define DPQ_DATASET_HPP

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dpq/numerics.hpp"
#include "dpq/vocabulary.hpp"

namespace dpq {

struct TextDataset {
  std::vector<std::vector<Index>> documents;
  std::vector<int> labels;
  std::vector<std::string> class_names;
  Vocabulary vocab;

  Index size() const { return static_cast<Index>(documents.size()); }
  int num_classes() const { return static_cast<int>(class_names.size()); }
  // Throws InvalidDataset unless non-empty, ids < vocab size, >= 2 classes
  // and every class has at least one document.
  void validate() const;
  TextDataset subset(std::span<const Index> which) const;
};

// One document per line: label, a single tab, then text split on ASCII
// whitespace. Tokens seen fewer than min_count times are dropped. Class ids
// follow the byte-wise order of the label strings.
TextDataset load_text_dataset(const std::filesystem::path& path, std::uint64_t min_count = 1);

struct DatasetSplit {
  TextDataset train;
  TextDataset heldout;
};

// Seeded shuffle, then the first round(train_fraction * size) documents train.
DatasetSplit split_dataset(const TextDataset& data, double train_fraction, std::uint64_t seed);

// Class-conditional bag of words: every class owns a random block of
// topic_words tokens; each position draws from the document's block with
// probability topic_prob and uniformly from the whole vocabulary otherwise.
struct SyntheticCorpus {
  Index vocab_size = 2000;
  int classes = 4;
  Index doc_length = 20;
  Index documents = 10000;
  Index topic_words = 300;
  double topic_prob = 0.4;
};

TextDataset synthetic_corpus(const SyntheticCorpus& shape, std::uint64_t seed);

}  // namespace dpq

#endif  // DPQ_DATASET_HPP
