// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "congater/types.hpp"

namespace congater {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Example {
  TokenSequence tokens;
  int task_label = 0;
  std::map<std::string, int> attr_labels;

  friend bool operator==(const Example&, const Example&) = default;
};

struct Candidate {
  TokenSequence tokens;
  int relevance = 0;
  double neutrality = 1.0;

  friend bool operator==(const Candidate&, const Candidate&) = default;
};

struct RankingExample {
  TokenSequence query;
  std::vector<Candidate> candidates;

  friend bool operator==(const RankingExample&, const RankingExample&) = default;
};

/// Marker word ids per attribute, one list per attribute class.
using Wordlists = std::map<std::string, std::vector<std::vector<TokenId>>>;

/// Closed whitespace vocabulary; unknown words map to kUnkId.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words);

  TokenId id(const std::string& word) const;
  const std::string& word(TokenId id) const;
  std::size_t size() const { return words_.size(); }
  TokenSequence tokenize(const std::string& text) const;
  const std::vector<std::string>& words() const { return words_; }

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> index_;
};

struct SynthAttribute {
  std::string name;
  std::size_t classes = 2;
};

struct SynthConfig {
  std::size_t n_examples = 10000;
  std::size_t vocab_size = 512;
  std::size_t task_classes = 4;
  std::vector<SynthAttribute> attributes{{"gender", 2}};
  /// Probability that an example's markers come from its own attribute class
  /// (otherwise from a uniformly drawn class).
  double rho_corr = 0.9;
  /// Fraction of the vocabulary reserved for marker words, split evenly
  /// across all attribute classes.
  double marker_share = 0.05;
  /// Fraction of the vocabulary reserved for topic words.
  double topic_share = 0.25;
  /// Probability that a non-marker position draws from the label's topic.
  double topic_rate = 0.5;
  std::size_t min_length = 12;
  std::size_t max_length = 24;
  std::size_t markers_per_example = 4;
  /// Probability that an attribute label copies task_label mod classes
  /// instead of being drawn uniformly; creates imbalanced cells.
  double attribute_skew = 0.0;

  // Retrieval-only settings.
  std::size_t n_queries = 600;
  std::size_t candidates_per_query = 20;
  std::size_t relevant_per_query = 2;
  std::size_t query_length = 6;
  std::size_t background_size = 1000;
  /// Probability that a non-relevant document carries markers.
  double doc_marker_rate = 0.4;
  std::size_t max_doc_markers = 4;

  std::uint64_t seed = 13;

  void validate() const;
};

template <typename T>
struct Splits {
  std::vector<T> train;
  std::vector<T> val;
  std::vector<T> test;
};

struct ClassificationDataset {
  Splits<Example> splits;
  Vocabulary vocab;
  Wordlists wordlists;
};

struct RetrievalDataset {
  Splits<RankingExample> splits;
  std::vector<TokenSequence> background;
  Vocabulary vocab;
  Wordlists wordlists;
};

/// Train/val/test sizes in 63:12:15 proportion.
std::array<std::size_t, 3> split_sizes(std::size_t n);

ClassificationDataset gen_classification(const SynthConfig& config);
RetrievalDataset gen_retrieval(const SynthConfig& config);

/// max(0, 1 - (tokens found in any word list) / |tokens|).
double doc_neutrality(const TokenSequence& tokens, const Wordlists& wordlists);

/// Repeats minority items so that, within each task label, every class of
/// `attribute` has the count of the largest class.
std::vector<Example> balance_upsample(const std::vector<Example>& train, const std::string& attribute);

std::vector<Example> load_classification_jsonl(const std::filesystem::path& path);
void write_classification_jsonl(const std::filesystem::path& path, const std::vector<Example>& data);
/// Neutrality of each candidate is recomputed from `wordlists`.
std::vector<RankingExample> load_ranking_jsonl(const std::filesystem::path& path, const Wordlists& wordlists);
void write_ranking_jsonl(const std::filesystem::path& path, const std::vector<RankingExample>& data);
std::vector<TokenSequence> load_documents_jsonl(const std::filesystem::path& path);
void write_documents_jsonl(const std::filesystem::path& path, const std::vector<TokenSequence>& docs);

/// One text file per attribute class, named <attribute>_<class>.txt, one word per line.
void save_wordlists(const std::filesystem::path& dir, const Wordlists& wordlists, const Vocabulary& vocab);
Wordlists load_wordlists(const std::filesystem::path& dir, const Vocabulary& vocab);

}  // namespace congater
