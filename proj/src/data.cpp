// SPDX-License-Identifier: Apache-2.0
#include "congater/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"

namespace congater {

using nlohmann::json;

// ---------------------------------------------------------------- vocabulary

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], static_cast<TokenId>(i)).second) {
      throw DataError("duplicate vocabulary entry '" + words_[i] + "'");
    }
  }
}

TokenId Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::word(TokenId id) const { return words_.at(static_cast<std::size_t>(id)); }

TokenSequence Vocabulary::tokenize(const std::string& text) const {
  TokenSequence out;
  std::istringstream is(text);
  std::string w;
  while (is >> w) out.push_back(id(w));
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  for (const auto& w : words_) os << w << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) words.push_back(line);
  }
  return Vocabulary(std::move(words));
}

// ---------------------------------------------------------------- synthesis

void SynthConfig::validate() const {
  auto unit = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(std::string(name) + " must lie in [0,1]");
  };
  unit(rho_corr, "rho_corr");
  unit(marker_share, "marker_share");
  unit(topic_share, "topic_share");
  unit(topic_rate, "topic_rate");
  unit(attribute_skew, "attribute_skew");
  unit(doc_marker_rate, "doc_marker_rate");
  if (task_classes < 2) throw std::invalid_argument("task_classes must be at least 2");
  if (attributes.empty()) throw std::invalid_argument("at least one attribute is required");
  for (const auto& a : attributes) {
    if (a.classes < 2) throw std::invalid_argument("attribute '" + a.name + "' needs two or more classes");
  }
  if (min_length < 1 || max_length < min_length) throw std::invalid_argument("invalid length range");
  if (markers_per_example * attributes.size() > min_length) {
    throw std::invalid_argument("markers do not fit into the shortest sequence");
  }
  if (max_doc_markers > min_length) throw std::invalid_argument("document markers exceed min_length");
  if (candidates_per_query < 2 || relevant_per_query < 1 || relevant_per_query >= candidates_per_query) {
    throw std::invalid_argument("need 2+ candidates with at least one relevant and one non-relevant");
  }
}

namespace {

struct Layout {
  std::vector<std::vector<TokenId>> topics;  // per task class / topic
  Wordlists markers;
  std::vector<TokenId> noise;
  Vocabulary vocab;
};

Layout make_layout(const SynthConfig& cfg) {
  std::size_t attr_classes = 0;
  for (const auto& a : cfg.attributes) attr_classes += a.classes;
  const auto per_topic = static_cast<std::size_t>(std::floor(cfg.vocab_size * cfg.topic_share / cfg.task_classes));
  const auto per_marker = static_cast<std::size_t>(std::floor(cfg.vocab_size * cfg.marker_share / attr_classes));
  const std::size_t reserved = static_cast<std::size_t>(kFirstFreeId);
  const std::size_t used = reserved + per_topic * cfg.task_classes + per_marker * attr_classes;
  if (per_topic < 1 || per_marker < 1 || used >= cfg.vocab_size) {
    throw std::invalid_argument("vocab_size " + std::to_string(cfg.vocab_size) +
                                " is too small for the configured topics and markers");
  }
  Layout layout;
  std::vector<std::string> words{"<pad>", "<unk>", "<cls>"};
  auto next = [&](std::string w) {
    words.push_back(std::move(w));
    return static_cast<TokenId>(words.size() - 1);
  };
  layout.topics.resize(cfg.task_classes);
  for (std::size_t c = 0; c < cfg.task_classes; ++c)
    for (std::size_t j = 0; j < per_topic; ++j)
      layout.topics[c].push_back(next("topic" + std::to_string(c) + "_" + std::to_string(j)));
  for (const auto& a : cfg.attributes) {
    auto& lists = layout.markers[a.name];
    lists.resize(a.classes);
    for (std::size_t k = 0; k < a.classes; ++k)
      for (std::size_t j = 0; j < per_marker; ++j)
        lists[k].push_back(next(a.name + std::to_string(k) + "_" + std::to_string(j)));
  }
  for (std::size_t j = 0; words.size() < cfg.vocab_size; ++j) layout.noise.push_back(next("w" + std::to_string(j)));
  layout.vocab = Vocabulary(std::move(words));
  return layout;
}

template <typename T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

TokenSequence topic_text(const Layout& layout, std::size_t topic, std::size_t length, double topic_rate,
                         std::mt19937_64& rng) {
  std::bernoulli_distribution on_topic(topic_rate);
  TokenSequence tokens(length);
  for (auto& t : tokens) t = on_topic(rng) ? pick(layout.topics[topic], rng) : pick(layout.noise, rng);
  return tokens;
}

std::size_t draw_length(const SynthConfig& cfg, std::mt19937_64& rng) {
  return std::uniform_int_distribution<std::size_t>(cfg.min_length, cfg.max_length)(rng);
}

template <typename T>
Splits<T> split(std::vector<T> items) {
  const auto sizes = split_sizes(items.size());
  Splits<T> s;
  s.train.assign(items.begin(), items.begin() + sizes[0]);
  s.val.assign(items.begin() + sizes[0], items.begin() + sizes[0] + sizes[1]);
  s.test.assign(items.begin() + sizes[0] + sizes[1], items.end());
  return s;
}

}  // namespace

std::array<std::size_t, 3> split_sizes(std::size_t n) {
  const std::size_t train = static_cast<std::size_t>(std::llround(n * 63.0 / 90.0));
  const std::size_t val = static_cast<std::size_t>(std::llround(n * 12.0 / 90.0));
  return {train, val, n - train - val};
}

ClassificationDataset gen_classification(const SynthConfig& cfg) {
  cfg.validate();
  Layout layout = make_layout(cfg);
  std::mt19937_64 rng(cfg.seed);
  std::bernoulli_distribution own_class(cfg.rho_corr), skewed(cfg.attribute_skew);
  std::uniform_int_distribution<int> task_dist(0, static_cast<int>(cfg.task_classes) - 1);

  std::vector<Example> items;
  items.reserve(cfg.n_examples);
  for (std::size_t n = 0; n < cfg.n_examples; ++n) {
    Example ex;
    ex.task_label = task_dist(rng);
    ex.tokens = topic_text(layout, static_cast<std::size_t>(ex.task_label), draw_length(cfg, rng), cfg.topic_rate, rng);
    std::vector<std::size_t> slots(ex.tokens.size());
    std::iota(slots.begin(), slots.end(), 0);
    std::shuffle(slots.begin(), slots.end(), rng);
    std::size_t next_slot = 0;
    for (const auto& a : cfg.attributes) {
      const int classes = static_cast<int>(a.classes);
      std::uniform_int_distribution<int> class_dist(0, classes - 1);
      const int label = skewed(rng) ? ex.task_label % classes : class_dist(rng);
      ex.attr_labels[a.name] = label;
      const int source = own_class(rng) ? label : class_dist(rng);
      const auto& words = layout.markers[a.name][static_cast<std::size_t>(source)];
      for (std::size_t m = 0; m < cfg.markers_per_example; ++m) ex.tokens[slots[next_slot++]] = pick(words, rng);
    }
    items.push_back(std::move(ex));
  }
  return {split(std::move(items)), std::move(layout.vocab), std::move(layout.markers)};
}

RetrievalDataset gen_retrieval(const SynthConfig& cfg) {
  cfg.validate();
  Layout layout = make_layout(cfg);
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> topic_dist(0, cfg.task_classes - 1);
  std::uniform_int_distribution<std::size_t> marker_count(1, cfg.max_doc_markers);

  auto document = [&](std::size_t topic, double marker_prob) {
    TokenSequence doc = topic_text(layout, topic, draw_length(cfg, rng), cfg.topic_rate, rng);
    if (std::bernoulli_distribution(marker_prob)(rng) && cfg.max_doc_markers > 0) {
      const auto& attr = pick(cfg.attributes, rng);
      const auto& lists = layout.markers[attr.name];
      const auto& words = pick(lists, rng);
      std::vector<std::size_t> slots(doc.size());
      std::iota(slots.begin(), slots.end(), 0);
      std::shuffle(slots.begin(), slots.end(), rng);
      const std::size_t k = marker_count(rng);
      for (std::size_t m = 0; m < k; ++m) doc[slots[m]] = pick(words, rng);
    }
    return doc;
  };

  std::vector<RankingExample> items;
  items.reserve(cfg.n_queries);
  for (std::size_t q = 0; q < cfg.n_queries; ++q) {
    RankingExample ex;
    const std::size_t topic = topic_dist(rng);
    ex.query.resize(cfg.query_length);
    for (auto& t : ex.query) t = pick(layout.topics[topic], rng);
    for (std::size_t c = 0; c < cfg.candidates_per_query; ++c) {
      const bool relevant = c < cfg.relevant_per_query;
      std::size_t doc_topic = topic;
      if (!relevant) {
        while (doc_topic == topic) doc_topic = topic_dist(rng);
      }
      Candidate cand;
      cand.tokens = document(doc_topic, relevant ? cfg.rho_corr : cfg.doc_marker_rate);
      cand.relevance = relevant ? 1 : 0;
      cand.neutrality = doc_neutrality(cand.tokens, layout.markers);
      ex.candidates.push_back(std::move(cand));
    }
    std::shuffle(ex.candidates.begin(), ex.candidates.end(), rng);
    items.push_back(std::move(ex));
  }
  std::vector<TokenSequence> background;
  background.reserve(cfg.background_size);
  for (std::size_t i = 0; i < cfg.background_size; ++i) background.push_back(document(topic_dist(rng), cfg.doc_marker_rate));
  return {split(std::move(items)), std::move(background), std::move(layout.vocab), std::move(layout.markers)};
}

double doc_neutrality(const TokenSequence& tokens, const Wordlists& wordlists) {
  if (tokens.empty()) throw std::invalid_argument("doc_neutrality: empty document");
  std::set<TokenId> attributed;
  for (const auto& [name, lists] : wordlists)
    for (const auto& list : lists) attributed.insert(list.begin(), list.end());
  std::size_t hits = 0;
  for (auto t : tokens) hits += attributed.count(t);
  return std::max(0.0, 1.0 - static_cast<double>(hits) / static_cast<double>(tokens.size()));
}

std::vector<Example> balance_upsample(const std::vector<Example>& train, const std::string& attribute) {
  std::set<int> tasks, classes;
  std::map<std::pair<int, int>, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < train.size(); ++i) {
    auto it = train[i].attr_labels.find(attribute);
    if (it == train[i].attr_labels.end()) {
      throw DataError("example " + std::to_string(i) + " has no label for attribute '" + attribute + "'");
    }
    tasks.insert(train[i].task_label);
    classes.insert(it->second);
    cells[{train[i].task_label, it->second}].push_back(i);
  }
  std::vector<Example> out = train;
  for (int t : tasks) {
    std::size_t target = 0;
    for (int c : classes) {
      auto it = cells.find({t, c});
      if (it == cells.end()) {
        throw DataError("empty cell (task " + std::to_string(t) + ", " + attribute + " " + std::to_string(c) + ")");
      }
      target = std::max(target, it->second.size());
    }
    for (int c : classes) {
      const auto& members = cells[{t, c}];
      for (std::size_t k = members.size(); k < target; ++k) out.push_back(train[members[k % members.size()]]);
    }
  }
  return out;
}

// ---------------------------------------------------------------- JSONL

namespace {

TokenSequence parse_tokens(const json& j, const std::string& field, std::size_t line) {
  if (!j.is_array()) throw DataError("line " + std::to_string(line) + ": '" + field + "' must be an array");
  TokenSequence out;
  for (const auto& t : j) {
    if (!t.is_number_integer()) {
      throw DataError("line " + std::to_string(line) + ": '" + field + "' must hold integer token ids");
    }
    out.push_back(t.get<TokenId>());
  }
  return out;
}

template <typename Fn>
void for_each_line(const std::filesystem::path& path, Fn fn) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  std::string text;
  std::size_t line = 0;
  while (std::getline(is, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw DataError("line " + std::to_string(line) + ": malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw DataError("line " + std::to_string(line) + ": expected a JSON object");
    fn(j, line);
  }
}

const json& require(const json& j, const char* key, std::size_t line) {
  auto it = j.find(key);
  if (it == j.end()) throw DataError("line " + std::to_string(line) + ": missing '" + key + "'");
  return *it;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  return os;
}

}  // namespace

std::vector<Example> load_classification_jsonl(const std::filesystem::path& path) {
  std::vector<Example> out;
  for_each_line(path, [&](const json& j, std::size_t line) {
    Example ex;
    ex.tokens = parse_tokens(require(j, "tokens", line), "tokens", line);
    const auto& label = require(j, "task_label", line);
    if (!label.is_number_integer()) throw DataError("line " + std::to_string(line) + ": 'task_label' must be an integer");
    ex.task_label = label.get<int>();
    if (auto it = j.find("attrs"); it != j.end()) {
      if (!it->is_object()) throw DataError("line " + std::to_string(line) + ": 'attrs' must be an object");
      for (const auto& [name, value] : it->items()) {
        if (!value.is_number_integer()) {
          throw DataError("line " + std::to_string(line) + ": attribute '" + name + "' must be an integer");
        }
        ex.attr_labels[name] = value.get<int>();
      }
    }
    out.push_back(std::move(ex));
  });
  return out;
}

void write_classification_jsonl(const std::filesystem::path& path, const std::vector<Example>& data) {
  auto os = open_out(path);
  for (const auto& ex : data) {
    json j{{"tokens", ex.tokens}, {"task_label", ex.task_label}, {"attrs", ex.attr_labels}};
    os << j.dump() << '\n';
  }
}

std::vector<RankingExample> load_ranking_jsonl(const std::filesystem::path& path, const Wordlists& wordlists) {
  std::vector<RankingExample> out;
  for_each_line(path, [&](const json& j, std::size_t line) {
    RankingExample ex;
    ex.query = parse_tokens(require(j, "query", line), "query", line);
    const auto& cands = require(j, "candidates", line);
    if (!cands.is_array()) throw DataError("line " + std::to_string(line) + ": 'candidates' must be an array");
    for (const auto& c : cands) {
      Candidate cand;
      cand.tokens = parse_tokens(require(c, "tokens", line), "tokens", line);
      if (cand.tokens.empty()) throw DataError("line " + std::to_string(line) + ": empty candidate document");
      const auto& rel = require(c, "rel", line);
      if (!rel.is_number_integer() || (rel.get<int>() != 0 && rel.get<int>() != 1)) {
        throw DataError("line " + std::to_string(line) + ": 'rel' must be 0 or 1");
      }
      cand.relevance = rel.get<int>();
      cand.neutrality = doc_neutrality(cand.tokens, wordlists);
      ex.candidates.push_back(std::move(cand));
    }
    if (ex.candidates.size() < 2) throw DataError("line " + std::to_string(line) + ": fewer than two candidates");
    out.push_back(std::move(ex));
  });
  return out;
}

void write_ranking_jsonl(const std::filesystem::path& path, const std::vector<RankingExample>& data) {
  auto os = open_out(path);
  for (const auto& ex : data) {
    json cands = json::array();
    for (const auto& c : ex.candidates) cands.push_back({{"tokens", c.tokens}, {"rel", c.relevance}});
    os << json{{"query", ex.query}, {"candidates", cands}}.dump() << '\n';
  }
}

std::vector<TokenSequence> load_documents_jsonl(const std::filesystem::path& path) {
  std::vector<TokenSequence> out;
  for_each_line(path, [&](const json& j, std::size_t line) {
    out.push_back(parse_tokens(require(j, "tokens", line), "tokens", line));
  });
  return out;
}

void write_documents_jsonl(const std::filesystem::path& path, const std::vector<TokenSequence>& docs) {
  auto os = open_out(path);
  for (const auto& d : docs) os << json{{"tokens", d}}.dump() << '\n';
}

void save_wordlists(const std::filesystem::path& dir, const Wordlists& wordlists, const Vocabulary& vocab) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, lists] : wordlists) {
    for (std::size_t k = 0; k < lists.size(); ++k) {
      auto os = open_out(dir / (name + "_" + std::to_string(k) + ".txt"));
      for (auto id : lists[k]) os << vocab.word(id) << '\n';
    }
  }
}

Wordlists load_wordlists(const std::filesystem::path& dir, const Vocabulary& vocab) {
  std::map<std::string, std::map<std::size_t, std::vector<TokenId>>> found;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() != ".txt") continue;
    const std::string stem = entry.path().stem().string();
    const auto cut = stem.rfind('_');
    if (cut == std::string::npos) continue;
    const std::string name = stem.substr(0, cut);
    const std::size_t cls = std::stoul(stem.substr(cut + 1));
    std::ifstream is(entry.path());
    std::string w;
    auto& list = found[name][cls];
    while (std::getline(is, w)) {
      if (w.empty()) continue;
      const TokenId id = vocab.id(w);
      if (id == kUnkId) throw DataError(entry.path().string() + ": word '" + w + "' is not in the vocabulary");
      list.push_back(id);
    }
  }
  Wordlists out;
  for (auto& [name, by_class] : found) {
    std::size_t expected = 0;
    for (auto& [cls, list] : by_class) {
      if (cls != expected++) throw DataError("word lists for '" + name + "' skip class " + std::to_string(cls - 1));
      out[name].push_back(std::move(list));
    }
  }
  return out;
}

}  // namespace congater
