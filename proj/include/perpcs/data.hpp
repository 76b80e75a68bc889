#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "perpcs/model.hpp"

namespace perpcs {

inline constexpr int kPadToken = 0;
inline constexpr int kEosToken = 1;
inline constexpr int kQueryToken = 2;
inline constexpr int kHistoryToken = 3;
inline constexpr int kAnswerToken = 4;
inline constexpr int kUnkToken = 5;

// Fixed symbol vocabulary shared by every synthetic task: delimiters, feature
// symbols f0..f63, class labels c0..c15, rating digits 1..5, words w0..w127.
class Vocabulary {
 public:
  static const Vocabulary& standard();

  int id(const std::string& word) const;
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(words_.size()); }

  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

 private:
  Vocabulary();
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

std::vector<std::string> split_words(const std::string& text);

enum class ItemKind { kTask, kFreeForm };

struct HistoryItem {
  std::string input;
  std::optional<std::string> output;
  ItemKind kind = ItemKind::kTask;
};

struct QueryItem {
  std::string input;
  std::string target;
};

struct UserRecord {
  std::uint32_t user_id = 0;
  std::vector<HistoryItem> items;
  std::vector<QueryItem> queries;
  int prototype = -1;  // generator ground truth; diagnostics only

  std::size_t history_size() const { return items.size(); }
};

struct SplitManifest {
  std::vector<std::uint32_t> base;
  std::vector<std::uint32_t> sharer_candidates;
  std::vector<std::uint32_t> targets;

  // Throws if any id appears in two splits.
  void check_disjoint() const;
};

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string corpus_to_jsonl(const std::vector<UserRecord>& users);
std::vector<UserRecord> corpus_from_jsonl(const std::string& text);
void save_corpus(const std::vector<UserRecord>& users, const std::filesystem::path& path);
std::vector<UserRecord> load_corpus(const std::filesystem::path& path);
std::string splits_to_json(const SplitManifest& s);
SplitManifest splits_from_json(const std::string& text);

// A tokenized training/scoring sequence.
struct Example {
  std::vector<int> tokens;
  std::vector<std::uint8_t> loss_mask;  // 1 where the token is a prediction target
  int span_begin = 1;                   // 1-based, inclusive
  int span_end = 1;
  int prompt_length = 0;                // |x|
};

// Prompt construction: retrieved items (may be empty) followed by the query.
std::vector<int> build_prompt(const std::string& query, const std::vector<const HistoryItem*>& retrieved);

// Task-formatted sequence x + y + EOS with the loss on y and EOS and scoring
// span b=|x|+1, e=|x|+|y|+1.
Example make_task_example(const std::string& input, const std::string& output,
                          const std::vector<const HistoryItem*>& retrieved = {});
// Free-form sequence x + EOS, LM loss throughout, span b=1, e=|x|+1.
Example make_freeform_example(const std::string& text);
Example make_history_example(const HistoryItem& item);

struct LmBatch {
  TokenBatch tokens;
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
};

LmBatch make_lm_batch(const std::vector<const Example*>& examples);

}  // namespace perpcs
