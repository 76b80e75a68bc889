#pragma once

#include <string>
#include <vector>

#include "perpcs/data.hpp"

namespace perpcs {

struct Bm25Params {
  double k1 = 1.2;
  double b = 0.75;
};

// Okapi BM25 over whitespace tokens with idf = ln((N - df + 0.5) / (df + 0.5) + 1).
class Bm25Index {
 public:
  explicit Bm25Index(std::vector<std::vector<std::string>> docs, Bm25Params params = {});
  double score(const std::vector<std::string>& query, std::size_t doc) const;
  // Indices of the top-m documents; ties keep the earlier document.
  std::vector<std::size_t> top(const std::vector<std::string>& query, std::size_t m) const;
  std::size_t size() const { return docs_.size(); }

 private:
  std::vector<std::vector<std::string>> docs_;
  Bm25Params params_;
  double avg_len_ = 0;
};

// Text a history item is indexed under: its input.
std::vector<std::string> retrieval_terms(const HistoryItem& item);

std::vector<const HistoryItem*> lexical_retrieve(const std::string& query, const std::vector<HistoryItem>& history,
                                                 std::size_t m);

}  // namespace perpcs
