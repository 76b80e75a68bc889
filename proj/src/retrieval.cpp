#include "perpcs/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace perpcs {

Bm25Index::Bm25Index(std::vector<std::vector<std::string>> docs, Bm25Params params)
    : docs_(std::move(docs)), params_(params) {
  std::size_t total = 0;
  for (const auto& d : docs_) total += d.size();
  avg_len_ = docs_.empty() ? 0.0 : static_cast<double>(total) / static_cast<double>(docs_.size());
}

double Bm25Index::score(const std::vector<std::string>& query, std::size_t doc) const {
  const auto& d = docs_.at(doc);
  const double n = static_cast<double>(docs_.size());
  const double len_norm = avg_len_ > 0 ? static_cast<double>(d.size()) / avg_len_ : 0.0;
  double s = 0;
  for (const auto& term : query) {
    const double tf = static_cast<double>(std::count(d.begin(), d.end(), term));
    if (tf == 0) continue;
    double df = 0;
    for (const auto& other : docs_) df += std::find(other.begin(), other.end(), term) != other.end();
    const double idf = std::log((n - df + 0.5) / (df + 0.5) + 1.0);
    s += idf * tf * (params_.k1 + 1) / (tf + params_.k1 * (1 - params_.b + params_.b * len_norm));
  }
  return s;
}

std::vector<std::size_t> Bm25Index::top(const std::vector<std::string>& query, std::size_t m) const {
  std::vector<double> scores(docs_.size());
  for (std::size_t i = 0; i < docs_.size(); ++i) scores[i] = score(query, i);
  std::vector<std::size_t> idx(docs_.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(std::min(m, idx.size()));
  return idx;
}

std::vector<std::string> retrieval_terms(const HistoryItem& item) { return split_words(item.input); }

std::vector<const HistoryItem*> lexical_retrieve(const std::string& query, const std::vector<HistoryItem>& history,
                                                 std::size_t m) {
  if (m == 0 || history.empty()) return {};
  std::vector<std::vector<std::string>> docs;
  for (const auto& h : history) docs.push_back(retrieval_terms(h));
  Bm25Index index(std::move(docs));
  std::vector<const HistoryItem*> out;
  for (auto i : index.top(split_words(query), m)) out.push_back(&history[i]);
  return out;
}

}  // namespace perpcs
