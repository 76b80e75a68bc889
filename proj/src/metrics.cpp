#include "perpcs/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace perpcs {

namespace {

template <typename A, typename B>
void check_sizes(const std::vector<A>& a, const std::vector<B>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("prediction and gold lengths differ");
  if (a.empty()) throw std::invalid_argument("metric over an empty set");
}

// F1 as one rounded division: 2 hits / (predicted + relevant).
double f1_counts(double hits, double predicted, double relevant) {
  return predicted + relevant > 0 ? 2 * hits / (predicted + relevant) : 0.0;
}

// Exact sum of small non-negative fractions; falls back to floating point
// if the common denominator grows too large.
class FractionSum {
 public:
  void add(std::int64_t num, std::int64_t den) {
    approx_ += static_cast<double>(num) / static_cast<double>(den);
    if (!exact_) return;
    const __int128 n = num_ * den + static_cast<__int128>(num) * den_;
    const __int128 d = den_ * den;
    const __int128 g = gcd(n, d);
    num_ = n / g;
    den_ = d / g;
    if (den_ > (static_cast<__int128>(1) << 60)) exact_ = false;
  }
  double divided_by(std::int64_t k) const {
    if (!exact_) return approx_ / static_cast<double>(k);
    const __int128 d = den_ * k;
    const __int128 g = gcd(num_, d);
    return static_cast<double>(static_cast<std::int64_t>(num_ / g)) / static_cast<double>(static_cast<std::int64_t>(d / g));
  }

 private:
  static __int128 gcd(__int128 a, __int128 b) {
    while (b != 0) {
      const __int128 t = a % b;
      a = b;
      b = t;
    }
    return a == 0 ? 1 : a;
  }
  __int128 num_ = 0, den_ = 1;
  double approx_ = 0;
  bool exact_ = true;
};

}  // namespace

double accuracy(const std::vector<std::string>& pred, const std::vector<std::string>& gold) {
  check_sizes(pred, gold);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == gold[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

double macro_f1(const std::vector<std::string>& pred, const std::vector<std::string>& gold) {
  check_sizes(pred, gold);
  std::set<std::string> classes(gold.begin(), gold.end());
  classes.insert(pred.begin(), pred.end());
  FractionSum total;
  for (const auto& c : classes) {
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      tp += pred[i] == c && gold[i] == c;
      fp += pred[i] == c && gold[i] != c;
      fn += pred[i] != c && gold[i] == c;
    }
    // Every class here occurs in gold or predictions, so the denominator is positive.
    total.add(2 * tp, 2 * tp + fp + fn);
  }
  return total.divided_by(static_cast<std::int64_t>(classes.size()));
}

double mae(const std::vector<int>& pred, const std::vector<int>& gold) {
  check_sizes(pred, gold);
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - gold[i]);
  return s / static_cast<double>(pred.size());
}

double rmse(const std::vector<int>& pred, const std::vector<int>& gold) {
  check_sizes(pred, gold);
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += double(pred[i] - gold[i]) * double(pred[i] - gold[i]);
  return std::sqrt(s / static_cast<double>(pred.size()));
}

std::vector<std::string> rouge_tokens(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> out;
  for (std::string w; is >> w;) {
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::tolower(c); });
    out.push_back(w);
  }
  return out;
}

double rouge_1(const std::string& candidate, const std::string& reference) {
  const auto c = rouge_tokens(candidate), r = rouge_tokens(reference);
  if (c.empty() || r.empty()) return 0.0;
  std::map<std::string, int> rc;
  for (const auto& w : r) ++rc[w];
  double overlap = 0;
  for (const auto& w : c)
    if (rc[w]-- > 0) ++overlap;
  return f1_counts(overlap, static_cast<double>(c.size()), static_cast<double>(r.size()));
}

double rouge_l(const std::string& candidate, const std::string& reference) {
  const auto c = rouge_tokens(candidate), r = rouge_tokens(reference);
  if (c.empty() || r.empty()) return 0.0;
  std::vector<std::vector<int>> dp(c.size() + 1, std::vector<int>(r.size() + 1, 0));
  for (std::size_t i = 1; i <= c.size(); ++i)
    for (std::size_t j = 1; j <= r.size(); ++j)
      dp[i][j] = c[i - 1] == r[j - 1] ? dp[i - 1][j - 1] + 1 : std::max(dp[i - 1][j], dp[i][j - 1]);
  const double lcs = dp[c.size()][r.size()];
  return f1_counts(lcs, static_cast<double>(c.size()), static_cast<double>(r.size()));
}

int parse_rating(const std::string& text) {
  for (char ch : text)
    if (std::isdigit(static_cast<unsigned char>(ch))) return std::clamp(ch - '0', 1, 5);
  return -1;
}

int rating_error(const std::string& decoded, int gold) {
  const int r = parse_rating(decoded);
  return r < 0 ? kRatingParseFailureError : std::abs(r - gold);
}

}  // namespace perpcs
