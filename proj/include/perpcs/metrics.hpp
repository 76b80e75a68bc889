#pragma once

#include <string>
#include <vector>

namespace perpcs {

double accuracy(const std::vector<std::string>& pred, const std::vector<std::string>& gold);
// Mean F1 over classes that appear in gold or predictions.
double macro_f1(const std::vector<std::string>& pred, const std::vector<std::string>& gold);
double mae(const std::vector<int>& pred, const std::vector<int>& gold);
double rmse(const std::vector<int>& pred, const std::vector<int>& gold);

// Whitespace tokens, lowercased.
std::vector<std::string> rouge_tokens(const std::string& text);
// Unigram-overlap F1 and LCS F1 (beta = 1) for one candidate/reference pair.
double rouge_1(const std::string& candidate, const std::string& reference);
double rouge_l(const std::string& candidate, const std::string& reference);

// Unparseable ratings score this far from the gold value.
inline constexpr int kRatingParseFailureError = 4;

// First digit in the text, clamped to [1, 5]; -1 when there is no digit.
int parse_rating(const std::string& text);
// Absolute error of a decoded rating against gold, with the failure policy.
int rating_error(const std::string& decoded, int gold);

}  // namespace perpcs
