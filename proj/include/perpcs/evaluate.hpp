#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "perpcs/metrics.hpp"
#include "perpcs/synth.hpp"

namespace perpcs {

struct QueryPrediction {
  std::uint32_t user = 0;
  TaskKind kind = TaskKind::kClassification;
  std::string input;
  std::string target;
  std::string prediction;
};

// Classification takes the argmax over label tokens at the answer position;
// rating and generation decode greedily until EOS or `max_new_tokens`.
// `retrieval_m` history items chosen by BM25 are prepended to each prompt.
std::vector<QueryPrediction> predict_user(Model& model, SlotAttachment<float>* attach, const UserRecord& user,
                                          const TaskSpec& spec, std::size_t retrieval_m, int max_new_tokens = 4);

struct MetricReport {
  std::string method;
  TaskKind kind = TaskKind::kClassification;
  std::size_t queries = 0;
  double accuracy = 0, macro_f1 = 0;  // classification
  double mae = 0, rmse = 0;           // rating
  double rouge_1 = 0, rouge_l = 0;    // generation
};

// One report per task kind present in `preds`, in TaskKind order.
std::vector<MetricReport> summarize(const std::string& method, const std::vector<QueryPrediction>& preds);

// Report column for the headline metric of a task kind.
double headline(const MetricReport& r);

}  // namespace perpcs
