#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <json.hpp>
#include <string>
#include <vector>

#include "perpcs/assembler.hpp"
#include "perpcs/pipeline.hpp"
#include "perpcs/synth.hpp"
#include "perpcs/train.hpp"

namespace perpcs {

inline constexpr int kConfigSchemaVersion = 1;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SweepConfig {
  std::vector<int> sharer_counts{10, 20, 30, 40, 50};
  std::vector<SelectionStrategy> strategies{SelectionStrategy::kMostActive, SelectionStrategy::kProfileCluster,
                                            SelectionStrategy::kHistoryCluster};
  std::vector<double> share_ratios{0.2, 0.4, 0.6, 0.8, 1.0};
  // Upper bounds of the history-size buckets; the last bucket is open.
  std::vector<int> activity_edges{25, 35};
  std::vector<SelectionMode> ablations{SelectionMode::kTopkAgg, SelectionMode::kToppAgg, SelectionMode::kTopkSample,
                                       SelectionMode::kUniform};
};

struct RunConfig {
  std::uint64_t seed = 7;
  int workers = 1;
  std::string out_dir = "runs/default";
  ModelConfig model;
  TaskSpec task;
  CorpusCounts splits;
  TrainConfig pretrain{16, 1, 1500, 3e-3, OptimizerKind::kAdam, 1.0, 0};
  TrainConfig base_adapt{16, 1, 200, 2e-3, OptimizerKind::kAdam, 1.0, 0};
  TrainConfig sharer_train{8, 1, 120, 5e-3, OptimizerKind::kAdam, 1.0, 0};
  TrainConfig gate_train{8, 1, 50, 5e-2, OptimizerKind::kAdam, 1.0, 0};
  int sharers = 40;
  SelectionStrategy strategy = SelectionStrategy::kHistoryCluster;
  double share_ratio = 1.0;
  AssemblyConfig assembly;
  std::size_t retrieval_m = 1;
  int peft_retrieval_k = 3;
  SweepConfig sweeps;

  // Seeds of every stage derive from `seed`.
  void finalize();
  void validate() const;
  nlohmann::ordered_json to_json() const;
  // Hash of everything except out_dir and workers.
  std::string hash() const;
};

// Defaults, overlaid with the file (if any) and then PERPCS_* environment
// variables. Nested keys use a double underscore: PERPCS_ASSEMBLY__K=5.
// Unknown keys and type mismatches raise ConfigError.
RunConfig load_run_config(const std::filesystem::path* file, const std::map<std::string, std::string>& env);
RunConfig run_config_from_json(const nlohmann::json& j);
std::map<std::string, std::string> perpcs_environment();

}  // namespace perpcs
