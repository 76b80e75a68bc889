#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "perpcs/artifacts.hpp"
#include "perpcs/assembler.hpp"
#include "perpcs/config.hpp"
#include "perpcs/evaluate.hpp"

namespace perpcs {

// One line of every report CSV.
struct ReportRow {
  std::string sweep;   // "matrix" or the sweep name
  std::string point;   // sweep point label, "default" in the matrix
  std::string method;
  MetricReport metrics;
};

inline constexpr const char* kReportHeader =
    "sweep,point,method,task,queries,accuracy,macro_f1,mae,rmse,rouge_1,rouge_l";

std::string report_csv(const std::vector<ReportRow>& rows);
std::vector<ReportRow> parse_report_csv(const std::string& text);

inline constexpr const char* kMethodBase = "non-personalized";
inline constexpr const char* kMethodRetrieval = "retrieval";
inline constexpr const char* kMethodPeftRetrieval = "peft-retrieval";
inline constexpr const char* kMethodPerPcs = "per-pcs";
inline constexpr const char* kMethodPerPcsRetrieval = "per-pcs+retrieval";
inline constexpr const char* kMethodOppu = "oppu-oracle";

struct EfficiencyReport {
  std::vector<std::uint32_t> users;
  std::vector<double> train_seconds;     // OPPU training per user
  std::vector<double> assemble_seconds;  // assembly per user
  double mean_train_seconds = 0;
  double mean_assemble_seconds = 0;
  double time_ratio = 0;  // train / assemble
  std::uint64_t assembly_optimizer_steps = 0;
  std::uint64_t assembly_grad_tapes = 0;
  std::size_t recipe_bytes = 0;
  std::size_t recipe_closed_form_bytes = 0;
  std::size_t adapter_bytes = 0;
  std::size_t adapter_closed_form_bytes = 0;
  std::size_t recipe_payload_bytes = 0;   // L k 8
  std::size_t adapter_payload_bytes = 0;  // sum r (n + d) 4
  double storage_ratio = 0;               // payload ratio, headers excluded
  double storage_ratio_with_headers = 0;
  double published_storage_ratio = 38.0;  // context only

  std::string to_json() const;
  static EfficiencyReport from_json(const std::string& text);
};

// Orchestrates the pipeline stages inside one run directory. Every stage
// verifies its inputs against the manifest, skips work whose outputs are
// already recorded under the same input key (unless forced), and records
// what it writes.
class Runner {
 public:
  Runner(RunConfig cfg, bool force, std::ostream& log);
  ~Runner();

  const RunConfig& config() const { return cfg_; }
  std::filesystem::path out_dir() const { return root_; }
  const ArtifactManifest& manifest() const { return manifest_; }

  void gen_data();
  void adapt_base();
  void train_sharers();
  void train_gates();
  void build_pool();
  void assemble();
  void evaluate();
  void sweep();
  void bench();
  void run_all();

 private:
  struct State;

  std::string key(const std::string& stage, const nlohmann::ordered_json& params,
                  const std::vector<std::string>& inputs) const;
  bool fresh(const std::string& name, const std::string& key) const;
  void record(const std::string& name, const std::string& relpath, const std::string& kind, const std::string& command,
              const std::string& key);
  std::string hash_of(const std::string& name) const;

  const std::vector<UserRecord>& users();
  const SplitManifest& splits();
  const Model& base();
  const std::vector<Candidate>& candidates(SelectionStrategy s);
  std::vector<std::uint32_t> selection();
  std::string adapter_key(std::uint32_t id, const std::string& tag);
  std::string gates_key(std::uint32_t id);
  // Trains (or reuses) adapters and gates for the given sharers.
  void ensure_sharers(const std::vector<std::uint32_t>& ids, const std::string& command);
  void ensure_oppu(const std::vector<std::uint32_t>& ids);
  Adapter load_sharer_adapter(std::uint32_t id, const std::string& prefix);
  PiecePool pool_for(const std::vector<std::uint32_t>& ids, double ratio);
  std::map<std::uint32_t, Recipe> assemble_all(const PiecePool& pool, const AssemblyConfig& cfg);
  std::vector<QueryPrediction> predict_targets(const std::map<std::uint32_t, Recipe>* recipes, const PiecePool* pool,
                                               std::size_t m, const std::vector<std::uint32_t>& targets);
  void write_report(const std::string& name, const std::string& relpath, const std::vector<ReportRow>& rows,
                    const std::string& command, const std::string& key);

  RunConfig cfg_;
  bool force_;
  std::ostream& log_;
  std::filesystem::path root_;
  ArtifactManifest manifest_;
  std::unique_ptr<State> state_;
};

// Exit code for an exception escaping a stage.
int exit_code_for(const std::exception& e);

}  // namespace perpcs
