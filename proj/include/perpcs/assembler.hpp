#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "perpcs/data.hpp"
#include "perpcs/pipeline.hpp"
#include "perpcs/pool.hpp"

namespace perpcs {

// Token positions scored for one sequence, 1-based and inclusive.
struct ScoringSpan {
  int begin = 1;
  int end = 1;
};

ScoringSpan span_of(const Example& ex);

struct ScoreTable {
  int slot = 0;
  std::vector<std::pair<std::uint32_t, double>> scores;  // ascending sharer id
};

enum class SelectionMode { kTopkAgg, kToppAgg, kTopkSample, kUniform };
std::string to_string(SelectionMode m);
SelectionMode selection_mode_from_string(const std::string& s);

struct AssemblyConfig {
  int k = 3;
  SelectionMode mode = SelectionMode::kTopkAgg;
  double p = 0.9;
  int batch_size = 8;
  std::uint64_t seed = 0;

  void validate() const;
};

class AssemblyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// alpha_s = sum over sequences and span tokens of unit(g_s) . unit(v_t).
// `activations` holds (batch*seq, n) rows of the slot's inputs.
ScoreTable score_slot(int slot, const Tensor<float>& activations, std::size_t seq, const std::vector<ScoringSpan>& spans,
                      const std::vector<const GateVector*>& gates);

// Entries for one slot. `n` is the slot input dimension used in 1/sqrt(n).
// `rng` is only consulted in sampling mode.
std::vector<RecipeEntry> select_and_weight(const ScoreTable& table, const AssemblyConfig& cfg, int n, Rng& rng);

struct AssemblyTrace {
  std::vector<std::vector<ScoreTable>> batches;                       // [batch][slot]
  std::vector<std::vector<std::vector<RecipeEntry>>> selections;      // [batch][slot]
};

// Training-free assembly over the target's history. Each history batch runs
// one forward pass in which every slot scores, selects and applies its pieces
// before the next slot runs. Per-slot weights are averaged across batches,
// renormalized and, outside top-p mode, cut back to the k heaviest entries.
Recipe assemble(const Model& base, const PiecePool& pool, const UserRecord& target, const AssemblyConfig& cfg,
                AssemblyTrace* trace = nullptr);

std::string score_dump_json(const AssemblyTrace& trace);

struct RetrievalAdapter {
  std::vector<std::uint32_t> sharers;  // by descending cosine
  std::vector<double> weights;         // softmax of the cosines
  std::vector<Tensor<float>> deltas;   // per slot, dense
};

double cosine(const std::vector<float>& a, const std::vector<float>& b);

// Top-k sharers by cosine of user embeddings; whole adapters mixed with
// softmax(cosine) weights.
RetrievalAdapter peft_retrieval_baseline(const std::vector<float>& target, const std::vector<Candidate>& sharers,
                                         const std::vector<const Adapter*>& adapters, int k);

}  // namespace perpcs
