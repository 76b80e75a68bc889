#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "perpcs/data.hpp"

namespace perpcs {

enum class TaskKind { kClassification, kRating, kGeneration };

std::string to_string(TaskKind k);
TaskKind task_kind_from_string(const std::string& s);
// Marker word that opens every input of the given task.
const std::string& task_marker(TaskKind k);
// Task of an input line, read from its leading marker.
TaskKind task_of(const std::string& input);

// Synthetic personalization tasks. Every input is a marker followed by three
// feature symbols; two share a category (f mod categories), which decides the
// answer through the user's prototype preference map. Free-form history items
// draw words from a prototype-specific topic pool.
struct TaskSpec {
  std::vector<TaskKind> kinds{TaskKind::kClassification, TaskKind::kRating, TaskKind::kGeneration};
  int prototypes = 4;
  int categories = 8;
  int num_labels = 4;  // classification labels c0..c{n-1}
  double noise = 0.05;
  int history_min = 18;  // task-formatted items per user
  int history_max = 42;
  int freeform_items = 6;
  int freeform_length = 6;
  double topic_purity = 0.8;
  int queries_per_kind = 4;
  int classification_queries = 8;

  void validate() const;
};

struct CorpusCounts {
  int base = 160;
  int sharer_candidates = 80;
  int targets = 20;
};

// One prototype's preference maps, indexed by category.
struct Prototype {
  std::vector<int> label;   // classification label index
  std::vector<int> rating;  // 1..5
  int style = 0;
};

struct SyntheticCorpus {
  std::vector<UserRecord> users;
  SplitManifest splits;
  std::vector<Prototype> prototypes;
  // Sharer-candidate count per prototype, counted at generation.
  std::vector<int> candidate_coverage;
};

// Deterministic in (spec, counts, seed). User ids are dense from 0: base
// users first, then sharer candidates, then targets.
SyntheticCorpus generate_corpus(const TaskSpec& spec, const CorpusCounts& counts, std::uint64_t seed);

// Noise-free answer of a prototype for an input line.
std::string prototype_answer(const TaskSpec& spec, const Prototype& p, const std::string& input);

// Token ids of every well-formed classification label or rating.
std::vector<int> answer_candidates(const TaskSpec& spec, TaskKind kind);

}  // namespace perpcs
