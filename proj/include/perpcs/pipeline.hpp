#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "perpcs/data.hpp"
#include "perpcs/pool.hpp"
#include "perpcs/train.hpp"

namespace perpcs {

class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Task items of a user as training examples. Each item appears once with a
// bare prompt and, when `with_retrieval`, once more with the best BM25 match
// among the user's other items prepended.
std::vector<Example> task_examples(const UserRecord& user, bool with_retrieval);
// Every history item in its own format (task or free-form), bare prompts.
std::vector<Example> history_examples(const UserRecord& user);

const UserRecord& find_user(const std::vector<UserRecord>& users, std::uint32_t id);

// Full-parameter language-model training of a freshly initialized model on
// the base users' histories (task items with and without retrieval, free-form).
TrainResult pretrain_base(Model& model, const std::vector<UserRecord>& users, const SplitManifest& splits,
                          const TrainConfig& cfg);

struct BaseAdaptation {
  TrainResult train;
  double loss_before = 0;
  double loss_after = 0;
};

// Trains a low-rank adapter on base users' task prompts and merges it. Throws
// CorpusError when a base id is also a sharer candidate or target.
BaseAdaptation adapt_base(Model& model, const std::vector<UserRecord>& users, const SplitManifest& splits,
                          const TrainConfig& cfg);

// Maps history items to fixed-length vectors.
using ItemEncoder = std::function<std::vector<std::vector<float>>(const std::vector<HistoryItem>&)>;

// Mean-pooled final hidden states of the model over each item's tokens.
ItemEncoder model_encoder(const Model& model, int batch_size = 32);

// Mean of the item embeddings of a user's history.
std::vector<float> embed_user(const UserRecord& user, const ItemEncoder& encoder);
// The user's most frequent output words (ties by word), as free-form text.
std::string profile_text(const UserRecord& user, std::size_t words = 8);
std::vector<float> embed_profile(const UserRecord& user, const ItemEncoder& encoder);

struct KMeansResult {
  std::vector<int> assignments;
  std::vector<std::vector<double>> centroids;
  std::vector<double> objective;  // after each assignment step
  int iterations = 0;
};

// k-means++ seeding, Lloyd iterations until assignments repeat or max_iter.
// Empty clusters take the point of the largest cluster farthest from its centroid.
KMeansResult kmeans(const std::vector<std::vector<float>>& points, int k, std::uint64_t seed, int max_iter = 100);

enum class SelectionStrategy { kHistoryCluster, kProfileCluster, kMostActive };
std::string to_string(SelectionStrategy s);
SelectionStrategy selection_strategy_from_string(const std::string& s);

struct ClusterResult {
  int k = 0;
  std::vector<int> assignments;  // per candidate; empty for most-active
  std::vector<std::vector<double>> centroids;
  std::vector<std::uint32_t> sharers;  // one per cluster, ascending
};

struct Candidate {
  std::uint32_t id = 0;
  std::size_t history_size = 0;
  std::vector<float> embedding;
};

// Clustered strategies pick the most active member of each cluster (ties to
// the lowest id); most-active takes the K largest histories.
ClusterResult select_sharers(const std::vector<Candidate>& candidates, int k, SelectionStrategy strategy,
                             std::uint64_t seed);

// Adapter trained on the user's own history only. The initialization and data
// order depend only on cfg.seed, so equal histories give equal adapters.
Adapter train_sharer_adapter(const Model& base, const UserRecord& user, const TrainConfig& cfg);

struct GateTraining {
  std::vector<std::vector<float>> gates;  // per slot
  TrainResult train;
};

// Zero-initialized gates trained through the gated forward with pieces and
// base frozen. Throws ContractViolation if any frozen byte changes.
GateTraining train_gates(const Model& base, const Adapter& pieces, const UserRecord& user, const TrainConfig& cfg);

std::string adapter_hash(const Adapter& adapter);

// Gate file "PPCG": per-slot gate vectors plus the base model hash.
void save_gates(const std::vector<std::vector<float>>& gates, const std::string& model_hash,
                const std::filesystem::path& path);
std::vector<std::vector<float>> load_gates(const std::filesystem::path& path, std::string* model_hash = nullptr);

SharerContribution make_contribution(const Model& base, std::uint32_t sharer, std::uint32_t history_size,
                                     std::vector<float> embedding, const Adapter& adapter,
                                     const std::vector<std::vector<float>>& gates);

// Runs fn(0..n-1) on `workers` threads; rethrows the first failure.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

}  // namespace perpcs
