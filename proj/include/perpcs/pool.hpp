#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "perpcs/model.hpp"

namespace perpcs {

// One slot's low-rank update pair contributed by a sharer.
struct Piece {
  std::uint32_t sharer = 0;
  int slot = 0;
  Tensor<float> a;  // r x n_l
  Tensor<float> b;  // d_l x r
};

// Gate vectors with norm below this are treated as untrained: unit() is zero.
inline constexpr double kGateNormEpsilon = 1e-8;

struct GateVector {
  std::uint32_t sharer = 0;
  int slot = 0;
  std::vector<float> g;
  std::vector<float> unit;  // g / ||g||, or all zeros under the norm guard

  static GateVector make(std::uint32_t sharer, int slot, std::vector<float> g);
};

// round(ratio * L) slots, at least one, drawn with a per-sharer stream of `seed`.
std::size_t shared_slot_count(double ratio, std::size_t slots);

struct ShareMask {
  std::uint32_t sharer = 0;
  double ratio = 1.0;
  std::vector<bool> shared;

  static ShareMask draw(std::uint32_t sharer, double ratio, std::size_t slots, std::uint64_t seed);
  static ShareMask full(std::uint32_t sharer, std::size_t slots);
  std::size_t count() const;
};

std::vector<Piece> decompose(const Adapter& adapter, std::uint32_t sharer, std::size_t expected_slots);
Adapter reassemble(const std::vector<Piece>& pieces);

// B A v sigma(g^T v) for a single activation vector.
std::vector<double> gated_forward_delta(const Piece& piece, const GateVector& gate, std::span<const float> v);

// Gated forward used for gate training: delta = (x A^T B^T) * sigmoid(x g).
// Pieces are constants; only the gate parameters can carry gradients.
template <typename T>
class GatedPiecesAttachment : public SlotAttachment<T> {
 public:
  GatedPiecesAttachment(const LoraAdapter<T>& pieces, std::vector<Parameter<T>>& gates)
      : pieces_(pieces), gates_(gates) {}
  Var apply(Tape<T>& tape, const AdapterSlot& slot, Var input) override;

 private:
  const LoraAdapter<T>& pieces_;
  std::vector<Parameter<T>>& gates_;
};

extern template class GatedPiecesAttachment<float>;
extern template class GatedPiecesAttachment<double>;

class PoolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Everything one sharer hands to the pool.
struct SharerContribution {
  std::uint32_t sharer = 0;
  std::string model_hash;
  std::uint32_t history_size = 0;
  std::vector<float> embedding;
  std::vector<Piece> pieces;      // one per slot
  std::vector<GateVector> gates;  // one per slot
};

struct PoolSharer {
  std::uint32_t id = 0;
  std::uint32_t history_size = 0;
  std::vector<float> embedding;
  std::vector<bool> shared;
  std::vector<std::optional<Piece>> pieces;       // indexed by slot
  std::vector<std::optional<GateVector>> gates;   // indexed by slot
};

// Immutable collection of shared pieces and gates. Only PoolBuilder and the
// file loader can produce one.
class PiecePool {
 public:
  const std::string& hash() const { return hash_; }
  const std::string& model_hash() const { return model_hash_; }
  const std::vector<AdapterSlot>& slots() const { return slots_; }
  std::size_t slot_count() const { return slots_.size(); }
  int rank() const { return rank_; }
  const std::vector<PoolSharer>& sharers() const { return sharers_; }
  const PoolSharer* find(std::uint32_t id) const;
  const Piece& piece(std::uint32_t id, int slot) const;
  const GateVector& gate(std::uint32_t id, int slot) const;
  // Sharers that contribute at `slot`, ascending by id.
  std::vector<const PoolSharer*> sharers_at(int slot) const;

  std::vector<std::uint8_t> serialize() const;
  static PiecePool deserialize(std::span<const std::uint8_t> bytes);

 private:
  friend class PoolBuilder;
  PiecePool() = default;
  std::vector<std::uint8_t> payload() const;

  std::string hash_;
  std::string model_hash_;
  std::vector<AdapterSlot> slots_;
  int rank_ = 0;
  std::vector<PoolSharer> sharers_;
};

class PoolBuilder {
 public:
  PoolBuilder(std::vector<AdapterSlot> slots, int rank);
  void add(const SharerContribution& c, const std::optional<ShareMask>& mask = std::nullopt);
  PiecePool build();

 private:
  std::vector<AdapterSlot> slots_;
  int rank_;
  std::string model_hash_;
  std::vector<PoolSharer> sharers_;
  bool sealed_ = false;
};

PiecePool build_pool(const std::vector<SharerContribution>& sharers, const std::vector<AdapterSlot>& slots, int rank,
                     const std::vector<ShareMask>* masks = nullptr);
void save_pool(const PiecePool& pool, const std::filesystem::path& path);
PiecePool load_pool(const std::filesystem::path& path);

struct RecipeEntry {
  std::uint32_t sharer = 0;
  float weight = 0;
  bool operator==(const RecipeEntry&) const = default;
};

// Assembled adapter description: per slot, (sharer, weight) pairs.
struct Recipe {
  std::uint32_t target = 0;
  std::string pool_hash;
  std::vector<std::vector<RecipeEntry>> slots;

  void validate(const PiecePool& pool) const;
  bool operator==(const Recipe&) const = default;
};

std::string recipe_to_json(const Recipe& r);
Recipe recipe_from_json(const std::string& text);
void save_recipe(const Recipe& r, const std::filesystem::path& path);
Recipe load_recipe(const std::filesystem::path& path);

// Compact binary form: fixed header, per-slot u16 entry counts, then
// (u32 sharer, f32 weight) per entry.
std::vector<std::uint8_t> recipe_to_binary(const Recipe& r);
Recipe recipe_from_binary(std::span<const std::uint8_t> bytes);
std::size_t recipe_header_bytes(std::size_t slots);
std::size_t recipe_closed_form_bytes(std::size_t slots, std::size_t k);
// Bytes of a full low-rank adapter file: header + sum_l r (n_l + d_l) * 4.
std::size_t adapter_header_bytes(std::size_t slots);
std::size_t adapter_closed_form_bytes(const std::vector<AdapterSlot>& slots, int rank);

// Per-slot dense delta sum_s w_s B_s A_s; empty slots give a zero matrix.
std::vector<Tensor<float>> materialize(const Recipe& recipe, const PiecePool& pool);

// Applies the recipe piecewise, sum_s w_s (x A_s^T) B_s^T, without forming dense deltas.
class WeightedPiecesAttachment : public SlotAttachment<float> {
 public:
  WeightedPiecesAttachment(const Recipe& recipe, const PiecePool& pool) : recipe_(recipe), pool_(pool) {}
  Var apply(Tape<float>& tape, const AdapterSlot& slot, Var input) override;

 private:
  const Recipe& recipe_;
  const PiecePool& pool_;
};

}  // namespace perpcs
