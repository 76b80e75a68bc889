#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "perpcs/autodiff.hpp"
#include "perpcs/rng.hpp"

namespace perpcs {

enum class SlotRole { kQuery, kKey, kValue, kOutput, kFfnUp, kFfnDown };

std::string to_string(SlotRole role);
SlotRole slot_role_from_string(const std::string& s);

struct ModelConfig {
  int vocab_size = 256;
  int d_model = 64;
  int layers = 4;
  int heads = 4;
  int ffn = 256;
  int max_seq = 48;
  std::vector<SlotRole> adapter_targets{SlotRole::kQuery, SlotRole::kKey, SlotRole::kValue, SlotRole::kOutput};
  int rank = 4;
  std::uint64_t seed = 1234;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct AdapterSlot {
  int index = 0;
  int layer = 0;
  SlotRole role = SlotRole::kQuery;
  int in_dim = 0;   // n_l
  int out_dim = 0;  // d_l

  bool operator==(const AdapterSlot&) const = default;
};

// Slots in forward traversal order; this ordering defines the slot index space.
std::vector<AdapterSlot> make_slots(const ModelConfig& cfg);

// Token ids for `batch` sequences padded to `seq`. Positions past a
// sequence's length hold kPadToken and are causally after all real tokens.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> ids;
  std::vector<std::size_t> lengths;
};

// Input activations captured at every slot during a forward pass.
template <typename T>
struct ActivationTap {
  std::vector<Tensor<T>> inputs;  // per slot, shape (batch*seq, n_l)
  std::size_t batch = 0;
  std::size_t seq = 0;

  const Tensor<T>& at(int slot) const { return inputs.at(static_cast<std::size_t>(slot)); }
};

// Something that contributes an additive delta to a slot's linear output.
template <typename T>
class SlotAttachment {
 public:
  virtual ~SlotAttachment() = default;
  // Returns the delta (rows x d_l) to add, or an invalid Var for no change.
  virtual Var apply(Tape<T>& tape, const AdapterSlot& slot, Var input) = 0;
};

// Low-rank adapter: one (A: r x n_l, B: d_l x r) pair per slot.
template <typename T>
struct LoraAdapter {
  std::vector<Parameter<T>> a;
  std::vector<Parameter<T>> b;

  static LoraAdapter init(const std::vector<AdapterSlot>& slots, int rank, std::uint64_t seed);
  static LoraAdapter zeros(const std::vector<AdapterSlot>& slots, int rank);
  std::size_t slot_count() const { return a.size(); }
  int rank() const { return a.empty() ? 0 : static_cast<int>(a[0].value.shape[0]); }
  std::vector<Parameter<T>*> parameters();
  Tensor<T> delta_weight(std::size_t slot) const;  // B A, shape (d_l, n_l)
  void check_against(const std::vector<AdapterSlot>& slots) const;

  template <typename U>
  LoraAdapter<U> cast() const;
};

template <typename T>
class LoraAttachment : public SlotAttachment<T> {
 public:
  explicit LoraAttachment(LoraAdapter<T>& adapter) : adapter_(adapter) {}
  Var apply(Tape<T>& tape, const AdapterSlot& slot, Var input) override;

 private:
  LoraAdapter<T>& adapter_;
};

// Dense per-slot delta weights (d_l x n_l); empty tensors mean no delta.
template <typename T>
class DenseDeltaAttachment : public SlotAttachment<T> {
 public:
  explicit DenseDeltaAttachment(std::vector<Tensor<T>> deltas) : deltas_(std::move(deltas)) {}
  Var apply(Tape<T>& tape, const AdapterSlot& slot, Var input) override;
  const std::vector<Tensor<T>>& deltas() const { return deltas_; }

 private:
  std::vector<Tensor<T>> deltas_;
};

template <typename T>
class Transformer {
 public:
  explicit Transformer(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<AdapterSlot>& slots() const { return slots_; }
  std::size_t slot_count() const { return slots_.size(); }

  // Causal LM logits, shape (batch*seq, vocab).
  Var forward(Tape<T>& tape, const TokenBatch& tokens, SlotAttachment<T>* attach = nullptr,
              ActivationTap<T>* tap = nullptr, Var* final_hidden = nullptr);

  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
  Parameter<T>& slot_weight(int slot);

  // W_o += B A for every slot.
  void merge_adapter(const LoraAdapter<T>& adapter);
  void merge_deltas(const std::vector<Tensor<T>>& deltas);

  template <typename U>
  Transformer<U> cast() const;

  // SHA-256 over config and all weight bytes (as f32), hex encoded.
  std::string content_hash() const;

  void save(const std::filesystem::path& path) const;
  static Transformer load(const std::filesystem::path& path);

 private:
  struct Block {
    Parameter<T> ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  Var linear(Tape<T>& tape, int layer, SlotRole role, Var input, Parameter<T>& w, SlotAttachment<T>* attach,
             ActivationTap<T>* tap);
  int slot_for(int layer, SlotRole role) const;

  ModelConfig cfg_;
  std::vector<AdapterSlot> slots_;
  std::vector<int> slot_lookup_;  // layer*6 + role -> slot index or -1
  Parameter<T> tok_emb_, pos_emb_, lnf_g_, lnf_b_, head_;
  std::vector<Block> blocks_;

  template <typename U>
  friend class Transformer;
};

extern template class Transformer<float>;
extern template class Transformer<double>;
extern template struct LoraAdapter<float>;
extern template struct LoraAdapter<double>;

using Model = Transformer<float>;
using Adapter = LoraAdapter<float>;

// Convenience: logits tensor for a batch with no gradient tape kept.
template <typename T>
Tensor<T> forward_logits(Transformer<T>& model, const TokenBatch& tokens, SlotAttachment<T>* attach = nullptr,
                         ActivationTap<T>* tap = nullptr);

void save_adapter(const Adapter& adapter, const std::string& model_hash, const std::filesystem::path& path);
Adapter load_adapter(const std::filesystem::path& path, std::string* model_hash = nullptr);

}  // namespace perpcs
