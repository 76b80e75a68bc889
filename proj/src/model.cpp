#include "perpcs/model.hpp"

#include <cmath>
#include <json.hpp>

#include "perpcs/binary_io.hpp"

namespace perpcs {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint32_t kAdapterVersion = 1;
constexpr int kRoleCount = 6;

template <typename T>
Tensor<T> random_normal(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (T& v : t.data) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

template <typename T>
Tensor<T> filled(Shape shape, T value) {
  Tensor<T> t(std::move(shape));
  std::fill(t.data.begin(), t.data.end(), value);
  return t;
}

nlohmann::json config_json(const ModelConfig& c) {
  nlohmann::json targets = nlohmann::json::array();
  for (auto r : c.adapter_targets) targets.push_back(to_string(r));
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model}, {"layers", c.layers},
          {"heads", c.heads},           {"ffn", c.ffn},         {"max_seq", c.max_seq},
          {"adapter_targets", targets}, {"rank", c.rank},       {"seed", c.seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size");
  c.d_model = j.at("d_model");
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.ffn = j.at("ffn");
  c.max_seq = j.at("max_seq");
  c.adapter_targets.clear();
  for (const auto& r : j.at("adapter_targets")) c.adapter_targets.push_back(slot_role_from_string(r));
  c.rank = j.at("rank");
  c.seed = j.at("seed");
  return c;
}

}  // namespace

std::string to_string(SlotRole role) {
  switch (role) {
    case SlotRole::kQuery: return "q";
    case SlotRole::kKey: return "k";
    case SlotRole::kValue: return "v";
    case SlotRole::kOutput: return "o";
    case SlotRole::kFfnUp: return "ffn_up";
    case SlotRole::kFfnDown: return "ffn_down";
  }
  return "?";
}

SlotRole slot_role_from_string(const std::string& s) {
  for (auto r : {SlotRole::kQuery, SlotRole::kKey, SlotRole::kValue, SlotRole::kOutput, SlotRole::kFfnUp,
                 SlotRole::kFfnDown})
    if (to_string(r) == s) return r;
  throw std::invalid_argument("unknown adapter target '" + s + "'");
}

void ModelConfig::validate() const {
  if (vocab_size < 8) throw std::invalid_argument("vocab_size too small");
  if (d_model <= 0 || heads <= 0 || d_model % heads != 0)
    throw std::invalid_argument("d_model must be divisible by heads");
  if (layers <= 0 || ffn <= 0 || max_seq <= 0) throw std::invalid_argument("layers/ffn/max_seq must be positive");
  if (rank < 1) throw std::invalid_argument("adapter rank must be >= 1");
  if (adapter_targets.empty()) throw std::invalid_argument("adapter targets must be non-empty");
}

std::vector<AdapterSlot> make_slots(const ModelConfig& cfg) {
  cfg.validate();
  // Forward order inside a block: q, k, v, o, ffn_up, ffn_down.
  static constexpr SlotRole kOrder[] = {SlotRole::kQuery, SlotRole::kKey,   SlotRole::kValue,
                                        SlotRole::kOutput, SlotRole::kFfnUp, SlotRole::kFfnDown};
  std::vector<AdapterSlot> slots;
  for (int layer = 0; layer < cfg.layers; ++layer) {
    for (SlotRole role : kOrder) {
      if (std::find(cfg.adapter_targets.begin(), cfg.adapter_targets.end(), role) == cfg.adapter_targets.end())
        continue;
      AdapterSlot s;
      s.index = static_cast<int>(slots.size());
      s.layer = layer;
      s.role = role;
      s.in_dim = role == SlotRole::kFfnDown ? cfg.ffn : cfg.d_model;
      s.out_dim = role == SlotRole::kFfnUp ? cfg.ffn : cfg.d_model;
      slots.push_back(s);
    }
  }
  return slots;
}

// ---------------------------------------------------------------------------
// LoraAdapter

template <typename T>
LoraAdapter<T> LoraAdapter<T>::init(const std::vector<AdapterSlot>& slots, int rank, std::uint64_t seed) {
  Rng rng(seed);
  LoraAdapter out;
  for (const auto& s : slots) {
    const auto r = static_cast<std::size_t>(rank);
    out.a.emplace_back("lora_a." + std::to_string(s.index),
                       random_normal<T>({r, static_cast<std::size_t>(s.in_dim)}, 1.0 / std::sqrt(s.in_dim), rng));
    out.b.emplace_back("lora_b." + std::to_string(s.index), Tensor<T>({static_cast<std::size_t>(s.out_dim), r}));
  }
  return out;
}

template <typename T>
LoraAdapter<T> LoraAdapter<T>::zeros(const std::vector<AdapterSlot>& slots, int rank) {
  LoraAdapter out;
  const auto r = static_cast<std::size_t>(rank);
  for (const auto& s : slots) {
    out.a.emplace_back("lora_a." + std::to_string(s.index), Tensor<T>({r, static_cast<std::size_t>(s.in_dim)}));
    out.b.emplace_back("lora_b." + std::to_string(s.index), Tensor<T>({static_cast<std::size_t>(s.out_dim), r}));
  }
  return out;
}

template <typename T>
std::vector<Parameter<T>*> LoraAdapter<T>::parameters() {
  std::vector<Parameter<T>*> ps;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ps.push_back(&a[i]);
    ps.push_back(&b[i]);
  }
  return ps;
}

template <typename T>
Tensor<T> LoraAdapter<T>::delta_weight(std::size_t slot) const {
  const auto& av = a.at(slot).value;
  const auto& bv = b.at(slot).value;
  Tensor<T> out({bv.shape[0], av.shape[1]});
  gemm_nn(bv.shape[0], av.shape[1], av.shape[0], bv.data.data(), av.data.data(), out.data.data(), false);
  return out;
}

template <typename T>
void LoraAdapter<T>::check_against(const std::vector<AdapterSlot>& slots) const {
  if (a.size() != slots.size() || b.size() != slots.size())
    throw ShapeError("adapter covers " + std::to_string(a.size()) + " slots, model has " +
                     std::to_string(slots.size()));
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto& av = a[i].value;
    const auto& bv = b[i].value;
    if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != static_cast<std::size_t>(slots[i].in_dim) ||
        bv.shape[0] != static_cast<std::size_t>(slots[i].out_dim) || av.shape[0] != bv.shape[1])
      throw ShapeError("adapter dims do not match slot " + std::to_string(i));
  }
}

template <typename T>
template <typename U>
LoraAdapter<U> LoraAdapter<T>::cast() const {
  LoraAdapter<U> out;
  for (std::size_t i = 0; i < a.size(); ++i) {
    out.a.emplace_back(a[i].name, a[i].value.template cast<U>());
    out.b.emplace_back(b[i].name, b[i].value.template cast<U>());
  }
  return out;
}

template <typename T>
Var LoraAttachment<T>::apply(Tape<T>& tape, const AdapterSlot& slot, Var input) {
  const auto i = static_cast<std::size_t>(slot.index);
  if (i >= adapter_.slot_count()) throw ShapeError("attachment references missing slot");
  Var xa = tape.matmul_nt(input, tape.param(adapter_.a[i]));
  return tape.matmul_nt(xa, tape.param(adapter_.b[i]));
}

template <typename T>
Var DenseDeltaAttachment<T>::apply(Tape<T>& tape, const AdapterSlot& slot, Var input) {
  const auto i = static_cast<std::size_t>(slot.index);
  if (i >= deltas_.size() || deltas_[i].numel() == 0) return {};
  const auto& dw = deltas_[i];
  if (dw.shape != Shape{static_cast<std::size_t>(slot.out_dim), static_cast<std::size_t>(slot.in_dim)})
    throw ShapeError("dense delta dims do not match slot " + std::to_string(i));
  return tape.matmul_nt(input, tape.constant(dw));
}

// ---------------------------------------------------------------------------
// Transformer

template <typename T>
Transformer<T>::Transformer(const ModelConfig& cfg) : cfg_(cfg), slots_(make_slots(cfg)) {
  slot_lookup_.assign(static_cast<std::size_t>(cfg.layers * kRoleCount), -1);
  for (const auto& s : slots_) slot_lookup_[static_cast<std::size_t>(s.layer * kRoleCount + static_cast<int>(s.role))] = s.index;

  Rng rng(derive_seed(cfg.seed, "model-init"));
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto f = static_cast<std::size_t>(cfg.ffn);
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  const double wstd = 1.0 / std::sqrt(static_cast<double>(d));
  const double ostd = wstd / std::sqrt(2.0 * cfg.layers);
  tok_emb_ = {"tok_emb", random_normal<T>({v, d}, 0.3, rng)};
  pos_emb_ = {"pos_emb", random_normal<T>({static_cast<std::size_t>(cfg.max_seq), d}, 0.1, rng)};
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    Block b;
    b.ln1_g = {p + "ln1_g", filled<T>({d}, T(1))};
    b.ln1_b = {p + "ln1_b", Tensor<T>({d})};
    b.wq = {p + "wq", random_normal<T>({d, d}, wstd, rng)};
    b.wk = {p + "wk", random_normal<T>({d, d}, wstd, rng)};
    b.wv = {p + "wv", random_normal<T>({d, d}, wstd, rng)};
    b.wo = {p + "wo", random_normal<T>({d, d}, ostd, rng)};
    b.ln2_g = {p + "ln2_g", filled<T>({d}, T(1))};
    b.ln2_b = {p + "ln2_b", Tensor<T>({d})};
    b.w1 = {p + "w1", random_normal<T>({f, d}, wstd, rng)};
    b.b1 = {p + "b1", Tensor<T>({f})};
    b.w2 = {p + "w2", random_normal<T>({d, f}, ostd * std::sqrt(static_cast<double>(d) / f), rng)};
    b.b2 = {p + "b2", Tensor<T>({d})};
    blocks_.push_back(std::move(b));
  }
  lnf_g_ = {"lnf_g", filled<T>({d}, T(1))};
  lnf_b_ = {"lnf_b", Tensor<T>({d})};
  head_ = {"head", random_normal<T>({v, d}, wstd, rng)};
}

template <typename T>
int Transformer<T>::slot_for(int layer, SlotRole role) const {
  return slot_lookup_[static_cast<std::size_t>(layer * kRoleCount + static_cast<int>(role))];
}

template <typename T>
Parameter<T>& Transformer<T>::slot_weight(int slot) {
  const auto& s = slots_.at(static_cast<std::size_t>(slot));
  auto& b = blocks_[static_cast<std::size_t>(s.layer)];
  switch (s.role) {
    case SlotRole::kQuery: return b.wq;
    case SlotRole::kKey: return b.wk;
    case SlotRole::kValue: return b.wv;
    case SlotRole::kOutput: return b.wo;
    case SlotRole::kFfnUp: return b.w1;
    case SlotRole::kFfnDown: return b.w2;
  }
  throw std::logic_error("bad slot role");
}

template <typename T>
Var Transformer<T>::linear(Tape<T>& tape, int layer, SlotRole role, Var input, Parameter<T>& w,
                           SlotAttachment<T>* attach, ActivationTap<T>* tap) {
  Var out = tape.matmul_nt(input, tape.param(w));
  const int slot = slot_for(layer, role);
  if (slot < 0) return out;
  if (tap) tap->inputs[static_cast<std::size_t>(slot)] = tape.value(input);
  if (attach) {
    Var delta = attach->apply(tape, slots_[static_cast<std::size_t>(slot)], input);
    if (delta.valid()) {
      if (tape.value(delta).shape != tape.value(out).shape)
        throw ShapeError("attachment output " + shape_str(tape.value(delta).shape) + " does not match slot " +
                         std::to_string(slot) + " output " + shape_str(tape.value(out).shape));
      out = tape.add(out, delta);
    }
  }
  return out;
}

template <typename T>
Var Transformer<T>::forward(Tape<T>& tape, const TokenBatch& tokens, SlotAttachment<T>* attach,
                            ActivationTap<T>* tap, Var* final_hidden) {
  if (tokens.ids.size() != tokens.batch * tokens.seq) throw ShapeError("token batch size mismatch");
  if (tokens.seq > static_cast<std::size_t>(cfg_.max_seq))
    throw ShapeError("sequence length " + std::to_string(tokens.seq) + " exceeds max_seq");
  for (int id : tokens.ids)
    if (id < 0 || id >= cfg_.vocab_size) throw ShapeError("token id " + std::to_string(id) + " outside vocab");
  if (tap) {
    tap->inputs.assign(slots_.size(), {});
    tap->batch = tokens.batch;
    tap->seq = tokens.seq;
  }
  std::vector<int> positions(tokens.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % tokens.seq);

  Var x = tape.add(tape.embedding(tape.param(tok_emb_), tokens.ids), tape.embedding(tape.param(pos_emb_), positions));
  for (int l = 0; l < cfg_.layers; ++l) {
    auto& b = blocks_[static_cast<std::size_t>(l)];
    Var h = tape.layer_norm(x, tape.param(b.ln1_g), tape.param(b.ln1_b));
    Var q = linear(tape, l, SlotRole::kQuery, h, b.wq, attach, tap);
    Var k = linear(tape, l, SlotRole::kKey, h, b.wk, attach, tap);
    Var v = linear(tape, l, SlotRole::kValue, h, b.wv, attach, tap);
    Var a = tape.causal_attention(q, k, v, tokens.batch, tokens.seq, static_cast<std::size_t>(cfg_.heads));
    x = tape.add(x, linear(tape, l, SlotRole::kOutput, a, b.wo, attach, tap));
    Var h2 = tape.layer_norm(x, tape.param(b.ln2_g), tape.param(b.ln2_b));
    Var up = tape.gelu(tape.add_row(linear(tape, l, SlotRole::kFfnUp, h2, b.w1, attach, tap), tape.param(b.b1)));
    x = tape.add(x, tape.add_row(linear(tape, l, SlotRole::kFfnDown, up, b.w2, attach, tap), tape.param(b.b2)));
  }
  Var hf = tape.layer_norm(x, tape.param(lnf_g_), tape.param(lnf_b_));
  if (final_hidden) *final_hidden = hf;
  return tape.matmul_nt(hf, tape.param(head_));
}

template <typename T>
std::vector<Parameter<T>*> Transformer<T>::parameters() {
  std::vector<Parameter<T>*> ps{&tok_emb_, &pos_emb_};
  for (auto& b : blocks_)
    for (auto* p : {&b.ln1_g, &b.ln1_b, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2})
      ps.push_back(p);
  ps.push_back(&lnf_g_);
  ps.push_back(&lnf_b_);
  ps.push_back(&head_);
  return ps;
}

template <typename T>
std::vector<const Parameter<T>*> Transformer<T>::parameters() const {
  auto ps = const_cast<Transformer*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

template <typename T>
void Transformer<T>::merge_deltas(const std::vector<Tensor<T>>& deltas) {
  if (deltas.size() != slots_.size()) throw ShapeError("delta count does not match slot count");
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    if (deltas[i].numel() == 0) continue;
    auto& w = slot_weight(static_cast<int>(i)).value;
    if (deltas[i].shape != w.shape) throw ShapeError("delta dims do not match slot " + std::to_string(i));
    for (std::size_t j = 0; j < w.numel(); ++j) w.data[j] += deltas[i].data[j];
  }
}

template <typename T>
void Transformer<T>::merge_adapter(const LoraAdapter<T>& adapter) {
  adapter.check_against(slots_);
  std::vector<Tensor<T>> deltas;
  for (std::size_t i = 0; i < slots_.size(); ++i) deltas.push_back(adapter.delta_weight(i));
  merge_deltas(deltas);
}

template <typename T>
template <typename U>
Transformer<U> Transformer<T>::cast() const {
  Transformer<U> out(cfg_);
  auto src = parameters();
  auto dst = out.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value.template cast<U>();
  return out;
}

namespace {

template <typename T>
std::vector<std::uint8_t> checkpoint_payload(const ModelConfig& cfg, const std::vector<const Parameter<T>*>& ps) {
  ByteWriter w;
  w.magic("PPCM");
  w.u32(kCheckpointVersion);
  w.u64(0);  // total length, patched below
  w.str(config_json(cfg).dump());
  w.u32(static_cast<std::uint32_t>(ps.size()));
  for (const auto* p : ps) {
    w.str(p->name);
    w.u32(static_cast<std::uint32_t>(p->value.rank()));
    for (auto dim : p->value.shape) w.u32(static_cast<std::uint32_t>(dim));
    for (T v : p->value.data) w.f32(static_cast<float>(v));
  }
  auto bytes = w.data();
  const std::uint64_t total = bytes.size() + 32;
  std::memcpy(bytes.data() + 8, &total, sizeof total);
  return bytes;
}

void check_header(std::span<const std::uint8_t> bytes, const char (&magic)[5], std::uint32_t version, const char* what) {
  ByteReader r(bytes);
  r.expect_magic(magic);
  const auto v = r.u32();
  if (v != version)
    throw FormatError(std::string(what) + ": unsupported version " + std::to_string(v));
  const auto total = r.u64();
  if (total != bytes.size())
    throw FormatError(std::string(what) + ": length mismatch (header " + std::to_string(total) + ", file " +
                      std::to_string(bytes.size()) + ")");
}

}  // namespace

template <typename T>
std::string Transformer<T>::content_hash() const {
  auto payload = checkpoint_payload<T>(cfg_, parameters());
  return sha256_hex(payload);
}

template <typename T>
void Transformer<T>::save(const std::filesystem::path& path) const {
  ByteWriter w;
  w.data() = checkpoint_payload<T>(cfg_, parameters());
  w.seal();
  write_file_bytes(path, w.data());
}

template <typename T>
Transformer<T> Transformer<T>::load(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  check_header(bytes, "PPCM", kCheckpointVersion, "checkpoint");
  auto payload = verify_sealed(bytes, "checkpoint");
  ByteReader r(payload);
  r.expect_magic("PPCM");
  r.u32();
  r.u64();
  const ModelConfig cfg = config_from_json(nlohmann::json::parse(r.str()));
  Transformer model(cfg);
  auto ps = model.parameters();
  const auto n = r.u32();
  if (n != ps.size()) throw FormatError("checkpoint tensor count mismatch");
  for (auto* p : ps) {
    const auto name = r.str();
    if (name != p->name) throw FormatError("checkpoint tensor '" + name + "' where '" + p->name + "' expected");
    const auto rank = r.u32();
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u32());
    if (shape != p->value.shape) throw FormatError("checkpoint tensor '" + name + "' has wrong shape");
    auto vals = r.f32s(shape_numel(shape));
    for (std::size_t i = 0; i < vals.size(); ++i) p->value.data[i] = static_cast<T>(vals[i]);
  }
  return model;
}

template <typename T>
Tensor<T> forward_logits(Transformer<T>& model, const TokenBatch& tokens, SlotAttachment<T>* attach,
                         ActivationTap<T>* tap) {
  Tape<T> tape(false);
  Var logits = model.forward(tape, tokens, attach, tap);
  return tape.value(logits);
}

void save_adapter(const Adapter& adapter, const std::string& model_hash, const std::filesystem::path& path) {
  ByteWriter w;
  w.magic("PPCA");
  w.u32(kAdapterVersion);
  w.u64(0);
  w.bytes(digest_from_hex(model_hash));
  w.u32(static_cast<std::uint32_t>(adapter.slot_count()));
  w.u32(static_cast<std::uint32_t>(adapter.rank()));
  for (std::size_t i = 0; i < adapter.slot_count(); ++i) {
    w.u32(static_cast<std::uint32_t>(adapter.a[i].value.shape[1]));
    w.u32(static_cast<std::uint32_t>(adapter.b[i].value.shape[0]));
    w.f32s(adapter.a[i].value.data);
    w.f32s(adapter.b[i].value.data);
  }
  const std::uint64_t total = w.data().size() + 32;
  std::memcpy(w.data().data() + 8, &total, sizeof total);
  w.seal();
  write_file_bytes(path, w.data());
}

Adapter load_adapter(const std::filesystem::path& path, std::string* model_hash) {
  const auto bytes = read_file_bytes(path);
  check_header(bytes, "PPCA", kAdapterVersion, "adapter");
  ByteReader r(verify_sealed(bytes, "adapter"));
  r.expect_magic("PPCA");
  r.u32();
  r.u64();
  const auto hash = to_hex(r.digest());
  if (model_hash) *model_hash = hash;
  const auto slots = r.u32();
  const auto rank = r.u32();
  Adapter out;
  for (std::uint32_t i = 0; i < slots; ++i) {
    const auto n = r.u32();
    const auto d = r.u32();
    out.a.emplace_back("lora_a." + std::to_string(i), Tensor<float>({rank, n}, r.f32s(std::size_t{rank} * n)));
    out.b.emplace_back("lora_b." + std::to_string(i), Tensor<float>({d, rank}, r.f32s(std::size_t{d} * rank)));
  }
  return out;
}

template class Transformer<float>;
template class Transformer<double>;
template struct LoraAdapter<float>;
template struct LoraAdapter<double>;
template class LoraAttachment<float>;
template class LoraAttachment<double>;
template class DenseDeltaAttachment<float>;
template class DenseDeltaAttachment<double>;
template Transformer<double> Transformer<float>::cast<double>() const;
template Transformer<float> Transformer<double>::cast<float>() const;
template Transformer<float> Transformer<float>::cast<float>() const;
template LoraAdapter<double> LoraAdapter<float>::cast<double>() const;
template LoraAdapter<float> LoraAdapter<double>::cast<float>() const;
template Tensor<float> forward_logits(Transformer<float>&, const TokenBatch&, SlotAttachment<float>*,
                                      ActivationTap<float>*);
template Tensor<double> forward_logits(Transformer<double>&, const TokenBatch&, SlotAttachment<double>*,
                                       ActivationTap<double>*);

}  // namespace perpcs
