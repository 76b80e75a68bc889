#include "perpcs/pool.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <json.hpp>
#include <numeric>

#include "perpcs/binary_io.hpp"

namespace perpcs {

namespace {

constexpr std::uint32_t kPoolVersion = 1;
constexpr std::uint32_t kRecipeVersion = 1;
constexpr std::size_t kAdapterFixedHeader = 4 + 4 + 8 + 32 + 4 + 4 + 32;
constexpr std::size_t kRecipeFixedHeader = 4 + 4 + 4 + 32 + 4;

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

GateVector GateVector::make(std::uint32_t sharer, int slot, std::vector<float> g) {
  GateVector out;
  out.sharer = sharer;
  out.slot = slot;
  double sq = 0;
  for (float v : g) sq += double(v) * double(v);
  const double norm = std::sqrt(sq);
  out.unit.assign(g.size(), 0.0f);
  if (norm >= kGateNormEpsilon)
    for (std::size_t i = 0; i < g.size(); ++i) out.unit[i] = static_cast<float>(g[i] / norm);
  out.g = std::move(g);
  return out;
}

std::size_t shared_slot_count(double ratio, std::size_t slots) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("share ratio must be in (0, 1]");
  const auto n = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(slots)));
  return std::clamp<std::size_t>(n, 1, slots);
}

ShareMask ShareMask::draw(std::uint32_t sharer, double ratio, std::size_t slots, std::uint64_t seed) {
  ShareMask m;
  m.sharer = sharer;
  m.ratio = ratio;
  m.shared.assign(slots, false);
  std::vector<std::size_t> idx(slots);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, sharer));
  rng.shuffle(idx.begin(), idx.end());
  const auto n = shared_slot_count(ratio, slots);
  for (std::size_t i = 0; i < n; ++i) m.shared[idx[i]] = true;
  return m;
}

ShareMask ShareMask::full(std::uint32_t sharer, std::size_t slots) {
  ShareMask m;
  m.sharer = sharer;
  m.shared.assign(slots, true);
  return m;
}

std::size_t ShareMask::count() const { return static_cast<std::size_t>(std::count(shared.begin(), shared.end(), true)); }

std::vector<Piece> decompose(const Adapter& adapter, std::uint32_t sharer, std::size_t expected_slots) {
  if (adapter.slot_count() != expected_slots)
    throw PoolError("adapter covers " + std::to_string(adapter.slot_count()) + " slots, expected " +
                    std::to_string(expected_slots));
  std::vector<Piece> out;
  for (std::size_t l = 0; l < expected_slots; ++l)
    out.push_back({sharer, static_cast<int>(l), adapter.a[l].value, adapter.b[l].value});
  return out;
}

Adapter reassemble(const std::vector<Piece>& pieces) {
  Adapter out;
  for (std::size_t l = 0; l < pieces.size(); ++l) {
    if (pieces[l].slot != static_cast<int>(l)) throw PoolError("pieces are not slot-ordered");
    out.a.emplace_back("lora_a." + std::to_string(l), pieces[l].a);
    out.b.emplace_back("lora_b." + std::to_string(l), pieces[l].b);
  }
  return out;
}

std::vector<double> gated_forward_delta(const Piece& piece, const GateVector& gate, std::span<const float> v) {
  const std::size_t r = piece.a.shape[0], n = piece.a.shape[1], d = piece.b.shape[0];
  if (v.size() != n || gate.g.size() != n || piece.b.shape[1] != r) throw ShapeError("gated_forward_delta dims");
  std::vector<double> av(r, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < n; ++j) av[i] += double(piece.a(i, j)) * v[j];
  double gv = 0;
  for (std::size_t j = 0; j < n; ++j) gv += double(gate.g[j]) * v[j];
  const double s = sigmoid(gv);
  std::vector<double> out(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t k = 0; k < r; ++k) out[i] += double(piece.b(i, k)) * av[k];
    out[i] *= s;
  }
  return out;
}

template <typename T>
Var GatedPiecesAttachment<T>::apply(Tape<T>& tape, const AdapterSlot& slot, Var input) {
  const auto l = static_cast<std::size_t>(slot.index);
  if (l >= pieces_.slot_count() || l >= gates_.size()) throw ShapeError("gated attachment missing slot");
  if (gates_[l].value.numel() != static_cast<std::size_t>(slot.in_dim)) throw ShapeError("gate dims do not match slot");
  Var xa = tape.matmul_nt(input, tape.constant(pieces_.a[l].value));
  Var delta = tape.matmul_nt(xa, tape.constant(pieces_.b[l].value));
  Var s = tape.sigmoid(tape.row_dot(input, tape.param(gates_[l])));
  return tape.mul_col(delta, s);
}

template class GatedPiecesAttachment<float>;
template class GatedPiecesAttachment<double>;

// ---------------------------------------------------------------------------
// PiecePool

const PoolSharer* PiecePool::find(std::uint32_t id) const {
  auto it = std::lower_bound(sharers_.begin(), sharers_.end(), id,
                             [](const PoolSharer& s, std::uint32_t v) { return s.id < v; });
  return it != sharers_.end() && it->id == id ? &*it : nullptr;
}

const Piece& PiecePool::piece(std::uint32_t id, int slot) const {
  const auto* s = find(id);
  if (!s || !s->pieces.at(static_cast<std::size_t>(slot)))
    throw PoolError("sharer " + std::to_string(id) + " has no piece at slot " + std::to_string(slot));
  return *s->pieces[static_cast<std::size_t>(slot)];
}

const GateVector& PiecePool::gate(std::uint32_t id, int slot) const {
  const auto* s = find(id);
  if (!s || !s->gates.at(static_cast<std::size_t>(slot)))
    throw PoolError("sharer " + std::to_string(id) + " has no gate at slot " + std::to_string(slot));
  return *s->gates[static_cast<std::size_t>(slot)];
}

std::vector<const PoolSharer*> PiecePool::sharers_at(int slot) const {
  std::vector<const PoolSharer*> out;
  for (const auto& s : sharers_)
    if (s.shared.at(static_cast<std::size_t>(slot))) out.push_back(&s);
  return out;
}

std::vector<std::uint8_t> PiecePool::payload() const {
  ByteWriter w;
  w.magic("PPCS");
  w.u32(kPoolVersion);
  w.u64(0);
  w.bytes(digest_from_hex(model_hash_));
  w.u32(static_cast<std::uint32_t>(slots_.size()));
  w.u32(static_cast<std::uint32_t>(rank_));
  for (const auto& s : slots_) {
    w.u32(static_cast<std::uint32_t>(s.layer));
    w.u8(static_cast<std::uint8_t>(s.role));
    w.u32(static_cast<std::uint32_t>(s.in_dim));
    w.u32(static_cast<std::uint32_t>(s.out_dim));
  }
  w.u32(static_cast<std::uint32_t>(sharers_.size()));
  for (const auto& s : sharers_) {
    w.u32(s.id);
    w.u32(s.history_size);
    w.u32(static_cast<std::uint32_t>(s.embedding.size()));
    w.f32s(s.embedding);
    std::vector<std::uint8_t> bitmap((slots_.size() + 7) / 8, 0);
    for (std::size_t l = 0; l < slots_.size(); ++l)
      if (s.shared[l]) bitmap[l / 8] |= static_cast<std::uint8_t>(1u << (l % 8));
    w.bytes(bitmap);
    for (std::size_t l = 0; l < slots_.size(); ++l) {
      if (!s.shared[l]) continue;
      w.f32s(s.pieces[l]->a.data);
      w.f32s(s.pieces[l]->b.data);
      w.f32s(s.gates[l]->g);
    }
  }
  auto bytes = w.data();
  const std::uint64_t total = bytes.size() + 32;
  std::memcpy(bytes.data() + 8, &total, sizeof total);
  return bytes;
}

std::vector<std::uint8_t> PiecePool::serialize() const {
  ByteWriter w;
  w.data() = payload();
  w.seal();
  return w.data();
}

PiecePool PiecePool::deserialize(std::span<const std::uint8_t> bytes) {
  {
    ByteReader h(bytes);
    h.expect_magic("PPCS");
    const auto version = h.u32();
    if (version != kPoolVersion) throw FormatError("pool: unsupported version " + std::to_string(version));
    const auto total = h.u64();
    if (total != bytes.size())
      throw FormatError("pool: length mismatch (header " + std::to_string(total) + ", file " +
                        std::to_string(bytes.size()) + ")");
  }
  ByteReader r(verify_sealed(bytes, "pool"));
  r.expect_magic("PPCS");
  r.u32();
  r.u64();
  PiecePool pool;
  pool.model_hash_ = to_hex(r.digest());
  const auto nslots = r.u32();
  pool.rank_ = static_cast<int>(r.u32());
  const auto rank = static_cast<std::size_t>(pool.rank_);
  for (std::uint32_t l = 0; l < nslots; ++l) {
    AdapterSlot s;
    s.index = static_cast<int>(l);
    s.layer = static_cast<int>(r.u32());
    s.role = static_cast<SlotRole>(r.u8());
    s.in_dim = static_cast<int>(r.u32());
    s.out_dim = static_cast<int>(r.u32());
    pool.slots_.push_back(s);
  }
  const auto nsharers = r.u32();
  for (std::uint32_t i = 0; i < nsharers; ++i) {
    PoolSharer s;
    s.id = r.u32();
    s.history_size = r.u32();
    s.embedding = r.f32s(r.u32());
    std::vector<std::uint8_t> bitmap((nslots + 7) / 8);
    for (auto& b : bitmap) b = r.u8();
    s.shared.assign(nslots, false);
    s.pieces.resize(nslots);
    s.gates.resize(nslots);
    for (std::uint32_t l = 0; l < nslots; ++l) {
      s.shared[l] = (bitmap[l / 8] >> (l % 8)) & 1u;
      if (!s.shared[l]) continue;
      const auto n = static_cast<std::size_t>(pool.slots_[l].in_dim);
      const auto d = static_cast<std::size_t>(pool.slots_[l].out_dim);
      Piece p{s.id, static_cast<int>(l), Tensor<float>({rank, n}, r.f32s(rank * n)),
              Tensor<float>({d, rank}, r.f32s(d * rank))};
      s.pieces[l] = std::move(p);
      s.gates[l] = GateVector::make(s.id, static_cast<int>(l), r.f32s(n));
    }
    pool.sharers_.push_back(std::move(s));
  }
  if (r.remaining() != 0) throw FormatError("pool: trailing bytes");
  pool.hash_ = to_hex(sha256(bytes.first(bytes.size() - 32)));
  return pool;
}

PoolBuilder::PoolBuilder(std::vector<AdapterSlot> slots, int rank) : slots_(std::move(slots)), rank_(rank) {}

void PoolBuilder::add(const SharerContribution& c, const std::optional<ShareMask>& mask) {
  if (sealed_) throw PoolError("pool is immutable after build");
  if (model_hash_.empty()) model_hash_ = c.model_hash;
  if (c.model_hash != model_hash_)
    throw PoolError("sharer " + std::to_string(c.sharer) + " was trained against a different base model");
  for (const auto& s : sharers_)
    if (s.id == c.sharer) throw PoolError("duplicate sharer " + std::to_string(c.sharer));
  if (c.pieces.size() != slots_.size() || c.gates.size() != slots_.size())
    throw PoolError("sharer " + std::to_string(c.sharer) + " must supply one piece and one gate per slot");
  if (mask && mask->shared.size() != slots_.size()) throw PoolError("share mask size mismatch");

  PoolSharer s;
  s.id = c.sharer;
  s.history_size = c.history_size;
  s.embedding = c.embedding;
  s.shared = mask ? mask->shared : std::vector<bool>(slots_.size(), true);
  s.pieces.resize(slots_.size());
  s.gates.resize(slots_.size());
  for (std::size_t l = 0; l < slots_.size(); ++l) {
    const auto& p = c.pieces[l];
    const auto& g = c.gates[l];
    const auto n = static_cast<std::size_t>(slots_[l].in_dim), d = static_cast<std::size_t>(slots_[l].out_dim);
    const auto r = static_cast<std::size_t>(rank_);
    if (p.a.shape != Shape{r, n} || p.b.shape != Shape{d, r} || g.g.size() != n || p.slot != static_cast<int>(l) ||
        g.slot != static_cast<int>(l))
      throw PoolError("sharer " + std::to_string(c.sharer) + " piece/gate dims do not match slot " + std::to_string(l));
    if (!p.a.all_finite() || !p.b.all_finite()) throw PoolError("non-finite piece values");
    if (!s.shared[l]) continue;
    s.pieces[l] = p;
    s.gates[l] = GateVector::make(c.sharer, static_cast<int>(l), g.g);
  }
  sharers_.push_back(std::move(s));
}

PiecePool PoolBuilder::build() {
  if (sealed_) throw PoolError("pool is immutable after build");
  if (sharers_.empty()) throw PoolError("pool needs at least one sharer");
  sealed_ = true;
  std::sort(sharers_.begin(), sharers_.end(), [](const PoolSharer& a, const PoolSharer& b) { return a.id < b.id; });
  PiecePool pool;
  pool.slots_ = slots_;
  pool.rank_ = rank_;
  pool.model_hash_ = model_hash_;
  pool.sharers_ = std::move(sharers_);
  pool.hash_ = sha256_hex(pool.payload());
  return pool;
}

PiecePool build_pool(const std::vector<SharerContribution>& sharers, const std::vector<AdapterSlot>& slots, int rank,
                     const std::vector<ShareMask>* masks) {
  PoolBuilder b(slots, rank);
  for (std::size_t i = 0; i < sharers.size(); ++i) {
    std::optional<ShareMask> m;
    if (masks) {
      auto it = std::find_if(masks->begin(), masks->end(), [&](const ShareMask& x) { return x.sharer == sharers[i].sharer; });
      if (it == masks->end()) throw PoolError("no share mask for sharer " + std::to_string(sharers[i].sharer));
      m = *it;
    }
    b.add(sharers[i], m);
  }
  return b.build();
}

void save_pool(const PiecePool& pool, const std::filesystem::path& path) { write_file_bytes(path, pool.serialize()); }

PiecePool load_pool(const std::filesystem::path& path) { return PiecePool::deserialize(read_file_bytes(path)); }

// ---------------------------------------------------------------------------
// Recipe

void Recipe::validate(const PiecePool& pool) const {
  if (pool_hash != pool.hash()) throw HashMismatchError("recipe was assembled against a different pool");
  if (slots.size() != pool.slot_count()) throw PoolError("recipe slot count does not match pool");
  for (std::size_t l = 0; l < slots.size(); ++l) {
    if (slots[l].empty()) continue;
    double total = 0;
    for (const auto& e : slots[l]) {
      const auto* s = pool.find(e.sharer);
      if (!s || !s->shared[l])
        throw PoolError("recipe references sharer " + std::to_string(e.sharer) + " not shared at slot " +
                        std::to_string(l));
      total += e.weight;
    }
    if (std::abs(total - 1.0) > 1e-6) throw PoolError("recipe weights at slot " + std::to_string(l) + " do not sum to 1");
  }
}

std::string recipe_to_json(const Recipe& r) {
  nlohmann::ordered_json slots = nlohmann::ordered_json::array();
  for (std::size_t l = 0; l < r.slots.size(); ++l) {
    nlohmann::ordered_json entries = nlohmann::ordered_json::array();
    for (const auto& e : r.slots[l]) entries.push_back({{"sharer", e.sharer}, {"weight", e.weight}});
    slots.push_back({{"l", l}, {"entries", entries}});
  }
  nlohmann::ordered_json j{{"target_user", r.target}, {"pool_hash", r.pool_hash}, {"slots", slots}};
  return j.dump(1) + "\n";
}

Recipe recipe_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  Recipe r;
  r.target = j.at("target_user");
  r.pool_hash = j.at("pool_hash");
  for (const auto& s : j.at("slots")) {
    const std::size_t l = s.at("l");
    if (l != r.slots.size()) throw FormatError("recipe slots out of order");
    std::vector<RecipeEntry> entries;
    for (const auto& e : s.at("entries")) entries.push_back({e.at("sharer").get<std::uint32_t>(), e.at("weight").get<float>()});
    r.slots.push_back(std::move(entries));
  }
  return r;
}

void save_recipe(const Recipe& r, const std::filesystem::path& path) { write_file_text(path, recipe_to_json(r)); }

Recipe load_recipe(const std::filesystem::path& path) { return recipe_from_json(read_file_text(path)); }

std::size_t recipe_header_bytes(std::size_t slots) { return kRecipeFixedHeader + 2 * slots; }

std::size_t recipe_closed_form_bytes(std::size_t slots, std::size_t k) {
  return recipe_header_bytes(slots) + slots * k * (4 + 4);
}

std::size_t adapter_header_bytes(std::size_t slots) { return kAdapterFixedHeader + 8 * slots; }

std::size_t adapter_closed_form_bytes(const std::vector<AdapterSlot>& slots, int rank) {
  std::size_t body = 0;
  for (const auto& s : slots) body += static_cast<std::size_t>(rank) * static_cast<std::size_t>(s.in_dim + s.out_dim) * 4;
  return adapter_header_bytes(slots.size()) + body;
}

std::vector<std::uint8_t> recipe_to_binary(const Recipe& r) {
  ByteWriter w;
  w.magic("PPCR");
  w.u32(kRecipeVersion);
  w.u32(r.target);
  w.bytes(digest_from_hex(r.pool_hash));
  w.u32(static_cast<std::uint32_t>(r.slots.size()));
  for (const auto& s : r.slots) {
    if (s.size() > 0xffff) throw FormatError("too many recipe entries in one slot");
    w.u16(static_cast<std::uint16_t>(s.size()));
  }
  for (const auto& s : r.slots)
    for (const auto& e : s) {
      w.u32(e.sharer);
      w.f32(e.weight);
    }
  return w.data();
}

Recipe recipe_from_binary(std::span<const std::uint8_t> bytes) {
  ByteReader rd(bytes);
  rd.expect_magic("PPCR");
  if (rd.u32() != kRecipeVersion) throw FormatError("recipe: unsupported version");
  Recipe r;
  r.target = rd.u32();
  r.pool_hash = to_hex(rd.digest());
  const auto n = rd.u32();
  std::vector<std::uint16_t> counts(n);
  for (auto& c : counts) c = rd.u16();
  for (auto c : counts) {
    std::vector<RecipeEntry> entries;
    for (std::uint16_t i = 0; i < c; ++i) {
      const auto id = rd.u32();
      entries.push_back({id, rd.f32()});
    }
    r.slots.push_back(std::move(entries));
  }
  if (rd.remaining() != 0) throw FormatError("recipe: trailing bytes");
  return r;
}

std::vector<Tensor<float>> materialize(const Recipe& recipe, const PiecePool& pool) {
  recipe.validate(pool);
  std::vector<Tensor<float>> out;
  for (std::size_t l = 0; l < pool.slot_count(); ++l) {
    const auto& slot = pool.slots()[l];
    const auto d = static_cast<std::size_t>(slot.out_dim), n = static_cast<std::size_t>(slot.in_dim);
    std::vector<double> acc(d * n, 0.0);
    for (const auto& e : recipe.slots[l]) {
      const auto& p = pool.piece(e.sharer, static_cast<int>(l));
      const std::size_t r = p.a.shape[0];
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t k = 0; k < r; ++k) {
          const double bw = double(e.weight) * double(p.b(i, k));
          for (std::size_t j = 0; j < n; ++j) acc[i * n + j] += bw * double(p.a(k, j));
        }
    }
    Tensor<float> t({d, n});
    for (std::size_t i = 0; i < acc.size(); ++i) t.data[i] = static_cast<float>(acc[i]);
    out.push_back(std::move(t));
  }
  return out;
}

Var WeightedPiecesAttachment::apply(Tape<float>& tape, const AdapterSlot& slot, Var input) {
  const auto l = static_cast<std::size_t>(slot.index);
  if (l >= recipe_.slots.size() || recipe_.slots[l].empty()) return {};
  Var total{};
  for (const auto& e : recipe_.slots[l]) {
    const auto& p = pool_.piece(e.sharer, slot.index);
    Var xa = tape.matmul_nt(input, tape.constant(p.a));
    Var term = tape.scale(tape.matmul_nt(xa, tape.constant(p.b)), e.weight);
    total = total.valid() ? tape.add(total, term) : term;
  }
  return total;
}

}  // namespace perpcs
