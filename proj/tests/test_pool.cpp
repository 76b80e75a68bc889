#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "perpcs/binary_io.hpp"
#include "perpcs/pool.hpp"

using namespace perpcs;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.layers = 2;
  c.heads = 2;
  c.ffn = 32;
  c.max_seq = 16;
  c.rank = 2;
  c.seed = 99;
  return c;
}

void randomize(Adapter& ad, Rng& rng, double scale) {
  for (auto* p : ad.parameters())
    for (auto& v : p->value.data) v = static_cast<float>(rng.normal(0, scale));
}

SharerContribution contribution(const Model& m, std::uint32_t id, std::uint64_t seed) {
  Rng rng(seed);
  auto ad = Adapter::init(m.slots(), m.config().rank, seed);
  randomize(ad, rng, 0.2);
  SharerContribution c;
  c.sharer = id;
  c.model_hash = m.content_hash();
  c.history_size = 10 + id;
  c.embedding = {float(id), 1.0f, -0.5f};
  c.pieces = decompose(ad, id, m.slot_count());
  for (const auto& s : m.slots()) {
    std::vector<float> g(static_cast<std::size_t>(s.in_dim));
    for (auto& v : g) v = static_cast<float>(rng.normal(0, 1));
    c.gates.push_back(GateVector::make(id, s.index, g));
  }
  return c;
}

TokenBatch random_batch(Rng& rng, std::size_t batch, std::size_t seq) {
  TokenBatch b;
  b.batch = batch;
  b.seq = seq;
  for (std::size_t i = 0; i < batch * seq; ++i) b.ids.push_back(rng.uniform_int(1, 63));
  b.lengths.assign(batch, seq);
  return b;
}

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  REQUIRE(a.shape == b.shape);
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.data[i]) - double(b.data[i])));
  return m;
}

std::filesystem::path temp_dir() {
  auto d = std::filesystem::temp_directory_path() / "perpcs_test_pool";
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("decompose yields one piece per slot and reassembles exactly") {
  ModelConfig c;
  Model m(c);
  Rng rng(1);
  auto ad = Adapter::init(m.slots(), c.rank, 3);
  randomize(ad, rng, 0.1);
  auto pieces = decompose(ad, 7, 16);
  REQUIRE(pieces.size() == 16);
  for (std::size_t l = 0; l < 16; ++l) {
    CHECK(pieces[l].slot == static_cast<int>(l));
    CHECK(pieces[l].sharer == 7);
    CHECK(pieces[l].a.shape == Shape{4, 64});
    CHECK(pieces[l].b.shape == Shape{64, 4});
  }
  auto back = reassemble(pieces);
  for (std::size_t l = 0; l < 16; ++l) {
    CHECK(back.a[l].value.data == ad.a[l].value.data);
    CHECK(back.b[l].value.data == ad.b[l].value.data);
  }
  auto zero = Adapter::zeros(m.slots(), c.rank);
  for (const auto& p : decompose(zero, 0, 16)) {
    for (float v : p.a.data) CHECK(v == 0.0f);
    for (float v : p.b.data) CHECK(v == 0.0f);
  }
  CHECK_THROWS_AS(decompose(ad, 7, 12), PoolError);
}

TEST_CASE("gated forward: zero gate halves the delta and matches a dense oracle") {
  Piece p{1, 0, Tensor<float>({2, 3}, {1, 0, 2, -1, 1, 0}), Tensor<float>({2, 2}, {1, 2, 0, 1})};
  std::vector<float> v{1, 2, 3};
  // A v = (7, 1); B A v = (9, 1).
  auto zero = GateVector::make(1, 0, {0, 0, 0});
  auto out = gated_forward_delta(p, zero, v);
  CHECK(out[0] == doctest::Approx(4.5));
  CHECK(out[1] == doctest::Approx(0.5));
  for (float u : zero.unit) CHECK(u == 0.0f);

  auto g = GateVector::make(1, 0, {0.5f, -0.25f, 0.1f});
  const double s = 1.0 / (1.0 + std::exp(-(0.5 - 0.5 + 0.3)));
  out = gated_forward_delta(p, g, v);
  CHECK(std::abs(out[0] - 9 * s) <= 1e-6);
  CHECK(std::abs(out[1] - 1 * s) <= 1e-6);
  double norm = 0;
  for (float u : g.unit) norm += double(u) * u;
  CHECK(std::sqrt(norm) == doctest::Approx(1.0));
}

TEST_CASE("gated attachment agrees with the per-vector formula inside the model") {
  Model m(small_config());
  Rng rng(2);
  auto ad = Adapter::init(m.slots(), 2, 4);
  randomize(ad, rng, 0.3);
  std::vector<Parameter<float>> gates;
  for (const auto& s : m.slots()) {
    Tensor<float> g({static_cast<std::size_t>(s.in_dim)});
    for (auto& v : g.data) v = static_cast<float>(rng.normal(0, 0.5));
    gates.emplace_back("gate." + std::to_string(s.index), g);
  }
  GatedPiecesAttachment<float> att(ad, gates);
  auto batch = random_batch(rng, 2, 6);
  ActivationTap<float> tap;
  Tape<float> tape(false);
  (void)m.forward(tape, batch, &att, &tap);
  for (const auto& s : m.slots()) {
    const auto l = static_cast<std::size_t>(s.index);
    Piece piece{0, s.index, ad.a[l].value, ad.b[l].value};
    auto gate = GateVector::make(0, s.index, gates[l].value.data);
    const auto& x = tap.at(s.index);
    Tape<float> t2(false);
    Var in = t2.constant(x);
    Var delta = att.apply(t2, s, in);
    const auto& dv = t2.value(delta);
    for (std::size_t row = 0; row < x.shape[0]; row += 5) {
      auto ref = gated_forward_delta(piece, gate, x.row(row));
      for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(dv(row, i) - ref[i]) <= 1e-5);
    }
  }
}

TEST_CASE("share masks: count, determinism, bounds") {
  CHECK(shared_slot_count(0.2, 16) == 3);
  CHECK(shared_slot_count(1.0, 16) == 16);
  CHECK(shared_slot_count(0.01, 16) == 1);
  CHECK(shared_slot_count(0.5, 16) == 8);
  CHECK_THROWS(shared_slot_count(0.0, 16));
  CHECK_THROWS(shared_slot_count(1.5, 16));
  auto a = ShareMask::draw(5, 0.2, 16, 42);
  auto b = ShareMask::draw(5, 0.2, 16, 42);
  CHECK(a.count() == 3);
  CHECK(a.shared == b.shared);
  bool differs = false;
  for (std::uint32_t s = 6; s < 20; ++s) differs |= ShareMask::draw(s, 0.2, 16, 42).shared != a.shared;
  CHECK(differs);
  CHECK(ShareMask::full(1, 16).count() == 16);
}

TEST_CASE("pool builder validates and seals") {
  Model m(small_config());
  PoolBuilder empty(m.slots(), 2);
  CHECK_THROWS_AS(empty.build(), PoolError);

  PoolBuilder b(m.slots(), 2);
  b.add(contribution(m, 3, 30));
  b.add(contribution(m, 1, 10));
  CHECK_THROWS_AS(b.add(contribution(m, 3, 31)), PoolError);
  auto other = contribution(m, 9, 90);
  other.model_hash = std::string(64, 'a');
  CHECK_THROWS_AS(b.add(other), PoolError);
  auto short_c = contribution(m, 8, 80);
  short_c.pieces.pop_back();
  CHECK_THROWS_AS(b.add(short_c), PoolError);

  auto pool = b.build();
  CHECK_THROWS_AS(b.add(contribution(m, 4, 40)), PoolError);
  CHECK_THROWS_AS(b.build(), PoolError);
  REQUIRE(pool.sharers().size() == 2);
  CHECK(pool.sharers()[0].id == 1);
  CHECK(pool.sharers()[1].id == 3);
  CHECK(pool.model_hash() == m.content_hash());
  CHECK(pool.sharers_at(0).size() == 2);
  CHECK_THROWS_AS(pool.piece(2, 0), PoolError);
}

TEST_CASE("partial sharing stores only masked slots") {
  Model m(small_config());
  std::vector<SharerContribution> cs{contribution(m, 1, 10), contribution(m, 2, 20)};
  std::vector<ShareMask> masks{ShareMask::draw(1, 0.5, m.slot_count(), 7), ShareMask::draw(2, 0.5, m.slot_count(), 7)};
  auto pool = build_pool(cs, m.slots(), 2, &masks);
  for (const auto& s : pool.sharers()) {
    std::size_t present = 0;
    for (std::size_t l = 0; l < pool.slot_count(); ++l) {
      CHECK(s.pieces[l].has_value() == s.shared[l]);
      present += s.pieces[l].has_value();
    }
    CHECK(present == 4);
  }
  auto full = build_pool(cs, m.slots(), 2);
  CHECK(full.serialize().size() > pool.serialize().size());
  CHECK(full.hash() != pool.hash());
}

TEST_CASE("pool file round trip, truncation and corruption") {
  Model m(small_config());
  auto pool = build_pool({contribution(m, 1, 10), contribution(m, 4, 40)}, m.slots(), 2);
  const auto path = temp_dir() / "pool.bin";
  save_pool(pool, path);
  auto loaded = load_pool(path);
  CHECK(loaded.hash() == pool.hash());
  CHECK(loaded.serialize() == pool.serialize());
  CHECK(loaded.slots() == pool.slots());
  CHECK(loaded.piece(4, 3).a.data == pool.piece(4, 3).a.data);
  CHECK(loaded.gate(1, 2).unit == pool.gate(1, 2).unit);
  CHECK(loaded.sharers()[1].embedding == pool.sharers()[1].embedding);
  CHECK(file_sha256_hex(path) == sha256_hex(pool.serialize()));

  auto bytes = read_file_bytes(path);
  auto cut = bytes;
  cut.resize(cut.size() - 7);
  CHECK_THROWS_AS(PiecePool::deserialize(cut), FormatError);
  cut.resize(20);
  CHECK_THROWS_AS(PiecePool::deserialize(cut), FormatError);

  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x10;
  CHECK_THROWS_AS(PiecePool::deserialize(flipped), HashMismatchError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(PiecePool::deserialize(bad_magic), FormatError);
}

TEST_CASE("recipe JSON and binary round trips with closed-form size") {
  Recipe r;
  r.target = 12;
  r.pool_hash = std::string(64, 'c');
  for (int l = 0; l < 16; ++l) r.slots.push_back({{1, 0.75f}, {7, 0.25f}});
  CHECK(recipe_from_json(recipe_to_json(r)) == r);
  auto bin = recipe_to_binary(r);
  CHECK(bin.size() == recipe_closed_form_bytes(16, 2));
  CHECK(recipe_header_bytes(16) == 80);
  CHECK(recipe_from_binary(bin) == r);
  bin.pop_back();
  CHECK_THROWS_AS(recipe_from_binary(bin), FormatError);
  const auto path = temp_dir() / "recipe.json";
  save_recipe(r, path);
  CHECK(load_recipe(path) == r);

  ModelConfig c;
  CHECK(adapter_closed_form_bytes(make_slots(c), c.rank) == adapter_header_bytes(16) + 32768);
}

TEST_CASE("adapter file size equals its closed form") {
  Model m(small_config());
  auto ad = Adapter::init(m.slots(), 2, 1);
  const auto path = temp_dir() / "adapter.bin";
  save_adapter(ad, m.content_hash(), path);
  CHECK(std::filesystem::file_size(path) == adapter_closed_form_bytes(m.slots(), 2));
}

TEST_CASE("materialize: single sharer, cancelling pair, dense oracle") {
  Model m(small_config());
  auto c1 = contribution(m, 1, 10);
  auto c2 = c1;
  c2.sharer = 2;
  for (auto& p : c2.pieces) {
    p.sharer = 2;
    for (auto& v : p.b.data) v = -v;
  }
  for (auto& g : c2.gates) g.sharer = 2;
  auto c3 = contribution(m, 3, 30);
  auto pool = build_pool({c1, c2, c3}, m.slots(), 2);
  const auto L = pool.slot_count();

  Recipe single{0, pool.hash(), std::vector<std::vector<RecipeEntry>>(L, {{1, 1.0f}})};
  auto ad1 = reassemble(c1.pieces);
  auto dense = materialize(single, pool);
  for (std::size_t l = 0; l < L; ++l) CHECK(max_abs_diff(dense[l], ad1.delta_weight(l)) <= 1e-6);

  Recipe cancel{0, pool.hash(), std::vector<std::vector<RecipeEntry>>(L, {{1, 0.5f}, {2, 0.5f}})};
  for (const auto& t : materialize(cancel, pool))
    for (float v : t.data) CHECK(std::abs(v) <= 1e-7);

  Recipe mix{0, pool.hash(), std::vector<std::vector<RecipeEntry>>(L, {{1, 0.2f}, {2, 0.3f}, {3, 0.5f}})};
  auto got = materialize(mix, pool);
  for (std::size_t l = 0; l < L; ++l) {
    const auto& s = pool.slots()[l];
    for (int i = 0; i < s.out_dim; i += 3)
      for (int j = 0; j < s.in_dim; j += 2) {
        double ref = 0;
        for (const auto& e : mix.slots[l]) {
          const auto& p = pool.piece(e.sharer, static_cast<int>(l));
          for (std::size_t k = 0; k < 2; ++k) ref += e.weight * double(p.b(i, k)) * double(p.a(k, j));
        }
        CHECK(std::abs(got[l](i, j) - ref) <= 1e-6);
      }
  }

  Recipe stale = mix;
  stale.pool_hash = std::string(64, '0');
  CHECK_THROWS_AS(materialize(stale, pool), HashMismatchError);
  Recipe unknown{0, pool.hash(), std::vector<std::vector<RecipeEntry>>(L, {{9, 1.0f}})};
  CHECK_THROWS_AS(materialize(unknown, pool), PoolError);
  Recipe unnormalized{0, pool.hash(), std::vector<std::vector<RecipeEntry>>(L, {{1, 0.4f}})};
  CHECK_THROWS_AS(materialize(unnormalized, pool), PoolError);
}

TEST_CASE("weighted pieces forward equals merged recipe forward") {
  Model m(small_config());
  auto pool = build_pool({contribution(m, 1, 10), contribution(m, 2, 20), contribution(m, 5, 50)}, m.slots(), 2);
  Recipe r{0, pool.hash(), {}};
  for (std::size_t l = 0; l < pool.slot_count(); ++l)
    r.slots.push_back(l % 3 == 0 ? std::vector<RecipeEntry>{{2, 1.0f}}
                                 : std::vector<RecipeEntry>{{1, 0.6f}, {5, 0.4f}});
  Rng rng(3);
  auto batch = random_batch(rng, 2, 9);
  WeightedPiecesAttachment att(r, pool);
  auto piecewise = forward_logits<float>(m, batch, &att);
  Model merged = m;
  merged.merge_deltas(materialize(r, pool));
  CHECK(max_abs_diff(piecewise, forward_logits(merged, batch)) <= 1e-5);
}
