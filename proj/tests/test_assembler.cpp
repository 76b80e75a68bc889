#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <json.hpp>
#include <map>

#include "perpcs/assembler.hpp"
#include "perpcs/binary_io.hpp"
#include "perpcs/synth.hpp"

using namespace perpcs;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.layers = 2;
  c.heads = 2;
  c.ffn = 32;
  c.max_seq = 48;
  c.rank = 2;
  c.seed = 31;
  return c;
}

Adapter random_adapter(const Model& m, std::uint64_t seed, double scale, bool zero_b = false) {
  auto ad = Adapter::init(m.slots(), m.config().rank, seed);
  Rng rng(seed);
  for (auto* p : ad.parameters()) {
    const bool is_b = p->name.rfind("lora_b", 0) == 0;
    for (auto& v : p->value.data) v = zero_b && is_b ? 0.0f : static_cast<float>(rng.normal(0, scale));
  }
  return ad;
}

SharerContribution contribution(const Model& m, std::uint32_t id, const Adapter& ad,
                                const std::vector<std::vector<float>>& gates) {
  return make_contribution(m, id, 10 + id, {float(id), 1.0f}, ad, gates);
}

std::vector<std::vector<float>> random_gates(const Model& m, Rng& rng) {
  std::vector<std::vector<float>> g;
  for (const auto& s : m.slots()) {
    std::vector<float> v(static_cast<std::size_t>(s.in_dim));
    for (auto& x : v) x = static_cast<float>(rng.normal(0, 1));
    g.push_back(std::move(v));
  }
  return g;
}

PiecePool random_pool(const Model& m, int sharers, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SharerContribution> cs;
  for (int s = 0; s < sharers; ++s)
    cs.push_back(contribution(m, static_cast<std::uint32_t>(100 + s), random_adapter(m, seed + s, 0.1),
                              random_gates(m, rng)));
  return build_pool(cs, m.slots(), m.config().rank);
}

UserRecord sample_user(std::uint32_t index = 6) {
  static const auto corpus = generate_corpus(TaskSpec{}, CorpusCounts{4, 4, 4}, 13);
  return corpus.users.at(index);
}

ScoreTable table_of(std::vector<double> scores, std::uint32_t first_id = 0) {
  ScoreTable t;
  for (std::size_t i = 0; i < scores.size(); ++i) t.scores.emplace_back(first_id + static_cast<std::uint32_t>(i), scores[i]);
  return t;
}

double weight_sum(const std::vector<RecipeEntry>& e) {
  double s = 0;
  for (const auto& x : e) s += x.weight;
  return s;
}

}  // namespace

TEST_CASE("scoring span follows the prompt and answer lengths") {
  auto ex = make_task_example("w126 f1 f9 f3", "w65 w85 w86");
  auto sp = span_of(ex);
  CHECK(sp.begin == ex.prompt_length + 1);
  CHECK(sp.end == ex.prompt_length + 3 + 1);
  auto ff = make_freeform_example("w1 w2 w3 w4 w5");
  CHECK(span_of(ff).begin == 1);
  CHECK(span_of(ff).end == 5 + 1);
  Example manual;
  manual.prompt_length = 5;
  manual.span_begin = 6;
  manual.span_end = 9;
  CHECK(span_of(manual).begin == 6);
  CHECK(span_of(manual).end == 9);
}

TEST_CASE("alpha counts parallel span tokens and ignores orthogonal ones") {
  // Two sequences of length 4; spans [2,3] and [1,4] cover 6 tokens.
  Tensor<float> act({8, 3});
  for (std::size_t r = 0; r < 8; ++r) act(r, 0) = 2.0f + float(r);
  // Rows outside the spans point the other way and must be ignored.
  act(0, 0) = -5.0f;
  act(3, 0) = -5.0f;
  std::vector<ScoringSpan> spans{{2, 3}, {1, 4}};
  auto par = GateVector::make(1, 0, {3.0f, 0.0f, 0.0f});
  auto orth = GateVector::make(2, 0, {0.0f, 0.0f, 7.0f});
  auto anti = GateVector::make(3, 0, {-1.0f, 0.0f, 0.0f});
  auto t = score_slot(0, act, 4, spans, {&orth, &par, &anti});
  REQUIRE(t.scores.size() == 3);
  CHECK(t.scores[0] == std::pair<std::uint32_t, double>{1, 6.0});
  CHECK(t.scores[1] == std::pair<std::uint32_t, double>{2, 0.0});
  CHECK(t.scores[2] == std::pair<std::uint32_t, double>{3, -6.0});
  CHECK_THROWS_AS(score_slot(0, act, 4, {{0, 2}, {1, 4}}, {&par}), AssemblyError);
  CHECK_THROWS_AS(score_slot(0, act, 4, {{2, 5}, {1, 4}}, {&par}), AssemblyError);
}

TEST_CASE("alpha is invariant to gate and activation scale") {
  Rng rng(3);
  Tensor<float> act({10, 4});
  for (auto& v : act.data) v = static_cast<float>(rng.normal(0, 1));
  Tensor<float> scaled = act;
  for (auto& v : scaled.data) v *= 8.0f;
  std::vector<float> g{0.3f, -1.0f, 0.5f, 2.0f};
  std::vector<float> g4;
  for (float x : g) g4.push_back(4.0f * x);
  auto a = GateVector::make(1, 0, g), b = GateVector::make(1, 0, g4);
  const double s1 = score_slot(0, act, 5, {{1, 5}, {2, 4}}, {&a}).scores[0].second;
  const double s2 = score_slot(0, scaled, 5, {{1, 5}, {2, 4}}, {&b}).scores[0].second;
  CHECK(s1 == doctest::Approx(s2).epsilon(1e-6));
  auto zero = GateVector::make(2, 0, {0, 0, 0, 0});
  CHECK(score_slot(0, act, 5, {{1, 5}, {2, 4}}, {&zero}).scores[0].second == 0.0);
}

TEST_CASE("top-k weights are the softmax of alpha over sqrt(n)") {
  AssemblyConfig cfg;
  cfg.k = 2;
  Rng rng(1);
  auto e = select_and_weight(table_of({2.0, 1.0}), cfg, 16, rng);
  REQUIRE(e.size() == 2);
  CHECK(e[0].sharer == 0);
  CHECK(e[0].weight == doctest::Approx(0.5622).epsilon(1e-4));
  CHECK(e[1].weight == doctest::Approx(0.4378).epsilon(1e-4));
  const double oracle = std::exp(0.5) / (std::exp(0.5) + std::exp(0.25));
  CHECK(e[0].weight == doctest::Approx(oracle).epsilon(1e-7));

  cfg.k = 1;
  e = select_and_weight(table_of({0.1, 3.0, 2.0}), cfg, 16, rng);
  REQUIRE(e.size() == 1);
  CHECK(e[0].sharer == 1);
  CHECK(e[0].weight == 1.0f);

  // Ties go to the lower sharer id.
  cfg.k = 1;
  e = select_and_weight(table_of({1.0, 1.0, 1.0}, 5), cfg, 4, rng);
  CHECK(e[0].sharer == 5);

  cfg.k = 10;
  e = select_and_weight(table_of({1.0, 2.0, 3.0}), cfg, 4, rng);
  CHECK(e.size() == 3);
  CHECK_THROWS_AS(select_and_weight(ScoreTable{}, cfg, 4, rng), AssemblyError);
}

TEST_CASE("top-p selection is monotone in p and normalized (1000 tables)") {
  Rng rng(77);
  for (int trial = 0; trial < 1000; ++trial) {
    const int count = rng.uniform_int(1, 12);
    std::vector<double> scores;
    for (int i = 0; i < count; ++i) scores.push_back(rng.normal(0, 4));
    const auto table = table_of(scores);
    const int n = rng.uniform_int(1, 64);
    std::vector<double> ps{0.1, 0.3, 0.5, 0.7, 0.9, 1.0};
    std::size_t prev = 0;
    std::vector<RecipeEntry> prev_entries;
    for (double p : ps) {
      AssemblyConfig cfg;
      cfg.mode = SelectionMode::kToppAgg;
      cfg.p = p;
      auto e = select_and_weight(table, cfg, n, rng);
      CHECK(e.size() >= std::max<std::size_t>(prev, 1));
      CHECK(weight_sum(e) == doctest::Approx(1.0).epsilon(1e-6));
      for (std::size_t i = 0; i < prev_entries.size(); ++i) CHECK(e[i].sharer == prev_entries[i].sharer);
      for (std::size_t i = 1; i < e.size(); ++i) CHECK(e[i].weight <= e[i - 1].weight);
      prev = e.size();
      prev_entries = e;
    }
    CHECK(prev == scores.size());

    AssemblyConfig topk;
    topk.k = rng.uniform_int(1, 5);
    auto e = select_and_weight(table, topk, n, rng);
    CHECK(e.size() == std::min<std::size_t>(scores.size(), static_cast<std::size_t>(topk.k)));
    CHECK(weight_sum(e) == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("top-p keeps the smallest prefix reaching the mass") {
  AssemblyConfig cfg;
  cfg.mode = SelectionMode::kToppAgg;
  Rng rng(1);
  // softmax([ln 6, ln 3, ln 1]) = [0.6, 0.3, 0.1] with n = 1.
  auto t = table_of({std::log(6.0), std::log(3.0), 0.0});
  cfg.p = 0.6;
  CHECK(select_and_weight(t, cfg, 1, rng).size() == 1);
  cfg.p = 0.61;
  auto e = select_and_weight(t, cfg, 1, rng);
  REQUIRE(e.size() == 2);
  CHECK(e[0].weight == doctest::Approx(2.0 / 3.0).epsilon(1e-6));
  cfg.p = 0.95;
  CHECK(select_and_weight(t, cfg, 1, rng).size() == 3);
}

TEST_CASE("sampling and uniform modes") {
  AssemblyConfig cfg;
  cfg.mode = SelectionMode::kTopkSample;
  cfg.k = 2;
  Rng rng(5);
  auto t = table_of({std::log(3.0), std::log(1.0), -50.0});
  std::map<std::uint32_t, int> hits;
  for (int i = 0; i < 4000; ++i) {
    auto e = select_and_weight(t, cfg, 1, rng);
    REQUIRE(e.size() == 1);
    CHECK(e[0].weight == 1.0f);
    ++hits[e[0].sharer];
  }
  CHECK(hits.count(2) == 0);
  CHECK(double(hits[0]) / 4000.0 == doctest::Approx(0.75).epsilon(0.05));

  cfg.mode = SelectionMode::kUniform;
  auto u = select_and_weight(t, cfg, 1, rng);
  REQUIRE(u.size() == 3);
  for (const auto& x : u) CHECK(x.weight == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("singleton pool reproduces the sharer's adapter with weight one") {
  Model m(small_config());
  Rng rng(8);
  auto ad = random_adapter(m, 4, 0.2);
  auto pool = build_pool({contribution(m, 42, ad, random_gates(m, rng))}, m.slots(), 2);
  auto recipe = assemble(m, pool, sample_user(), AssemblyConfig{});
  REQUIRE(recipe.slots.size() == m.slot_count());
  for (const auto& s : recipe.slots) {
    REQUIRE(s.size() == 1);
    CHECK(s[0].sharer == 42);
    CHECK(s[0].weight == 1.0f);
  }
  auto deltas = materialize(recipe, pool);
  for (std::size_t l = 0; l < deltas.size(); ++l) {
    auto d = ad.delta_weight(l);
    for (std::size_t i = 0; i < d.numel(); ++i) CHECK(deltas[l].data[i] == doctest::Approx(d.data[i]).epsilon(1e-6));
  }
  const auto ex = history_examples(sample_user());
  const auto lm = make_lm_batch({&ex[0], &ex[1], &ex[2]});
  Model replica = m;
  WeightedPiecesAttachment pieces(recipe, pool);
  LoraAttachment<float> lora(ad);
  auto a = forward_logits(replica, lm.tokens, &pieces);
  auto b = forward_logits(replica, lm.tokens, &lora);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data[i] == b.data[i]);
}

TEST_CASE("planted sharer is recovered at every slot from basis gates") {
  const int sharers = 6, n = 16, slots = 8;
  for (int planted = 0; planted < sharers; ++planted) {
    Rng rng(100 + planted);
    for (int l = 0; l < slots; ++l) {
      std::vector<GateVector> gates;
      for (int s = 0; s < sharers; ++s) {
        std::vector<float> g(n, 0.0f);
        g[static_cast<std::size_t>(s)] = 1.0f;
        gates.push_back(GateVector::make(static_cast<std::uint32_t>(s), l, g));
      }
      Tensor<float> act({20, static_cast<std::size_t>(n)});
      for (std::size_t r = 0; r < 20; ++r) {
        for (int k = 0; k < n; ++k) act(r, static_cast<std::size_t>(k)) = static_cast<float>(rng.normal(0, 0.1));
        act(r, static_cast<std::size_t>(planted)) += 1.0f;
      }
      std::vector<const GateVector*> ptrs;
      for (const auto& g : gates) ptrs.push_back(&g);
      auto table = score_slot(l, act, 10, {{2, 9}, {1, 10}}, ptrs);
      AssemblyConfig cfg;
      cfg.k = 1;
      auto e = select_and_weight(table, cfg, n, rng);
      CHECK(e.at(0).sharer == static_cast<std::uint32_t>(planted));
    }
  }
}

TEST_CASE("planted sharer is recovered by full assembly through the model") {
  Model m(small_config());
  const auto user = sample_user(7);
  const auto examples = history_examples(user);
  std::vector<const Example*> all;
  for (const auto& e : examples) all.push_back(&e);
  const auto lm = make_lm_batch(all);
  ActivationTap<float> tap;
  Model replica = m;
  forward_logits<float>(replica, lm.tokens, nullptr, &tap);

  // Planted gate: the summed unit span activations at each slot. Decoys are
  // random directions with that component removed.
  Rng rng(9);
  std::vector<std::vector<float>> planted, decoy[3];
  for (std::size_t l = 0; l < m.slot_count(); ++l) {
    const auto& a = tap.at(static_cast<int>(l));
    const std::size_t n = a.shape[1];
    std::vector<double> mean(n, 0.0);
    for (std::size_t b = 0; b < examples.size(); ++b)
      for (int t = examples[b].span_begin; t <= examples[b].span_end; ++t) {
        const auto row = a.row(b * lm.tokens.seq + static_cast<std::size_t>(t - 1));
        double norm = 0;
        for (float v : row) norm += double(v) * v;
        norm = std::sqrt(norm);
        for (std::size_t k = 0; k < n; ++k) mean[k] += row[k] / norm;
      }
    double mm = 0;
    for (double v : mean) mm += v * v;
    planted.emplace_back(mean.begin(), mean.end());
    for (auto& d : decoy) {
      std::vector<double> r(n);
      for (auto& v : r) v = rng.normal(0, 1);
      double dot = 0;
      for (std::size_t k = 0; k < n; ++k) dot += r[k] * mean[k];
      for (std::size_t k = 0; k < n; ++k) r[k] -= dot / mm * mean[k];
      d.emplace_back(r.begin(), r.end());
    }
  }
  std::vector<SharerContribution> cs;
  cs.push_back(contribution(m, 1, random_adapter(m, 1, 0.3, true), decoy[0]));
  cs.push_back(contribution(m, 2, random_adapter(m, 2, 0.3, true), planted));
  cs.push_back(contribution(m, 3, random_adapter(m, 3, 0.3, true), decoy[1]));
  cs.push_back(contribution(m, 4, random_adapter(m, 4, 0.3, true), decoy[2]));
  auto pool = build_pool(cs, m.slots(), 2);

  AssemblyConfig cfg;
  cfg.k = 1;
  cfg.batch_size = static_cast<int>(examples.size());
  auto recipe = assemble(m, pool, user, cfg);
  std::size_t hits = 0;
  for (const auto& s : recipe.slots) hits += s.size() == 1 && s[0].sharer == 2;
  CHECK(hits == m.slot_count());
}

TEST_CASE("assembly is deterministic, bounded by k and normalized") {
  Model m(small_config());
  auto pool = random_pool(m, 7, 50);
  const auto user = sample_user();
  for (auto mode : {SelectionMode::kTopkAgg, SelectionMode::kToppAgg, SelectionMode::kTopkSample,
                    SelectionMode::kUniform}) {
    AssemblyConfig cfg;
    cfg.mode = mode;
    cfg.batch_size = 4;
    cfg.seed = 3;
    AssemblyTrace trace;
    auto a = assemble(m, pool, user, cfg, &trace);
    auto b = assemble(m, pool, user, cfg);
    CHECK(a == b);
    CHECK_NOTHROW(a.validate(pool));
    CHECK(trace.batches.size() == (user.items.size() + 3) / 4);
    for (const auto& s : a.slots) {
      CHECK(weight_sum(s) == doctest::Approx(1.0).epsilon(1e-6));
      if (mode == SelectionMode::kTopkAgg || mode == SelectionMode::kTopkSample) CHECK(s.size() <= 3);
      if (mode == SelectionMode::kUniform) CHECK(s.size() == 7);
    }
  }
}

TEST_CASE("two identical batches give the single-batch recipe") {
  Model m(small_config());
  auto pool = random_pool(m, 5, 60);
  UserRecord once = sample_user();
  once.items.resize(4);
  UserRecord twice = once;
  twice.items.insert(twice.items.end(), once.items.begin(), once.items.end());
  AssemblyConfig cfg;
  cfg.batch_size = 4;
  auto a = assemble(m, pool, once, cfg);
  auto b = assemble(m, pool, twice, cfg);
  CHECK(a.slots == b.slots);
}

TEST_CASE("assembly refuses a pool built for another model") {
  Model m(small_config());
  auto other_cfg = small_config();
  other_cfg.seed = 32;
  Model other(other_cfg);
  auto pool = random_pool(other, 3, 1);
  CHECK_THROWS_AS(assemble(m, pool, sample_user(), AssemblyConfig{}), HashMismatchError);
  UserRecord empty = sample_user();
  empty.items.clear();
  CHECK_THROWS_AS(assemble(other, pool, empty, AssemblyConfig{}), AssemblyError);
}

TEST_CASE("assembly performs no gradient work") {
  Model m(small_config());
  auto pool = random_pool(m, 4, 9);
  const auto before = autodiff_counters();
  assemble(m, pool, sample_user(), AssemblyConfig{});
  const auto after = autodiff_counters();
  CHECK(after.optimizer_steps == before.optimizer_steps);
  CHECK(after.grad_tapes == before.grad_tapes);
  CHECK(after.backward_calls == before.backward_calls);
}

TEST_CASE("score dump lists every batch and slot") {
  Model m(small_config());
  auto pool = random_pool(m, 3, 4);
  AssemblyTrace trace;
  assemble(m, pool, sample_user(), AssemblyConfig{}, &trace);
  const auto j = nlohmann::json::parse(score_dump_json(trace));
  CHECK(j.size() == trace.batches.size());
  CHECK(j[0]["slots"].size() == m.slot_count());
  CHECK(j[0]["slots"][0]["scores"].size() == 3);
}

TEST_CASE("peft retrieval mixes whole adapters by cosine softmax") {
  Model m(small_config());
  std::vector<Adapter> ads{random_adapter(m, 1, 0.2), random_adapter(m, 2, 0.2), random_adapter(m, 3, 0.2)};
  std::vector<Candidate> c{{10, 5, {1, 0}}, {11, 5, {0, 1}}, {12, 5, {1, 1}}};
  std::vector<const Adapter*> ptrs{&ads[0], &ads[1], &ads[2]};
  auto r = peft_retrieval_baseline({0.0f, 2.0f}, c, ptrs, 2);
  CHECK(r.sharers == std::vector<std::uint32_t>{11, 12});
  const double c1 = 1.0, c2 = 1.0 / std::sqrt(2.0);
  CHECK(r.weights[0] == doctest::Approx(std::exp(c1) / (std::exp(c1) + std::exp(c2))));
  CHECK(r.weights[0] + r.weights[1] == doctest::Approx(1.0));
  for (std::size_t l = 0; l < m.slot_count(); ++l) {
    auto d1 = ads[1].delta_weight(l), d2 = ads[2].delta_weight(l);
    for (std::size_t i = 0; i < d1.numel(); ++i)
      CHECK(r.deltas[l].data[i] ==
            doctest::Approx(r.weights[0] * d1.data[i] + r.weights[1] * d2.data[i]).epsilon(1e-5));
  }
  auto one = peft_retrieval_baseline({1.0f, 0.0f}, c, ptrs, 1);
  CHECK(one.sharers == std::vector<std::uint32_t>{10});
  CHECK(one.weights[0] == 1.0);
  CHECK_THROWS(peft_retrieval_baseline({1.0f, 0.0f}, c, ptrs, 4));
  CHECK(cosine({1, 0}, {0, 0}) == 0.0);
}
