#include "perpcs/assembler.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <json.hpp>
#include <numeric>

#include "perpcs/binary_io.hpp"

namespace perpcs {

ScoringSpan span_of(const Example& ex) { return {ex.span_begin, ex.span_end}; }

std::string to_string(SelectionMode m) {
  switch (m) {
    case SelectionMode::kTopkAgg: return "topk-agg";
    case SelectionMode::kToppAgg: return "topp-agg";
    case SelectionMode::kTopkSample: return "topk-sample";
    case SelectionMode::kUniform: return "uniform";
  }
  throw std::logic_error("unreachable");
}

SelectionMode selection_mode_from_string(const std::string& s) {
  for (auto m : {SelectionMode::kTopkAgg, SelectionMode::kToppAgg, SelectionMode::kTopkSample, SelectionMode::kUniform})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown selection mode '" + s + "'");
}

void AssemblyConfig::validate() const {
  if (k < 1) throw std::invalid_argument("assembly k must be >= 1");
  if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("assembly p must be in (0, 1]");
  if (batch_size < 1) throw std::invalid_argument("assembly batch size must be positive");
}

ScoreTable score_slot(int slot, const Tensor<float>& activations, std::size_t seq, const std::vector<ScoringSpan>& spans,
                      const std::vector<const GateVector*>& gates) {
  const std::size_t n = activations.shape.at(1);
  if (activations.shape[0] != spans.size() * seq) throw ShapeError("score_slot: activations do not match batch");
  // Unit-normalized span activations, gathered once.
  std::vector<std::vector<double>> units;
  for (std::size_t b = 0; b < spans.size(); ++b) {
    const auto& sp = spans[b];
    if (sp.begin < 1 || sp.end < sp.begin || static_cast<std::size_t>(sp.end) > seq)
      throw AssemblyError("scoring span [" + std::to_string(sp.begin) + ", " + std::to_string(sp.end) +
                          "] outside sequence of length " + std::to_string(seq));
    for (int t = sp.begin; t <= sp.end; ++t) {
      const auto row = activations.row(b * seq + static_cast<std::size_t>(t - 1));
      double norm = 0;
      for (float v : row) norm += double(v) * double(v);
      norm = std::sqrt(norm);
      std::vector<double> u(n, 0.0);
      if (norm > 0)
        for (std::size_t k = 0; k < n; ++k) u[k] = row[k] / norm;
      units.push_back(std::move(u));
    }
  }
  ScoreTable table;
  table.slot = slot;
  for (const auto* g : gates) {
    if (g->unit.size() != n) throw ShapeError("gate length does not match slot input");
    double alpha = 0;
    for (const auto& u : units)
      for (std::size_t k = 0; k < n; ++k) alpha += g->unit[k] * u[k];
    table.scores.emplace_back(g->sharer, alpha);
  }
  std::sort(table.scores.begin(), table.scores.end());
  return table;
}

std::vector<RecipeEntry> select_and_weight(const ScoreTable& table, const AssemblyConfig& cfg, int n, Rng& rng) {
  if (table.scores.empty()) throw AssemblyError("empty score table at slot " + std::to_string(table.slot));
  auto ranked = table.scores;
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  const double scale = 1.0 / std::sqrt(static_cast<double>(n));
  auto weights_of = [&](std::size_t count) {
    std::vector<double> s;
    for (std::size_t i = 0; i < count; ++i) s.push_back(ranked[i].second * scale);
    return softmax<double>(s);
  };

  std::vector<RecipeEntry> out;
  const std::size_t top = std::min(ranked.size(), static_cast<std::size_t>(cfg.k));
  switch (cfg.mode) {
    case SelectionMode::kTopkAgg: {
      const auto w = weights_of(top);
      for (std::size_t i = 0; i < top; ++i) out.push_back({ranked[i].first, static_cast<float>(w[i])});
      break;
    }
    case SelectionMode::kToppAgg: {
      const auto all = weights_of(ranked.size());
      std::size_t count = 0;
      double mass = 0;
      while (count < ranked.size() && (count == 0 || mass < cfg.p)) mass += all[count++];
      const auto w = weights_of(count);
      for (std::size_t i = 0; i < count; ++i) out.push_back({ranked[i].first, static_cast<float>(w[i])});
      break;
    }
    case SelectionMode::kTopkSample: {
      const auto w = weights_of(top);
      out.push_back({ranked[rng.categorical(w)].first, 1.0f});
      break;
    }
    case SelectionMode::kUniform: {
      for (const auto& [id, alpha] : table.scores)
        out.push_back({id, static_cast<float>(1.0 / static_cast<double>(table.scores.size()))});
      break;
    }
  }
  return out;
}

namespace {

// Slot hook for one assembly forward pass: taps, scores, selects and applies.
class AssemblyHook : public SlotAttachment<float> {
 public:
  AssemblyHook(const PiecePool& pool, const AssemblyConfig& cfg, std::size_t seq, std::vector<ScoringSpan> spans,
               Rng& rng)
      : pool_(pool), cfg_(cfg), seq_(seq), spans_(std::move(spans)), rng_(rng) {}

  Var apply(Tape<float>& tape, const AdapterSlot& slot, Var input) override {
    const auto at = pool_.sharers_at(slot.index);
    if (at.empty()) {
      tables.push_back({slot.index, {}});
      selections.emplace_back();
      return {};
    }
    std::vector<const GateVector*> gates;
    for (const auto* s : at) gates.push_back(&*s->gates[static_cast<std::size_t>(slot.index)]);
    tables.push_back(score_slot(slot.index, tape.value(input), seq_, spans_, gates));
    selections.push_back(select_and_weight(tables.back(), cfg_, slot.in_dim, rng_));
    Var total{};
    for (const auto& e : selections.back()) {
      const auto& p = pool_.piece(e.sharer, slot.index);
      Var xa = tape.matmul_nt(input, tape.constant(p.a));
      Var term = tape.scale(tape.matmul_nt(xa, tape.constant(p.b)), e.weight);
      total = total.valid() ? tape.add(total, term) : term;
    }
    return total;
  }

  std::vector<ScoreTable> tables;
  std::vector<std::vector<RecipeEntry>> selections;

 private:
  const PiecePool& pool_;
  const AssemblyConfig& cfg_;
  std::size_t seq_;
  std::vector<ScoringSpan> spans_;
  Rng& rng_;
};

}  // namespace

Recipe assemble(const Model& base, const PiecePool& pool, const UserRecord& target, const AssemblyConfig& cfg,
                AssemblyTrace* trace) {
  cfg.validate();
  if (pool.model_hash() != base.content_hash())
    throw HashMismatchError("pool was built against model " + pool.model_hash().substr(0, 12) + ", base is " +
                            base.content_hash().substr(0, 12));
  if (pool.slot_count() != base.slot_count()) throw AssemblyError("pool slot table does not match base model");
  const auto examples = history_examples(target);
  if (examples.empty()) throw AssemblyError("target " + std::to_string(target.user_id) + " has an empty history");

  const auto before = autodiff_counters();
  Model replica = base;
  Rng rng(derive_seed(cfg.seed, target.user_id));
  const auto L = pool.slot_count();
  std::vector<std::map<std::uint32_t, double>> sums(L);
  std::size_t batches = 0;
  for (std::size_t i = 0; i < examples.size(); i += static_cast<std::size_t>(cfg.batch_size)) {
    std::vector<const Example*> batch;
    std::vector<ScoringSpan> spans;
    for (std::size_t j = i; j < std::min(examples.size(), i + static_cast<std::size_t>(cfg.batch_size)); ++j) {
      batch.push_back(&examples[j]);
      spans.push_back(span_of(examples[j]));
    }
    const auto lm = make_lm_batch(batch);
    AssemblyHook hook(pool, cfg, lm.tokens.seq, spans, rng);
    Tape<float> tape(false);
    replica.forward(tape, lm.tokens, &hook);
    for (std::size_t l = 0; l < L; ++l)
      for (const auto& e : hook.selections[l]) sums[l][e.sharer] += e.weight;
    if (trace) {
      trace->batches.push_back(std::move(hook.tables));
      trace->selections.push_back(std::move(hook.selections));
    }
    ++batches;
  }
  const auto after = autodiff_counters();
  if (after.grad_tapes != before.grad_tapes || after.backward_calls != before.backward_calls ||
      after.optimizer_steps != before.optimizer_steps)
    throw ContractViolation("assembly performed gradient work");

  Recipe recipe;
  recipe.target = target.user_id;
  recipe.pool_hash = pool.hash();
  for (std::size_t l = 0; l < L; ++l) {
    std::vector<std::pair<std::uint32_t, double>> avg;
    for (const auto& [id, w] : sums[l]) avg.emplace_back(id, w / static_cast<double>(batches));
    std::stable_sort(avg.begin(), avg.end(), [](const auto& a, const auto& b) {
      return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    if (cfg.mode == SelectionMode::kTopkAgg || cfg.mode == SelectionMode::kTopkSample)
      if (avg.size() > static_cast<std::size_t>(cfg.k)) avg.resize(static_cast<std::size_t>(cfg.k));
    double total = 0;
    for (const auto& [id, w] : avg) total += w;
    std::vector<RecipeEntry> entries;
    for (const auto& [id, w] : avg) entries.push_back({id, static_cast<float>(w / total)});
    recipe.slots.push_back(std::move(entries));
  }
  return recipe;
}

std::string score_dump_json(const AssemblyTrace& trace) {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (std::size_t b = 0; b < trace.batches.size(); ++b) {
    nlohmann::ordered_json slots = nlohmann::ordered_json::array();
    for (std::size_t l = 0; l < trace.batches[b].size(); ++l) {
      nlohmann::ordered_json scores = nlohmann::ordered_json::array();
      for (const auto& [id, a] : trace.batches[b][l].scores) scores.push_back({{"sharer", id}, {"alpha", a}});
      nlohmann::ordered_json sel = nlohmann::ordered_json::array();
      for (const auto& e : trace.selections[b][l]) sel.push_back({{"sharer", e.sharer}, {"weight", e.weight}});
      slots.push_back({{"l", l}, {"scores", scores}, {"selected", sel}});
    }
    out.push_back({{"batch", b}, {"slots", slots}});
  }
  return out.dump(1) + "\n";
}

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) throw ShapeError("cosine: length mismatch");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += double(a[i]) * b[i];
    aa += double(a[i]) * a[i];
    bb += double(b[i]) * b[i];
  }
  return aa > 0 && bb > 0 ? ab / std::sqrt(aa * bb) : 0.0;
}

RetrievalAdapter peft_retrieval_baseline(const std::vector<float>& target, const std::vector<Candidate>& sharers,
                                         const std::vector<const Adapter*>& adapters, int k) {
  if (k < 1 || static_cast<std::size_t>(k) > sharers.size())
    throw std::invalid_argument("retrieval k must be in [1, #sharers]");
  if (adapters.size() != sharers.size()) throw std::invalid_argument("one adapter per sharer required");
  std::vector<std::pair<double, std::size_t>> ranked;
  for (std::size_t i = 0; i < sharers.size(); ++i) ranked.emplace_back(cosine(target, sharers[i].embedding), i);
  std::stable_sort(ranked.begin(), ranked.end(), [&](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : sharers[a.second].id < sharers[b.second].id;
  });
  ranked.resize(static_cast<std::size_t>(k));
  RetrievalAdapter out;
  std::vector<double> logits;
  for (const auto& [c, i] : ranked) {
    out.sharers.push_back(sharers[i].id);
    logits.push_back(c);
  }
  out.weights = softmax<double>(logits);
  const auto& first = *adapters[ranked[0].second];
  for (std::size_t l = 0; l < first.slot_count(); ++l) {
    Tensor<double> acc({first.b[l].value.shape[0], first.a[l].value.shape[1]});
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      const auto d = adapters[ranked[r].second]->delta_weight(l);
      for (std::size_t i = 0; i < acc.numel(); ++i) acc.data[i] += out.weights[r] * d.data[i];
    }
    out.deltas.push_back(acc.cast<float>());
  }
  return out;
}

}  // namespace perpcs
