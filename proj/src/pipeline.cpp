#include "perpcs/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include "perpcs/binary_io.hpp"
#include "perpcs/retrieval.hpp"

namespace perpcs {

std::vector<Example> task_examples(const UserRecord& user, bool with_retrieval) {
  std::vector<Example> out;
  for (std::size_t i = 0; i < user.items.size(); ++i) {
    const auto& item = user.items[i];
    if (item.kind != ItemKind::kTask || !item.output) continue;
    out.push_back(make_task_example(item.input, *item.output));
    if (!with_retrieval) continue;
    std::vector<HistoryItem> others;
    for (std::size_t j = 0; j < user.items.size(); ++j)
      if (j != i && user.items[j].kind == ItemKind::kTask) others.push_back(user.items[j]);
    const auto hits = lexical_retrieve(item.input, others, 1);
    if (!hits.empty()) out.push_back(make_task_example(item.input, *item.output, hits));
  }
  return out;
}

std::vector<Example> history_examples(const UserRecord& user) {
  std::vector<Example> out;
  for (const auto& item : user.items) out.push_back(make_history_example(item));
  return out;
}

const UserRecord& find_user(const std::vector<UserRecord>& users, std::uint32_t id) {
  if (id < users.size() && users[id].user_id == id) return users[id];
  for (const auto& u : users)
    if (u.user_id == id) return u;
  throw CorpusError("unknown user id " + std::to_string(id));
}

namespace {

void check_base_split(const SplitManifest& splits) {
  splits.check_disjoint();
  if (splits.base.empty()) throw CorpusError("base split is empty");
}

}  // namespace

TrainResult pretrain_base(Model& model, const std::vector<UserRecord>& users, const SplitManifest& splits,
                          const TrainConfig& cfg) {
  check_base_split(splits);
  std::vector<Example> data;
  for (auto id : splits.base) {
    const auto& u = find_user(users, id);
    for (auto& e : task_examples(u, true)) data.push_back(std::move(e));
    for (const auto& item : u.items)
      if (item.kind == ItemKind::kFreeForm) data.push_back(make_freeform_example(item.input));
  }
  auto params = model.parameters();
  return train_lm(model, data, cfg, params);
}

BaseAdaptation adapt_base(Model& model, const std::vector<UserRecord>& users, const SplitManifest& splits,
                          const TrainConfig& cfg) {
  check_base_split(splits);
  std::vector<Example> train, held_out;
  for (auto id : splits.base) {
    const auto& u = find_user(users, id);
    for (auto& e : task_examples(u, true)) train.push_back(std::move(e));
    for (const auto& q : u.queries) held_out.push_back(make_task_example(q.input, q.target));
  }
  BaseAdaptation out;
  out.loss_before = eval_loss(model, held_out);
  auto adapter = Adapter::init(model.slots(), model.config().rank, derive_seed(cfg.seed, "base-adapter"));
  LoraAttachment<float> att(adapter);
  out.train = train_lm(model, train, cfg, adapter.parameters(), &att);
  model.merge_adapter(adapter);
  out.loss_after = eval_loss(model, held_out);
  return out;
}

ItemEncoder model_encoder(const Model& model, int batch_size) {
  auto replica = std::make_shared<Model>(model);
  return [replica, batch_size](const std::vector<HistoryItem>& items) {
    std::vector<Example> examples;
    for (const auto& it : items) examples.push_back(make_history_example(it));
    const auto d = static_cast<std::size_t>(replica->config().d_model);
    std::vector<std::vector<float>> out;
    for (std::size_t i = 0; i < examples.size(); i += static_cast<std::size_t>(batch_size)) {
      std::vector<const Example*> batch;
      for (std::size_t j = i; j < std::min(examples.size(), i + static_cast<std::size_t>(batch_size)); ++j)
        batch.push_back(&examples[j]);
      const auto lm = make_lm_batch(batch);
      Tape<float> tape(false);
      Var hidden;
      replica->forward(tape, lm.tokens, nullptr, nullptr, &hidden);
      const auto& h = tape.value(hidden);
      for (std::size_t b = 0; b < batch.size(); ++b) {
        std::vector<double> acc(d, 0.0);
        const std::size_t len = lm.tokens.lengths[b];
        for (std::size_t t = 0; t < len; ++t)
          for (std::size_t k = 0; k < d; ++k) acc[k] += h(b * lm.tokens.seq + t, k);
        std::vector<float> e(d);
        for (std::size_t k = 0; k < d; ++k) e[k] = static_cast<float>(acc[k] / static_cast<double>(len));
        out.push_back(std::move(e));
      }
    }
    return out;
  };
}

std::vector<float> embed_user(const UserRecord& user, const ItemEncoder& encoder) {
  if (user.items.empty()) throw CorpusError("user " + std::to_string(user.user_id) + " has an empty history");
  const auto items = encoder(user.items);
  std::vector<double> acc(items.at(0).size(), 0.0);
  for (const auto& e : items) {
    if (e.size() != acc.size()) throw ShapeError("item embeddings differ in length");
    for (std::size_t k = 0; k < e.size(); ++k) acc[k] += e[k];
  }
  std::vector<float> out(acc.size());
  for (std::size_t k = 0; k < acc.size(); ++k) out[k] = static_cast<float>(acc[k] / static_cast<double>(items.size()));
  return out;
}

std::string profile_text(const UserRecord& user, std::size_t words) {
  std::map<std::string, int> freq;
  for (const auto& item : user.items)
    if (item.output)
      for (const auto& w : split_words(*item.output)) ++freq[w];
  std::vector<std::pair<std::string, int>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::string out;
  for (std::size_t i = 0; i < std::min(words, ranked.size()); ++i) out += (out.empty() ? "" : " ") + ranked[i].first;
  return out.empty() ? "<unk>" : out;
}

std::vector<float> embed_profile(const UserRecord& user, const ItemEncoder& encoder) {
  return encoder({HistoryItem{profile_text(user), std::nullopt, ItemKind::kFreeForm}}).at(0);
}

namespace {

double sq_dist(const std::vector<float>& p, const std::vector<double>& c) {
  double s = 0;
  for (std::size_t k = 0; k < p.size(); ++k) s += (p[k] - c[k]) * (p[k] - c[k]);
  return s;
}

std::vector<double> to_double(const std::vector<float>& p) { return {p.begin(), p.end()}; }

}  // namespace

KMeansResult kmeans(const std::vector<std::vector<float>>& points, int k, std::uint64_t seed, int max_iter) {
  const auto n = points.size();
  if (k < 1 || static_cast<std::size_t>(k) > n) throw std::invalid_argument("k-means: k must be in [1, #points]");
  const auto ku = static_cast<std::size_t>(k);
  Rng rng(derive_seed(seed, "kmeans"));
  KMeansResult res;

  res.centroids.push_back(to_double(points[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(n) - 1))]));
  std::vector<double> d2(n);
  while (res.centroids.size() < ku) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::numeric_limits<double>::max();
      for (const auto& c : res.centroids) d2[i] = std::min(d2[i], sq_dist(points[i], c));
      total += d2[i];
    }
    std::size_t pick;
    if (total > 0) {
      pick = rng.categorical(d2);
    } else {
      // All remaining points coincide with a centroid; take the first unused index.
      pick = res.centroids.size();
    }
    res.centroids.push_back(to_double(points[pick]));
  }

  res.assignments.assign(n, -1);
  for (res.iterations = 0; res.iterations < max_iter; ++res.iterations) {
    std::vector<int> next(n);
    double objective = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::max();
      for (std::size_t c = 0; c < ku; ++c) {
        const double d = sq_dist(points[i], res.centroids[c]);
        if (d < best) {
          best = d;
          next[i] = static_cast<int>(c);
        }
      }
      objective += best;
    }
    // Repair empty clusters.
    for (std::size_t c = 0; c < ku; ++c) {
      if (std::count(next.begin(), next.end(), static_cast<int>(c)) > 0) continue;
      std::vector<int> sizes(ku, 0);
      for (int a : next) ++sizes[static_cast<std::size_t>(a)];
      const int largest = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
      std::size_t far = n;
      double far_d = -1;
      for (std::size_t i = 0; i < n; ++i) {
        if (next[i] != largest) continue;
        const double d = sq_dist(points[i], res.centroids[static_cast<std::size_t>(largest)]);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      next[far] = static_cast<int>(c);
      objective -= far_d;
    }
    res.objective.push_back(objective);
    const bool fixpoint = next == res.assignments;
    res.assignments = std::move(next);
    for (std::size_t c = 0; c < ku; ++c) {
      std::vector<double> sum(points[0].size(), 0.0);
      int count = 0;
      for (std::size_t i = 0; i < n; ++i)
        if (res.assignments[i] == static_cast<int>(c)) {
          for (std::size_t d = 0; d < sum.size(); ++d) sum[d] += points[i][d];
          ++count;
        }
      for (auto& v : sum) v /= count;
      res.centroids[c] = std::move(sum);
    }
    if (fixpoint) {
      ++res.iterations;
      break;
    }
  }
  return res;
}

std::string to_string(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::kHistoryCluster: return "history-cluster";
    case SelectionStrategy::kProfileCluster: return "profile-cluster";
    case SelectionStrategy::kMostActive: return "most-active";
  }
  throw std::logic_error("unreachable");
}

SelectionStrategy selection_strategy_from_string(const std::string& s) {
  for (auto v : {SelectionStrategy::kHistoryCluster, SelectionStrategy::kProfileCluster, SelectionStrategy::kMostActive})
    if (to_string(v) == s) return v;
  throw std::invalid_argument("unknown selection strategy '" + s + "'");
}

namespace {

bool more_active(const Candidate& a, const Candidate& b) {
  return a.history_size != b.history_size ? a.history_size > b.history_size : a.id < b.id;
}

}  // namespace

ClusterResult select_sharers(const std::vector<Candidate>& candidates, int k, SelectionStrategy strategy,
                             std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("sharer count must be positive");
  if (static_cast<std::size_t>(k) > candidates.size())
    throw std::invalid_argument("sharer count " + std::to_string(k) + " exceeds " + std::to_string(candidates.size()) +
                                " candidates");
  ClusterResult out;
  out.k = k;
  if (strategy == SelectionStrategy::kMostActive) {
    auto sorted = candidates;
    std::sort(sorted.begin(), sorted.end(), more_active);
    for (int i = 0; i < k; ++i) out.sharers.push_back(sorted[static_cast<std::size_t>(i)].id);
  } else {
    std::vector<std::vector<float>> points;
    for (const auto& c : candidates) points.push_back(c.embedding);
    auto km = kmeans(points, k, seed);
    out.assignments = km.assignments;
    out.centroids = km.centroids;
    for (int c = 0; c < k; ++c) {
      const Candidate* best = nullptr;
      for (std::size_t i = 0; i < candidates.size(); ++i)
        if (km.assignments[i] == c && (!best || more_active(candidates[i], *best))) best = &candidates[i];
      out.sharers.push_back(best->id);
    }
  }
  std::sort(out.sharers.begin(), out.sharers.end());
  return out;
}

Adapter train_sharer_adapter(const Model& base, const UserRecord& user, const TrainConfig& cfg) {
  const auto data = history_examples(user);
  if (cfg.total_steps(data.size()) == 0) return Adapter::zeros(base.slots(), base.config().rank);
  Model replica = base;
  auto adapter = Adapter::init(replica.slots(), replica.config().rank, derive_seed(cfg.seed, "sharer-adapter"));
  LoraAttachment<float> att(adapter);
  train_lm(replica, data, cfg, adapter.parameters(), &att);
  return adapter;
}

std::string adapter_hash(const Adapter& adapter) {
  ByteWriter w;
  for (std::size_t l = 0; l < adapter.slot_count(); ++l) {
    w.f32s(adapter.a[l].value.data);
    w.f32s(adapter.b[l].value.data);
  }
  return sha256_hex(w.data());
}

void save_gates(const std::vector<std::vector<float>>& gates, const std::string& model_hash,
                const std::filesystem::path& path) {
  ByteWriter w;
  w.magic("PPCG");
  w.u32(1);
  w.u64(0);
  w.bytes(digest_from_hex(model_hash));
  w.u32(static_cast<std::uint32_t>(gates.size()));
  for (const auto& g : gates) {
    w.u32(static_cast<std::uint32_t>(g.size()));
    w.f32s(g);
  }
  const std::uint64_t total = w.data().size() + 32;
  std::memcpy(w.data().data() + 8, &total, sizeof total);
  w.seal();
  write_file_bytes(path, w.data());
}

std::vector<std::vector<float>> load_gates(const std::filesystem::path& path, std::string* model_hash) {
  const auto bytes = read_file_bytes(path);
  {
    ByteReader h(bytes);
    h.expect_magic("PPCG");
    if (h.u32() != 1) throw FormatError("gates: unsupported version");
    if (h.u64() != bytes.size()) throw FormatError("gates: length mismatch in " + path.string());
  }
  ByteReader r(verify_sealed(bytes, "gates"));
  r.expect_magic("PPCG");
  r.u32();
  r.u64();
  const auto hash = to_hex(r.digest());
  if (model_hash) *model_hash = hash;
  std::vector<std::vector<float>> out(r.u32());
  for (auto& g : out) g = r.f32s(r.u32());
  return out;
}

GateTraining train_gates(const Model& base, const Adapter& pieces, const UserRecord& user, const TrainConfig& cfg) {
  Model replica = base;
  Adapter frozen = pieces;
  const auto base_hash = replica.content_hash();
  const auto piece_hash = adapter_hash(frozen);
  std::vector<Parameter<float>> gates;
  for (const auto& s : replica.slots())
    gates.emplace_back("gate." + std::to_string(s.index), Tensor<float>({static_cast<std::size_t>(s.in_dim)}));
  GatedPiecesAttachment<float> att(frozen, gates);
  std::vector<Parameter<float>*> trainable;
  for (auto& g : gates) trainable.push_back(&g);
  GateTraining out;
  out.train = train_lm(replica, history_examples(user), cfg, trainable, &att);
  if (replica.content_hash() != base_hash) throw ContractViolation("gate training modified base weights");
  if (adapter_hash(frozen) != piece_hash) throw ContractViolation("gate training modified piece tensors");
  for (auto& g : gates) out.gates.push_back(g.value.data);
  return out;
}

SharerContribution make_contribution(const Model& base, std::uint32_t sharer, std::uint32_t history_size,
                                     std::vector<float> embedding, const Adapter& adapter,
                                     const std::vector<std::vector<float>>& gates) {
  SharerContribution c;
  c.sharer = sharer;
  c.model_hash = base.content_hash();
  c.history_size = history_size;
  c.embedding = std::move(embedding);
  c.pieces = decompose(adapter, sharer, base.slot_count());
  if (gates.size() != base.slot_count()) throw PoolError("gate count does not match slot count");
  for (std::size_t l = 0; l < gates.size(); ++l) c.gates.push_back(GateVector::make(sharer, static_cast<int>(l), gates[l]));
  return c;
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const auto w = static_cast<std::size_t>(std::max(1, workers));
  if (w == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::mutex mu;
  std::exception_ptr failure;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (failure || next >= n) return;
        i = next++;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < std::min(w, n); ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace perpcs
