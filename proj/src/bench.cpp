#include "perpcs/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <mutex>
#include <optional>
#include <set>
#include <ostream>
#include <sstream>

#include "perpcs/binary_io.hpp"
#include "perpcs/rng.hpp"

namespace perpcs {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;
using clk = std::chrono::steady_clock;

namespace {

double seconds_since(clk::time_point t0) { return std::chrono::duration<double>(clk::now() - t0).count(); }

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

ojson embedding_json(const std::vector<float>& v) {
  ojson a = ojson::array();
  for (float x : v) a.push_back(x);
  return a;
}

std::vector<float> embedding_from(const nlohmann::json& j) {
  std::vector<float> v;
  for (const auto& x : j) v.push_back(x.get<float>());
  return v;
}

std::string predictions_jsonl(const std::map<std::string, std::vector<QueryPrediction>>& by_method,
                              const std::vector<std::string>& order) {
  std::string out;
  for (const auto& method : order) {
    for (const auto& p : by_method.at(method)) {
      ojson j{{"method", method}, {"user", p.user}, {"kind", to_string(p.kind)}, {"input", p.input},
              {"target", p.target}, {"prediction", p.prediction}};
      out += j.dump() + "\n";
    }
  }
  return out;
}

std::map<std::string, std::vector<QueryPrediction>> predictions_from_jsonl(const std::string& text,
                                                                           std::vector<std::string>* order) {
  std::map<std::string, std::vector<QueryPrediction>> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    const std::string method = j.at("method");
    if (!out.count(method) && order) order->push_back(method);
    out[method].push_back({j.at("user").get<std::uint32_t>(), task_kind_from_string(j.at("kind")), j.at("input"),
                           j.at("target"), j.at("prediction")});
  }
  return out;
}

void append_rows(std::vector<ReportRow>& rows, const std::string& sweep, const std::string& point,
                 const std::string& method, const std::vector<QueryPrediction>& preds) {
  if (preds.empty()) return;
  for (auto& r : summarize(method, preds)) rows.push_back({sweep, point, method, r});
}

// History-size bucket labels from the upper edges, e.g. {25, 35} gives
// "0-25", "26-35", "36+".
std::vector<std::string> bucket_labels(const std::vector<int>& edges) {
  std::vector<std::string> out;
  int lo = 0;
  for (int e : edges) {
    out.push_back(std::to_string(lo) + "-" + std::to_string(e));
    lo = e + 1;
  }
  out.push_back(std::to_string(lo) + "+");
  return out;
}

std::size_t bucket_of(std::size_t history, const std::vector<int>& edges) {
  std::size_t b = 0;
  while (b < edges.size() && history > static_cast<std::size_t>(edges[b])) ++b;
  return b;
}

}  // namespace

// ---------------------------------------------------------------------------
// Reports

std::string report_csv(const std::vector<ReportRow>& rows) {
  std::string out = std::string(kReportHeader) + "\n";
  for (const auto& r : rows) {
    const auto& m = r.metrics;
    out += r.sweep + "," + r.point + "," + r.method + "," + to_string(m.kind) + "," + std::to_string(m.queries) + "," +
           fmt6(m.accuracy) + "," + fmt6(m.macro_f1) + "," + fmt6(m.mae) + "," + fmt6(m.rmse) + "," +
           fmt6(m.rouge_1) + "," + fmt6(m.rouge_l) + "\n";
  }
  return out;
}

std::vector<ReportRow> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || split_csv_line(line) != split_csv_line(kReportHeader))
    throw FormatError("report CSV: unexpected header");
  std::vector<ReportRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 11) throw FormatError("report CSV: expected 11 fields in '" + line + "'");
    ReportRow r{f[0], f[1], f[2], {}};
    r.metrics.method = f[2];
    r.metrics.kind = task_kind_from_string(f[3]);
    r.metrics.queries = std::stoul(f[4]);
    r.metrics.accuracy = std::stod(f[5]);
    r.metrics.macro_f1 = std::stod(f[6]);
    r.metrics.mae = std::stod(f[7]);
    r.metrics.rmse = std::stod(f[8]);
    r.metrics.rouge_1 = std::stod(f[9]);
    r.metrics.rouge_l = std::stod(f[10]);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string EfficiencyReport::to_json() const {
  ojson per_user = ojson::array();
  for (std::size_t i = 0; i < users.size(); ++i)
    per_user.push_back({{"user", users[i]}, {"train_seconds", train_seconds[i]}, {"assemble_seconds", assemble_seconds[i]}});
  ojson j{{"per_user", per_user},
          {"mean_train_seconds", mean_train_seconds},
          {"mean_assemble_seconds", mean_assemble_seconds},
          {"time_ratio", time_ratio},
          {"assembly_optimizer_steps", assembly_optimizer_steps},
          {"assembly_grad_tapes", assembly_grad_tapes},
          {"recipe_bytes", recipe_bytes},
          {"recipe_closed_form_bytes", recipe_closed_form_bytes},
          {"adapter_bytes", adapter_bytes},
          {"adapter_closed_form_bytes", adapter_closed_form_bytes},
          {"recipe_payload_bytes", recipe_payload_bytes},
          {"adapter_payload_bytes", adapter_payload_bytes},
          {"storage_ratio", storage_ratio},
          {"storage_ratio_with_headers", storage_ratio_with_headers},
          {"published_storage_ratio", published_storage_ratio}};
  return j.dump(1) + "\n";
}

EfficiencyReport EfficiencyReport::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  EfficiencyReport r;
  for (const auto& u : j.at("per_user")) {
    r.users.push_back(u.at("user"));
    r.train_seconds.push_back(u.at("train_seconds"));
    r.assemble_seconds.push_back(u.at("assemble_seconds"));
  }
  r.mean_train_seconds = j.at("mean_train_seconds");
  r.mean_assemble_seconds = j.at("mean_assemble_seconds");
  r.time_ratio = j.at("time_ratio");
  r.assembly_optimizer_steps = j.at("assembly_optimizer_steps");
  r.assembly_grad_tapes = j.at("assembly_grad_tapes");
  r.recipe_bytes = j.at("recipe_bytes");
  r.recipe_closed_form_bytes = j.at("recipe_closed_form_bytes");
  r.adapter_bytes = j.at("adapter_bytes");
  r.adapter_closed_form_bytes = j.at("adapter_closed_form_bytes");
  r.recipe_payload_bytes = j.at("recipe_payload_bytes");
  r.adapter_payload_bytes = j.at("adapter_payload_bytes");
  r.storage_ratio = j.at("storage_ratio");
  r.storage_ratio_with_headers = j.at("storage_ratio_with_headers");
  r.published_storage_ratio = j.at("published_storage_ratio");
  return r;
}

// ---------------------------------------------------------------------------
// Runner

struct Runner::State {
  std::optional<std::vector<UserRecord>> users;
  std::optional<SplitManifest> splits;
  std::optional<Model> base;
  std::optional<std::vector<Candidate>> history_candidates;
  std::optional<std::vector<Candidate>> profile_candidates;
  std::map<std::uint32_t, Adapter> adapters;
  std::map<std::uint32_t, std::vector<std::vector<float>>> gates;
  // Artifacts written by this runner count as fresh even when forced.
  std::set<std::string> produced;
};

Runner::Runner(RunConfig cfg, bool force, std::ostream& log)
    : cfg_(std::move(cfg)), force_(force), log_(log), root_(cfg_.out_dir), manifest_(root_),
      state_(std::make_unique<State>()) {
  cfg_.validate();
  fs::create_directories(root_);
}

Runner::~Runner() = default;

std::string Runner::key(const std::string& stage, const ojson& params, const std::vector<std::string>& inputs) const {
  ojson j{{"stage", stage}, {"params", params}, {"inputs", inputs}};
  return sha256_hex(j.dump());
}

bool Runner::fresh(const std::string& name, const std::string& k) const {
  return (!force_ || state_->produced.count(name) > 0) && manifest_.fresh(name, k);
}

void Runner::record(const std::string& name, const std::string& relpath, const std::string& kind,
                    const std::string& command, const std::string& k) {
  manifest_.record(name, relpath, kind, command, k);
  state_->produced.insert(name);
}

std::string Runner::hash_of(const std::string& name) const {
  manifest_.verify(name);
  return manifest_.find(name)->sha256;
}

const std::vector<UserRecord>& Runner::users() {
  if (!state_->users) state_->users = load_corpus(manifest_.verify("corpus"));
  return *state_->users;
}

const SplitManifest& Runner::splits() {
  if (!state_->splits) state_->splits = splits_from_json(read_file_text(manifest_.verify("splits")));
  return *state_->splits;
}

const Model& Runner::base() {
  if (!state_->base) state_->base.emplace(Model::load(manifest_.verify("base")));
  return *state_->base;
}

const std::vector<Candidate>& Runner::candidates(SelectionStrategy s) {
  if (!state_->history_candidates) {
    const auto j = nlohmann::json::parse(read_file_text(manifest_.verify("candidates")));
    std::vector<Candidate> hist, prof;
    for (const auto& c : j.at("candidates")) {
      hist.push_back({c.at("id"), c.at("history_size"), embedding_from(c.at("embedding"))});
      prof.push_back({c.at("id"), c.at("history_size"), embedding_from(c.at("profile_embedding"))});
    }
    state_->history_candidates = std::move(hist);
    state_->profile_candidates = std::move(prof);
  }
  return s == SelectionStrategy::kProfileCluster ? *state_->profile_candidates : *state_->history_candidates;
}

std::vector<std::uint32_t> Runner::selection() {
  const auto j = nlohmann::json::parse(read_file_text(manifest_.verify("selection")));
  return j.at("sharers").get<std::vector<std::uint32_t>>();
}

std::string Runner::adapter_key(std::uint32_t id, const std::string& tag) {
  const auto cj = cfg_.to_json();
  return key("adapter", {{"tag", tag}, {"user", id}, {"sharer_train", cj["sharer_train"]}, {"seed", cfg_.seed}},
             {hash_of("corpus"), hash_of("base")});
}

std::string Runner::gates_key(std::uint32_t id) {
  const auto cj = cfg_.to_json();
  return key("gates", {{"user", id}, {"gate_train", cj["gate_train"]}, {"seed", cfg_.seed}},
             {hash_of("adapter/" + std::to_string(id)), hash_of("base")});
}

void Runner::ensure_sharers(const std::vector<std::uint32_t>& ids, const std::string& command) {
  const Model& m = base();
  const auto& us = users();
  const std::string model_hash = m.content_hash();
  struct Job {
    std::uint32_t id;
    std::string adapter_key;
    bool need_adapter;
  };
  std::vector<Job> jobs;
  for (auto id : ids) {
    const auto k = adapter_key(id, "sharer");
    const bool need = !fresh("adapter/" + std::to_string(id), k);
    jobs.push_back({id, k, need});
  }
  fs::create_directories(root_ / "sharers");
  fs::create_directories(root_ / "gates");

  std::size_t trained = 0;
  for (const auto& j : jobs) trained += j.need_adapter;
  if (trained) log_ << "[" << command << "] training " << trained << " sharer adapters\n";
  std::mutex mu;
  parallel_for(jobs.size(), cfg_.workers, [&](std::size_t i) {
    if (!jobs[i].need_adapter) return;
    const auto id = jobs[i].id;
    auto a = train_sharer_adapter(m, find_user(us, id), cfg_.sharer_train);
    save_adapter(a, model_hash, root_ / "sharers" / ("adapter_" + std::to_string(id) + ".bin"));
    std::lock_guard<std::mutex> lock(mu);
    state_->adapters.erase(id);
  });
  for (const auto& j : jobs)
    if (j.need_adapter)
      record("adapter/" + std::to_string(j.id), "sharers/adapter_" + std::to_string(j.id) + ".bin", "adapter", command,
             j.adapter_key);
  manifest_.save();

  std::vector<std::pair<std::uint32_t, std::string>> gate_jobs;
  for (auto id : ids) {
    const auto k = gates_key(id);
    if (!fresh("gates/" + std::to_string(id), k)) gate_jobs.emplace_back(id, k);
  }
  if (!gate_jobs.empty()) log_ << "[" << command << "] training " << gate_jobs.size() << " gate sets\n";
  std::vector<Adapter> loaded;
  for (const auto& [id, k] : gate_jobs) loaded.push_back(load_sharer_adapter(id, "sharers"));
  parallel_for(gate_jobs.size(), cfg_.workers, [&](std::size_t i) {
    const auto id = gate_jobs[i].first;
    auto g = perpcs::train_gates(m, loaded[i], find_user(us, id), cfg_.gate_train);
    save_gates(g.gates, model_hash, root_ / "gates" / ("gates_" + std::to_string(id) + ".bin"));
    std::lock_guard<std::mutex> lock(mu);
    state_->gates.erase(id);
  });
  for (const auto& [id, k] : gate_jobs)
    record("gates/" + std::to_string(id), "gates/gates_" + std::to_string(id) + ".bin", "gates", command, k);
  manifest_.save();
}

void Runner::ensure_oppu(const std::vector<std::uint32_t>& ids) {
  const Model& m = base();
  const auto& us = users();
  const std::string model_hash = m.content_hash();
  fs::create_directories(root_ / "oppu");
  std::vector<std::pair<std::uint32_t, std::string>> jobs;
  for (auto id : ids) {
    const auto k = adapter_key(id, "oppu");
    if (!fresh("oppu/" + std::to_string(id), k)) jobs.emplace_back(id, k);
  }
  if (!jobs.empty()) log_ << "[evaluate] training " << jobs.size() << " per-target oracle adapters\n";
  parallel_for(jobs.size(), cfg_.workers, [&](std::size_t i) {
    const auto id = jobs[i].first;
    auto a = train_sharer_adapter(m, find_user(us, id), cfg_.sharer_train);
    save_adapter(a, model_hash, root_ / "oppu" / ("adapter_" + std::to_string(id) + ".bin"));
  });
  for (const auto& [id, k] : jobs)
    record("oppu/" + std::to_string(id), "oppu/adapter_" + std::to_string(id) + ".bin", "adapter", "evaluate", k);
  manifest_.save();
}

Adapter Runner::load_sharer_adapter(std::uint32_t id, const std::string& prefix) {
  const std::string name = (prefix == "oppu" ? "oppu/" : "adapter/") + std::to_string(id);
  if (prefix != "oppu") {
    auto it = state_->adapters.find(id);
    if (it != state_->adapters.end()) return it->second;
  }
  std::string model_hash;
  auto a = load_adapter(manifest_.verify(name), &model_hash);
  if (model_hash != base().content_hash())
    throw HashMismatchError("adapter " + name + " was trained on a different base model");
  if (prefix != "oppu") state_->adapters.emplace(id, a);
  return a;
}

PiecePool Runner::pool_for(const std::vector<std::uint32_t>& ids, double ratio) {
  const Model& m = base();
  const auto& us = users();
  const auto& cands = candidates(SelectionStrategy::kHistoryCluster);
  std::vector<SharerContribution> contribs;
  std::vector<ShareMask> masks;
  for (auto id : ids) {
    auto git = state_->gates.find(id);
    if (git == state_->gates.end()) {
      std::string model_hash;
      auto g = load_gates(manifest_.verify("gates/" + std::to_string(id)), &model_hash);
      if (model_hash != m.content_hash()) throw HashMismatchError("gates of sharer " + std::to_string(id) +
                                                                  " were trained on a different base model");
      git = state_->gates.emplace(id, std::move(g)).first;
    }
    std::vector<float> emb;
    for (const auto& c : cands)
      if (c.id == id) emb = c.embedding;
    if (emb.empty()) throw MissingPrerequisite("no embedding for sharer " + std::to_string(id));
    contribs.push_back(make_contribution(m, id, static_cast<std::uint32_t>(find_user(us, id).history_size()), emb,
                                         load_sharer_adapter(id, "sharers"), git->second));
    masks.push_back(ShareMask::draw(id, ratio, m.slot_count(), derive_seed(cfg_.seed, "share-mask")));
  }
  return perpcs::build_pool(contribs, m.slots(), cfg_.model.rank, &masks);
}

std::map<std::uint32_t, Recipe> Runner::assemble_all(const PiecePool& pool, const AssemblyConfig& acfg) {
  const Model& m = base();
  const auto& us = users();
  const auto& targets = splits().targets;
  std::vector<Recipe> out(targets.size());
  parallel_for(targets.size(), cfg_.workers,
               [&](std::size_t i) { out[i] = perpcs::assemble(m, pool, find_user(us, targets[i]), acfg); });
  std::map<std::uint32_t, Recipe> recipes;
  for (std::size_t i = 0; i < targets.size(); ++i) recipes.emplace(targets[i], std::move(out[i]));
  return recipes;
}

std::vector<QueryPrediction> Runner::predict_targets(const std::map<std::uint32_t, Recipe>* recipes,
                                                     const PiecePool* pool, std::size_t m,
                                                     const std::vector<std::uint32_t>& targets) {
  const Model& b = base();
  const auto& us = users();
  std::vector<std::vector<QueryPrediction>> per(targets.size());
  parallel_for(targets.size(), cfg_.workers, [&](std::size_t i) {
    Model replica = b;
    const auto& u = find_user(us, targets[i]);
    if (recipes) {
      WeightedPiecesAttachment att(recipes->at(targets[i]), *pool);
      per[i] = predict_user(replica, &att, u, cfg_.task, m);
    } else {
      per[i] = predict_user(replica, nullptr, u, cfg_.task, m);
    }
  });
  std::vector<QueryPrediction> all;
  for (auto& p : per) all.insert(all.end(), p.begin(), p.end());
  return all;
}

void Runner::write_report(const std::string& name, const std::string& relpath, const std::vector<ReportRow>& rows,
                          const std::string& command, const std::string& k) {
  fs::create_directories((root_ / relpath).parent_path());
  write_file_text(root_ / relpath, report_csv(rows));
  record(name, relpath, "report", command, k);
}

// ---------------------------------------------------------------------------
// Stages

void Runner::gen_data() {
  const auto cj = cfg_.to_json();
  const auto k = key("gen-data", {{"seed", cfg_.seed}, {"task", cj["task"]}, {"splits", cj["splits"]}}, {});
  if (fresh("corpus", k) && fresh("splits", k) && fresh("prototypes", k)) {
    log_ << "[gen-data] up to date\n";
    return;
  }
  const auto t0 = clk::now();
  auto corpus = generate_corpus(cfg_.task, cfg_.splits, derive_seed(cfg_.seed, "corpus"));
  fs::create_directories(root_ / "data");
  save_corpus(corpus.users, root_ / "data" / "corpus.jsonl");
  write_file_text(root_ / "data" / "splits.json", splits_to_json(corpus.splits));
  ojson protos = ojson::array();
  for (std::size_t i = 0; i < corpus.prototypes.size(); ++i) {
    const auto& p = corpus.prototypes[i];
    protos.push_back({{"prototype", i}, {"label", p.label}, {"rating", p.rating}, {"style", p.style},
                      {"sharer_candidates", corpus.candidate_coverage[i]}});
  }
  ojson users_proto = ojson::array();
  for (const auto& u : corpus.users) users_proto.push_back({{"user", u.user_id}, {"prototype", u.prototype}});
  write_file_text(root_ / "data" / "prototypes.json",
                  ojson{{"prototypes", protos}, {"users", users_proto}}.dump(1) + "\n");
  record("corpus", "data/corpus.jsonl", "corpus", "gen-data", k);
  record("splits", "data/splits.json", "splits", "gen-data", k);
  record("prototypes", "data/prototypes.json", "prototypes", "gen-data", k);
  manifest_.save();
  state_ = std::make_unique<State>();
  state_->users = std::move(corpus.users);
  state_->splits = corpus.splits;
  log_ << "[gen-data] " << state_->users->size() << " users in " << fmt6(seconds_since(t0)) << " s\n";
}

void Runner::adapt_base() {
  const auto cj = cfg_.to_json();
  const auto k = key("adapt-base",
                     {{"seed", cfg_.seed}, {"model", cj["model"]}, {"pretrain", cj["pretrain"]},
                      {"base_adapt", cj["base_adapt"]}},
                     {hash_of("corpus"), hash_of("splits")});
  if (fresh("base", k) && fresh("base_log", k)) {
    log_ << "[adapt-base] up to date\n";
    return;
  }
  const auto t0 = clk::now();
  Model m(cfg_.model);
  auto pre = pretrain_base(m, users(), splits(), cfg_.pretrain);
  log_ << "[adapt-base] pretrained " << pre.steps << " steps, loss " << fmt6(pre.losses.front()) << " -> "
       << fmt6(pre.losses.back()) << "\n";
  auto ad = perpcs::adapt_base(m, users(), splits(), cfg_.base_adapt);
  log_ << "[adapt-base] adapted " << ad.train.steps << " steps, held-out loss " << fmt6(ad.loss_before) << " -> "
       << fmt6(ad.loss_after) << "\n";
  fs::create_directories(root_ / "models");
  m.save(root_ / "models" / "base.ckpt");
  ojson log{{"model_hash", m.content_hash()},
            {"pretrain", {{"steps", pre.steps}, {"first_loss", pre.losses.front()}, {"last_loss", pre.losses.back()}}},
            {"base_adapt",
             {{"steps", ad.train.steps},
              {"heldout_loss_before", ad.loss_before},
              {"heldout_loss_after", ad.loss_after}}}};
  write_file_text(root_ / "models" / "base_log.json", log.dump(1) + "\n");
  record("base", "models/base.ckpt", "model", "adapt-base", k);
  record("base_log", "models/base_log.json", "log", "adapt-base", k);
  manifest_.save();
  state_->base.emplace(std::move(m));
  state_->history_candidates.reset();
  state_->profile_candidates.reset();
  state_->adapters.clear();
  state_->gates.clear();
  log_ << "[adapt-base] done in " << fmt6(seconds_since(t0)) << " s\n";
}

void Runner::train_sharers() {
  const auto cj = cfg_.to_json();
  const auto t0 = clk::now();
  const auto ck = key("candidates", {}, {hash_of("corpus"), hash_of("splits"), hash_of("base")});
  if (!fresh("candidates", ck)) {
    const auto enc = model_encoder(base());
    const auto& us = users();
    const auto& ids = splits().sharer_candidates;
    std::vector<std::vector<float>> hist(ids.size()), prof(ids.size());
    parallel_for(ids.size(), cfg_.workers, [&](std::size_t i) {
      const auto& u = find_user(us, ids[i]);
      hist[i] = embed_user(u, enc);
      prof[i] = embed_profile(u, enc);
    });
    ojson arr = ojson::array();
    for (std::size_t i = 0; i < ids.size(); ++i)
      arr.push_back({{"id", ids[i]},
                     {"history_size", find_user(us, ids[i]).history_size()},
                     {"embedding", embedding_json(hist[i])},
                     {"profile_embedding", embedding_json(prof[i])}});
    fs::create_directories(root_ / "sharers");
    write_file_text(root_ / "sharers" / "candidates.json", ojson{{"candidates", arr}}.dump() + "\n");
    record("candidates", "sharers/candidates.json", "embeddings", "train-sharers", ck);
    manifest_.save();
    state_->history_candidates.reset();
    state_->profile_candidates.reset();
  }

  const auto sk = key("selection", {{"seed", cfg_.seed}, {"selection", cj["selection"]}}, {hash_of("candidates")});
  if (!fresh("selection", sk)) {
    auto sel = select_sharers(candidates(cfg_.strategy), cfg_.sharers, cfg_.strategy,
                              derive_seed(cfg_.seed, "selection"));
    ojson j{{"strategy", to_string(cfg_.strategy)}, {"k", sel.k}, {"sharers", sel.sharers},
            {"assignments", sel.assignments}};
    write_file_text(root_ / "sharers" / "selection.json", j.dump(1) + "\n");
    record("selection", "sharers/selection.json", "selection", "train-sharers", sk);
    manifest_.save();
  }
  const auto ids = selection();
  ensure_sharers(ids, "train-sharers");
  log_ << "[train-sharers] " << ids.size() << " sharers ready in " << fmt6(seconds_since(t0)) << " s\n";
}

void Runner::train_gates() {
  const auto t0 = clk::now();
  const auto ids = selection();
  for (auto id : ids) manifest_.verify("adapter/" + std::to_string(id));
  ensure_sharers(ids, "train-gates");
  log_ << "[train-gates] " << ids.size() << " gate sets ready in " << fmt6(seconds_since(t0)) << " s\n";
}

void Runner::build_pool() {
  const auto cj = cfg_.to_json();
  const auto ids = selection();
  std::vector<std::string> inputs{hash_of("selection"), hash_of("candidates"), hash_of("base"), hash_of("corpus")};
  for (auto id : ids) {
    inputs.push_back(hash_of("adapter/" + std::to_string(id)));
    inputs.push_back(hash_of("gates/" + std::to_string(id)));
  }
  const auto k = key("build-pool", {{"seed", cfg_.seed}, {"pool", cj["pool"]}}, inputs);
  if (fresh("pool", k)) {
    log_ << "[build-pool] up to date\n";
    return;
  }
  auto pool = pool_for(ids, cfg_.share_ratio);
  fs::create_directories(root_ / "pool");
  save_pool(pool, root_ / "pool" / "pool.bin");
  record("pool", "pool/pool.bin", "pool", "build-pool", k);
  manifest_.save();
  log_ << "[build-pool] " << pool.sharers().size() << " sharers, pool " << pool.hash().substr(0, 16) << "\n";
}

void Runner::assemble() {
  const auto cj = cfg_.to_json();
  const auto k = key("assemble", {{"seed", cfg_.seed}, {"assembly", cj["assembly"]}},
                     {hash_of("pool"), hash_of("base"), hash_of("corpus"), hash_of("splits")});
  const auto& targets = splits().targets;
  bool all_fresh = true;
  for (auto id : targets) {
    const auto s = std::to_string(id);
    all_fresh = all_fresh && fresh("recipe/" + s, k) && fresh("recipe_bin/" + s, k) && fresh("scores/" + s, k);
  }
  if (all_fresh) {
    log_ << "[assemble] up to date\n";
    return;
  }
  const Model& m = base();
  const auto pool = load_pool(manifest_.verify("pool"));
  if (pool.model_hash() != m.content_hash())
    throw HashMismatchError("pool was built for model " + pool.model_hash().substr(0, 16) + ", base checkpoint is " +
                            m.content_hash().substr(0, 16));
  fs::create_directories(root_ / "recipes");
  fs::create_directories(root_ / "scores");
  const auto& us = users();
  const auto before = autodiff_counters();
  const auto t0 = clk::now();
  std::vector<Recipe> recipes(targets.size());
  std::vector<AssemblyTrace> traces(targets.size());
  parallel_for(targets.size(), cfg_.workers, [&](std::size_t i) {
    recipes[i] = perpcs::assemble(m, pool, find_user(us, targets[i]), cfg_.assembly, &traces[i]);
  });
  const auto after = autodiff_counters();
  if (after.optimizer_steps != before.optimizer_steps || after.grad_tapes != before.grad_tapes)
    throw ContractViolation("assembly ran optimizer steps or gradient tapes");
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto s = std::to_string(targets[i]);
    save_recipe(recipes[i], root_ / "recipes" / ("recipe_" + s + ".json"));
    write_file_bytes(root_ / "recipes" / ("recipe_" + s + ".bin"), recipe_to_binary(recipes[i]));
    write_file_text(root_ / "scores" / ("scores_" + s + ".json"), score_dump_json(traces[i]));
    record("recipe/" + s, "recipes/recipe_" + s + ".json", "recipe", "assemble", k);
    record("recipe_bin/" + s, "recipes/recipe_" + s + ".bin", "recipe-binary", "assemble", k);
    record("scores/" + s, "scores/scores_" + s + ".json", "scores", "assemble", k);
  }
  manifest_.save();
  log_ << "[assemble] " << targets.size() << " recipes in " << fmt6(seconds_since(t0)) << " s\n";
}

void Runner::evaluate() {
  const auto cj = cfg_.to_json();
  const auto& targets = splits().targets;
  std::vector<std::string> inputs{hash_of("pool"), hash_of("base"), hash_of("corpus"), hash_of("splits"),
                                  hash_of("candidates"), hash_of("selection")};
  for (auto id : targets) inputs.push_back(hash_of("recipe/" + std::to_string(id)));
  const auto k = key("evaluate",
                     {{"seed", cfg_.seed}, {"evaluation", cj["evaluation"]}, {"sharer_train", cj["sharer_train"]},
                      {"task", cj["task"]}},
                     inputs);
  if (fresh("matrix", k) && fresh("predictions", k)) {
    log_ << "[evaluate] up to date\n";
    return;
  }
  const auto t0 = clk::now();
  const Model& m = base();
  const auto& us = users();
  const auto pool = load_pool(manifest_.verify("pool"));
  if (pool.model_hash() != m.content_hash()) throw HashMismatchError("pool does not match the base checkpoint");
  std::map<std::uint32_t, Recipe> recipes;
  for (auto id : targets) {
    auto r = load_recipe(manifest_.verify("recipe/" + std::to_string(id)));
    r.validate(pool);
    recipes.emplace(id, std::move(r));
  }
  ensure_oppu(targets);

  std::map<std::string, std::vector<QueryPrediction>> preds;
  const std::vector<std::string> order{kMethodBase,   kMethodRetrieval,       kMethodPeftRetrieval,
                                       kMethodPerPcs, kMethodPerPcsRetrieval, kMethodOppu};
  preds[kMethodBase] = predict_targets(nullptr, nullptr, 0, targets);
  preds[kMethodRetrieval] = predict_targets(nullptr, nullptr, cfg_.retrieval_m, targets);

  {
    const auto before = autodiff_counters();
    preds[kMethodPerPcs] = predict_targets(&recipes, &pool, 0, targets);
    preds[kMethodPerPcsRetrieval] = predict_targets(&recipes, &pool, cfg_.retrieval_m, targets);
    const auto after = autodiff_counters();
    if (after.optimizer_steps != before.optimizer_steps || after.grad_tapes != before.grad_tapes)
      throw ContractViolation("recipe evaluation trained parameters for target users");
  }

  // PEFT retrieval over the selected sharers' whole adapters.
  {
    const auto ids = selection();
    std::vector<Candidate> sharers;
    std::vector<Adapter> adapters;
    for (const auto& c : candidates(SelectionStrategy::kHistoryCluster))
      if (std::find(ids.begin(), ids.end(), c.id) != ids.end()) {
        sharers.push_back(c);
        adapters.push_back(load_sharer_adapter(c.id, "sharers"));
      }
    std::vector<const Adapter*> ptrs;
    for (const auto& a : adapters) ptrs.push_back(&a);
    const auto enc = model_encoder(m);
    std::vector<std::vector<QueryPrediction>> per(targets.size());
    parallel_for(targets.size(), cfg_.workers, [&](std::size_t i) {
      const auto& u = find_user(us, targets[i]);
      auto ra = peft_retrieval_baseline(embed_user(u, enc), sharers, ptrs, cfg_.peft_retrieval_k);
      DenseDeltaAttachment<float> att(std::move(ra.deltas));
      Model replica = m;
      per[i] = predict_user(replica, &att, u, cfg_.task, 0);
    });
    for (auto& p : per) preds[kMethodPeftRetrieval].insert(preds[kMethodPeftRetrieval].end(), p.begin(), p.end());
  }

  {
    std::vector<std::vector<QueryPrediction>> per(targets.size());
    std::vector<Adapter> oppu;
    for (auto id : targets) oppu.push_back(load_sharer_adapter(id, "oppu"));
    parallel_for(targets.size(), cfg_.workers, [&](std::size_t i) {
      LoraAttachment<float> att(oppu[i]);
      Model replica = m;
      per[i] = predict_user(replica, &att, find_user(us, targets[i]), cfg_.task, 0);
    });
    for (auto& p : per) preds[kMethodOppu].insert(preds[kMethodOppu].end(), p.begin(), p.end());
  }

  std::vector<ReportRow> rows;
  for (const auto& method : order) append_rows(rows, "matrix", "default", method, preds[method]);
  fs::create_directories(root_ / "reports");
  write_file_text(root_ / "reports" / "predictions.jsonl", predictions_jsonl(preds, order));
  record("predictions", "reports/predictions.jsonl", "predictions", "evaluate", k);
  write_report("matrix", "reports/matrix.csv", rows, "evaluate", k);
  manifest_.save();
  for (const auto& r : rows)
    log_ << "[evaluate] " << r.method << " " << to_string(r.metrics.kind) << " headline "
         << fmt6(headline(r.metrics)) << "\n";
  log_ << "[evaluate] done in " << fmt6(seconds_since(t0)) << " s\n";
}

void Runner::sweep() {
  const auto cj = cfg_.to_json();
  const auto k = key("sweep",
                     {{"seed", cfg_.seed},
                      {"sweeps", cj["sweeps"]},
                      {"selection", cj["selection"]},
                      {"pool", cj["pool"]},
                      {"assembly", cj["assembly"]},
                      {"sharer_train", cj["sharer_train"]},
                      {"gate_train", cj["gate_train"]},
                      {"task", cj["task"]}},
                     {hash_of("base"), hash_of("corpus"), hash_of("splits"), hash_of("candidates"),
                      hash_of("predictions")});
  const std::vector<std::string> names{"sweep_sharer_count", "sweep_strategy", "sweep_share_ratio", "sweep_activity",
                                       "sweep_ablation"};
  bool all_fresh = true;
  for (const auto& n : names) all_fresh = all_fresh && fresh(n, k);
  if (all_fresh) {
    log_ << "[sweep] up to date\n";
    return;
  }
  const auto t0 = clk::now();
  const auto& targets = splits().targets;
  std::vector<std::string> order;
  const auto matrix = predictions_from_jsonl(read_file_text(manifest_.verify("predictions")), &order);
  const auto reference = [&](std::vector<ReportRow>& rows, const std::string& sweep) {
    for (const char* method : {kMethodBase, kMethodOppu})
      if (matrix.count(method)) append_rows(rows, sweep, "reference", method, matrix.at(method));
  };
  const auto run_point = [&](const std::vector<std::uint32_t>& ids, double ratio, const AssemblyConfig& acfg) {
    ensure_sharers(ids, "sweep");
    const auto pool = pool_for(ids, ratio);
    const auto recipes = assemble_all(pool, acfg);
    return predict_targets(&recipes, &pool, 0, targets);
  };
  const auto select = [&](int count, SelectionStrategy s) {
    return select_sharers(candidates(s), count, s, derive_seed(cfg_.seed, "selection")).sharers;
  };

  {
    std::vector<ReportRow> rows;
    reference(rows, "sharer_count");
    for (int count : cfg_.sweeps.sharer_counts) {
      if (count > static_cast<int>(splits().sharer_candidates.size())) {
        log_ << "[sweep] skipping sharer count " << count << ": not enough candidates\n";
        continue;
      }
      log_ << "[sweep] sharer count " << count << "\n";
      append_rows(rows, "sharer_count", std::to_string(count), kMethodPerPcs,
                  run_point(select(count, cfg_.strategy), cfg_.share_ratio, cfg_.assembly));
    }
    write_report("sweep_sharer_count", "reports/sweep_sharer_count.csv", rows, "sweep", k);
  }
  {
    std::vector<ReportRow> rows;
    reference(rows, "strategy");
    for (auto s : cfg_.sweeps.strategies) {
      log_ << "[sweep] strategy " << to_string(s) << "\n";
      append_rows(rows, "strategy", to_string(s), kMethodPerPcs,
                  run_point(select(cfg_.sharers, s), cfg_.share_ratio, cfg_.assembly));
    }
    write_report("sweep_strategy", "reports/sweep_strategy.csv", rows, "sweep", k);
  }
  {
    std::vector<ReportRow> rows;
    reference(rows, "share_ratio");
    const auto ids = select(cfg_.sharers, cfg_.strategy);
    for (double ratio : cfg_.sweeps.share_ratios) {
      log_ << "[sweep] share ratio " << fmt6(ratio) << "\n";
      char label[32];
      std::snprintf(label, sizeof label, "%.2f", ratio);
      append_rows(rows, "share_ratio", label, kMethodPerPcs, run_point(ids, ratio, cfg_.assembly));
    }
    write_report("sweep_share_ratio", "reports/sweep_share_ratio.csv", rows, "sweep", k);
  }
  {
    std::vector<ReportRow> rows;
    const auto labels = bucket_labels(cfg_.sweeps.activity_edges);
    const auto& us = users();
    for (std::size_t b = 0; b < labels.size(); ++b) {
      for (const auto& method : order) {
        std::vector<QueryPrediction> in_bucket;
        for (const auto& p : matrix.at(method))
          if (bucket_of(find_user(us, p.user).history_size(), cfg_.sweeps.activity_edges) == b) in_bucket.push_back(p);
        append_rows(rows, "activity", labels[b], method, in_bucket);
      }
    }
    write_report("sweep_activity", "reports/sweep_activity.csv", rows, "sweep", k);
  }
  {
    std::vector<ReportRow> rows;
    reference(rows, "ablation");
    const auto ids = select(cfg_.sharers, cfg_.strategy);
    for (auto mode : cfg_.sweeps.ablations) {
      log_ << "[sweep] ablation " << to_string(mode) << "\n";
      AssemblyConfig acfg = cfg_.assembly;
      acfg.mode = mode;
      append_rows(rows, "ablation", to_string(mode), kMethodPerPcs, run_point(ids, cfg_.share_ratio, acfg));
    }
    write_report("sweep_ablation", "reports/sweep_ablation.csv", rows, "sweep", k);
  }
  manifest_.save();
  log_ << "[sweep] done in " << fmt6(seconds_since(t0)) << " s\n";
}

void Runner::bench() {
  const auto cj = cfg_.to_json();
  const auto k = key("bench", {{"seed", cfg_.seed}, {"sharer_train", cj["sharer_train"]}, {"assembly", cj["assembly"]}},
                     {hash_of("pool"), hash_of("base"), hash_of("corpus"), hash_of("splits")});
  if (fresh("efficiency", k)) {
    log_ << "[bench] up to date\n";
    return;
  }
  const Model& m = base();
  const auto& us = users();
  const auto pool = load_pool(manifest_.verify("pool"));
  if (pool.model_hash() != m.content_hash()) throw HashMismatchError("pool does not match the base checkpoint");
  const auto& targets = splits().targets;
  fs::create_directories(root_ / "bench");

  // Single worker for both methods so the timings are comparable.
  EfficiencyReport rep;
  const auto closed = recipe_closed_form_bytes(m.slot_count(), static_cast<std::size_t>(cfg_.assembly.k));
  bool recipes_match = true;
  for (auto id : targets) {
    const auto& u = find_user(us, id);
    auto t0 = clk::now();
    auto adapter = train_sharer_adapter(m, u, cfg_.sharer_train);
    const double train_s = seconds_since(t0);

    const auto before = autodiff_counters();
    t0 = clk::now();
    auto recipe = perpcs::assemble(m, pool, u, cfg_.assembly);
    const double asm_s = seconds_since(t0);
    const auto after = autodiff_counters();
    rep.assembly_optimizer_steps += after.optimizer_steps - before.optimizer_steps;
    rep.assembly_grad_tapes += after.grad_tapes - before.grad_tapes;

    const auto bytes = recipe_to_binary(recipe).size();
    rep.recipe_bytes = std::max(rep.recipe_bytes, bytes);
    recipes_match = recipes_match && bytes == closed;
    if (rep.users.empty()) {
      const auto path = root_ / "bench" / ("oppu_adapter_" + std::to_string(id) + ".bin");
      save_adapter(adapter, m.content_hash(), path);
      rep.adapter_bytes = fs::file_size(path);
    }
    rep.users.push_back(id);
    rep.train_seconds.push_back(train_s);
    rep.assemble_seconds.push_back(asm_s);
    log_ << "[bench] user " << id << " train " << fmt6(train_s) << " s, assemble " << fmt6(asm_s) << " s\n";
  }
  if (rep.assembly_optimizer_steps != 0 || rep.assembly_grad_tapes != 0)
    throw ContractViolation("assembly performed optimizer steps");
  for (std::size_t i = 0; i < rep.users.size(); ++i) {
    rep.mean_train_seconds += rep.train_seconds[i] / static_cast<double>(rep.users.size());
    rep.mean_assemble_seconds += rep.assemble_seconds[i] / static_cast<double>(rep.users.size());
  }
  rep.time_ratio = rep.mean_train_seconds / rep.mean_assemble_seconds;
  rep.recipe_closed_form_bytes = closed;
  if (!recipes_match) log_ << "[bench] warning: some recipes hold fewer than k entries per slot\n";
  rep.adapter_closed_form_bytes = adapter_closed_form_bytes(m.slots(), cfg_.model.rank);
  rep.recipe_payload_bytes = closed - recipe_header_bytes(m.slot_count());
  rep.adapter_payload_bytes = rep.adapter_closed_form_bytes - adapter_header_bytes(m.slot_count());
  rep.storage_ratio = static_cast<double>(rep.adapter_payload_bytes) / static_cast<double>(rep.recipe_payload_bytes);
  rep.storage_ratio_with_headers =
      static_cast<double>(rep.adapter_closed_form_bytes) / static_cast<double>(rep.recipe_closed_form_bytes);

  fs::create_directories(root_ / "reports");
  write_file_text(root_ / "reports" / "efficiency.json", rep.to_json());
  record("efficiency", "reports/efficiency.json", "efficiency", "bench", k);
  manifest_.save();
  log_ << "[bench] assembly " << fmt6(rep.mean_assemble_seconds) << " s vs training " << fmt6(rep.mean_train_seconds)
       << " s per target (" << fmt6(rep.time_ratio) << "x)\n";
  log_ << "[bench] recipe " << rep.recipe_bytes << " B (closed form " << rep.recipe_closed_form_bytes << "), adapter "
       << rep.adapter_bytes << " B (closed form " << rep.adapter_closed_form_bytes << ")\n";
  log_ << "[bench] storage ratio " << fmt6(rep.storage_ratio) << "x payload, " << fmt6(rep.storage_ratio_with_headers)
       << "x with headers; reported 38x at 7B scale for context\n";
}

void Runner::run_all() {
  gen_data();
  adapt_base();
  train_sharers();
  train_gates();
  build_pool();
  assemble();
  evaluate();
  sweep();
  bench();
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const MissingPrerequisite*>(&e)) return kExitMissingPrerequisite;
  if (dynamic_cast<const HashMismatchError*>(&e)) return kExitHashMismatch;
  if (dynamic_cast<const TrainingError*>(&e)) return kExitTrainingFailure;
  return kExitFailure;
}

}  // namespace perpcs
