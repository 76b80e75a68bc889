#include "perpcs/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>

#include "perpcs/binary_io.hpp"

extern char** environ;

namespace perpcs {

using ojson = nlohmann::ordered_json;

namespace {

ojson train_json(const TrainConfig& t) {
  return {{"batch_size", t.batch_size}, {"steps", t.max_steps}, {"epochs", t.epochs}, {"lr", t.lr},
          {"optimizer", t.optimizer == OptimizerKind::kAdam ? "adam" : "sgd"}, {"clip_norm", t.clip_norm}};
}

TrainConfig train_from(const nlohmann::json& j) {
  TrainConfig t;
  t.batch_size = j.at("batch_size");
  t.max_steps = j.at("steps");
  t.epochs = j.at("epochs");
  t.lr = j.at("lr");
  const std::string opt = j.at("optimizer");
  if (opt != "adam" && opt != "sgd") throw ConfigError("optimizer must be 'adam' or 'sgd'");
  t.optimizer = opt == "adam" ? OptimizerKind::kAdam : OptimizerKind::kSgd;
  t.clip_norm = j.at("clip_norm");
  return t;
}

template <typename T, typename F>
ojson names(const std::vector<T>& v, F to_name) {
  ojson a = ojson::array();
  for (const auto& x : v) a.push_back(to_name(x));
  return a;
}

// Recursively overlays `patch` on `base`; every key must already exist in
// `base` with a compatible type.
void overlay(ojson& base, const nlohmann::json& patch, const std::string& path) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    auto& slot = base[it.key()];
    const auto& v = it.value();
    if (slot.is_object()) {
      if (!v.is_object()) throw ConfigError("config key '" + key + "' must be an object");
      overlay(slot, v, key);
      continue;
    }
    const bool ok = (slot.is_number() && v.is_number()) || (slot.is_string() && v.is_string()) ||
                    (slot.is_array() && v.is_array()) || (slot.is_boolean() && v.is_boolean());
    if (!ok) throw ConfigError("config key '" + key + "' has the wrong type");
    slot = v;
  }
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

}  // namespace

void RunConfig::finalize() {
  model.seed = derive_seed(seed, "model");
  pretrain.seed = derive_seed(seed, "pretrain");
  base_adapt.seed = derive_seed(seed, "base-adapt");
  sharer_train.seed = derive_seed(seed, "sharer-train");
  gate_train.seed = derive_seed(seed, "gate-train");
  assembly.seed = derive_seed(seed, "assembly");
}

void RunConfig::validate() const {
  try {
    model.validate();
    task.validate();
    for (const auto* t : {&pretrain, &base_adapt, &sharer_train, &gate_train}) t->validate();
    assembly.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (splits.base < 1 || splits.sharer_candidates < 1 || splits.targets < 1)
    throw ConfigError("every split needs at least one user");
  if (sharers < 1 || sharers > splits.sharer_candidates) throw ConfigError("sharers must be in [1, sharer_candidates]");
  if (!(share_ratio > 0.0 && share_ratio <= 1.0)) throw ConfigError("share_ratio must be in (0, 1]");
  if (peft_retrieval_k < 1 || peft_retrieval_k > sharers) throw ConfigError("peft_retrieval_k must be in [1, sharers]");
  if (task.num_labels > 16) throw ConfigError("at most 16 labels");
  if (model.vocab_size < Vocabulary::standard().size())
    throw ConfigError("model vocab_size must cover the " + std::to_string(Vocabulary::standard().size()) +
                      "-symbol vocabulary");
  for (int k : sweeps.sharer_counts)
    if (k < 1 || k > splits.sharer_candidates) throw ConfigError("sweep sharer count out of range");
  for (double r : sweeps.share_ratios)
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError("sweep share ratio out of range");
  if (!std::is_sorted(sweeps.activity_edges.begin(), sweeps.activity_edges.end()))
    throw ConfigError("activity edges must ascend");
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

ojson RunConfig::to_json() const {
  ojson j;
  j["schema_version"] = kConfigSchemaVersion;
  j["seed"] = seed;
  j["workers"] = workers;
  j["out_dir"] = out_dir;
  j["model"] = {{"vocab_size", model.vocab_size},
                {"d_model", model.d_model},
                {"layers", model.layers},
                {"heads", model.heads},
                {"ffn", model.ffn},
                {"max_seq", model.max_seq},
                {"adapter_targets", names(model.adapter_targets, [](SlotRole r) { return to_string(r); })},
                {"rank", model.rank}};
  j["task"] = {{"kinds", names(task.kinds, [](TaskKind k) { return to_string(k); })},
               {"prototypes", task.prototypes},
               {"categories", task.categories},
               {"num_labels", task.num_labels},
               {"noise", task.noise},
               {"history_min", task.history_min},
               {"history_max", task.history_max},
               {"freeform_items", task.freeform_items},
               {"freeform_length", task.freeform_length},
               {"topic_purity", task.topic_purity},
               {"queries_per_kind", task.queries_per_kind},
               {"classification_queries", task.classification_queries}};
  j["splits"] = {{"base", splits.base}, {"sharer_candidates", splits.sharer_candidates}, {"targets", splits.targets}};
  j["pretrain"] = train_json(pretrain);
  j["base_adapt"] = train_json(base_adapt);
  j["sharer_train"] = train_json(sharer_train);
  j["gate_train"] = train_json(gate_train);
  j["selection"] = {{"sharers", sharers}, {"strategy", to_string(strategy)}};
  j["pool"] = {{"share_ratio", share_ratio}};
  j["assembly"] = {{"k", assembly.k}, {"mode", to_string(assembly.mode)}, {"p", assembly.p},
                   {"batch_size", assembly.batch_size}};
  j["evaluation"] = {{"retrieval_m", retrieval_m}, {"peft_retrieval_k", peft_retrieval_k}};
  j["sweeps"] = {{"sharer_counts", sweeps.sharer_counts},
                 {"strategies", names(sweeps.strategies, [](SelectionStrategy s) { return to_string(s); })},
                 {"share_ratios", sweeps.share_ratios},
                 {"activity_edges", sweeps.activity_edges},
                 {"ablations", names(sweeps.ablations, [](SelectionMode m) { return to_string(m); })}};
  return j;
}

std::string RunConfig::hash() const {
  auto j = to_json();
  j.erase("out_dir");
  j.erase("workers");
  return sha256_hex(j.dump());
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema_version") != kConfigSchemaVersion)
      throw ConfigError("unsupported config schema_version " + j.at("schema_version").dump());
    RunConfig c;
    c.seed = j.at("seed");
    c.workers = j.at("workers");
    c.out_dir = j.at("out_dir");
    const auto& m = j.at("model");
    c.model.vocab_size = m.at("vocab_size");
    c.model.d_model = m.at("d_model");
    c.model.layers = m.at("layers");
    c.model.heads = m.at("heads");
    c.model.ffn = m.at("ffn");
    c.model.max_seq = m.at("max_seq");
    c.model.adapter_targets.clear();
    for (const auto& r : m.at("adapter_targets")) c.model.adapter_targets.push_back(slot_role_from_string(r));
    c.model.rank = m.at("rank");
    const auto& t = j.at("task");
    c.task.kinds.clear();
    for (const auto& k : t.at("kinds")) c.task.kinds.push_back(task_kind_from_string(k));
    c.task.prototypes = t.at("prototypes");
    c.task.categories = t.at("categories");
    c.task.num_labels = t.at("num_labels");
    c.task.noise = t.at("noise");
    c.task.history_min = t.at("history_min");
    c.task.history_max = t.at("history_max");
    c.task.freeform_items = t.at("freeform_items");
    c.task.freeform_length = t.at("freeform_length");
    c.task.topic_purity = t.at("topic_purity");
    c.task.queries_per_kind = t.at("queries_per_kind");
    c.task.classification_queries = t.at("classification_queries");
    const auto& s = j.at("splits");
    c.splits.base = s.at("base");
    c.splits.sharer_candidates = s.at("sharer_candidates");
    c.splits.targets = s.at("targets");
    c.pretrain = train_from(j.at("pretrain"));
    c.base_adapt = train_from(j.at("base_adapt"));
    c.sharer_train = train_from(j.at("sharer_train"));
    c.gate_train = train_from(j.at("gate_train"));
    c.sharers = j.at("selection").at("sharers");
    c.strategy = selection_strategy_from_string(j.at("selection").at("strategy"));
    c.share_ratio = j.at("pool").at("share_ratio");
    const auto& a = j.at("assembly");
    c.assembly.k = a.at("k");
    c.assembly.mode = selection_mode_from_string(a.at("mode"));
    c.assembly.p = a.at("p");
    c.assembly.batch_size = a.at("batch_size");
    c.retrieval_m = j.at("evaluation").at("retrieval_m");
    c.peft_retrieval_k = j.at("evaluation").at("peft_retrieval_k");
    const auto& w = j.at("sweeps");
    c.sweeps.sharer_counts = w.at("sharer_counts").get<std::vector<int>>();
    c.sweeps.strategies.clear();
    for (const auto& x : w.at("strategies")) c.sweeps.strategies.push_back(selection_strategy_from_string(x));
    c.sweeps.share_ratios = w.at("share_ratios").get<std::vector<double>>();
    c.sweeps.activity_edges = w.at("activity_edges").get<std::vector<int>>();
    c.sweeps.ablations.clear();
    for (const auto& x : w.at("ablations")) c.sweeps.ablations.push_back(selection_mode_from_string(x));
    c.finalize();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

RunConfig load_run_config(const std::filesystem::path* file, const std::map<std::string, std::string>& env) {
  RunConfig defaults;
  ojson merged = defaults.to_json();
  if (file) {
    nlohmann::json user;
    try {
      user = nlohmann::json::parse(read_file_text(*file));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config file " + file->string() + ": " + e.what());
    } catch (const std::runtime_error& e) {
      throw ConfigError(e.what());
    }
    if (!user.is_object()) throw ConfigError("config file must hold a JSON object");
    if (!user.contains("schema_version")) throw ConfigError("config file lacks schema_version");
    overlay(merged, user, "");
  }
  for (const auto& [name, value] : env) {
    if (name.rfind("PERPCS_", 0) != 0) continue;
    std::vector<std::string> keys;
    std::string rest = lower(name.substr(7));
    for (std::size_t pos; (pos = rest.find("__")) != std::string::npos; rest = rest.substr(pos + 2))
      keys.push_back(rest.substr(0, pos));
    keys.push_back(rest);
    const ojson* slot = &merged;
    for (const auto& k : keys) {
      if (!slot->is_object() || !slot->contains(k)) throw ConfigError("unknown config key in environment: " + name);
      slot = &(*slot)[k];
    }
    nlohmann::json leaf;
    if (slot->is_string()) {
      leaf = value;
    } else {
      leaf = nlohmann::json::parse(value, nullptr, false);
      if (leaf.is_discarded()) throw ConfigError("cannot parse " + name + "='" + value + "'");
    }
    nlohmann::json patch = leaf;
    for (auto k = keys.rbegin(); k != keys.rend(); ++k) patch = nlohmann::json{{*k, patch}};
    overlay(merged, patch, "");
  }
  return run_config_from_json(nlohmann::json::parse(merged.dump()));
}

std::map<std::string, std::string> perpcs_environment() {
  std::map<std::string, std::string> out;
  for (char** e = environ; e && *e; ++e) {
    std::string kv(*e);
    const auto eq = kv.find('=');
    if (eq != std::string::npos && kv.rfind("PERPCS_", 0) == 0) out[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  return out;
}

}  // namespace perpcs
