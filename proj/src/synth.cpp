#include "perpcs/synth.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <stdexcept>

namespace perpcs {

namespace {

constexpr int kFeatures = 64;
constexpr int kTopicPool = 8;
constexpr int kContentBase = 64;
constexpr int kStyleBase = 80;

std::string word(int i) { return "w" + std::to_string(i); }
std::string feature(int i) { return "f" + std::to_string(i); }

int category_of(const TaskSpec& spec, const std::string& input) {
  const auto words = split_words(input);
  if (words.size() != 4) throw CorpusError("malformed task input '" + input + "'");
  std::map<int, int> counts;
  for (std::size_t i = 1; i < words.size(); ++i) {
    if (words[i].size() < 2 || words[i][0] != 'f') throw CorpusError("malformed feature in '" + input + "'");
    ++counts[std::stoi(words[i].substr(1)) % spec.categories];
  }
  for (auto [c, n] : counts)
    if (n >= 2) return c;
  throw CorpusError("input has no majority category: '" + input + "'");
}

std::string answer_for(const Prototype& p, TaskKind kind, int cat) {
  switch (kind) {
    case TaskKind::kClassification:
      return "c" + std::to_string(p.label[static_cast<std::size_t>(cat)]);
    case TaskKind::kRating:
      return std::to_string(p.rating[static_cast<std::size_t>(cat)]);
    case TaskKind::kGeneration:
      return word(kContentBase + cat) + " " + word(kStyleBase + 4 * p.style + cat % 4) + " " +
             word(kStyleBase + 4 * p.style + (cat + 1) % 4);
  }
  throw std::logic_error("unreachable");
}

std::string noisy_answer(const TaskSpec& spec, const Prototype& p, TaskKind kind, int cat, Rng& rng) {
  if (!rng.bernoulli(spec.noise)) return answer_for(p, kind, cat);
  switch (kind) {
    case TaskKind::kClassification:
      return "c" + std::to_string(rng.uniform_int(0, spec.num_labels - 1));
    case TaskKind::kRating:
      return std::to_string(rng.uniform_int(1, 5));
    case TaskKind::kGeneration: {
      const int other = rng.uniform_int(0, spec.prototypes - 1);
      return word(kContentBase + cat) + " " + word(kStyleBase + 4 * other + cat % 4) + " " +
             word(kStyleBase + 4 * other + (cat + 1) % 4);
    }
  }
  throw std::logic_error("unreachable");
}

std::string sample_input(const TaskSpec& spec, TaskKind kind, Rng& rng) {
  const int per_cat = kFeatures / spec.categories;
  const int cat = rng.uniform_int(0, spec.categories - 1);
  const int a = rng.uniform_int(0, per_cat - 1);
  int b = rng.uniform_int(0, per_cat - 2);
  if (b >= a) ++b;
  int other = rng.uniform_int(0, spec.categories - 2);
  if (other >= cat) ++other;
  std::vector<int> feats{cat + a * spec.categories, cat + b * spec.categories,
                         other + rng.uniform_int(0, per_cat - 1) * spec.categories};
  rng.shuffle(feats.begin(), feats.end());
  std::string s = task_marker(kind);
  for (int f : feats) s += " " + feature(f);
  return s;
}

std::vector<Prototype> make_prototypes(const TaskSpec& spec, Rng& rng) {
  const auto cats = static_cast<std::size_t>(spec.categories);
  std::vector<Prototype> out;
  int attempts = 0;
  while (static_cast<int>(out.size()) < spec.prototypes) {
    if (++attempts > 10000) throw std::runtime_error("could not draw distinct prototypes");
    Prototype p;
    p.style = static_cast<int>(out.size());
    for (std::size_t c = 0; c < cats; ++c) {
      p.label.push_back(rng.uniform_int(0, spec.num_labels - 1));
      p.rating.push_back(rng.uniform_int(1, 5));
    }
    // Prototypes must disagree on at least half of the categories.
    bool distinct = true;
    for (const auto& q : out) {
      std::size_t diff = 0;
      for (std::size_t c = 0; c < cats; ++c) diff += p.label[c] != q.label[c];
      distinct &= diff * 2 >= cats;
    }
    if (distinct) out.push_back(std::move(p));
  }
  return out;
}

UserRecord make_user(const TaskSpec& spec, const Prototype& p, int proto, std::uint32_t id, Rng& rng) {
  UserRecord u;
  u.user_id = id;
  u.prototype = proto;
  const int n_task = rng.uniform_int(spec.history_min, spec.history_max);
  std::set<std::string> seen;
  for (int i = 0; i < n_task; ++i) {
    const auto kind = spec.kinds[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(spec.kinds.size()) - 1))];
    auto input = sample_input(spec, kind, rng);
    const int cat = category_of(spec, input);
    seen.insert(input);
    u.items.push_back({input, noisy_answer(spec, p, kind, cat, rng), ItemKind::kTask});
  }
  for (int i = 0; i < spec.freeform_items; ++i) {
    std::string text;
    for (int w = 0; w < spec.freeform_length; ++w) {
      const int idx = rng.bernoulli(spec.topic_purity) ? kTopicPool * proto + rng.uniform_int(0, kTopicPool - 1)
                                                       : rng.uniform_int(0, kTopicPool * spec.prototypes - 1);
      text += (text.empty() ? "" : " ") + word(idx);
    }
    // Free-form items are interleaved with task items.
    const auto pos = static_cast<std::ptrdiff_t>(rng.uniform_int(0, static_cast<int>(u.items.size())));
    u.items.insert(u.items.begin() + pos, HistoryItem{text, std::nullopt, ItemKind::kFreeForm});
  }
  for (const auto kind : spec.kinds) {
    const int n = kind == TaskKind::kClassification ? spec.classification_queries : spec.queries_per_kind;
    for (int i = 0; i < n; ++i) {
      std::string input;
      do input = sample_input(spec, kind, rng);
      while (!seen.insert(input).second);
      u.queries.push_back({input, noisy_answer(spec, p, kind, category_of(spec, input), rng)});
    }
  }
  return u;
}

}  // namespace

std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kClassification: return "classification";
    case TaskKind::kRating: return "rating";
    case TaskKind::kGeneration: return "generation";
  }
  throw std::logic_error("unreachable");
}

TaskKind task_kind_from_string(const std::string& s) {
  for (auto k : {TaskKind::kClassification, TaskKind::kRating, TaskKind::kGeneration})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown task kind '" + s + "'");
}

const std::string& task_marker(TaskKind k) {
  static const std::string markers[] = {"w124", "w125", "w126"};
  return markers[static_cast<int>(k)];
}

TaskKind task_of(const std::string& input) {
  const auto words = split_words(input);
  for (auto k : {TaskKind::kClassification, TaskKind::kRating, TaskKind::kGeneration})
    if (!words.empty() && words[0] == task_marker(k)) return k;
  throw CorpusError("input has no task marker: '" + input + "'");
}

void TaskSpec::validate() const {
  if (kinds.empty()) throw std::invalid_argument("task spec needs at least one task kind");
  if (prototypes < 1 || prototypes > 8) throw std::invalid_argument("prototypes must be in [1, 8]");
  if (categories < 2 || categories > 16 || kFeatures % categories != 0)
    throw std::invalid_argument("categories must divide 64 and lie in [2, 16]");
  if (num_labels < 2 || num_labels > 16) throw std::invalid_argument("num_labels must be in [2, 16]");
  if (!(noise >= 0.0 && noise < 0.5)) throw std::invalid_argument("noise must be in [0, 0.5)");
  if (history_min < 1 || history_max < history_min) throw std::invalid_argument("bad history length range");
  if (freeform_items < 0 || freeform_length < 1) throw std::invalid_argument("bad free-form settings");
  if (!(topic_purity >= 0.0 && topic_purity <= 1.0)) throw std::invalid_argument("topic_purity must be in [0, 1]");
  if (queries_per_kind < 1 || classification_queries < 1) throw std::invalid_argument("query counts must be positive");
}

SyntheticCorpus generate_corpus(const TaskSpec& spec, const CorpusCounts& counts, std::uint64_t seed) {
  spec.validate();
  if (counts.base < 1 || counts.sharer_candidates < 1 || counts.targets < 1)
    throw std::invalid_argument("every split needs at least one user");
  SyntheticCorpus out;
  Rng proto_rng(derive_seed(seed, "prototypes"));
  out.prototypes = make_prototypes(spec, proto_rng);
  out.candidate_coverage.assign(static_cast<std::size_t>(spec.prototypes), 0);

  std::uint32_t next = 0;
  auto add_split = [&](int n, std::vector<std::uint32_t>& ids, std::string_view tag) {
    // Balanced prototype assignment, then shuffled so ids carry no pattern.
    std::vector<int> protos;
    for (int i = 0; i < n; ++i) protos.push_back(i % spec.prototypes);
    Rng rng(derive_seed(seed, tag));
    rng.shuffle(protos.begin(), protos.end());
    for (int i = 0; i < n; ++i) {
      const std::uint32_t id = next++;
      Rng user_rng(derive_seed(seed, 0x5eed0000ULL + id));
      const int proto = protos[static_cast<std::size_t>(i)];
      out.users.push_back(make_user(spec, out.prototypes[static_cast<std::size_t>(proto)], proto, id, user_rng));
      ids.push_back(id);
    }
  };
  add_split(counts.base, out.splits.base, "split-base");
  add_split(counts.sharer_candidates, out.splits.sharer_candidates, "split-sharers");
  add_split(counts.targets, out.splits.targets, "split-targets");
  out.splits.check_disjoint();
  for (auto id : out.splits.sharer_candidates) ++out.candidate_coverage[static_cast<std::size_t>(out.users[id].prototype)];
  return out;
}

std::string prototype_answer(const TaskSpec& spec, const Prototype& p, const std::string& input) {
  return answer_for(p, task_of(input), category_of(spec, input));
}

std::vector<int> answer_candidates(const TaskSpec& spec, TaskKind kind) {
  const auto& vocab = Vocabulary::standard();
  std::vector<int> out;
  if (kind == TaskKind::kClassification)
    for (int i = 0; i < spec.num_labels; ++i) out.push_back(vocab.id("c" + std::to_string(i)));
  else if (kind == TaskKind::kRating)
    for (int i = 1; i <= 5; ++i) out.push_back(vocab.id(std::to_string(i)));
  return out;
}

}  // namespace perpcs
