#include "perpcs/data.hpp"

#include <algorithm>
#include <json.hpp>
#include <set>
#include <sstream>

#include "perpcs/binary_io.hpp"

namespace perpcs {

using nlohmann::json;

Vocabulary::Vocabulary() {
  words_ = {"<pad>", "<eos>", "QUERY", "HISTORY", "ANSWER", "<unk>"};
  for (int i = 0; i < 64; ++i) words_.push_back("f" + std::to_string(i));
  for (int i = 0; i < 16; ++i) words_.push_back("c" + std::to_string(i));
  for (int i = 1; i <= 5; ++i) words_.push_back(std::to_string(i));
  for (int i = 0; i < 128; ++i) words_.push_back("w" + std::to_string(i));
  for (std::size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = static_cast<int>(i);
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary vocab;
  return vocab;
}

int Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnkToken : it->second;
}

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) ids.push_back(id(w));
  return ids;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kEosToken) break;
    if (id == kPadToken) continue;
    if (!out.empty()) out += ' ';
    out += word(id);
  }
  return out;
}

void SplitManifest::check_disjoint() const {
  std::set<std::uint32_t> seen;
  for (const auto* split : {&base, &sharer_candidates, &targets})
    for (auto id : *split)
      if (!seen.insert(id).second) throw CorpusError("user " + std::to_string(id) + " appears in more than one split");
}

namespace {

const char* kind_name(ItemKind k) { return k == ItemKind::kTask ? "task" : "free"; }

ItemKind kind_from(const std::string& s) {
  if (s == "task") return ItemKind::kTask;
  if (s == "free") return ItemKind::kFreeForm;
  throw CorpusError("unknown item kind '" + s + "'");
}

}  // namespace

std::string corpus_to_jsonl(const std::vector<UserRecord>& users) {
  std::string out;
  for (const auto& u : users) {
    json items = json::array();
    for (const auto& it : u.items) {
      json j{{"input", it.input}, {"kind", kind_name(it.kind)}};
      if (it.output) j["output"] = *it.output;
      items.push_back(j);
    }
    json queries = json::array();
    for (const auto& q : u.queries) queries.push_back({{"input", q.input}, {"target", q.target}});
    json rec{{"user_id", u.user_id}, {"items", items}, {"queries", queries}};
    if (u.prototype >= 0) rec["prototype"] = u.prototype;
    out += rec.dump();
    out += '\n';
  }
  return out;
}

std::vector<UserRecord> corpus_from_jsonl(const std::string& text) {
  std::vector<UserRecord> users;
  std::istringstream is(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(is, line);) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      UserRecord u;
      u.user_id = j.at("user_id");
      for (const auto& it : j.at("items")) {
        HistoryItem h;
        h.input = it.at("input");
        h.kind = kind_from(it.at("kind"));
        if (it.contains("output")) h.output = it.at("output").get<std::string>();
        if (h.kind == ItemKind::kTask && !h.output) throw CorpusError("task item without output");
        u.items.push_back(std::move(h));
      }
      for (const auto& q : j.at("queries")) u.queries.push_back({q.at("input"), q.at("target")});
      u.prototype = j.value("prototype", -1);
      users.push_back(std::move(u));
    } catch (const json::exception& e) {
      throw CorpusError("corpus line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return users;
}

void save_corpus(const std::vector<UserRecord>& users, const std::filesystem::path& path) {
  write_file_text(path, corpus_to_jsonl(users));
}

std::vector<UserRecord> load_corpus(const std::filesystem::path& path) { return corpus_from_jsonl(read_file_text(path)); }

std::string splits_to_json(const SplitManifest& s) {
  return json{{"base", s.base}, {"sharer_candidates", s.sharer_candidates}, {"targets", s.targets}}.dump(2) + "\n";
}

SplitManifest splits_from_json(const std::string& text) {
  const json j = json::parse(text);
  SplitManifest s;
  s.base = j.at("base").get<std::vector<std::uint32_t>>();
  s.sharer_candidates = j.at("sharer_candidates").get<std::vector<std::uint32_t>>();
  s.targets = j.at("targets").get<std::vector<std::uint32_t>>();
  s.check_disjoint();
  return s;
}

std::vector<int> build_prompt(const std::string& query, const std::vector<const HistoryItem*>& retrieved) {
  const auto& vocab = Vocabulary::standard();
  std::vector<int> out;
  for (const auto* item : retrieved) {
    out.push_back(kHistoryToken);
    auto in = vocab.encode(item->input);
    out.insert(out.end(), in.begin(), in.end());
    if (item->output) {
      out.push_back(kAnswerToken);
      auto o = vocab.encode(*item->output);
      out.insert(out.end(), o.begin(), o.end());
    }
  }
  out.push_back(kQueryToken);
  auto q = vocab.encode(query);
  out.insert(out.end(), q.begin(), q.end());
  out.push_back(kAnswerToken);
  return out;
}

Example make_task_example(const std::string& input, const std::string& output,
                          const std::vector<const HistoryItem*>& retrieved) {
  Example ex;
  ex.tokens = build_prompt(input, retrieved);
  ex.prompt_length = static_cast<int>(ex.tokens.size());
  const auto y = Vocabulary::standard().encode(output);
  ex.tokens.insert(ex.tokens.end(), y.begin(), y.end());
  ex.tokens.push_back(kEosToken);
  ex.loss_mask.assign(ex.tokens.size(), 0);
  for (std::size_t i = static_cast<std::size_t>(ex.prompt_length); i < ex.tokens.size(); ++i) ex.loss_mask[i] = 1;
  ex.span_begin = ex.prompt_length + 1;
  ex.span_end = ex.prompt_length + static_cast<int>(y.size()) + 1;
  return ex;
}

Example make_freeform_example(const std::string& text) {
  Example ex;
  ex.tokens = Vocabulary::standard().encode(text);
  if (ex.tokens.empty()) throw CorpusError("empty free-form item");
  ex.prompt_length = static_cast<int>(ex.tokens.size());
  ex.tokens.push_back(kEosToken);
  ex.loss_mask.assign(ex.tokens.size(), 1);
  ex.loss_mask[0] = 0;
  ex.span_begin = 1;
  ex.span_end = ex.prompt_length + 1;
  return ex;
}

Example make_history_example(const HistoryItem& item) {
  if (item.kind == ItemKind::kTask && item.output) return make_task_example(item.input, *item.output);
  return make_freeform_example(item.input);
}

LmBatch make_lm_batch(const std::vector<const Example*>& examples) {
  LmBatch b;
  b.tokens.batch = examples.size();
  std::size_t seq = 1;
  for (const auto* ex : examples) seq = std::max(seq, ex->tokens.size());
  b.tokens.seq = seq;
  b.tokens.ids.assign(b.tokens.batch * seq, kPadToken);
  b.targets.assign(b.tokens.batch * seq, kPadToken);
  b.mask.assign(b.tokens.batch * seq, 0);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = *examples[i];
    b.tokens.lengths.push_back(ex.tokens.size());
    for (std::size_t t = 0; t < ex.tokens.size(); ++t) {
      b.tokens.ids[i * seq + t] = ex.tokens[t];
      if (t + 1 < ex.tokens.size()) {
        b.targets[i * seq + t] = ex.tokens[t + 1];
        b.mask[i * seq + t] = ex.loss_mask[t + 1];
      }
    }
  }
  return b;
}

}  // namespace perpcs
