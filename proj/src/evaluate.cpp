#include "perpcs/evaluate.hpp"

#include <algorithm>
#include <cmath>

#include "perpcs/retrieval.hpp"

namespace perpcs {

std::vector<QueryPrediction> predict_user(Model& model, SlotAttachment<float>* attach, const UserRecord& user,
                                          const TaskSpec& spec, std::size_t retrieval_m, int max_new_tokens) {
  const auto& vocab = Vocabulary::standard();
  const auto vocab_size = static_cast<std::size_t>(model.config().vocab_size);
  const auto max_seq = static_cast<std::size_t>(model.config().max_seq);
  std::vector<QueryPrediction> out;
  std::vector<std::vector<int>> prompts;
  for (const auto& q : user.queries) {
    QueryPrediction p;
    p.user = user.user_id;
    p.kind = task_of(q.input);
    p.input = q.input;
    p.target = q.target;
    out.push_back(std::move(p));
    prompts.push_back(build_prompt(q.input, lexical_retrieve(q.input, user.items, retrieval_m)));
  }

  // Greedy decoding, all queries of the user in one batch per step.
  std::vector<std::vector<int>> generated(out.size());
  std::vector<bool> done(out.size(), false);
  for (int step = 0; step < max_new_tokens; ++step) {
    TokenBatch batch;
    batch.batch = out.size();
    for (std::size_t i = 0; i < out.size(); ++i) batch.seq = std::max(batch.seq, prompts[i].size() + generated[i].size());
    if (batch.seq > max_seq) throw ShapeError("prompt exceeds the model's maximum sequence length");
    batch.ids.assign(batch.batch * batch.seq, kPadToken);
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::size_t t = 0;
      for (int id : prompts[i]) batch.ids[i * batch.seq + t++] = id;
      for (int id : generated[i]) batch.ids[i * batch.seq + t++] = id;
      batch.lengths.push_back(t);
    }
    const auto logits = forward_logits(model, batch, attach);
    bool any = false;
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (done[i]) continue;
      const auto row = logits.row(i * batch.seq + batch.lengths[i] - 1);
      const auto candidates = answer_candidates(spec, out[i].kind);
      int best = -1;
      if (out[i].kind == TaskKind::kClassification) {
        for (int c : candidates)
          if (best < 0 || row[static_cast<std::size_t>(c)] > row[static_cast<std::size_t>(best)]) best = c;
        done[i] = true;
        generated[i].push_back(best);
        continue;
      }
      for (std::size_t v = 0; v < vocab_size; ++v)
        if (v != kPadToken && (best < 0 || row[v] > row[static_cast<std::size_t>(best)])) best = static_cast<int>(v);
      if (best == kEosToken || prompts[i].size() + generated[i].size() + 1 >= max_seq) {
        done[i] = true;
        continue;
      }
      generated[i].push_back(best);
      any = true;
    }
    if (!any && std::all_of(done.begin(), done.end(), [](bool d) { return d; })) break;
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i].prediction = vocab.decode(generated[i]);
  return out;
}

std::vector<MetricReport> summarize(const std::string& method, const std::vector<QueryPrediction>& preds) {
  std::vector<MetricReport> out;
  for (auto kind : {TaskKind::kClassification, TaskKind::kRating, TaskKind::kGeneration}) {
    std::vector<std::string> pred, gold;
    for (const auto& p : preds)
      if (p.kind == kind) {
        pred.push_back(p.prediction);
        gold.push_back(p.target);
      }
    if (pred.empty()) continue;
    MetricReport r;
    r.method = method;
    r.kind = kind;
    r.queries = pred.size();
    if (kind == TaskKind::kClassification) {
      r.accuracy = accuracy(pred, gold);
      r.macro_f1 = macro_f1(pred, gold);
    } else if (kind == TaskKind::kRating) {
      double abs_sum = 0, sq_sum = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) {
        const double e = rating_error(pred[i], std::stoi(gold[i]));
        abs_sum += e;
        sq_sum += e * e;
      }
      r.mae = abs_sum / static_cast<double>(pred.size());
      r.rmse = std::sqrt(sq_sum / static_cast<double>(pred.size()));
    } else {
      double r1 = 0, rl = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) {
        r1 += rouge_1(pred[i], gold[i]);
        rl += rouge_l(pred[i], gold[i]);
      }
      r.rouge_1 = r1 / static_cast<double>(pred.size());
      r.rouge_l = rl / static_cast<double>(pred.size());
    }
    out.push_back(r);
  }
  return out;
}

double headline(const MetricReport& r) {
  switch (r.kind) {
    case TaskKind::kClassification: return r.accuracy;
    case TaskKind::kRating: return r.mae;
    case TaskKind::kGeneration: return r.rouge_l;
  }
  return 0;
}

}  // namespace perpcs
