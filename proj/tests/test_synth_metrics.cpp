#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "perpcs/metrics.hpp"
#include "perpcs/retrieval.hpp"
#include "perpcs/synth.hpp"

using namespace perpcs;

TEST_CASE("rouge-1 fixtures") {
  CHECK(rouge_1("the cat sat", "the cat sat") == 1.0);
  CHECK(rouge_1("the cat sat", "the cat ran") == 2.0 / 3.0);
  CHECK(rouge_1("a b", "a b c d") == 2.0 / 3.0);
  CHECK(rouge_1("x y", "a b") == 0.0);
  CHECK(rouge_1("the the the", "the cat") == 2.0 / 5.0);
  CHECK(rouge_1("The CAT", "the cat") == 1.0);
  CHECK(rouge_1("", "a") == 0.0);
}

TEST_CASE("rouge-l fixtures") {
  CHECK(rouge_l("the cat sat", "the cat ran") == 2.0 / 3.0);
  CHECK(rouge_l("a b c", "a b c") == 1.0);
  CHECK(rouge_l("a b c d", "a c d") == 6.0 / 7.0);
  CHECK(rouge_l("d c b a", "a b c d") == 1.0 / 4.0);
  CHECK(rouge_l("x", "y z") == 0.0);
  CHECK(rouge_l("a x b y c", "a b c") == 3.0 / 4.0);
  // Order matters for the subsequence but not for unigram overlap.
  CHECK(rouge_l("b a", "a b") == 1.0 / 2.0);
  CHECK(rouge_1("b a", "a b") == 1.0);
}

TEST_CASE("macro-f1 fixtures") {
  CHECK(macro_f1({"a", "b"}, {"a", "b"}) == 1.0);
  // a: tp1 fp0 fn1 -> 2/3; b: tp1 fp1 fn0 -> 2/3.
  CHECK(macro_f1({"a", "b", "b"}, {"a", "a", "b"}) == 2.0 / 3.0);
  // a: 2/3, c: 0 (c only predicted).
  CHECK(macro_f1({"a", "c"}, {"a", "a"}) == 1.0 / 3.0);
  // a: tp1 fp0 fn1 -> 2/3; b: tp1 fp1 fn0 -> 2/3; c: tp1 -> 1. Mean 7/9.
  CHECK(macro_f1({"a", "b", "b", "c"}, {"a", "a", "b", "c"}) == 7.0 / 9.0);
  CHECK(macro_f1({"x"}, {"y"}) == 0.0);
  // a: tp1 fp2 fn0 -> 1/2; b: tp1 fp0 fn1 -> 2/3; c: 0. Mean 7/18.
  CHECK(macro_f1({"a", "a", "b", "a"}, {"a", "b", "b", "c"}) == 7.0 / 18.0);
  CHECK_THROWS(macro_f1({}, {}));
  CHECK_THROWS(macro_f1({"a"}, {"a", "b"}));
}

TEST_CASE("macro-f1 class set is gold union predictions") {
  // a: tp1 fp1 fn0 -> 2/3; b: tp1 fp1 fn1 -> 1/2; c: tp0 fp0 fn1 -> 0. Mean 7/18.
  CHECK(macro_f1({"a", "a", "b", "b"}, {"a", "b", "b", "c"}) == 7.0 / 18.0);
  // a: tp1 fp0 fn1 -> 2/3; b: tp2 fp1 fn0 -> 4/5. Mean 11/15.
  CHECK(macro_f1({"a", "b", "b", "b"}, {"a", "a", "b", "b"}) == 11.0 / 15.0);
}

TEST_CASE("accuracy fixtures") {
  CHECK(accuracy({"a", "b"}, {"a", "b"}) == 1.0);
  CHECK(accuracy({"a", "b", "c"}, {"a", "x", "y"}) == 1.0 / 3.0);
  CHECK(accuracy({"a"}, {"b"}) == 0.0);
}

TEST_CASE("mae and rmse fixtures") {
  CHECK(mae({1, 2}, {1, 4}) == 1.0);
  CHECK(rmse({1, 2}, {1, 4}) == std::sqrt(2.0));
  CHECK(mae({3, 3, 3}, {3, 3, 3}) == 0.0);
  CHECK(rmse({3, 3, 3}, {3, 3, 3}) == 0.0);
  CHECK(mae({1, 5, 3}, {2, 3, 3}) == 1.0);
  CHECK(rmse({1, 5, 3}, {2, 3, 3}) == std::sqrt(5.0 / 3.0));
  CHECK(mae({5}, {1}) == 4.0);
  CHECK(rmse({5}, {1}) == 4.0);
  CHECK(mae({1, 2, 3, 4}, {2, 2, 2, 2}) == 1.0);
  CHECK(rmse({1, 2, 3, 4}, {2, 2, 2, 2}) == std::sqrt(6.0 / 4.0));
  CHECK(mae({1, 1, 1}, {2, 1, 1}) == 1.0 / 3.0);
  CHECK_THROWS(mae({}, {}));
}

TEST_CASE("rating parse policy") {
  CHECK(parse_rating("4") == 4);
  CHECK(parse_rating("w3 9") == 3);
  CHECK(parse_rating("0") == 1);
  CHECK(parse_rating("8") == 5);
  CHECK(parse_rating("c1") == 1);
  CHECK(parse_rating("w") == -1);
  CHECK(rating_error("w", 1) == kRatingParseFailureError);
  CHECK(rating_error("2", 5) == 3);
  CHECK(rating_error("", 3) == kRatingParseFailureError);
}

TEST_CASE("bm25 matches hand-scored toy corpus") {
  Bm25Index idx({{"a", "b"}, {"a", "c", "c"}, {"d"}});
  // N = 3, avgdl = 2.
  const double idf_c = std::log(2.5 / 1.5 + 1.0);
  const double idf_a = std::log(1.5 / 2.5 + 1.0);
  CHECK(idx.score({"c"}, 1) == doctest::Approx(idf_c * 2 * 2.2 / (2 + 1.2 * (0.25 + 0.75 * 1.5))).epsilon(1e-12));
  CHECK(idx.score({"c"}, 0) == 0.0);
  CHECK(idx.score({"a"}, 0) == doctest::Approx(idf_a).epsilon(1e-12));
  CHECK(idx.score({"a"}, 1) == doctest::Approx(idf_a * 2.2 / (1 + 1.2 * (0.25 + 0.75 * 1.5))).epsilon(1e-12));
  CHECK(idx.score({"a", "d"}, 2) == doctest::Approx(std::log(2.5 / 1.5 + 1.0) * 2.2 / (1 + 1.2 * (0.25 + 0.75 * 0.5)))
                                        .epsilon(1e-12));
  CHECK(idx.top({"a"}, 3) == std::vector<std::size_t>{0, 1, 2});
  CHECK(idx.top({"c"}, 1) == std::vector<std::size_t>{1});
}

TEST_CASE("lexical retrieval") {
  std::vector<HistoryItem> h{{"w124 f1 f2 f3", "c1", ItemKind::kTask},
                             {"w125 f9 f10 f11", "3", ItemKind::kTask},
                             {"w124 f4 f5 f6", "c2", ItemKind::kTask}};
  CHECK(lexical_retrieve("w125 f9 f10 f11", h, 1).at(0) == &h[1]);
  CHECK(lexical_retrieve("w124 f1 f2 f3", h, 0).empty());
  CHECK(lexical_retrieve("w124 f1 f2 f3", {}, 2).empty());
  CHECK(lexical_retrieve("w124 f1 f2 f3", h, 5).size() == 3);
  // No overlap at all keeps document order.
  auto r = lexical_retrieve("w126 f60", h, 2);
  CHECK(r.at(0) == &h[0]);
  CHECK(r.at(1) == &h[1]);
}

TEST_CASE("corpus splits and prototype coverage") {
  TaskSpec spec;
  CorpusCounts counts;
  auto c = generate_corpus(spec, counts, 7);
  CHECK(c.users.size() == 260);
  CHECK_NOTHROW(c.splits.check_disjoint());
  CHECK(c.splits.base.size() == 160);
  CHECK(c.splits.sharer_candidates.size() == 80);
  CHECK(c.splits.targets.size() == 20);
  for (std::size_t i = 0; i < c.users.size(); ++i) CHECK(c.users[i].user_id == i);

  std::vector<int> counted(static_cast<std::size_t>(spec.prototypes), 0);
  for (auto id : c.splits.sharer_candidates) ++counted[static_cast<std::size_t>(c.users[id].prototype)];
  CHECK(counted == c.candidate_coverage);
  for (int n : counted) CHECK(n >= 1);

  for (const auto& u : c.users) {
    CHECK(u.history_size() >= static_cast<std::size_t>(spec.history_min + spec.freeform_items));
    CHECK(u.history_size() <= static_cast<std::size_t>(spec.history_max + spec.freeform_items));
    std::set<std::string> inputs;
    for (const auto& it : u.items) inputs.insert(it.input);
    for (const auto& q : u.queries) CHECK(inputs.count(q.input) == 0);
  }
}

TEST_CASE("noise-free users follow their prototype exactly") {
  TaskSpec spec;
  spec.noise = 0.0;
  CorpusCounts counts{8, 4, 4};
  auto c = generate_corpus(spec, counts, 3);
  for (const auto& u : c.users) {
    const auto& p = c.prototypes[static_cast<std::size_t>(u.prototype)];
    for (const auto& it : u.items)
      if (it.kind == ItemKind::kTask) CHECK(*it.output == prototype_answer(spec, p, it.input));
    for (const auto& q : u.queries) CHECK(q.target == prototype_answer(spec, p, q.input));
  }
}

TEST_CASE("constant prototype gives identical classification targets") {
  TaskSpec spec;
  Prototype p;
  p.label.assign(static_cast<std::size_t>(spec.categories), 2);
  p.rating.assign(static_cast<std::size_t>(spec.categories), 4);
  std::set<std::string> answers;
  for (int a = 0; a < 8; ++a)
    answers.insert(prototype_answer(spec, p, "w124 f" + std::to_string(a) + " f" + std::to_string(a + 8) + " f" +
                                                 std::to_string(a + 1)));
  CHECK(answers.size() == 1);
}

TEST_CASE("generation is deterministic and seed-sensitive") {
  TaskSpec spec;
  CorpusCounts counts{6, 4, 2};
  CHECK(corpus_to_jsonl(generate_corpus(spec, counts, 5).users) ==
        corpus_to_jsonl(generate_corpus(spec, counts, 5).users));
  CHECK(corpus_to_jsonl(generate_corpus(spec, counts, 5).users) !=
        corpus_to_jsonl(generate_corpus(spec, counts, 6).users));
}

TEST_CASE("invalid specs are rejected") {
  TaskSpec spec;
  spec.categories = 7;
  CHECK_THROWS(generate_corpus(spec, {}, 1));
  spec = {};
  spec.noise = 0.7;
  CHECK_THROWS(generate_corpus(spec, {}, 1));
  spec = {};
  CHECK_THROWS(generate_corpus(spec, {0, 1, 1}, 1));
}
