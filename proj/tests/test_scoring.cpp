#include <doctest.h>

#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

#include "scoring_oracle.hpp"
#include "test_util.hpp"
#include "trajlab/error.hpp"
#include "trajlab/scoring.hpp"

using namespace trajlab;

TEST_CASE("text_eval parses and validates") {
  auto t = parse_text_eval(R"({"pick_point_assessment":4,"rule_assessment":5,"overall_strategy_assessment":4})");
  CHECK(t == TextEval{4, 4, 5});
  CHECK_THROWS_AS(parse_text_eval(R"({"pick_point_assessment":7,"rule_assessment":5,"overall_strategy_assessment":4})"),
                  SchemaError);
  CHECK_THROWS_AS(parse_text_eval(R"({"pick_point_assessment":-1,"rule_assessment":5,"overall_strategy_assessment":4})"),
                  SchemaError);
  CHECK_THROWS_AS(parse_text_eval(R"({"pick_point_assessment":4,"rule_assessment":5})"), SchemaError);
  CHECK_THROWS_AS(parse_text_eval(R"({"pick_point_assessment":"4","rule_assessment":5,"overall_strategy_assessment":4})"),
                  SchemaError);
  CHECK_THROWS_AS(parse_text_eval(R"({"pick_point_assessment":3.5,"rule_assessment":5,"overall_strategy_assessment":4})"),
                  SchemaError);
  // an integral float is still an integer score
  CHECK(parse_text_eval(R"({"pick_point_assessment":3.0,"rule_assessment":5,"overall_strategy_assessment":4})").pick_point == 3);
  CHECK_THROWS_AS(parse_text_eval("no json here"), NoJsonFound);
}

TEST_CASE("evaluator chatter around the object") {
  std::string raw =
      "Sure! Here is my marking:\n```json\n"
      R"J({"equation": 5, "properties": 4, "points": 3, "range": 5, "annotations": 2, "consistency": 4, "note": "a } in {a string\""})J"
      "\n```\nLet me know {if} you need more.";
  auto c = parse_code_eval(raw);
  CHECK(c == CodeEval{5, 4, 3, 5, 2, 4});
  auto [b, e] = find_json_object(raw);
  CHECK(raw[b] == '{');
  CHECK(raw[e - 1] == '}');
  // balanced but invalid candidates are skipped
  CHECK(parse_ans_eval(R"({not json} then {"ans_match":"incorrect"})").correct == false);
}

TEST_CASE("ans_eval") {
  CHECK(parse_ans_eval(R"({"ans_match":"correct"})").correct);
  CHECK_FALSE(parse_ans_eval(R"({"ans_match":"incorrect"})").correct);
  CHECK(parse_ans_eval(R"({"ans_match":" *Correct* "})").correct);
  CHECK_THROWS_AS(parse_ans_eval(R"({"ans_match":"maybe"})"), SchemaError);
  CHECK_THROWS_AS(parse_ans_eval(R"({"ans_match":true})"), SchemaError);
}

TEST_CASE("rule_extract") {
  auto r = parse_rule_extract(R"J({"overall_strategy":"complete the square",
    "key_pick_points":["vertex (1,2)","axis x=1"],
    "rules":[{"step":1,"rule":"a^2-b^2=(a-b)(a+b)","rule_type":"identity","explicit_or_implicit":"explicit"},
             {"step":"2","rule":"x=-b/2a","rule_type":"formula","explicit_or_implicit":"implicit"}]})J");
  CHECK(r.overall_strategy == "complete the square");
  CHECK(r.key_pick_points.size() == 2);
  REQUIRE(r.rules.size() == 2);
  CHECK(r.rules[0].step == "1");
  CHECK(r.rules[1].step == "2");
  CHECK(r.rules[1].explicit_or_implicit == "implicit");
  CHECK(parse_rule_extract(r.to_json()) == r);

  CHECK_THROWS_AS(parse_rule_extract(R"({"overall_strategy":"s","key_pick_points":"x","rules":[]})"), SchemaError);
  CHECK_THROWS_AS(parse_rule_extract(R"({"overall_strategy":"s","key_pick_points":[],"rules":[{"step":1}]})"),
                  SchemaError);
  CHECK_NOTHROW(parse_evaluator_json(EvalKind::rule_extract,
                                     R"({"overall_strategy":"s","key_pick_points":[],"rules":[]})"));
}

TEST_CASE("parser is total over arbitrary text") {
  std::mt19937_64 gen(7);
  const std::string alphabet = "{}[]\":,\\ abc01259-.eE\ntruefalsnul\x80\xff";
  const std::vector<std::string> seeds = {
      R"({"pick_point_assessment":4,"rule_assessment":5,"overall_strategy_assessment":4})",
      R"({"equation":5,"properties":4,"points":3,"range":5,"annotations":2,"consistency":4})",
      R"({"ans_match":"correct"})",
      R"({"overall_strategy":"s","key_pick_points":["a"],"rules":[{"step":1,"rule":"r","rule_type":"t","explicit_or_implicit":"e"}]})"};
  std::uniform_int_distribution<int> len(0, 200);
  int parsed = 0;
  for (int iter = 0; iter < 20000; ++iter) {
    std::string s;
    if (iter % 2 == 0) {
      int n = len(gen);
      for (int i = 0; i < n; ++i) s += alphabet[gen() % alphabet.size()];
    } else {
      // mutate a valid document
      s = seeds[gen() % seeds.size()];
      int edits = 1 + static_cast<int>(gen() % 4);
      for (int k = 0; k < edits && !s.empty(); ++k) {
        std::size_t at = gen() % s.size();
        switch (gen() % 3) {
          case 0: s.erase(at, 1); break;
          case 1: s.insert(at, 1, alphabet[gen() % alphabet.size()]); break;
          default: s[at] = alphabet[gen() % alphabet.size()];
        }
      }
    }
    for (auto kind : {EvalKind::text_eval, EvalKind::code_eval, EvalKind::ans_eval, EvalKind::rule_extract}) {
      try {
        parse_evaluator_json(kind, s);
        ++parsed;
      } catch (const SchemaError&) {
      } catch (const NoJsonFound&) {
      } catch (...) {
        FAIL("untyped failure on input: " << s);
      }
    }
  }
  CHECK(parsed > 0);
}

TEST_CASE("aggregate examples") {
  auto card = aggregate(TextEval{4, 4, 5}, std::nullopt, std::nullopt, std::nullopt);
  CHECK(*card.normalized.text == 0.9);
  CHECK_FALSE(card.normalized.code);
  CHECK_FALSE(card.normalized.code_acc);

  card = aggregate(std::nullopt, CodeEval{5, 5, 5, 5, 5, 5}, true, true);
  CHECK(*card.normalized.code == 1.0);
  CHECK(*card.normalized.text_code == 1.0);
  CHECK(*card.normalized.code_acc == 1.0);
  CHECK(*card.normalized.ans_acc == 1.0);

  card = aggregate(std::nullopt, std::nullopt, false, false);
  CHECK(*card.normalized.code_acc == 0.0);
  CHECK(*card.normalized.ans_acc == 0.0);
  CHECK(*card.normalized.avg() == 0.0);
}

TEST_CASE("aggregate over the full 0-5 grid") {
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t checked = 0;
  for (int e = 0; e <= 5; ++e)
    for (int p = 0; p <= 5; ++p)
      for (int pt = 0; pt <= 5; ++pt)
        for (int r = 0; r <= 5; ++r)
          for (int a = 0; a <= 5; ++a)
            for (int c = 0; c <= 5; ++c) {
              // text fields reuse two of the axes so both halves see every value
              TextEval t{c, e, a};
              CodeEval code{e, p, pt, r, a, c};
              auto card = aggregate(t, code, (e + c) % 2 == 0, (p + r) % 2 == 0);
              const auto& n = card.normalized;
              const int sum = e + p + pt + r + a;
              CHECK(*n.text == static_cast<double>(e + a) / 10.0);
              CHECK(std::fabs(*n.code * 25.0 - sum) <= 1e-12);
              CHECK(*n.code == static_cast<double>(sum) / 25.0);
              CHECK(*n.text_code == static_cast<double>(c) / 5.0);
              CHECK(*n.code_acc == ((e + c) % 2 == 0 ? 1.0 : 0.0));
              CHECK(*n.ans_acc == ((p + r) % 2 == 0 ? 1.0 : 0.0));
              for (auto m : kAllMetrics) {
                CHECK(*n.get(m) >= 0.0);
                CHECK(*n.get(m) <= 1.0);
              }
              if (e < 5) {
                auto up = aggregate(TextEval{c, e + 1, a}, CodeEval{e + 1, p, pt, r, a, c}, std::nullopt, std::nullopt);
                CHECK(*up.normalized.text > *n.text);
                CHECK(*up.normalized.code > *n.code);
              }
              ++checked;
            }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(checked == 46656);
  CHECK(secs < 1.0);
}

TEST_CASE("answer_exact_match") {
  CHECK(*answer_exact_match("b", "B", QuestionType::multiple_choice).matched);
  CHECK(*answer_exact_match("  (C).  ", "(c)", QuestionType::multiple_choice).matched);
  CHECK_FALSE(*answer_exact_match("A", "B", QuestionType::multiple_choice).matched);
  CHECK(*answer_exact_match("0.5000001", "0.5", QuestionType::numeric_blank).matched);
  CHECK_FALSE(*answer_exact_match("0.50001", "0.5", QuestionType::numeric_blank).matched);
  CHECK(*answer_exact_match("+3.", "3", QuestionType::numeric_blank).matched);
  CHECK(*answer_exact_match("0", "0.0", QuestionType::numeric_blank).matched);
  auto routed = answer_exact_match("1/2", "0.5", QuestionType::numeric_blank);
  CHECK(routed.routed_to_llm);
  CHECK_FALSE(routed.matched);
  auto other = answer_exact_match("x", "x", QuestionType::other);
  CHECK(other.routed_to_llm);
  CHECK_FALSE(other.matched);
}

TEST_CASE("correlation examples") {
  CHECK(pearson({1, 2, 3}, {2, 4, 6}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(spearman({1, 2, 3}, {2, 4, 6}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(pearson({1, 2, 3}, {6, 4, 2}) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(spearman({1, 2, 3}, {6, 4, 2}) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(average_ranks({1, 2, 2, 3}) == std::vector<double>{1, 2.5, 2.5, 4});
  CHECK(spearman({1, 2, 2, 3}, {1, 2, 3, 4}) == pearson({1, 2.5, 2.5, 4}, {1, 2, 3, 4}));
  CHECK_THROWS_AS(pearson({1, 1, 1}, {1, 2, 3}), ZeroVariance);
  CHECK_THROWS_AS(spearman({1, 2, 3}, {5, 5, 5}), ZeroVariance);
  CHECK_THROWS_AS(pearson({1, 2, 3}, {1, 2}), LengthMismatch);
  CHECK_THROWS_AS(spearman({1, 2}, {1, 2, 3}), LengthMismatch);
  CHECK_THROWS_AS(pearson({1, 2}, {1, 2}), InsufficientData);
  // 0.1 * 3 style rounding must not hide a constant column
  CHECK_THROWS_AS(pearson({0.1, 0.1, 0.1}, {1, 2, 3}), ZeroVariance);
}

TEST_CASE("correlation matches the naive oracle on 1000 vectors") {
  std::mt19937_64 gen(2024);
  std::vector<double> x, y;
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    oracle::random_pair(gen, x, y);
    worst = std::max(worst, static_cast<double>(std::fabs(pearson(x, y) - oracle::naive_pearson(x, y))));
    worst = std::max(worst, static_cast<double>(std::fabs(spearman(x, y) - oracle::naive_spearman(x, y))));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("correlation properties") {
  std::mt19937_64 gen(5);
  std::vector<double> x, y;
  for (int i = 0; i < 200; ++i) {
    oracle::random_pair(gen, x, y);
    double a = 0.5 + static_cast<double>(gen() % 100);
    double b = static_cast<double>(gen() % 1000) - 500.0;
    std::vector<double> lin(x.size()), mono(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) {
      lin[k] = a * x[k] + b;
      mono[k] = std::exp(x[k] / 4.0) + x[k] * x[k] * x[k];
    }
    CHECK(std::fabs(pearson(x, lin) - 1.0) <= 1e-12);
    CHECK(spearman(mono, y) == spearman(x, y));
    CHECK(spearman(x, y) == spearman(y, x));
    double p = pearson(x, y), s = spearman(x, y);
    CHECK(p >= -1.0);
    CHECK(p <= 1.0);
    CHECK(s >= -1.0);
    CHECK(s <= 1.0);
  }
}

namespace {

ScoreCard card_with(bool correct, int pick, int rule, int code_level, int consistency) {
  return aggregate(TextEval{pick, pick, rule}, CodeEval{code_level, code_level, code_level, code_level, code_level, consistency},
                   true, correct);
}

}  // namespace

TEST_CASE("correlation report on monotone corpora") {
  // every metric is a nondecreasing function of answer correctness
  std::vector<ScoreCard> cards;
  for (int i = 0; i < 30; ++i) {
    bool ok = i % 3 != 0;
    cards.push_back(ok ? card_with(true, 5, 4, 4, 5) : card_with(false, 1, 2, 2, 1));
  }
  auto out = correlation_report(cards, default_metric_pairs());
  REQUIRE(out.reports.size() == 3);
  CHECK(out.flagged.empty());
  for (const auto& r : out.reports) {
    CHECK(r.spearman == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.pearson == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.n == 30);
  }
  std::ostringstream csv;
  write_correlation_csv(out.reports, csv);
  CHECK(csv.str().rfind("pair,pearson,spearman,n\nans_acc-text,1,1,30\n", 0) == 0);

  // continuous monotone link between text and code
  std::vector<ScoreCard> graded;
  for (int pick = 0; pick <= 5; ++pick)
    for (int rule = 0; rule <= 5; ++rule) {
      int level = std::min(5, (pick + rule) / 2);
      graded.push_back(card_with(pick + rule >= 6, pick, rule, level, level));
    }
  auto mono = correlation_report(graded, {{Metric::text, Metric::code}, {Metric::code, Metric::text_code}});
  REQUIRE(mono.reports.size() == 2);
  CHECK(mono.reports[1].spearman == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(mono.reports[0].spearman > 0.9);
}

TEST_CASE("correlation report flags degenerate pairs") {
  std::vector<ScoreCard> cards;
  for (int i = 0; i < 5; ++i) cards.push_back(card_with(true, i, i, i, i));
  auto out = correlation_report(cards, default_metric_pairs());
  CHECK(out.reports.empty());
  REQUIRE(out.flagged.size() == 3);
  CHECK(out.flagged[0].reason == "zero variance");

  // code absent on all but two cards
  std::vector<ScoreCard> sparse;
  for (int i = 0; i < 6; ++i)
    sparse.push_back(aggregate(TextEval{i % 6, i % 6, 3}, i < 2 ? std::optional<CodeEval>(CodeEval{i, i, i, i, i, i}) : std::nullopt,
                               std::nullopt, i % 2 == 0));
  out = correlation_report(sparse, default_metric_pairs());
  REQUIRE(out.reports.size() == 1);
  CHECK(out.reports[0].metric_pair == MetricPair{Metric::ans_acc, Metric::text});
  CHECK(out.flagged.size() == 2);
  CHECK(out.flagged[0].reason == "insufficient data");

  CHECK_THROWS_AS(correlation_report({cards[0], cards[1]}, default_metric_pairs()), InsufficientData);
}

TEST_CASE("metric pair names") {
  CHECK(pair_name({Metric::ans_acc, Metric::text_code}) == "ans_acc-text_code");
  CHECK(metric_pair_from_string("ans_acc-text_code") == MetricPair{Metric::ans_acc, Metric::text_code});
  CHECK_FALSE(metric_pair_from_string("ans_acc"));
  CHECK_FALSE(metric_pair_from_string("ans_acc-bogus"));
}

TEST_CASE("scorecard JSONL round trip") {
  testutil::TempDir dir;
  std::vector<ScoreCard> cards;
  cards.push_back(aggregate(TextEval{3, 2, 4}, CodeEval{1, 2, 3, 4, 5, 0}, false, true));
  cards.push_back(aggregate(std::nullopt, std::nullopt, std::nullopt, false));
  cards[0].sample_id = "q1";
  cards[1].sample_id = "q2";
  write_scorecards(cards, (dir / "cards.jsonl").string());
  CHECK(read_scorecards((dir / "cards.jsonl").string()) == cards);
  CHECK(scorecard_line(cards[1]).find("\"code\":null") != std::string::npos);
  CHECK_THROWS_AS(scorecard_from_json("{\"sample_id\":1}"), SchemaError);

  auto means = mean_scores(cards);
  CHECK(*means.ans_acc == 0.5);
  CHECK(*means.code_acc == 0.0);
  CHECK(*means.text == 0.6);
}
