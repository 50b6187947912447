#include <doctest.h>

#include <fstream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "probe_fixtures.hpp"
#include "test_util.hpp"
#include "trajlab/codesyntax.hpp"
#include "trajlab/error.hpp"

using namespace trajlab;

namespace {

std::string text_of(std::string_view src, const SyntaxSpan& s) { return std::string(src.substr(s.start, s.end - s.start)); }

nlohmann::json load_fixture() {
  std::ifstream in(std::string(TRAJLAB_TEST_DATA) + "/fixtures/syntax_spans.json");
  REQUIRE(in.good());
  return nlohmann::json::parse(in);
}

std::vector<SyntaxSpan> expected_spans(const nlohmann::json& arr) {
  std::vector<SyntaxSpan> out;
  for (const auto& s : arr) {
    out.push_back({*syntax_category_from_string(s.at("category").get<std::string>()), s.at("fine_label"),
                   s.at("start"), s.at("end"), s.at("depth")});
  }
  return out;
}

std::string describe(const std::vector<SyntaxSpan>& spans) {
  std::ostringstream os;
  for (const auto& s : spans) {
    os << to_string(s.category) << ' ' << s.fine_label << ' ' << s.start << ' ' << s.end << ' ' << s.depth << '\n';
  }
  return os.str();
}

}  // namespace

TEST_CASE("assignment with a numpy call") {
  const std::string src = "x = np.array([1,2])";
  const auto spans = label_spans(src);
  REQUIRE(spans.size() == 2);
  CHECK(spans[0].category == SyntaxCategory::data_flow);
  CHECK(spans[0].fine_label == "Assign");
  CHECK(text_of(src, spans[0]) == src);
  CHECK(spans[1].category == SyntaxCategory::function_call);
  CHECK(spans[1].fine_label == "np.array");
  CHECK(text_of(src, spans[1]) == "np.array([1,2])");
  CHECK(spans[1].depth == 1);
}

TEST_CASE("blank source yields nothing") {
  CHECK(label_spans("").empty());
  CHECK(label_spans("   \n\n# only a comment\n").empty());
}

TEST_CASE("for loop with nested call and augmented assignment") {
  const std::string src = "for i in range(3):\n    s += i";
  const auto spans = label_spans(src);
  REQUIRE(spans.size() == 3);
  CHECK(spans[0].fine_label == "For");
  CHECK(spans[0].category == SyntaxCategory::control_flow);
  CHECK(spans[0].depth == 0);
  CHECK(spans[1].fine_label == "range");
  CHECK(spans[1].depth == 1);
  CHECK(spans[2].fine_label == "AugAssign");
  CHECK(spans[2].category == SyntaxCategory::data_flow);
  CHECK(spans[2].depth == 1);
  const auto outer = label_spans(src, SpanMode::outermost_only);
  REQUIRE(outer.size() == 1);
  CHECK(outer[0].fine_label == "For");
}

TEST_CASE("syntax errors carry a position") {
  try {
    label_spans("x = 1\ny = (2,\n");
    FAIL("expected SyntaxError");
  } catch (const SyntaxError& e) {
    CHECK(e.line() == 2);
    CHECK(e.column() == 4);
  }
  try {
    label_spans("if x:\npass\n");
    FAIL("expected SyntaxError");
  } catch (const SyntaxError& e) {
    CHECK(e.line() == 2);
  }
  CHECK_THROWS_AS(label_spans("def f(:\n  pass"), SyntaxError);
  CHECK_THROWS_AS(label_spans("print 'hello'"), SyntaxError);
  CHECK_THROWS_AS(label_spans("  x = 1"), SyntaxError);
  CHECK_THROWS_AS(label_spans("f() = 3"), SyntaxError);
  CHECK_THROWS_AS(label_spans("s = 'open"), SyntaxError);
  CHECK_THROWS_AS(label_spans("x = f'{}'"), SyntaxError);
  CHECK_THROWS_AS(label_spans("if x:\n        a = 1\n    b = 2\n"), SyntaxError);
  CHECK_THROWS_AS(label_spans("match cmd:\n    case 1:\n        pass\n"), SyntaxError);
  // `match` is still an ordinary name.
  CHECK(label_spans("match = re.match(p, s)\nmatch.group(0)\n").size() == 3);
}

TEST_CASE("fixture corpus agrees exactly with the reference parse") {
  const auto fixture = load_fixture();
  REQUIRE(fixture.at("cases").size() == 25);
  for (const auto& c : fixture.at("cases")) {
    const auto name = c.at("name").get<std::string>();
    const auto src = c.at("source").get<std::string>();
    INFO(name);
    const auto all = label_spans(src);
    CHECK(describe(all) == describe(expected_spans(c.at("all"))));
    CHECK(describe(label_spans(src, SpanMode::outermost_only)) == describe(expected_spans(c.at("outermost_only"))));
  }
}

TEST_CASE("property: every statement line is covered and outermost spans are disjoint") {
  const auto fixture = load_fixture();
  for (const auto& c : fixture.at("cases")) {
    const auto src = c.at("source").get<std::string>();
    INFO(c.at("name").get<std::string>());
    const auto all = label_spans(src);
    // Each line holding code (not blank, comment, or inside a bracket or
    // string continuation) starts within some span.
    std::size_t line_start = 0;
    while (line_start < src.size()) {
      auto line_end = src.find('\n', line_start);
      if (line_end == std::string::npos) line_end = src.size();
      const auto first = src.find_first_not_of(" \t", line_start);
      if (first < line_end && src[first] != '#') {
        const bool covered = std::any_of(all.begin(), all.end(), [&](const SyntaxSpan& s) {
          return s.start <= first && first < s.end;
        });
        const bool decorator = src[first] == '@';
        CHECK((covered || decorator));
      }
      line_start = line_end + 1;
    }
    const auto outer = label_spans(src, SpanMode::outermost_only);
    for (std::size_t i = 0; i < outer.size(); ++i) {
      CHECK(outer[i].depth == 0);
      for (std::size_t j = 0; j < outer.size(); ++j) {
        if (i == j) continue;
        const bool nested = outer[j].start <= outer[i].start && outer[i].end <= outer[j].end;
        CHECK_FALSE(nested);
      }
    }
    // Deterministic and sorted.
    CHECK(label_spans(src) == all);
    CHECK(std::is_sorted(all.begin(), all.end(), [](const SyntaxSpan& a, const SyntaxSpan& b) {
      return std::tie(a.start, a.end, a.category) < std::tie(b.start, b.end, b.category);
    }));
    for (const auto& s : all) {
      CHECK(s.start < s.end);
      CHECK(s.end <= src.size());
      CHECK_FALSE(s.fine_label.empty());
    }
  }
}

TEST_CASE("map_spans_to_tokens") {
  // "x = f(1)": tokens x | " =" | " f" | "(" | "1" | ")"
  TokenMap map{"s", 1, {{0, 1, 10, 11}, {1, 3, 11, 12}, {3, 5, 12, 13}, {5, 6, 13, 14}, {6, 7, 14, 15}, {7, 8, 15, 16}}};
  map.validate();
  const SyntaxSpan exact{SyntaxCategory::data_flow, "Assign", 6, 7, 0};
  const SyntaxSpan straddle{SyntaxCategory::function_call, "f", 4, 6, 0};
  const SyntaxSpan outside{SyntaxCategory::function_call, "g", 8, 12, 0};
  const auto m = map_spans_to_tokens({exact, straddle, outside}, map);
  REQUIRE(m.mapped.size() == 2);
  CHECK(m.mapped[0].tokens == TokenRange{14, 15});
  CHECK(m.mapped[1].tokens == TokenRange{12, 14});
  CHECK(m.dropped == 1);

  CHECK(map_spans_to_tokens({}, map).mapped.empty());
  CHECK(map_spans_to_tokens({}, TokenMap{}).mapped.empty());
  CHECK_THROWS_AS(map_spans_to_tokens({exact}, TokenMap{"s", 1, {}}), CoverageError);
}

TEST_CASE("token map JSONL round trip and validation") {
  testutil::TempDir dir;
  const std::vector<TokenMap> maps{{"a", 1, {{0, 2, 5, 6}, {2, 4, 6, 8}}}, {"b", 3, {}}};
  const auto path = (dir / "maps.jsonl").string();
  write_token_maps(maps, path);
  CHECK(read_token_maps(path) == maps);
  CHECK(testutil::slurp(path).starts_with(R"({"sample_id":"a","step":1,"pairs":[[0,2,5,6],[2,4,6,8]]})"));
  CHECK_THROWS_AS(token_map_from_json(R"({"sample_id":"a","step":1,"pairs":[[0,2,5,6],[1,4,6,8]]})"), FormatError);
  CHECK_THROWS_AS(token_map_from_json(R"({"sample_id":"a","step":1,"pairs":[[0,2,5]]})"), FormatError);
  CHECK_THROWS_AS(token_map_from_json(R"({"sample_id":"a"})"), FormatError);
  CHECK_THROWS_AS(read_token_maps((dir / "none").string()), IoError);
}

namespace {

// One transcript per sample with the given code in step 1, a byte-per-token
// map, and a code_token vector per byte at `layer`.
struct SyntheticCorpus {
  ActivationSet set{4};
  std::vector<Transcript> transcripts;
  std::vector<TokenMap> maps;

  void add(const std::string& id, const std::string& code, int layer, std::mt19937_64& rng) {
    Transcript t;
    t.sample_id = id;
    Step s;
    s.index = 1;
    s.text = "work";
    s.code = CodeBlock::make(1, code);
    t.steps.push_back(s);
    transcripts.push_back(t);
    TokenMap m{id, 1, {}};
    std::normal_distribution<float> g(0, 1);
    for (std::size_t b = 0; b < s.code->source.size(); ++b) {
      m.pairs.push_back({b, b + 1, static_cast<int>(b), static_cast<int>(b) + 1});
      std::vector<float> v{g(rng), g(rng), g(rng), static_cast<float>(b)};
      set.add(id, layer, Marker::code_token, 1, static_cast<int>(b), v);
    }
    maps.push_back(m);
  }
};

}  // namespace

TEST_CASE("coarse scheme over x = f(1) blocks has two classes") {
  std::mt19937_64 rng(1);
  SyntheticCorpus c;
  for (int i = 0; i < 6; ++i) c.add("s" + std::to_string(i), "x = f(1)", 10, rng);
  const auto ds = build_syntax_probe_dataset(c.set, c.transcripts, c.maps, 10);
  CHECK(ds.class_names == std::vector<std::string>{"function_call", "data_flow"});
  CHECK(ds.size() == 12);
  CHECK(ds.layer == 10);
  CHECK_THROWS_AS(build_syntax_probe_dataset(c.set, c.transcripts, c.maps, 20), CoverageError);
}

TEST_CASE("fine scheme merges rare callees") {
  std::mt19937_64 rng(2);
  SyntheticCorpus c;
  for (int i = 0; i < 10; ++i) {
    c.add("a" + std::to_string(i), "y = np.array(v)\nplt.plot(y)\n", 3, rng);
  }
  c.add("rare", "z = np.zeros(3)\n", 3, rng);
  SyntaxDatasetOptions opt;
  opt.scheme = SyntaxScheme::fine_function_call;
  SyntaxDatasetStats stats;
  const auto ds = build_syntax_probe_dataset(c.set, c.transcripts, c.maps, 3, opt, &stats);
  CHECK(ds.class_names == std::vector<std::string>{"<other>", "np.array", "plt.plot"});
  CHECK(ds.class_counts() == std::vector<std::size_t>{1, 10, 10});
  CHECK(stats.code_blocks == 11);

  // Every fine example is also a function_call example in the coarse scheme.
  opt.scheme = SyntaxScheme::coarse;
  const auto coarse = build_syntax_probe_dataset(c.set, c.transcripts, c.maps, 3, opt);
  std::set<RowKey> call_keys;
  for (std::size_t i = 0; i < coarse.size(); ++i) {
    if (coarse.class_names[static_cast<std::size_t>(coarse.labels[i])] == "function_call") call_keys.insert(coarse.keys[i]);
  }
  for (const auto& k : ds.keys) CHECK(call_keys.contains(k));

  // With only the two frequent callees and no remainder, the fine scheme has exactly two classes.
  SyntheticCorpus two;
  for (int i = 0; i < 10; ++i) two.add("a" + std::to_string(i), "y = np.array(v)\nplt.plot(y)\n", 3, rng);
  opt.scheme = SyntaxScheme::fine_function_call;
  CHECK(build_syntax_probe_dataset(two.set, two.transcripts, two.maps, 3, opt).class_names.size() == 2);
}

TEST_CASE("pooling over a single-token span is that token") {
  std::mt19937_64 rng(3);
  SyntheticCorpus c;
  c.add("s0", "x\ny = g()\n", 0, rng);
  c.add("s1", "x\ny = g()\n", 0, rng);
  for (auto pooling : {SpanPooling::mean, SpanPooling::first, SpanPooling::last}) {
    SyntaxDatasetOptions opt;
    opt.pooling = pooling;
    const auto ds = build_syntax_probe_dataset(c.set, c.transcripts, c.maps, 0, opt);
    // The `x` expression statement is the single byte 0.
    bool found = false;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds.keys[i].sample_id == "s0" && ds.keys[i].token == 0) {
        const auto row = c.set.row(0);
        for (Eigen::Index j = 0; j < 4; ++j) CHECK(ds.features(static_cast<Eigen::Index>(i), j) == static_cast<double>(row[static_cast<std::size_t>(j)]));
        found = true;
      }
    }
    CHECK(found);
  }
}

TEST_CASE("syntax dataset skips unparsable and unmapped blocks") {
  std::mt19937_64 rng(4);
  SyntheticCorpus c;
  for (int i = 0; i < 3; ++i) c.add("s" + std::to_string(i), "x = f(1)", 0, rng);
  c.add("bad", "x = = 1", 0, rng);
  Transcript orphan;
  orphan.sample_id = "orphan";
  Step st;
  st.index = 1;
  st.text = "t";
  st.code = CodeBlock::make(1, "y = 2");
  orphan.steps.push_back(st);
  c.transcripts.push_back(orphan);
  SyntaxDatasetStats stats;
  const auto ds = build_syntax_probe_dataset(c.set, c.transcripts, c.maps, 0, {}, &stats);
  CHECK(stats.unparsed_blocks == 1);
  CHECK(stats.unmapped_blocks == 1);
  CHECK(ds.size() == 6);

  SyntheticCorpus single;
  single.add("only", "x = 1", 0, rng);
  CHECK_THROWS_AS(build_syntax_probe_dataset(single.set, single.transcripts, single.maps, 0), ClassTooSmall);
}

TEST_CASE("symbolic dataset labels pooled vectors by question symbols") {
  ActivationSet set(2);
  std::vector<Transcript> ts;
  const std::vector<std::pair<std::string, std::string>> questions{
      {"q1", R"(Find $\frac{1}{2}$)"}, {"q2", R"(Let $\sqrt{2}$)"}, {"q3", R"($\frac{a}{b}+\sqrt{c}$)"},
      {"q4", "no symbols"},           {"q5", R"($\frac{3}{4}$)"}, {"q6", R"($\sqrt{5}$)"}};
  float v = 0;
  for (const auto& [id, q] : questions) {
    Transcript t;
    t.sample_id = id;
    t.question = q;
    ts.push_back(t);
    const std::vector<float> vec{v, v + 1};
    set.add(id, 5, Marker::code_pooled, 1, 0, vec);
    set.add(id, 5, Marker::image_pooled, 0, 0, vec);
    v += 2;
  }
  const auto primary = build_symbolic_probe_dataset(set, ts, Marker::code_pooled, 5);
  CHECK(primary.class_names == std::vector<std::string>{"frac", "sqrt"});
  CHECK(primary.size() == 5);
  CHECK(primary.class_counts() == std::vector<std::size_t>{3, 2});
  const auto exclusive = build_symbolic_probe_dataset(set, ts, Marker::image_pooled, 5, SymbolicLabelMode::exclusive);
  CHECK(exclusive.size() == 4);
  CHECK_THROWS_AS(build_symbolic_probe_dataset(set, ts, Marker::code_step, 5), InvalidArgument);
  CHECK_THROWS_AS(build_symbolic_probe_dataset(set, ts, Marker::code_pooled, 6), ClassTooSmall);
}
