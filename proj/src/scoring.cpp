#include "trajlab/scoring.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "trajlab/error.hpp"

namespace trajlab {

using nlohmann::json;

std::string_view to_string(EvalKind kind) {
  switch (kind) {
    case EvalKind::text_eval: return "text_eval";
    case EvalKind::code_eval: return "code_eval";
    case EvalKind::ans_eval: return "ans_eval";
    case EvalKind::rule_extract: return "rule_extract";
  }
  return "?";
}

namespace {

// End (inclusive) of the balanced object starting at raw[open], or npos.
std::size_t balanced_end(std::string_view raw, std::size_t open) {
  int depth = 0;
  bool in_string = false;
  for (std::size_t i = open; i < raw.size(); ++i) {
    char c = raw[i];
    if (in_string) {
      if (c == '\\') {
        ++i;
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    if (c == '"') {
      in_string = true;
    } else if (c == '{') {
      ++depth;
    } else if (c == '}') {
      if (--depth == 0) return i;
    }
  }
  return std::string_view::npos;
}

json extract_object(std::string_view raw) {
  auto [b, e] = find_json_object(raw);
  return json::parse(raw.substr(b, e - b));
}

const json& require(const json& j, const char* field) {
  auto it = j.find(field);
  if (it == j.end()) throw SchemaError(fmt::format("missing field '{}'", field));
  return *it;
}

int rubric(const json& j, const char* field) {
  const json& v = require(j, field);
  double value = 0;
  if (v.is_number_integer()) {
    if (v.is_number_unsigned()) {
      auto u = v.get<std::uint64_t>();
      if (u > 5) throw SchemaError(fmt::format("field '{}' out of range 0-5", field));
      return static_cast<int>(u);
    }
    auto s = v.get<std::int64_t>();
    if (s < 0 || s > 5) throw SchemaError(fmt::format("field '{}' out of range 0-5", field));
    return static_cast<int>(s);
  }
  if (!v.is_number_float()) throw SchemaError(fmt::format("field '{}' is not an integer", field));
  value = v.get<double>();
  if (!std::isfinite(value) || value != std::floor(value))
    throw SchemaError(fmt::format("field '{}' is not an integer", field));
  if (value < 0 || value > 5) throw SchemaError(fmt::format("field '{}' out of range 0-5", field));
  return static_cast<int>(value);
}

std::string as_text(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  return v.dump(-1, ' ', false, json::error_handler_t::replace);
}

std::string text_field(const json& j, const char* field) {
  const json& v = require(j, field);
  if (v.is_object() || v.is_array() || v.is_null())
    throw SchemaError(fmt::format("field '{}' must be a scalar", field));
  return as_text(v);
}

}  // namespace

std::pair<std::size_t, std::size_t> find_json_object(std::string_view raw) {
  for (std::size_t open = raw.find('{'); open != std::string_view::npos;
       open = raw.find('{', open + 1)) {
    std::size_t close = balanced_end(raw, open);
    if (close == std::string_view::npos) continue;
    auto candidate = raw.substr(open, close - open + 1);
    if (json::accept(candidate)) return {open, close + 1};
  }
  throw NoJsonFound("no JSON object in evaluator output");
}

TextEval parse_text_eval(std::string_view raw) {
  json j = extract_object(raw);
  TextEval t;
  t.overall_strategy = rubric(j, "overall_strategy_assessment");
  t.pick_point = rubric(j, "pick_point_assessment");
  t.rule = rubric(j, "rule_assessment");
  return t;
}

CodeEval parse_code_eval(std::string_view raw) {
  json j = extract_object(raw);
  CodeEval c;
  c.equation = rubric(j, "equation");
  c.properties = rubric(j, "properties");
  c.points = rubric(j, "points");
  c.range = rubric(j, "range");
  c.annotations = rubric(j, "annotations");
  c.consistency = rubric(j, "consistency");
  return c;
}

AnsEval parse_ans_eval(std::string_view raw) {
  json j = extract_object(raw);
  const json& v = require(j, "ans_match");
  if (!v.is_string()) throw SchemaError("field 'ans_match' must be a string");
  std::string s = v.get<std::string>();
  // tolerate *correct* and surrounding blanks, nothing else
  auto junk = [](char c) { return c == '*' || c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
  while (!s.empty() && junk(s.back())) s.pop_back();
  std::size_t b = 0;
  while (b < s.size() && junk(s[b])) ++b;
  s.erase(0, b);
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (s == "correct") return {true};
  if (s == "incorrect") return {false};
  throw SchemaError("field 'ans_match' must be correct or incorrect");
}

RuleExtract parse_rule_extract(std::string_view raw) {
  json j = extract_object(raw);
  RuleExtract r;
  const json& strategy = require(j, "overall_strategy");
  if (!strategy.is_string()) throw SchemaError("field 'overall_strategy' must be a string");
  r.overall_strategy = strategy.get<std::string>();

  const json& points = require(j, "key_pick_points");
  if (!points.is_array()) throw SchemaError("field 'key_pick_points' must be a list");
  for (const auto& p : points) r.key_pick_points.push_back(as_text(p));

  const json& rules = require(j, "rules");
  if (!rules.is_array()) throw SchemaError("field 'rules' must be a list");
  for (const auto& item : rules) {
    if (!item.is_object()) throw SchemaError("rules entries must be objects");
    r.rules.push_back({text_field(item, "step"), text_field(item, "rule"),
                       text_field(item, "rule_type"), text_field(item, "explicit_or_implicit")});
  }
  return r;
}

void parse_evaluator_json(EvalKind kind, std::string_view raw) {
  switch (kind) {
    case EvalKind::text_eval: parse_text_eval(raw); return;
    case EvalKind::code_eval: parse_code_eval(raw); return;
    case EvalKind::ans_eval: parse_ans_eval(raw); return;
    case EvalKind::rule_extract: parse_rule_extract(raw); return;
  }
}

std::string RuleExtract::to_json() const {
  nlohmann::ordered_json j;
  j["overall_strategy"] = overall_strategy;
  j["key_pick_points"] = key_pick_points;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : rules) {
    arr.push_back({{"step", r.step},
                   {"rule", r.rule},
                   {"rule_type", r.rule_type},
                   {"explicit_or_implicit", r.explicit_or_implicit}});
  }
  j["rules"] = std::move(arr);
  return j.dump(-1, ' ', false, nlohmann::ordered_json::error_handler_t::replace);
}

// ---- metrics

std::string_view to_string(Metric m) {
  switch (m) {
    case Metric::ans_acc: return "ans_acc";
    case Metric::text: return "text";
    case Metric::code_acc: return "code_acc";
    case Metric::code: return "code";
    case Metric::text_code: return "text_code";
  }
  return "?";
}

std::optional<Metric> metric_from_string(std::string_view name) {
  for (Metric m : kAllMetrics)
    if (to_string(m) == name) return m;
  return std::nullopt;
}

std::optional<double> NormalizedScores::get(Metric m) const {
  switch (m) {
    case Metric::ans_acc: return ans_acc;
    case Metric::text: return text;
    case Metric::code_acc: return code_acc;
    case Metric::code: return code;
    case Metric::text_code: return text_code;
  }
  return std::nullopt;
}

std::optional<double> NormalizedScores::avg() const {
  double sum = 0;
  int n = 0;
  for (Metric m : kAllMetrics) {
    if (auto v = get(m)) {
      sum += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

ScoreCard aggregate(const std::optional<TextEval>& text, const std::optional<CodeEval>& code,
                    std::optional<bool> exec_ok, std::optional<bool> ans_correct) {
  ScoreCard card;
  if (text) {
    card.raw.overall_strategy = text->overall_strategy;
    card.raw.pick_point = text->pick_point;
    card.raw.rule = text->rule;
    card.normalized.text = ((text->pick_point + text->rule) / 2.0) / 5.0;
  }
  if (code) {
    card.raw.equation = code->equation;
    card.raw.properties = code->properties;
    card.raw.points = code->points;
    card.raw.range = code->range;
    card.raw.annotations = code->annotations;
    card.raw.consistency = code->consistency;
    int sum = code->equation + code->properties + code->points + code->range + code->annotations;
    card.normalized.code = sum / 25.0;
    card.normalized.text_code = code->consistency / 5.0;
  }
  card.code_exec_ok = exec_ok;
  if (exec_ok) card.normalized.code_acc = *exec_ok ? 1.0 : 0.0;
  card.ans_correct = ans_correct;
  if (ans_correct) card.normalized.ans_acc = *ans_correct ? 1.0 : 0.0;
  return card;
}

NormalizedScores mean_scores(const std::vector<ScoreCard>& cards) {
  std::array<double, kMetricCount> sum{};
  std::array<std::size_t, kMetricCount> count{};
  for (const auto& c : cards) {
    for (std::size_t i = 0; i < kMetricCount; ++i) {
      if (auto v = c.normalized.get(kAllMetrics[i])) {
        sum[i] += *v;
        ++count[i];
      }
    }
  }
  NormalizedScores out;
  std::optional<double>* slots[] = {&out.ans_acc, &out.text, &out.code_acc, &out.code,
                                    &out.text_code};
  for (std::size_t i = 0; i < kMetricCount; ++i)
    if (count[i] > 0) *slots[i] = sum[i] / static_cast<double>(count[i]);
  return out;
}

// ---- scorecard store

namespace {

template <class T>
nlohmann::ordered_json opt(const std::optional<T>& v) {
  if (!v) return nullptr;
  return *v;
}

template <class T>
std::optional<T> read_opt(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->get<T>();
}

}  // namespace

std::string scorecard_line(const ScoreCard& card) {
  nlohmann::ordered_json j;
  j["sample_id"] = card.sample_id;
  const RawScores& r = card.raw;
  j["raw"] = {{"overall_strategy", opt(r.overall_strategy)},
              {"pick_point", opt(r.pick_point)},
              {"rule", opt(r.rule)},
              {"equation", opt(r.equation)},
              {"properties", opt(r.properties)},
              {"points", opt(r.points)},
              {"range", opt(r.range)},
              {"annotations", opt(r.annotations)},
              {"consistency", opt(r.consistency)}};
  j["code_exec_ok"] = opt(card.code_exec_ok);
  j["ans_correct"] = opt(card.ans_correct);
  nlohmann::ordered_json n;
  for (Metric m : kAllMetrics) n[std::string(to_string(m))] = opt(card.normalized.get(m));
  j["normalized"] = std::move(n);
  return j.dump(-1, ' ', false, nlohmann::ordered_json::error_handler_t::replace);
}

ScoreCard scorecard_from_json(std::string_view line) {
  try {
    json j = json::parse(line);
    ScoreCard c;
    c.sample_id = j.at("sample_id").get<std::string>();
    const json& r = j.at("raw");
    c.raw.overall_strategy = read_opt<int>(r, "overall_strategy");
    c.raw.pick_point = read_opt<int>(r, "pick_point");
    c.raw.rule = read_opt<int>(r, "rule");
    c.raw.equation = read_opt<int>(r, "equation");
    c.raw.properties = read_opt<int>(r, "properties");
    c.raw.points = read_opt<int>(r, "points");
    c.raw.range = read_opt<int>(r, "range");
    c.raw.annotations = read_opt<int>(r, "annotations");
    c.raw.consistency = read_opt<int>(r, "consistency");
    c.code_exec_ok = read_opt<bool>(j, "code_exec_ok");
    c.ans_correct = read_opt<bool>(j, "ans_correct");
    const json& n = j.at("normalized");
    c.normalized.ans_acc = read_opt<double>(n, "ans_acc");
    c.normalized.text = read_opt<double>(n, "text");
    c.normalized.code_acc = read_opt<double>(n, "code_acc");
    c.normalized.code = read_opt<double>(n, "code");
    c.normalized.text_code = read_opt<double>(n, "text_code");
    for (Metric m : kAllMetrics) {
      auto v = c.normalized.get(m);
      if (v && !(*v >= 0.0 && *v <= 1.0))
        throw SchemaError(fmt::format("normalized {} outside [0,1]", to_string(m)));
    }
    return c;
  } catch (const json::exception& e) {
    throw SchemaError(fmt::format("bad scorecard: {}", e.what()));
  }
}

std::vector<ScoreCard> read_scorecards(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<ScoreCard> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(scorecard_from_json(line));
    } catch (const SchemaError& e) {
      throw SchemaError(fmt::format("{}:{}: {}", path, lineno, e.what()));
    }
  }
  return out;
}

void write_scorecards(const std::vector<ScoreCard>& cards, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& c : cards) out << scorecard_line(c) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

// ---- answers

std::string_view to_string(QuestionType q) {
  switch (q) {
    case QuestionType::multiple_choice: return "multiple_choice";
    case QuestionType::numeric_blank: return "numeric_blank";
    case QuestionType::other: return "other";
  }
  return "?";
}

std::optional<QuestionType> question_type_from_string(std::string_view name) {
  for (auto q : {QuestionType::multiple_choice, QuestionType::numeric_blank, QuestionType::other})
    if (to_string(q) == name) return q;
  return std::nullopt;
}

namespace {

bool blank(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }
bool trailing_punct(char c) {
  return c == '.' || c == ',' || c == ';' || c == ':' || c == '!' || c == '?';
}

std::string normalize_answer(std::string_view s, bool fold) {
  auto trim = [](std::string_view& v) {
    while (!v.empty() && blank(v.front())) v.remove_prefix(1);
    while (!v.empty() && blank(v.back())) v.remove_suffix(1);
  };
  trim(s);
  while (!s.empty() && trailing_punct(s.back())) {
    s.remove_suffix(1);
    trim(s);
  }
  std::string out(s);
  if (fold)
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::optional<double> parse_decimal(std::string_view s) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  if (s.empty()) return std::nullopt;
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace

AnswerMatch answer_exact_match(std::string_view pred, std::string_view gold, QuestionType qtype) {
  switch (qtype) {
    case QuestionType::multiple_choice:
      return {normalize_answer(pred, true) == normalize_answer(gold, true), false};
    case QuestionType::numeric_blank: {
      auto p = parse_decimal(normalize_answer(pred, false));
      auto g = parse_decimal(normalize_answer(gold, false));
      if (!p || !g) return {std::nullopt, true};
      double scale = std::max(std::fabs(*p), std::fabs(*g));
      return {std::fabs(*p - *g) <= 1e-6 * scale, false};
    }
    case QuestionType::other:
      return {std::nullopt, true};
  }
  return {std::nullopt, true};
}

// ---- correlation

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size())
    throw LengthMismatch(fmt::format("lengths differ: {} vs {}", x.size(), y.size()));
  const std::size_t n = x.size();
  if (n < 3) throw InsufficientData(fmt::format("need at least 3 points, have {}", n));
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(x[i]) || !std::isfinite(y[i]))
      throw InvalidArgument("non-finite value in correlation input");
  auto constant = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [&](double a) { return a == v.front(); });
  };
  if (constant(x) || constant(y)) throw ZeroVariance("zero variance");

  double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0 || syy <= 0) throw ZeroVariance("zero variance");
  double r = sxy / (std::sqrt(sxx) * std::sqrt(syy));
  return std::clamp(r, -1.0, 1.0);
}

std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i + 1;
    while (j < idx.size() && x[idx[j]] == x[idx[i]]) ++j;
    double r = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) ranks[idx[k]] = r;
    i = j;
  }
  return ranks;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size())
    throw LengthMismatch(fmt::format("lengths differ: {} vs {}", x.size(), y.size()));
  for (std::size_t i = 0; i < x.size(); ++i)
    if (std::isnan(x[i]) || std::isnan(y[i])) throw InvalidArgument("NaN in correlation input");
  return pearson(average_ranks(x), average_ranks(y));
}

std::string pair_name(const MetricPair& pair) {
  return fmt::format("{}-{}", to_string(pair.first), to_string(pair.second));
}

std::optional<MetricPair> metric_pair_from_string(std::string_view name) {
  auto dash = name.find('-');
  if (dash == std::string_view::npos) return std::nullopt;
  auto a = metric_from_string(name.substr(0, dash));
  auto b = metric_from_string(name.substr(dash + 1));
  if (!a || !b) return std::nullopt;
  return MetricPair{*a, *b};
}

std::vector<MetricPair> default_metric_pairs() {
  return {{Metric::ans_acc, Metric::text},
          {Metric::ans_acc, Metric::text_code},
          {Metric::ans_acc, Metric::code}};
}

CorrelationOutcome correlation_report(const std::vector<ScoreCard>& cards,
                                      const std::vector<MetricPair>& pairs) {
  if (cards.size() < 3)
    throw InsufficientData(fmt::format("need at least 3 scorecards, have {}", cards.size()));
  CorrelationOutcome out;
  for (const auto& pair : pairs) {
    std::vector<double> xs, ys;
    for (const auto& c : cards) {
      auto a = c.normalized.get(pair.first);
      auto b = c.normalized.get(pair.second);
      if (a && b) {
        xs.push_back(*a);
        ys.push_back(*b);
      }
    }
    try {
      double p = pearson(xs, ys);
      double s = spearman(xs, ys);
      out.reports.push_back({pair, p, s, xs.size()});
    } catch (const InsufficientData&) {
      out.flagged.push_back({pair, xs.size(), "insufficient data"});
    } catch (const ZeroVariance&) {
      out.flagged.push_back({pair, xs.size(), "zero variance"});
    }
  }
  return out;
}

void write_correlation_csv(const std::vector<CorrelationReport>& reports, std::ostream& out) {
  out << "pair,pearson,spearman,n\n";
  for (const auto& r : reports)
    out << fmt::format("{},{},{},{}\n", pair_name(r.metric_pair), r.pearson, r.spearman, r.n);
}

}  // namespace trajlab
