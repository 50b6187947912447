#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace trajlab {

// Evaluator outputs. Every rubric field is an integer in 0..5.

struct TextEval {
  int overall_strategy = 0;
  int pick_point = 0;
  int rule = 0;

  friend bool operator==(const TextEval&, const TextEval&) = default;
};

struct CodeEval {
  int equation = 0;
  int properties = 0;
  int points = 0;
  int range = 0;
  int annotations = 0;
  int consistency = 0;

  friend bool operator==(const CodeEval&, const CodeEval&) = default;
};

struct AnsEval {
  bool correct = false;

  friend bool operator==(const AnsEval&, const AnsEval&) = default;
};

struct ExtractedRule {
  std::string step;  // numbers are kept in their JSON spelling
  std::string rule;
  std::string rule_type;
  std::string explicit_or_implicit;

  friend bool operator==(const ExtractedRule&, const ExtractedRule&) = default;
};

struct RuleExtract {
  std::string overall_strategy;
  std::vector<std::string> key_pick_points;
  std::vector<ExtractedRule> rules;

  /// Compact JSON used as the reference dict in the text-evaluation prompt.
  std::string to_json() const;

  friend bool operator==(const RuleExtract&, const RuleExtract&) = default;
};

enum class EvalKind { text_eval, code_eval, ans_eval, rule_extract };

std::string_view to_string(EvalKind kind);

/// Byte range [first, second) of the first balanced JSON object in raw.
/// Candidates that balance but do not parse are skipped. Throws NoJsonFound.
std::pair<std::size_t, std::size_t> find_json_object(std::string_view raw);

TextEval parse_text_eval(std::string_view raw);
CodeEval parse_code_eval(std::string_view raw);
AnsEval parse_ans_eval(std::string_view raw);
RuleExtract parse_rule_extract(std::string_view raw);

/// Validates raw against kind; throws SchemaError or NoJsonFound.
void parse_evaluator_json(EvalKind kind, std::string_view raw);

// Five per-sample metrics, each in [0, 1].

enum class Metric { ans_acc, text, code_acc, code, text_code };

inline constexpr std::size_t kMetricCount = 5;
inline constexpr std::array<Metric, kMetricCount> kAllMetrics = {
    Metric::ans_acc, Metric::text, Metric::code_acc, Metric::code, Metric::text_code};

std::string_view to_string(Metric m);
std::optional<Metric> metric_from_string(std::string_view name);

struct RawScores {
  std::optional<int> overall_strategy, pick_point, rule;
  std::optional<int> equation, properties, points, range, annotations, consistency;

  friend bool operator==(const RawScores&, const RawScores&) = default;
};

struct NormalizedScores {
  std::optional<double> ans_acc, text, code_acc, code, text_code;

  std::optional<double> get(Metric m) const;
  /// Mean over the metrics that are present; absent when none is.
  std::optional<double> avg() const;

  friend bool operator==(const NormalizedScores&, const NormalizedScores&) = default;
};

struct ScoreCard {
  std::string sample_id;
  RawScores raw;
  std::optional<bool> code_exec_ok;  // absent when the sample has no code
  std::optional<bool> ans_correct;
  NormalizedScores normalized;

  friend bool operator==(const ScoreCard&, const ScoreCard&) = default;
};

ScoreCard aggregate(const std::optional<TextEval>& text, const std::optional<CodeEval>& code,
                    std::optional<bool> exec_ok, std::optional<bool> ans_correct);

/// Corpus-level means per metric over the cards where it is present.
NormalizedScores mean_scores(const std::vector<ScoreCard>& cards);

std::string scorecard_line(const ScoreCard& card);
ScoreCard scorecard_from_json(std::string_view line);
std::vector<ScoreCard> read_scorecards(const std::string& path);
void write_scorecards(const std::vector<ScoreCard>& cards, const std::string& path);

// Answer checking.

enum class QuestionType { multiple_choice, numeric_blank, other };

std::string_view to_string(QuestionType q);
std::optional<QuestionType> question_type_from_string(std::string_view name);

struct AnswerMatch {
  std::optional<bool> matched;  // absent when routed to the judge
  bool routed_to_llm = false;
};

/// Numeric answers that do not parse as decimals are routed to the judge.
AnswerMatch answer_exact_match(std::string_view pred, std::string_view gold, QuestionType qtype);

// Correlation.

double pearson(const std::vector<double>& x, const std::vector<double>& y);
double spearman(const std::vector<double>& x, const std::vector<double>& y);
/// 1-based ranks, ties share the mean of their block.
std::vector<double> average_ranks(const std::vector<double>& x);

using MetricPair = std::pair<Metric, Metric>;

std::string pair_name(const MetricPair& pair);
/// "ans_acc-text" form.
std::optional<MetricPair> metric_pair_from_string(std::string_view name);
/// (ans_acc, text), (ans_acc, text_code), (ans_acc, code).
std::vector<MetricPair> default_metric_pairs();

struct CorrelationReport {
  MetricPair metric_pair;
  double pearson = 0;
  double spearman = 0;
  std::size_t n = 0;
};

struct FlaggedPair {
  MetricPair metric_pair;
  std::size_t n = 0;
  std::string reason;
};

struct CorrelationOutcome {
  std::vector<CorrelationReport> reports;
  std::vector<FlaggedPair> flagged;
};

/// Pairs with fewer than 3 jointly present cards or a constant column are
/// flagged instead of reported.
CorrelationOutcome correlation_report(const std::vector<ScoreCard>& cards,
                                      const std::vector<MetricPair>& pairs);

void write_correlation_csv(const std::vector<CorrelationReport>& reports, std::ostream& out);

}  // namespace trajlab
