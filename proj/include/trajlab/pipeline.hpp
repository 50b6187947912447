#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "trajlab/sandbox.hpp"
#include "trajlab/scoring.hpp"
#include "trajlab/transcript.hpp"

namespace trajlab {

// ---- questions

struct Question {
  std::string sample_id;
  std::string question;
  std::string answer;  // gold
  QuestionType qtype = QuestionType::other;
  bool has_diagram = false;
};

/// JSONL: {sample_id, question, answer, qtype, has_diagram?}.
std::vector<Question> read_questions(const std::string& path);
Question question_from_json(std::string_view line);
std::string question_line(const Question& q);

// ---- endpoints

enum class Role { generator, rule_engine, checker };

std::string_view to_string(Role r);
std::optional<Role> role_from_string(std::string_view name);

struct Backoff {
  double initial = 1.0;  // seconds
  double factor = 2.0;
  double max = 30.0;

  /// Delay before retry number `retry` (1-based).
  double delay(int retry) const;
};

struct LlmEndpoint {
  Role role = Role::generator;
  std::string base_url;  // e.g. https://host/v1
  std::string model;
  double timeout = 120.0;  // seconds per request
  int max_retries = 3;
  Backoff backoff;
  /// Environment variable holding the bearer token; empty sends none.
  std::string api_key_env;
  double temperature = 0.0;
  /// Sent with each request when set; not every server honours it.
  std::optional<std::uint64_t> seed;

  void validate() const;
};

enum class Purpose { generate, rules, text_eval, code_eval, ans_eval };

std::string_view to_string(Purpose p);

struct ChatMessage {
  std::string role;
  std::string content;
};

struct LlmRequest {
  Role role = Role::generator;
  Purpose purpose = Purpose::generate;
  std::string sample_id;
  int attempt = 1;
  std::vector<ChatMessage> messages;
};

class LlmClient {
 public:
  virtual ~LlmClient() = default;
  /// Returns the assistant text. Throws EndpointError once retries are spent.
  virtual std::string complete(const LlmRequest& request) = 0;
};

/// OpenAI-compatible chat-completions client. Roles without their own
/// endpoint fall back to the generator's.
class HttpLlmClient : public LlmClient {
 public:
  HttpLlmClient(std::vector<LlmEndpoint> endpoints, std::size_t max_in_flight = 4);
  ~HttpLlmClient() override;

  std::string complete(const LlmRequest& request) override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Scripted client for tests and dry runs. The script is
///   {"default": {...}, "samples": {"<id>": {...}}}
/// where per-sample settings override the defaults:
///   solutions        list of raw solutions per attempt (last one repeats)
///   broken_attempts  leading attempts whose code raises (default 0)
///   steps            steps in the generated solution (default 2)
///   no_code          generate steps without code blocks
///   answer           predicted answer (default: the gold answer)
///   rules, text_eval, code_eval, ans_eval   object or raw text reply
///   fail             list of roles that raise EndpointError
/// With an empty script every sample passes every gate.
class MockLlmClient : public LlmClient {
 public:
  MockLlmClient(nlohmann::json script, const std::vector<Question>& questions);
  static std::unique_ptr<MockLlmClient> from_file(const std::string& path, const std::vector<Question>& questions);

  std::string complete(const LlmRequest& request) override;

  std::size_t calls(Purpose p) const;
  std::size_t calls(Purpose p, const std::string& sample_id) const;

 private:
  nlohmann::json settings(const std::string& sample_id) const;
  std::string reply(const LlmRequest& request) const;

  nlohmann::json script_;
  std::map<std::string, std::string> gold_;
  mutable std::mutex mutex_;
  std::map<std::pair<Purpose, std::string>, std::size_t> calls_;
};

// ---- prompts

struct PromptSet {
  std::string generator, rule_extract, text_eval, code_eval, ans_eval;

  /// Reads generator.txt, rule_extract.txt, text_eval.txt, code_eval.txt and
  /// ans_eval.txt. Throws IoError.
  static PromptSet load(const std::filesystem::path& dir);
};

/// Directory the build was configured with.
std::filesystem::path default_prompts_dir();

/// Substitutes {{name}} placeholders. A placeholder without a value is an
/// InvalidArgument.
std::string render_prompt(std::string_view tmpl, const std::map<std::string, std::string>& vars);

// ---- retention

enum class RejectReason { none, code, answer, text, malformed, evaluator, endpoint };

std::string_view to_string(RejectReason r);
std::string_view describe(RejectReason r);
std::optional<RejectReason> reject_reason_from_string(std::string_view name);

struct RetentionDecision {
  bool retained = false;
  bool ans_correct = false;
  double text_raw_avg = 0.0;
  bool all_code_ok = false;
  int attempts_used = 0;
  /// First failed gate in the order code, answer, text.
  RejectReason reason = RejectReason::none;
  std::string reason_text;
  std::vector<RejectReason> failed_gates;
};

RetentionDecision decide_retention(bool ans_correct, double text_raw_avg, bool all_code_ok, int attempts_used,
                                   double text_threshold = 3.0);

/// Sample that never reached the gates.
RetentionDecision failed_decision(RejectReason reason, int attempts_used, std::string detail = {});

/// Human rubric score to pass/fail. Throws RangeError outside 0..5.
bool human_passfail(int raw_score);

// ---- driver

struct PipelineConfig {
  int max_regen = 3;
  double text_threshold = 3.0;
  /// A solution without code blocks counts as a code failure.
  bool require_code = true;
  ExecLimits limits;
  std::size_t sandbox_pool = 1;
  ExecMode exec_mode = ExecMode::per_block;
  MarkerConfig markers;

  void validate() const;
};

struct SampleOutcome {
  std::string sample_id;
  std::optional<Transcript> transcript;
  std::string raw_solution;
  std::optional<ScoreCard> scorecard;
  RetentionDecision decision;
  /// Set when an endpoint failed; such samples are retried on resume.
  bool endpoint_error = false;
  std::string error;
};

SampleOutcome run_sample(const Question& q, LlmClient& llm, const PromptSet& prompts, const PipelineConfig& cfg);

struct CorpusReport {
  std::size_t total = 0;
  std::size_t retained = 0;
  std::size_t rejected = 0;
  std::size_t errors = 0;
  std::size_t scored = 0;
  std::size_t resumed = 0;  // completed by an earlier run
  std::map<std::string, std::size_t> rejected_by_reason;
  std::map<int, std::size_t> attempts_histogram;

  std::string to_json() const;
};

/// Writes transcripts.jsonl (retained samples), scorecards.jsonl (every
/// scored sample) and ledger.jsonl (one entry per finished sample) under
/// out_dir. Samples already finished in the ledger are skipped. Stores are
/// rewritten in question order at the end, so the output does not depend on
/// concurrency or on how often the run was resumed. Throws IoError.
CorpusReport run_corpus(const std::vector<Question>& questions, LlmClient& llm, const PromptSet& prompts,
                        const PipelineConfig& cfg, const std::filesystem::path& out_dir,
                        std::size_t concurrency = 1);

// ---- config file

struct PipelineFileConfig {
  std::string questions;  // path
  std::vector<LlmEndpoint> endpoints;
  PipelineConfig pipeline;
  std::filesystem::path prompts_dir;
  std::size_t concurrency = 1;
  std::size_t max_in_flight = 4;
};

/// JSON config. Relative paths resolve against the config file's directory.
/// Throws SchemaError or IoError.
PipelineFileConfig load_pipeline_config(const std::string& path);

}  // namespace trajlab
