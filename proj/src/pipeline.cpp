#include "trajlab/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>

#include <fmt/format.h>

#include "trajlab/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace trajlab {

// ---- questions

Question question_from_json(std::string_view line) {
  try {
    json j = json::parse(line);
    Question q;
    q.sample_id = j.at("sample_id").get<std::string>();
    q.question = j.at("question").get<std::string>();
    q.answer = j.at("answer").get<std::string>();
    auto qt = question_type_from_string(j.value("qtype", std::string("other")));
    if (!qt) throw SchemaError(fmt::format("unknown qtype in sample {}", q.sample_id));
    q.qtype = *qt;
    q.has_diagram = j.value("has_diagram", false);
    if (q.sample_id.empty()) throw SchemaError("empty sample_id");
    return q;
  } catch (const json::exception& e) {
    throw SchemaError(fmt::format("bad question record: {}", e.what()));
  }
}

std::string question_line(const Question& q) {
  ordered_json j;
  j["sample_id"] = q.sample_id;
  j["question"] = q.question;
  j["answer"] = q.answer;
  j["qtype"] = std::string(to_string(q.qtype));
  j["has_diagram"] = q.has_diagram;
  return j.dump(-1, ' ', false, ordered_json::error_handler_t::replace);
}

std::vector<Question> read_questions(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<Question> out;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(question_from_json(line));
    } catch (const SchemaError& e) {
      throw SchemaError(fmt::format("{}:{}: {}", path, lineno, e.what()));
    }
    if (!seen.insert(out.back().sample_id).second)
      throw SchemaError(fmt::format("{}:{}: duplicate sample_id {}", path, lineno, out.back().sample_id));
  }
  return out;
}

// ---- endpoints

std::string_view to_string(Role r) {
  switch (r) {
    case Role::generator: return "generator";
    case Role::rule_engine: return "rule_engine";
    case Role::checker: return "checker";
  }
  return "?";
}

std::optional<Role> role_from_string(std::string_view name) {
  for (auto r : {Role::generator, Role::rule_engine, Role::checker})
    if (to_string(r) == name) return r;
  return std::nullopt;
}

std::string_view to_string(Purpose p) {
  switch (p) {
    case Purpose::generate: return "generate";
    case Purpose::rules: return "rules";
    case Purpose::text_eval: return "text_eval";
    case Purpose::code_eval: return "code_eval";
    case Purpose::ans_eval: return "ans_eval";
  }
  return "?";
}

double Backoff::delay(int retry) const {
  if (retry < 1) return 0.0;
  double d = initial * std::pow(factor, retry - 1);
  return std::clamp(d, 0.0, max);
}

void LlmEndpoint::validate() const {
  if (base_url.rfind("http://", 0) != 0 && base_url.rfind("https://", 0) != 0)
    throw InvalidArgument(fmt::format("endpoint {}: base_url must start with http:// or https://", to_string(role)));
  if (model.empty()) throw InvalidArgument(fmt::format("endpoint {}: model is empty", to_string(role)));
  if (max_retries < 0) throw InvalidArgument("max_retries must be >= 0");
  if (!(timeout > 0)) throw InvalidArgument("timeout must be positive");
  if (backoff.initial < 0 || backoff.factor < 1 || backoff.max < 0) throw InvalidArgument("bad backoff schedule");
}

// ---- mock client

namespace {

std::string reply_text(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

std::string mock_solution(const std::string& sample_id, int steps, bool broken, bool no_code,
                          const std::string& answer) {
  std::string out;
  for (int k = 1; k <= steps; ++k) {
    out += fmt::format("### Step {}\nWork on part {} of the problem.\n", k, k);
    if (no_code) continue;
    out += "```python\n";
    if (broken && k == steps) {
      out += fmt::format("raise RuntimeError('mock failure in step {}')\n", k);
    } else {
      out += fmt::format("with open('step{}.txt', 'w') as f:\n    f.write('{}')\nprint('step {} ok')\n", k,
                         sample_id.size(), k);
    }
    out += "```\n";
  }
  out += "Answer: " + answer + "\n";
  return out;
}

}  // namespace

MockLlmClient::MockLlmClient(json script, const std::vector<Question>& questions)
    : script_(script.is_null() ? json::object() : std::move(script)) {
  if (!script_.is_object()) throw SchemaError("mock script must be a JSON object");
  for (const auto& [key, _] : script_.items())
    if (key != "default" && key != "samples") throw SchemaError("unknown mock script key: " + key);
  for (const auto& q : questions) gold_[q.sample_id] = q.answer;
}

std::unique_ptr<MockLlmClient> MockLlmClient::from_file(const std::string& path,
                                                        const std::vector<Question>& questions) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  try {
    return std::make_unique<MockLlmClient>(json::parse(in), questions);
  } catch (const json::exception& e) {
    throw SchemaError(fmt::format("{}: {}", path, e.what()));
  }
}

json MockLlmClient::settings(const std::string& sample_id) const {
  json s = script_.value("default", json::object());
  if (auto it = script_.find("samples"); it != script_.end()) {
    if (auto jt = it->find(sample_id); jt != it->end()) s.update(*jt);
  }
  return s;
}

std::string MockLlmClient::complete(const LlmRequest& request) {
  {
    std::lock_guard lock(mutex_);
    ++calls_[{request.purpose, request.sample_id}];
  }
  try {
    return reply(request);
  } catch (const json::exception& e) {
    throw SchemaError(fmt::format("mock script: {}", e.what()));
  }
}

std::string MockLlmClient::reply(const LlmRequest& request) const {
  const json s = settings(request.sample_id);
  if (auto f = s.find("fail"); f != s.end()) {
    for (const auto& role : *f)
      if (role.is_string() && role.get<std::string>() == to_string(request.role))
        throw EndpointError(fmt::format("mock {} endpoint failure", to_string(request.role)));
  }
  switch (request.purpose) {
    case Purpose::generate: {
      if (auto sol = s.find("solutions"); sol != s.end() && sol->is_array() && !sol->empty()) {
        std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(request.attempt - 1), sol->size() - 1);
        return reply_text((*sol)[i]);
      }
      auto gold = gold_.find(request.sample_id);
      std::string answer = s.value("answer", gold == gold_.end() ? std::string() : gold->second);
      bool broken = request.attempt <= s.value("broken_attempts", 0);
      return mock_solution(request.sample_id, s.value("steps", 2), broken, s.value("no_code", false), answer);
    }
    case Purpose::rules:
      if (s.contains("rules")) return reply_text(s["rules"]);
      return R"({"overall_strategy":"direct computation","key_pick_points":["set up","solve"],)"
             R"("rules":[{"step":1,"rule":"a=b => b=a","rule_type":"algebra","explicit_or_implicit":"explicit"}]})";
    case Purpose::text_eval:
      if (s.contains("text_eval")) return reply_text(s["text_eval"]);
      return R"({"overall_strategy_assessment":5,"pick_point_assessment":5,"rule_assessment":5})";
    case Purpose::code_eval:
      if (s.contains("code_eval")) return reply_text(s["code_eval"]);
      return R"({"equation":5,"properties":5,"points":5,"range":5,"annotations":5,"consistency":5})";
    case Purpose::ans_eval:
      if (s.contains("ans_eval")) return reply_text(s["ans_eval"]);
      return R"({"ans_match":"correct"})";
  }
  throw EndpointError("unknown request purpose");
}

std::size_t MockLlmClient::calls(Purpose p) const {
  std::lock_guard lock(mutex_);
  std::size_t n = 0;
  for (const auto& [key, count] : calls_)
    if (key.first == p) n += count;
  return n;
}

std::size_t MockLlmClient::calls(Purpose p, const std::string& sample_id) const {
  std::lock_guard lock(mutex_);
  auto it = calls_.find({p, sample_id});
  return it == calls_.end() ? 0 : it->second;
}

// ---- prompts

namespace {

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read prompt template " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

PromptSet PromptSet::load(const fs::path& dir) {
  PromptSet p;
  p.generator = read_text(dir / "generator.txt");
  p.rule_extract = read_text(dir / "rule_extract.txt");
  p.text_eval = read_text(dir / "text_eval.txt");
  p.code_eval = read_text(dir / "code_eval.txt");
  p.ans_eval = read_text(dir / "ans_eval.txt");
  return p;
}

fs::path default_prompts_dir() {
#ifdef TRAJLAB_PROMPTS_DIR
  return TRAJLAB_PROMPTS_DIR;
#else
  return "prompts";
#endif
}

std::string render_prompt(std::string_view tmpl, const std::map<std::string, std::string>& vars) {
  std::string out;
  std::size_t pos = 0;
  while (true) {
    std::size_t open = tmpl.find("{{", pos);
    if (open == std::string_view::npos) break;
    std::size_t close = tmpl.find("}}", open + 2);
    if (close == std::string_view::npos) break;
    std::string name(tmpl.substr(open + 2, close - open - 2));
    auto it = vars.find(name);
    if (it == vars.end()) throw InvalidArgument("no value for prompt placeholder {{" + name + "}}");
    out.append(tmpl.substr(pos, open - pos));
    out += it->second;
    pos = close + 2;
  }
  out.append(tmpl.substr(pos));
  return out;
}

// ---- retention

std::string_view to_string(RejectReason r) {
  switch (r) {
    case RejectReason::none: return "none";
    case RejectReason::code: return "code";
    case RejectReason::answer: return "answer";
    case RejectReason::text: return "text";
    case RejectReason::malformed: return "malformed";
    case RejectReason::evaluator: return "evaluator";
    case RejectReason::endpoint: return "endpoint";
  }
  return "?";
}

std::string_view describe(RejectReason r) {
  switch (r) {
    case RejectReason::none: return "retained";
    case RejectReason::code: return "code execution failed";
    case RejectReason::answer: return "answer incorrect";
    case RejectReason::text: return "text below threshold";
    case RejectReason::malformed: return "malformed transcript";
    case RejectReason::evaluator: return "evaluator output invalid";
    case RejectReason::endpoint: return "endpoint error";
  }
  return "?";
}

std::optional<RejectReason> reject_reason_from_string(std::string_view name) {
  for (auto r : {RejectReason::none, RejectReason::code, RejectReason::answer, RejectReason::text,
                 RejectReason::malformed, RejectReason::evaluator, RejectReason::endpoint})
    if (to_string(r) == name) return r;
  return std::nullopt;
}

RetentionDecision decide_retention(bool ans_correct, double text_raw_avg, bool all_code_ok, int attempts_used,
                                   double text_threshold) {
  RetentionDecision d;
  d.ans_correct = ans_correct;
  d.text_raw_avg = text_raw_avg;
  d.all_code_ok = all_code_ok;
  d.attempts_used = attempts_used;
  if (!all_code_ok) d.failed_gates.push_back(RejectReason::code);
  if (!ans_correct) d.failed_gates.push_back(RejectReason::answer);
  if (!(text_raw_avg >= text_threshold)) d.failed_gates.push_back(RejectReason::text);
  d.retained = d.failed_gates.empty();
  d.reason = d.retained ? RejectReason::none : d.failed_gates.front();
  d.reason_text = describe(d.reason);
  return d;
}

RetentionDecision failed_decision(RejectReason reason, int attempts_used, std::string detail) {
  RetentionDecision d;
  d.attempts_used = attempts_used;
  d.reason = reason;
  d.failed_gates = {reason};
  d.reason_text = describe(reason);
  if (!detail.empty()) d.reason_text += ": " + detail;
  return d;
}

bool human_passfail(int raw_score) {
  if (raw_score < 0 || raw_score > 5) throw RangeError(fmt::format("human score {} outside 0-5", raw_score));
  return raw_score >= 3;
}

// ---- driver

void PipelineConfig::validate() const {
  if (max_regen < 0) throw InvalidArgument("max_regen must be >= 0");
  if (!(text_threshold >= 0 && text_threshold <= 5)) throw InvalidArgument("text_threshold must be in 0..5");
  if (sandbox_pool == 0) throw InvalidArgument("sandbox_pool must be >= 1");
  limits.validate();
}

namespace {

std::string code_listing(const Transcript& t) {
  std::string out;
  for (const auto& step : t.steps) {
    if (!step.code) continue;
    out += fmt::format("# Step {}\n", step.index);
    out += step.code->source;
    if (!out.empty() && out.back() != '\n') out += '\n';
    out += '\n';
  }
  return out;
}

std::string ask(LlmClient& llm, Role role, Purpose purpose, const Question& q, int attempt, std::string prompt) {
  LlmRequest req;
  req.role = role;
  req.purpose = purpose;
  req.sample_id = q.sample_id;
  req.attempt = attempt;
  req.messages.push_back({"user", std::move(prompt)});
  return llm.complete(req);
}

}  // namespace

SampleOutcome run_sample(const Question& q, LlmClient& llm, const PromptSet& prompts, const PipelineConfig& cfg) {
  cfg.validate();
  SampleOutcome out;
  out.sample_id = q.sample_id;
  int attempts = 0;
  try {
    std::string feedback;
    std::vector<StepExec> runs;
    bool code_ok = false;
    std::string parse_error;
    for (int attempt = 1; attempt <= cfg.max_regen + 1; ++attempt) {
      attempts = attempt;
      std::string note = feedback.empty() ? std::string()
                                          : "\nA previous attempt was rejected:\n" + feedback +
                                                "\nWrite a corrected complete solution.\n";
      std::string raw = ask(llm, Role::generator, Purpose::generate, q, attempt,
                            render_prompt(prompts.generator, {{"problem", q.question}, {"feedback", note}}));
      out.raw_solution = raw;
      Transcript t;
      try {
        t = parse_transcript(raw, cfg.markers);
      } catch (const MalformedTranscript& e) {
        out.transcript.reset();
        parse_error = e.what();
        feedback = std::string("The solution did not follow the required format: ") + e.what();
        continue;
      }
      parse_error.clear();
      t.sample_id = q.sample_id;
      t.question = q.question;
      t.has_diagram = q.has_diagram;
      runs = execute_transcript(t, cfg.limits, cfg.sandbox_pool, cfg.exec_mode);
      out.transcript = std::move(t);
      auto acc = code_acc(runs);
      code_ok = acc.value_or(!cfg.require_code);
      if (code_ok) break;
      feedback = acc ? failure_summary(runs) : "The solution contained no Python code blocks.";
    }

    if (!out.transcript) {
      out.decision = failed_decision(RejectReason::malformed, attempts, parse_error);
      return out;
    }
    const Transcript& t = *out.transcript;
    const auto exec_ok = code_acc(runs);
    AnswerMatch exact = answer_exact_match(t.final_answer, q.answer, q.qtype);

    if (!code_ok) {
      // no evaluator calls for samples that cannot be kept
      std::optional<bool> ans = exact.routed_to_llm ? std::nullopt : exact.matched;
      out.scorecard = aggregate(std::nullopt, std::nullopt, exec_ok, ans);
      out.scorecard->sample_id = q.sample_id;
      out.decision = failed_decision(RejectReason::code, attempts);
      out.decision.ans_correct = ans.value_or(false);
      return out;
    }

    RuleExtract rules = parse_rule_extract(
        ask(llm, Role::rule_engine, Purpose::rules, q, attempts,
            render_prompt(prompts.rule_extract, {{"problem", q.question}, {"solution", out.raw_solution}})));

    TextEval text = parse_text_eval(ask(llm, Role::checker, Purpose::text_eval, q, attempts,
                                        render_prompt(prompts.text_eval, {{"problem", q.question},
                                                                          {"student_solution", out.raw_solution},
                                                                          {"reference_dict", rules.to_json()}})));

    std::optional<CodeEval> code;
    if (t.code_block_count() > 0) {
      code = parse_code_eval(ask(llm, Role::checker, Purpose::code_eval, q, attempts,
                                 render_prompt(prompts.code_eval, {{"problem", q.question},
                                                                   {"solution", out.raw_solution},
                                                                   {"code", code_listing(t)}})));
    }

    bool ans_correct = false;
    if (exact.routed_to_llm) {
      ans_correct = parse_ans_eval(ask(llm, Role::checker, Purpose::ans_eval, q, attempts,
                                       render_prompt(prompts.ans_eval, {{"question", q.question},
                                                                        {"gold", q.answer},
                                                                        {"pred", t.final_answer}})))
                        .correct;
    } else {
      ans_correct = *exact.matched;
    }

    out.scorecard = aggregate(text, code, exec_ok, ans_correct);
    out.scorecard->sample_id = q.sample_id;
    out.decision = decide_retention(ans_correct, (text.pick_point + text.rule) / 2.0, code_ok, attempts,
                                    cfg.text_threshold);
  } catch (const EndpointError& e) {
    out.endpoint_error = true;
    out.error = e.what();
    out.scorecard.reset();
    out.decision = failed_decision(RejectReason::endpoint, attempts, e.what());
  } catch (const SchemaError& e) {
    out.error = e.what();
    out.scorecard.reset();
    out.decision = failed_decision(RejectReason::evaluator, attempts, e.what());
  } catch (const NoJsonFound& e) {
    out.error = e.what();
    out.scorecard.reset();
    out.decision = failed_decision(RejectReason::evaluator, attempts, e.what());
  }
  return out;
}

// ---- corpus

namespace {

struct StorePaths {
  fs::path transcripts, scorecards, ledger;
};

std::string ledger_line(const SampleOutcome& o) {
  ordered_json j;
  j["sample_id"] = o.sample_id;
  j["status"] = o.endpoint_error ? "error" : (o.decision.retained ? "retained" : "rejected");
  j["reason"] = std::string(to_string(o.decision.reason));
  j["reason_text"] = o.decision.reason_text;
  j["attempts_used"] = o.decision.attempts_used;
  j["ans_correct"] = o.decision.ans_correct;
  j["text_raw_avg"] = o.decision.text_raw_avg;
  j["all_code_ok"] = o.decision.all_code_ok;
  auto gates = json::array();
  for (auto g : o.decision.failed_gates) gates.push_back(std::string(to_string(g)));
  j["failed_gates"] = std::move(gates);
  return j.dump(-1, ' ', false, ordered_json::error_handler_t::replace);
}

struct StoreLine {
  std::string sample_id;
  std::string text;
  json parsed;
};

// Complete, parseable lines only; a torn final line from a crash is dropped.
std::vector<StoreLine> read_store(const fs::path& p) {
  std::vector<StoreLine> out;
  std::ifstream in(p, std::ios::binary);
  if (!in) return out;
  std::string line;
  while (std::getline(in, line)) {
    if (in.eof()) break;  // no trailing newline
    try {
      json j = json::parse(line);
      if (!j.is_object() || !j.contains("sample_id") || !j["sample_id"].is_string()) continue;
      out.push_back({j["sample_id"].get<std::string>(), line, std::move(j)});
    } catch (const json::exception&) {
    }
  }
  return out;
}

void write_store(const fs::path& p, const std::vector<StoreLine>& lines) {
  fs::path tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    for (const auto& l : lines) out << l.text << '\n';
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, p, ec);
  if (ec) throw IoError(fmt::format("cannot replace {}: {}", p.string(), ec.message()));
}

// Keeps the lines whose sample_id passes `keep`, one per id (first or last),
// ordered by question index; unknown ids go last in file order.
std::vector<StoreLine> compact(std::vector<StoreLine> lines, const std::unordered_map<std::string, std::size_t>& order,
                               const std::function<bool(const StoreLine&)>& keep, bool last_wins) {
  std::vector<StoreLine> kept;
  std::unordered_map<std::string, std::size_t> slot;
  for (auto& l : lines) {
    if (!keep(l)) continue;
    auto it = slot.find(l.sample_id);
    if (it == slot.end()) {
      slot.emplace(l.sample_id, kept.size());
      kept.push_back(std::move(l));
    } else if (last_wins) {
      kept[it->second] = std::move(l);
    }
  }
  auto rank = [&](const StoreLine& l) {
    auto it = order.find(l.sample_id);
    return it == order.end() ? order.size() : it->second;
  };
  std::stable_sort(kept.begin(), kept.end(), [&](const StoreLine& a, const StoreLine& b) { return rank(a) < rank(b); });
  return kept;
}

bool finished(const StoreLine& ledger_entry) {
  return ledger_entry.parsed.value("status", std::string("error")) != "error";
}

}  // namespace

std::string CorpusReport::to_json() const {
  ordered_json j;
  j["total"] = total;
  j["retained"] = retained;
  j["rejected"] = rejected;
  j["errors"] = errors;
  j["scored"] = scored;
  ordered_json reasons = ordered_json::object();
  for (const auto& [k, v] : rejected_by_reason) reasons[k] = v;
  j["rejected_by_reason"] = std::move(reasons);
  ordered_json hist = ordered_json::object();
  for (const auto& [k, v] : attempts_histogram) hist[std::to_string(k)] = v;
  j["attempts_histogram"] = std::move(hist);
  return j.dump(2);
}

CorpusReport run_corpus(const std::vector<Question>& questions, LlmClient& llm, const PromptSet& prompts,
                        const PipelineConfig& cfg, const fs::path& out_dir, std::size_t concurrency) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError(fmt::format("cannot create {}: {}", out_dir.string(), ec.message()));
  const StorePaths paths{out_dir / "transcripts.jsonl", out_dir / "scorecards.jsonl", out_dir / "ledger.jsonl"};

  std::unordered_map<std::string, std::size_t> order;
  for (std::size_t i = 0; i < questions.size(); ++i)
    if (!order.emplace(questions[i].sample_id, i).second)
      throw InvalidArgument("duplicate sample_id " + questions[i].sample_id);

  // Replay the ledger: finished samples stay, everything else is redone and
  // any store line written after the last ledger commit is discarded.
  auto ledger = compact(read_store(paths.ledger), order, [](const StoreLine&) { return true; }, true);
  std::erase_if(ledger, [](const StoreLine& l) { return !finished(l); });
  std::set<std::string> done;
  for (const auto& l : ledger) done.insert(l.sample_id);
  auto is_done = [&](const StoreLine& l) { return done.count(l.sample_id) > 0; };
  write_store(paths.ledger, ledger);
  write_store(paths.transcripts, compact(read_store(paths.transcripts), order, is_done, false));
  write_store(paths.scorecards, compact(read_store(paths.scorecards), order, is_done, false));

  std::vector<const Question*> pending;
  for (const auto& q : questions)
    if (!done.count(q.sample_id)) pending.push_back(&q);

  std::ofstream transcripts(paths.transcripts, std::ios::binary | std::ios::app);
  std::ofstream scorecards(paths.scorecards, std::ios::binary | std::ios::app);
  std::ofstream ledger_out(paths.ledger, std::ios::binary | std::ios::app);
  if (!transcripts || !scorecards || !ledger_out) throw IoError("cannot open stores under " + out_dir.string());

  std::mutex commit_mutex;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::exception_ptr failure;

  auto commit = [&](const SampleOutcome& o) {
    std::lock_guard lock(commit_mutex);
    if (o.decision.retained && o.transcript) {
      CorpusRecord rec{o.sample_id, o.transcript->question, o.raw_solution, o.transcript->final_answer,
                       o.transcript->has_diagram};
      transcripts << corpus_line(rec) << '\n';
      transcripts.flush();
    }
    if (o.scorecard) {
      scorecards << scorecard_line(*o.scorecard) << '\n';
      scorecards.flush();
    }
    // the ledger entry is written last; it marks the sample as committed
    ledger_out << ledger_line(o) << '\n';
    ledger_out.flush();
    if (!transcripts || !scorecards || !ledger_out) throw IoError("write failed under " + out_dir.string());
  };

  auto worker = [&] {
    while (!stop) {
      std::size_t i = next++;
      if (i >= pending.size()) return;
      try {
        commit(run_sample(*pending[i], llm, prompts, cfg));
      } catch (...) {
        std::lock_guard lock(commit_mutex);
        if (!failure) failure = std::current_exception();
        stop = true;
      }
    }
  };
  concurrency = std::clamp<std::size_t>(concurrency, 1, std::max<std::size_t>(1, pending.size()));
  if (concurrency == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < concurrency; ++t) threads.emplace_back(worker);
    for (auto& th : threads) th.join();
  }
  transcripts.close();
  scorecards.close();
  ledger_out.close();
  if (failure) std::rethrow_exception(failure);

  auto all = [](const StoreLine&) { return true; };
  auto final_ledger = compact(read_store(paths.ledger), order, all, true);
  auto final_transcripts = compact(read_store(paths.transcripts), order, all, false);
  auto final_scorecards = compact(read_store(paths.scorecards), order, all, false);
  write_store(paths.ledger, final_ledger);
  write_store(paths.transcripts, final_transcripts);
  write_store(paths.scorecards, final_scorecards);

  CorpusReport report;
  report.total = questions.size();
  report.resumed = done.size();
  report.scored = final_scorecards.size();
  for (const auto& l : final_ledger) {
    if (!order.count(l.sample_id)) continue;
    const std::string status = l.parsed.value("status", std::string());
    if (status == "retained") {
      ++report.retained;
    } else if (status == "rejected") {
      ++report.rejected;
      ++report.rejected_by_reason[l.parsed.value("reason", std::string("unknown"))];
    } else {
      ++report.errors;
    }
    if (status != "error") ++report.attempts_histogram[l.parsed.value("attempts_used", 0)];
  }
  return report;
}

// ---- config file

namespace {

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw SchemaError(where + " must be an object");
  for (const auto& [key, _] : j.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw SchemaError(fmt::format("unknown key '{}' in {}", key, where));
}

fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace

PipelineFileConfig load_pipeline_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config " + path);
  const fs::path base = fs::path(path).parent_path();
  PipelineFileConfig cfg;
  cfg.prompts_dir = default_prompts_dir();
  try {
    json j = json::parse(in);
    check_keys(j, {"questions", "endpoints", "pipeline", "prompts_dir", "concurrency", "max_in_flight"}, "config");
    if (j.contains("questions")) cfg.questions = resolve(base, j["questions"].get<std::string>()).string();
    if (j.contains("prompts_dir")) cfg.prompts_dir = resolve(base, j["prompts_dir"].get<std::string>());
    cfg.concurrency = j.value("concurrency", cfg.concurrency);
    cfg.max_in_flight = j.value("max_in_flight", cfg.max_in_flight);
    if (cfg.concurrency == 0 || cfg.max_in_flight == 0) throw SchemaError("concurrency values must be >= 1");

    for (const auto& e : j.value("endpoints", json::array())) {
      check_keys(e, {"role", "base_url", "model", "timeout", "max_retries", "backoff", "api_key_env", "temperature", "seed"},
                 "endpoint");
      LlmEndpoint ep;
      auto role = role_from_string(e.at("role").get<std::string>());
      if (!role) throw SchemaError("unknown endpoint role " + e.at("role").dump());
      ep.role = *role;
      ep.base_url = e.at("base_url").get<std::string>();
      ep.model = e.at("model").get<std::string>();
      ep.timeout = e.value("timeout", ep.timeout);
      ep.max_retries = e.value("max_retries", ep.max_retries);
      ep.api_key_env = e.value("api_key_env", ep.api_key_env);
      ep.temperature = e.value("temperature", ep.temperature);
      if (e.contains("seed")) ep.seed = e["seed"].get<std::uint64_t>();
      if (e.contains("backoff")) {
        const json& b = e["backoff"];
        check_keys(b, {"initial", "factor", "max"}, "backoff");
        ep.backoff.initial = b.value("initial", ep.backoff.initial);
        ep.backoff.factor = b.value("factor", ep.backoff.factor);
        ep.backoff.max = b.value("max", ep.backoff.max);
      }
      try {
        ep.validate();
      } catch (const InvalidArgument& err) {
        throw SchemaError(err.what());
      }
      cfg.endpoints.push_back(std::move(ep));
    }

    if (j.contains("pipeline")) {
      const json& p = j["pipeline"];
      check_keys(p, {"max_regen", "text_threshold", "require_code", "sandbox_pool", "exec_mode", "limits"}, "pipeline");
      PipelineConfig& pc = cfg.pipeline;
      pc.max_regen = p.value("max_regen", pc.max_regen);
      pc.text_threshold = p.value("text_threshold", pc.text_threshold);
      pc.require_code = p.value("require_code", pc.require_code);
      pc.sandbox_pool = p.value("sandbox_pool", pc.sandbox_pool);
      std::string mode = p.value("exec_mode", std::string("per_block"));
      if (mode == "per_block") {
        pc.exec_mode = ExecMode::per_block;
      } else if (mode == "cumulative") {
        pc.exec_mode = ExecMode::cumulative;
      } else {
        throw SchemaError("exec_mode must be per_block or cumulative");
      }
      if (p.contains("limits")) {
        const json& l = p["limits"];
        check_keys(l, {"wall_timeout", "max_output_bytes", "max_memory_bytes", "interpreter", "work_root"}, "limits");
        pc.limits.wall_timeout = l.value("wall_timeout", pc.limits.wall_timeout);
        pc.limits.max_output_bytes = l.value("max_output_bytes", pc.limits.max_output_bytes);
        pc.limits.max_memory_bytes = l.value("max_memory_bytes", pc.limits.max_memory_bytes);
        pc.limits.interpreter = l.value("interpreter", pc.limits.interpreter);
        pc.limits.work_root = resolve(base, l.value("work_root", std::string()));
      }
      try {
        pc.validate();
      } catch (const InvalidArgument& err) {
        throw SchemaError(err.what());
      }
    }
  } catch (const json::exception& e) {
    throw SchemaError(fmt::format("{}: {}", path, e.what()));
  }
  return cfg;
}

}  // namespace trajlab
