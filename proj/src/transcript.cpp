#include "trajlab/transcript.hpp"

#include <array>
#include <charconv>
#include <fstream>
#include <regex>
#include <sstream>

#include <nlohmann/json.hpp>

#include "trajlab/error.hpp"

namespace trajlab {
namespace {

std::vector<std::string_view> split_lines(std::string_view raw) {
  std::vector<std::string_view> lines;
  std::size_t pos = 0;
  while (pos <= raw.size()) {
    auto nl = raw.find('\n', pos);
    if (nl == std::string_view::npos) {
      if (pos < raw.size()) lines.push_back(raw.substr(pos));
      break;
    }
    auto line = raw.substr(pos, nl - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    pos = nl + 1;
  }
  return lines;
}

std::string_view trim(std::string_view s) {
  constexpr std::string_view ws = " \t\r\n\f\v";
  auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

bool is_fence(std::string_view line, std::string_view fence) {
  auto t = trim(line);
  return t.size() >= fence.size() && t.substr(0, fence.size()) == fence;
}

std::string join_trimmed(const std::vector<std::string>& lines) {
  std::size_t first = 0;
  std::size_t last = lines.size();
  while (first < last && trim(lines[first]).empty()) ++first;
  while (last > first && trim(lines[last - 1]).empty()) --last;
  std::string out;
  for (std::size_t i = first; i < last; ++i) {
    if (i > first) out += '\n';
    out += lines[i];
  }
  return std::string(trim(out));
}

struct PendingStep {
  int index = 0;
  std::vector<std::string> prose;
  std::string code;
  bool has_code = false;
};

}  // namespace

std::size_t Transcript::code_block_count() const {
  std::size_t n = 0;
  for (const auto& s : steps) n += s.code.has_value() ? 1 : 0;
  return n;
}

Transcript parse_transcript(std::string_view raw, const MarkerConfig& config) {
  const std::regex heading(config.step_heading);
  const std::regex answer(config.answer_line);

  const auto lines = split_lines(raw);

  // Locate the answer line first: the last match outside code fences.
  std::optional<std::size_t> answer_idx;
  std::string answer_text;
  {
    bool in_fence = false;
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (is_fence(lines[i], config.fence)) {
        in_fence = !in_fence;
        continue;
      }
      if (in_fence) continue;
      std::string line(lines[i]);
      std::smatch m;
      if (std::regex_search(line, m, answer)) {
        answer_idx = i;
        answer_text = m.size() > 1 ? std::string(trim(m[1].str())) : std::string{};
      }
    }
  }

  std::vector<PendingStep> pending;
  bool in_fence = false;
  std::size_t fence_line = 0;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto line = lines[i];
    if (in_fence) {
      if (is_fence(line, config.fence)) {
        in_fence = false;
        continue;
      }
      if (!pending.empty()) {
        pending.back().code.append(line);
        pending.back().code += '\n';
      }
      continue;
    }
    if (is_fence(line, config.fence)) {
      in_fence = true;
      fence_line = i;
      if (!pending.empty()) {
        auto& step = pending.back();
        // Several blocks under one heading are concatenated into one.
        if (step.has_code && !step.code.empty() && step.code.back() != '\n') step.code += '\n';
        step.has_code = true;
      }
      continue;
    }
    if (answer_idx && i == *answer_idx) continue;

    std::string owned(line);
    std::smatch m;
    if (std::regex_search(owned, m, heading) && m.size() > 1) {
      int index = 0;
      const auto digits = m[1].str();
      auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), index);
      if (ec != std::errc{} || index <= 0) {
        throw MalformedTranscript("invalid step number '" + digits + "' on line " + std::to_string(i + 1));
      }
      for (const auto& p : pending) {
        if (p.index == index) {
          throw MalformedTranscript("duplicate step index " + std::to_string(index));
        }
      }
      const int expected = pending.empty() ? 1 : pending.back().index + 1;
      if (index != expected) {
        throw MalformedTranscript("step " + std::to_string(index) + " out of sequence, expected " +
                                  std::to_string(expected));
      }
      PendingStep step;
      step.index = index;
      auto rest = std::string_view(owned).substr(static_cast<std::size_t>(m.position(0) + m.length(0)));
      auto cut = rest.find_first_not_of(" \t:.)-");
      rest = cut == std::string_view::npos ? std::string_view{} : rest.substr(cut);
      if (!trim(rest).empty()) step.prose.emplace_back(trim(rest));
      pending.push_back(std::move(step));
      continue;
    }
    if (!pending.empty()) pending.back().prose.emplace_back(line);
  }

  if (in_fence) {
    throw MalformedTranscript("unclosed code fence opened on line " + std::to_string(fence_line + 1));
  }
  if (pending.empty()) throw MalformedTranscript("no step heading found");

  Transcript t;
  for (auto& p : pending) {
    Step step;
    step.index = p.index;
    step.text = join_trimmed(p.prose);
    if (step.text.empty()) {
      throw MalformedTranscript("step " + std::to_string(p.index) + " has no reasoning text");
    }
    if (p.has_code && !trim(p.code).empty()) {
      step.code = CodeBlock::make(p.index, std::move(p.code));
    }
    t.steps.push_back(std::move(step));
  }
  if (answer_idx && !answer_text.empty()) {
    t.final_answer = answer_text;
  } else {
    if (config.strict) throw MalformedTranscript("no final answer line");
    t.answer_missing = true;
  }
  return t;
}

std::string render_transcript(const Transcript& t) {
  std::string out;
  for (const auto& step : t.steps) {
    out += "### Step " + std::to_string(step.index) + "\n";
    out += step.text;
    out += '\n';
    if (step.code) {
      out += "```python\n";
      out += step.code->source;
      if (!step.code->source.empty() && step.code->source.back() != '\n') out += '\n';
      out += "```\n";
    }
  }
  if (!t.final_answer.empty()) out += "Answer: " + t.final_answer + "\n";
  return out;
}

std::string MarkerKey::to_string() const {
  return "step" + std::to_string(step) + (code ? "_code" : "");
}

std::optional<MarkerKey> MarkerKey::parse(std::string_view text) {
  if (text.substr(0, 4) != "step") return std::nullopt;
  text.remove_prefix(4);
  MarkerKey key;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), key.step);
  if (ec != std::errc{} || key.step <= 0) return std::nullopt;
  std::string_view rest(ptr, static_cast<std::size_t>(text.data() + text.size() - ptr));
  if (rest.empty()) return key;
  if (rest == "_code") {
    key.code = true;
    return key;
  }
  return std::nullopt;
}

std::vector<MarkerKey> validate_step_sequence(const Transcript& t) {
  std::vector<MarkerKey> keys;
  keys.reserve(t.steps.size() * 2);
  for (const auto& step : t.steps) {
    keys.push_back({step.index, false});
    if (step.code) keys.push_back({step.index, true});
  }
  return keys;
}

// ---------------------------------------------------------------------------
// Symbolic labels

namespace {

struct SymbolPattern {
  SymbolicLabel label;
  std::string_view token;
  bool needs_boundary;
};

constexpr std::array<SymbolPattern, kSymbolicLabelCount> kPatterns{{
    {SymbolicLabel::frac, "\\frac", true},
    {SymbolicLabel::sqrt, "\\sqrt", true},
    {SymbolicLabel::circ, "\\circ", true},
    {SymbolicLabel::triangle, "\\triangle", true},
    {SymbolicLabel::angle, "\\angle", true},
    {SymbolicLabel::cases, "\\begin{cases}", false},
    {SymbolicLabel::sin, "\\sin", true},
    {SymbolicLabel::overrightarrow, "\\overrightarrow", true},
}};

bool is_ascii_letter(char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); }

}  // namespace

std::string_view to_string(SymbolicLabel label) {
  switch (label) {
    case SymbolicLabel::frac: return "frac";
    case SymbolicLabel::sqrt: return "sqrt";
    case SymbolicLabel::circ: return "circ";
    case SymbolicLabel::triangle: return "triangle";
    case SymbolicLabel::angle: return "angle";
    case SymbolicLabel::cases: return "cases";
    case SymbolicLabel::sin: return "sin";
    case SymbolicLabel::overrightarrow: return "overrightarrow";
  }
  return "unknown";
}

std::optional<SymbolicLabel> symbolic_label_from_string(std::string_view name) {
  for (const auto& p : kPatterns) {
    if (to_string(p.label) == name) return p.label;
  }
  return std::nullopt;
}

std::vector<std::pair<std::size_t, std::size_t>> formula_regions(std::string_view text) {
  // A run of "$$" counts as one delimiter; "\$" is a literal dollar sign.
  std::vector<std::pair<std::size_t, std::size_t>> regions;
  std::optional<std::size_t> open;
  std::size_t open_width = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '\\') {
      ++i;
      continue;
    }
    if (text[i] != '$') continue;
    const std::size_t width = (i + 1 < text.size() && text[i + 1] == '$') ? 2 : 1;
    if (!open) {
      open = i + width;
      open_width = width;
    } else if (width == open_width) {
      regions.emplace_back(*open, i);
      open.reset();
    } else if (width == 2) {
      // "$...$$" closes the inline region and leaves one '$' to reopen.
      regions.emplace_back(*open, i);
      open = i + 2;
      open_width = 1;
      i += 1;
      continue;
    }
    i += width - 1;
  }
  return regions;
}

SymbolicLabelSet symbolic_labels(std::string_view question) {
  SymbolicLabelSet labels;
  for (const auto& [begin, end] : formula_regions(question)) {
    const auto region = question.substr(begin, end - begin);
    for (const auto& p : kPatterns) {
      if (labels.contains(p.label)) continue;
      std::size_t pos = 0;
      while ((pos = region.find(p.token, pos)) != std::string_view::npos) {
        const auto after = pos + p.token.size();
        if (!p.needs_boundary || after >= region.size() || !is_ascii_letter(region[after])) {
          labels.insert(p.label);
          break;
        }
        pos = after;
      }
    }
  }
  return labels;
}

// ---------------------------------------------------------------------------
// Corpus I/O

std::string corpus_line(const CorpusRecord& record) {
  nlohmann::ordered_json j;
  j["sample_id"] = record.sample_id;
  j["question"] = record.question;
  j["raw_solution"] = record.raw_solution;
  if (record.final_answer) j["final_answer"] = *record.final_answer;
  j["has_diagram"] = record.has_diagram;
  return j.dump();
}

CorpusRecord corpus_record_from_json(std::string_view line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("corpus line is not JSON: ") + e.what());
  }
  try {
    CorpusRecord r;
    r.sample_id = j.at("sample_id").get<std::string>();
    r.question = j.value("question", std::string{});
    r.raw_solution = j.at("raw_solution").get<std::string>();
    if (j.contains("final_answer") && j["final_answer"].is_string()) {
      r.final_answer = j["final_answer"].get<std::string>();
    }
    r.has_diagram = j.value("has_diagram", false);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corpus record: ") + e.what());
  }
}

std::vector<CorpusRecord> read_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus " + path);
  std::vector<CorpusRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    out.push_back(corpus_record_from_json(line));
  }
  return out;
}

void write_corpus(const std::vector<CorpusRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write corpus " + path);
  for (const auto& r : records) out << corpus_line(r) << '\n';
  if (!out) throw IoError("write failed for " + path);
}

Transcript parse_record(const CorpusRecord& record, const MarkerConfig& config) {
  MarkerConfig lenient = config;
  const bool has_override = record.final_answer.has_value() && !record.final_answer->empty();
  if (has_override) lenient.strict = false;
  Transcript t = parse_transcript(record.raw_solution, lenient);
  if (t.answer_missing && has_override) {
    t.final_answer = *record.final_answer;
    t.answer_missing = false;
  }
  t.sample_id = record.sample_id;
  t.question = record.question;
  t.has_diagram = record.has_diagram;
  return t;
}

}  // namespace trajlab
