#pragma once

#include <cstddef>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace trajlab {

struct CodeBlock {
  int step_index = 0;
  std::string source;
  std::size_t byte_len = 0;

  static CodeBlock make(int step, std::string src) {
    CodeBlock block{step, std::move(src), 0};
    block.byte_len = block.source.size();
    return block;
  }

  friend bool operator==(const CodeBlock&, const CodeBlock&) = default;
};

struct Step {
  int index = 0;
  std::string text;
  std::optional<CodeBlock> code;

  friend bool operator==(const Step&, const Step&) = default;
};

struct Transcript {
  std::string sample_id;
  std::string question;
  std::vector<Step> steps;
  std::string final_answer;
  bool has_diagram = false;
  /// Set when the answer line was absent and parsing ran in lenient mode.
  bool answer_missing = false;

  std::size_t code_block_count() const;

  friend bool operator==(const Transcript&, const Transcript&) = default;
};

/// Line patterns that delimit a solution. Both regexes use ECMAScript syntax
/// and are matched against single lines (without the newline).
struct MarkerConfig {
  /// Capture group 1 must be the step number. Whatever follows the match on
  /// the heading line is treated as the first line of the step text.
  std::string step_heading = R"(^#+\s*Step\s+(\d+)\b)";
  /// Capture group 1 is the answer text.
  std::string answer_line = R"(^Answer\s*(?::|：)\s*(.*)$)";
  std::string fence = "```";
  /// Strict mode rejects transcripts without an answer line.
  bool strict = false;
};

/// Parses an interleaved math/code solution. Throws MalformedTranscript.
Transcript parse_transcript(std::string_view raw, const MarkerConfig& config = {});

/// Renders a transcript in the canonical marker grammar accepted by
/// parse_transcript with the default config.
std::string render_transcript(const Transcript& t);

/// Position in a reasoning trajectory: step k, either its reasoning marker or
/// its code marker.
struct MarkerKey {
  int step = 0;
  bool code = false;

  std::string to_string() const;
  static std::optional<MarkerKey> parse(std::string_view text);

  friend auto operator<=>(const MarkerKey&, const MarkerKey&) = default;
};

/// Canonical trajectory order step1, step1_code, ..., stepN, stepN_code,
/// with code keys only for steps that carry code.
std::vector<MarkerKey> validate_step_sequence(const Transcript& t);

// Math-symbolic concept labels over $...$ formula regions.

enum class SymbolicLabel { frac, sqrt, circ, triangle, angle, cases, sin, overrightarrow };

inline constexpr std::size_t kSymbolicLabelCount = 8;

std::string_view to_string(SymbolicLabel label);
std::optional<SymbolicLabel> symbolic_label_from_string(std::string_view name);

using SymbolicLabelSet = std::set<SymbolicLabel>;

SymbolicLabelSet symbolic_labels(std::string_view question);

/// Formula regions of a text, as [begin, end) byte ranges of their contents.
std::vector<std::pair<std::size_t, std::size_t>> formula_regions(std::string_view text);

// Corpus JSONL: {sample_id, question, raw_solution, final_answer?, has_diagram}.

struct CorpusRecord {
  std::string sample_id;
  std::string question;
  std::string raw_solution;
  std::optional<std::string> final_answer;
  bool has_diagram = false;
};

std::vector<CorpusRecord> read_corpus(const std::string& path);
void write_corpus(const std::vector<CorpusRecord>& records, const std::string& path);
std::string corpus_line(const CorpusRecord& record);
CorpusRecord corpus_record_from_json(std::string_view line);

/// Parses the record's solution and fills in sample metadata. A record-level
/// final_answer overrides a missing answer line.
Transcript parse_record(const CorpusRecord& record, const MarkerConfig& config = {});

}  // namespace trajlab
