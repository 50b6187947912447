#pragma once

#include <compare>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "trajlab/activations.hpp"
#include "trajlab/probes.hpp"
#include "trajlab/transcript.hpp"

namespace trajlab {

// Declaration order is the tie-break order for spans with equal offsets.
enum class SyntaxCategory { control_flow, function_call, data_flow };

std::string_view to_string(SyntaxCategory c);
std::optional<SyntaxCategory> syntax_category_from_string(std::string_view name);

struct SyntaxSpan {
  SyntaxCategory category = SyntaxCategory::data_flow;
  /// Dotted callee path for calls ("np.array", or "<dynamic>"); the node
  /// class name ("For", "Assign", ...) for statements.
  std::string fine_label;
  std::size_t start = 0;  // byte offsets into the source, [start, end)
  std::size_t end = 0;
  /// Number of emitted spans strictly containing this one.
  int depth = 0;

  friend bool operator==(const SyntaxSpan&, const SyntaxSpan&) = default;
};

enum class SpanMode { all, outermost_only };

/// Labels a Python 3 source. Statements become control_flow or data_flow
/// spans named after their node kind; every call expression becomes a
/// function_call span. An expression statement that is exactly one call is
/// represented by the call alone. Ordered by (start, end, category).
/// Throws SyntaxError. `match` statements are rejected as unsupported.
std::vector<SyntaxSpan> label_spans(std::string_view source, SpanMode mode = SpanMode::all);
std::vector<SyntaxSpan> label_spans(const CodeBlock& code, SpanMode mode = SpanMode::all);

/// One tokenizer offset pair: bytes [byte_start, byte_end) of the code block
/// map to model tokens [tok_start, tok_end).
struct TokenPair {
  std::size_t byte_start = 0;
  std::size_t byte_end = 0;
  int tok_start = 0;
  int tok_end = 0;

  friend bool operator==(const TokenPair&, const TokenPair&) = default;
};

struct TokenMap {
  std::string sample_id;
  int step = 0;
  std::vector<TokenPair> pairs;

  /// Pairs must be non-empty ranges, monotone and non-overlapping in both
  /// bytes and tokens. Throws FormatError.
  void validate() const;

  friend bool operator==(const TokenMap&, const TokenMap&) = default;
};

TokenMap token_map_from_json(std::string_view line);
std::string token_map_line(const TokenMap& map);
std::vector<TokenMap> read_token_maps(const std::string& path);
void write_token_maps(const std::vector<TokenMap>& maps, const std::string& path);

struct TokenRange {
  int start = 0;  // [start, end)
  int end = 0;

  friend bool operator==(const TokenRange&, const TokenRange&) = default;
};

struct MappedSpan {
  SyntaxSpan span;
  TokenRange tokens;
};

struct SpanMapping {
  std::vector<MappedSpan> mapped;
  /// Spans whose bytes the map does not cover.
  std::size_t dropped = 0;
};

/// Smallest contiguous run of pairs whose byte hull contains each span.
/// Throws CoverageError when spans exist but the map has no pairs.
SpanMapping map_spans_to_tokens(const std::vector<SyntaxSpan>& spans, const TokenMap& map);

enum class SyntaxScheme { coarse, fine_function_call };
enum class SpanPooling { mean, first, last };

std::string_view to_string(SyntaxScheme s);
std::string_view to_string(SpanPooling p);
std::optional<SpanPooling> span_pooling_from_string(std::string_view name);

struct SyntaxDatasetOptions {
  SyntaxScheme scheme = SyntaxScheme::coarse;
  SpanPooling pooling = SpanPooling::mean;
  SpanMode mode = SpanMode::all;
  /// Fine labels seen fewer times are merged into "<other>".
  std::size_t min_fine_count = 10;
};

struct SyntaxDatasetStats {
  std::size_t code_blocks = 0;
  std::size_t unparsed_blocks = 0;    // SyntaxError
  std::size_t unmapped_blocks = 0;    // no TokenMap for (sample, step)
  std::size_t dropped_spans = 0;      // outside the TokenMap
};

/// One example per span of every code block at `layer`; the feature is the
/// pooled code_token vectors over the span's token range. Throws
/// CoverageError when a mapped token has no code_token record and
/// ClassTooSmall when fewer than two classes remain.
ProbeDataset build_syntax_probe_dataset(const ActivationSet& set, const std::vector<Transcript>& transcripts,
                                        const std::vector<TokenMap>& maps, int layer,
                                        const SyntaxDatasetOptions& options = {},
                                        SyntaxDatasetStats* stats = nullptr);

enum class SymbolicLabelMode {
  /// Multi-label questions contribute one example under their first label.
  primary,
  /// Only questions carrying exactly one label contribute.
  exclusive,
};

/// One example per code_pooled or image_pooled record at `layer`, labelled by
/// the symbolic categories of the sample's question. Samples without labels
/// are skipped. Throws ClassTooSmall when fewer than two classes remain.
ProbeDataset build_symbolic_probe_dataset(const ActivationSet& set, const std::vector<Transcript>& transcripts,
                                          Marker modality, int layer,
                                          SymbolicLabelMode mode = SymbolicLabelMode::primary);

}  // namespace trajlab
