#include "trajlab/codesyntax.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <tuple>
#include <unordered_map>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "pysyntax.hpp"
#include "trajlab/error.hpp"

namespace trajlab {

std::string_view to_string(SyntaxCategory c) {
  switch (c) {
    case SyntaxCategory::control_flow: return "control_flow";
    case SyntaxCategory::function_call: return "function_call";
    case SyntaxCategory::data_flow: return "data_flow";
  }
  return "unknown";
}

std::optional<SyntaxCategory> syntax_category_from_string(std::string_view name) {
  for (auto c : {SyntaxCategory::control_flow, SyntaxCategory::function_call, SyntaxCategory::data_flow}) {
    if (to_string(c) == name) return c;
  }
  return std::nullopt;
}

std::string_view to_string(SyntaxScheme s) {
  return s == SyntaxScheme::coarse ? "coarse" : "fine_function_call";
}

std::string_view to_string(SpanPooling p) {
  switch (p) {
    case SpanPooling::mean: return "mean";
    case SpanPooling::first: return "first";
    case SpanPooling::last: return "last";
  }
  return "unknown";
}

std::optional<SpanPooling> span_pooling_from_string(std::string_view name) {
  for (auto p : {SpanPooling::mean, SpanPooling::first, SpanPooling::last}) {
    if (to_string(p) == name) return p;
  }
  return std::nullopt;
}

namespace {

SyntaxCategory statement_category(std::string_view kind) {
  static const std::set<std::string_view> data{"Assign", "AugAssign", "AnnAssign", "Import", "ImportFrom",
                                               "Delete", "Global",    "Nonlocal",  "Expr"};
  return data.contains(kind) ? SyntaxCategory::data_flow : SyntaxCategory::control_flow;
}

bool strictly_contains(const SyntaxSpan& outer, const SyntaxSpan& inner) {
  return outer.start <= inner.start && inner.end <= outer.end &&
         (outer.start != inner.start || outer.end != inner.end);
}

}  // namespace

std::vector<SyntaxSpan> label_spans(std::string_view source, SpanMode mode) {
  const auto parsed = detail::parse_python(source);
  std::vector<SyntaxSpan> spans;
  spans.reserve(parsed.statements.size() + parsed.calls.size());
  for (const auto& s : parsed.statements) {
    if (s.bare_call) continue;
    spans.push_back({statement_category(s.kind), s.kind, s.start, s.end, 0});
  }
  for (const auto& c : parsed.calls) spans.push_back({SyntaxCategory::function_call, c.callee, c.start, c.end, 0});

  std::sort(spans.begin(), spans.end(), [](const SyntaxSpan& a, const SyntaxSpan& b) {
    return std::tie(a.start, a.end, a.category, a.fine_label) < std::tie(b.start, b.end, b.category, b.fine_label);
  });

  // Quadratic; code blocks are small.
  for (std::size_t i = 0; i < spans.size(); ++i) {
    int depth = 0;
    for (std::size_t j = 0; j < spans.size(); ++j) {
      if (j != i && strictly_contains(spans[j], spans[i])) ++depth;
    }
    spans[i].depth = depth;
  }
  if (mode == SpanMode::outermost_only) {
    std::erase_if(spans, [](const SyntaxSpan& s) { return s.depth > 0; });
  }
  return spans;
}

std::vector<SyntaxSpan> label_spans(const CodeBlock& code, SpanMode mode) { return label_spans(code.source, mode); }

// ---------------------------------------------------------------------------
// TokenMap

void TokenMap::validate() const {
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    if (p.byte_start >= p.byte_end || p.tok_start < 0 || p.tok_start >= p.tok_end) {
      throw FormatError(fmt::format("token map {}/{}: pair {} is empty or negative", sample_id, step, i));
    }
    if (i > 0 && (p.byte_start < pairs[i - 1].byte_end || p.tok_start < pairs[i - 1].tok_end)) {
      throw FormatError(fmt::format("token map {}/{}: pair {} overlaps or goes backwards", sample_id, step, i));
    }
  }
}

TokenMap token_map_from_json(std::string_view line) {
  TokenMap m;
  try {
    const auto j = nlohmann::json::parse(line);
    m.sample_id = j.at("sample_id").get<std::string>();
    m.step = j.at("step").get<int>();
    for (const auto& p : j.at("pairs")) {
      if (!p.is_array() || p.size() != 4) throw FormatError("token map pair must have four entries");
      const auto bs = p[0].get<long long>();
      const auto be = p[1].get<long long>();
      if (bs < 0 || be < 0) throw FormatError("negative byte offset in token map");
      m.pairs.push_back({static_cast<std::size_t>(bs), static_cast<std::size_t>(be), p[2].get<int>(), p[3].get<int>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad token map line: ") + e.what());
  }
  m.validate();
  return m;
}

std::string token_map_line(const TokenMap& map) {
  nlohmann::ordered_json j;
  j["sample_id"] = map.sample_id;
  j["step"] = map.step;
  auto pairs = nlohmann::ordered_json::array();
  for (const auto& p : map.pairs) pairs.push_back({p.byte_start, p.byte_end, p.tok_start, p.tok_end});
  j["pairs"] = std::move(pairs);
  return j.dump();
}

std::vector<TokenMap> read_token_maps(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open token maps " + path);
  std::vector<TokenMap> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(token_map_from_json(line));
  }
  return out;
}

void write_token_maps(const std::vector<TokenMap>& maps, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write token maps " + path);
  for (const auto& m : maps) out << token_map_line(m) << '\n';
  if (!out) throw IoError("write failed for " + path);
}

SpanMapping map_spans_to_tokens(const std::vector<SyntaxSpan>& spans, const TokenMap& map) {
  SpanMapping result;
  if (spans.empty()) return result;
  if (map.pairs.empty()) {
    throw CoverageError(fmt::format("token map for {} step {} is empty", map.sample_id, map.step));
  }
  const auto& pairs = map.pairs;
  for (const auto& span : spans) {
    const auto first = std::partition_point(pairs.begin(), pairs.end(),
                                            [&](const TokenPair& p) { return p.byte_end <= span.start; });
    const auto stop = std::partition_point(pairs.begin(), pairs.end(),
                                           [&](const TokenPair& p) { return p.byte_start < span.end; });
    if (first >= stop || first->byte_start > span.start || std::prev(stop)->byte_end < span.end) {
      ++result.dropped;
      continue;
    }
    result.mapped.push_back({span, {first->tok_start, std::prev(stop)->tok_end}});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Probe datasets

namespace {

struct PendingExample {
  std::string label;
  RowKey key;
  Eigen::VectorXd feature;
};

ProbeDataset assemble(std::vector<PendingExample>& examples, std::vector<std::string> class_names, int layer,
                      std::size_t dim) {
  std::erase_if(class_names, [&](const std::string& name) {
    return std::none_of(examples.begin(), examples.end(), [&](const PendingExample& e) { return e.label == name; });
  });
  if (class_names.size() < 2) {
    throw ClassTooSmall(fmt::format("only {} class(es) present at layer {}", class_names.size(), layer));
  }
  std::map<std::string, int> ids;
  for (std::size_t c = 0; c < class_names.size(); ++c) ids[class_names[c]] = static_cast<int>(c);

  ProbeDataset ds;
  ds.layer = layer;
  ds.class_names = std::move(class_names);
  ds.features.resize(static_cast<Eigen::Index>(examples.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < examples.size(); ++i) {
    ds.features.row(static_cast<Eigen::Index>(i)) = examples[i].feature.transpose();
    ds.labels.push_back(ids.at(examples[i].label));
    ds.keys.push_back(std::move(examples[i].key));
  }
  return ds;
}

Eigen::VectorXd to_vector(std::span<const float> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t j = 0; j < v.size(); ++j) out(static_cast<Eigen::Index>(j)) = static_cast<double>(v[j]);
  return out;
}

}  // namespace

ProbeDataset build_syntax_probe_dataset(const ActivationSet& set, const std::vector<Transcript>& transcripts,
                                        const std::vector<TokenMap>& maps, int layer,
                                        const SyntaxDatasetOptions& options, SyntaxDatasetStats* stats) {
  SyntaxDatasetStats local;
  SyntaxDatasetStats& st = stats ? *stats : local;
  st = {};

  std::map<std::pair<std::string, int>, const TokenMap*> map_index;
  for (const auto& m : maps) map_index[{m.sample_id, m.step}] = &m;

  std::map<std::tuple<std::string, int, int>, std::size_t> rows;
  for (const auto& h : set.manifest()) {
    if (h.layer == layer && h.marker == Marker::code_token) rows[{h.sample_id, h.step, h.token_index}] = h.row;
  }

  std::vector<PendingExample> examples;
  for (const auto& t : transcripts) {
    for (const auto& step : t.steps) {
      if (!step.code) continue;
      ++st.code_blocks;
      const auto it = map_index.find({t.sample_id, step.index});
      if (it == map_index.end()) {
        ++st.unmapped_blocks;
        continue;
      }
      std::vector<SyntaxSpan> spans;
      try {
        spans = label_spans(*step.code, options.mode);
      } catch (const SyntaxError&) {
        ++st.unparsed_blocks;
        continue;
      }
      if (options.scheme == SyntaxScheme::fine_function_call) {
        std::erase_if(spans, [](const SyntaxSpan& s) { return s.category != SyntaxCategory::function_call; });
      }
      const auto mapping = map_spans_to_tokens(spans, *it->second);
      st.dropped_spans += mapping.dropped;

      for (const auto& m : mapping.mapped) {
        Eigen::VectorXd pooled = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(set.dim()));
        auto token_row = [&](int tok) {
          const auto r = rows.find({t.sample_id, step.index, tok});
          if (r == rows.end()) {
            throw CoverageError(fmt::format("no code_token vector for {} step {} token {} at layer {}", t.sample_id,
                                            step.index, tok, layer));
          }
          return to_vector(set.row(r->second));
        };
        switch (options.pooling) {
          case SpanPooling::first:
            pooled = token_row(m.tokens.start);
            break;
          case SpanPooling::last:
            pooled = token_row(m.tokens.end - 1);
            break;
          case SpanPooling::mean:
            for (int tok = m.tokens.start; tok < m.tokens.end; ++tok) pooled += token_row(tok);
            pooled /= static_cast<double>(m.tokens.end - m.tokens.start);
            break;
        }
        std::string label = options.scheme == SyntaxScheme::coarse ? std::string(to_string(m.span.category))
                                                                   : m.span.fine_label;
        examples.push_back({std::move(label), RowKey{t.sample_id, layer, step.index, m.tokens.start}, std::move(pooled)});
      }
    }
  }

  std::vector<std::string> class_names;
  if (options.scheme == SyntaxScheme::coarse) {
    for (auto c : {SyntaxCategory::control_flow, SyntaxCategory::function_call, SyntaxCategory::data_flow}) {
      class_names.emplace_back(to_string(c));
    }
  } else {
    std::map<std::string, std::size_t> counts;
    for (const auto& e : examples) ++counts[e.label];
    bool other = false;
    for (auto& e : examples) {
      if (counts[e.label] < options.min_fine_count) {
        e.label = "<other>";
        other = true;
      }
    }
    for (const auto& [name, n] : counts) {
      if (n >= options.min_fine_count) class_names.push_back(name);
    }
    if (other) class_names.push_back("<other>");
    std::sort(class_names.begin(), class_names.end());
  }
  return assemble(examples, std::move(class_names), layer, set.dim());
}

ProbeDataset build_symbolic_probe_dataset(const ActivationSet& set, const std::vector<Transcript>& transcripts,
                                          Marker modality, int layer, SymbolicLabelMode mode) {
  if (modality != Marker::code_pooled && modality != Marker::image_pooled) {
    throw InvalidArgument("symbolic probing uses code_pooled or image_pooled records");
  }
  std::unordered_map<std::string, SymbolicLabelSet> labels;
  for (const auto& t : transcripts) labels[t.sample_id] = symbolic_labels(t.question);

  std::vector<PendingExample> examples;
  for (const auto& h : set.manifest()) {
    if (h.layer != layer || h.marker != modality) continue;
    const auto it = labels.find(h.sample_id);
    if (it == labels.end() || it->second.empty()) continue;
    if (mode == SymbolicLabelMode::exclusive && it->second.size() != 1) continue;
    examples.push_back({std::string(to_string(*it->second.begin())), RowKey{h.sample_id, layer, h.step, h.token_index},
                        to_vector(set.row(h.row))});
  }
  std::vector<std::string> class_names;
  for (auto l : {SymbolicLabel::frac, SymbolicLabel::sqrt, SymbolicLabel::circ, SymbolicLabel::triangle,
                 SymbolicLabel::angle, SymbolicLabel::cases, SymbolicLabel::sin, SymbolicLabel::overrightarrow}) {
    class_names.emplace_back(to_string(l));
  }
  return assemble(examples, std::move(class_names), layer, set.dim());
}

}  // namespace trajlab
