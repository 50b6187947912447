#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "svg_plot.hpp"
#include "trajlab/activations.hpp"
#include "trajlab/codesyntax.hpp"
#include "trajlab/error.hpp"
#include "trajlab/geometry.hpp"
#include "trajlab/pipeline.hpp"
#include "trajlab/probes.hpp"
#include "trajlab/scoring.hpp"
#include "trajlab/transcript.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace trajlab;

namespace {

constexpr int kOk = 0;
constexpr int kDataFailure = 1;
constexpr int kUsage = 2;

// Thrown for bad invocations the option parser cannot see.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::vector<int> layers;
  std::uint64_t seed = 42;
  std::string out;
  std::size_t pool_size = 1;
};

struct BuildOpts {
  std::string questions;
  std::string mock;
  bool use_mock = false;
  std::string interpreter;
};

struct GeometryOpts {
  std::string dump;
  std::string grouping = "step";
  std::string pooling = "across_samples";
  std::string center = "mean";
  bool no_pca = false;
};

struct ProbeOpts {
  std::string dump, corpus, token_maps;
  std::vector<std::string> schemes{"coarse", "fine_function_call", "symbolic_code", "symbolic_image"};
  std::vector<std::string> classifiers{"knn", "svm", "forest"};
  std::size_t k = 5;
  int trees = 100;
  int epochs = 200;
  double lambda = 1e-4;
  double test_fraction = 0.2;
  std::string span_mode = "all";
  std::string span_pooling = "mean";
  std::string label_mode = "primary";
  std::size_t min_fine_count = 10;
};

struct CorrelateOpts {
  std::string scorecards;
  std::vector<std::string> pairs;
};

const std::map<std::string, GroupingScheme> kGroupings{
    {"step", GroupingScheme::step}, {"marker", GroupingScheme::marker}, {"layer", GroupingScheme::layer}};
const std::map<std::string, Pooling> kPoolings{{"across_samples", Pooling::across_samples},
                                               {"per_sample", Pooling::per_sample}};
const std::map<std::string, CenterKind> kCenters{{"mean", CenterKind::mean}, {"medoid", CenterKind::medoid}};
const std::map<std::string, SpanMode> kSpanModes{{"all", SpanMode::all}, {"outermost", SpanMode::outermost_only}};
const std::map<std::string, SpanPooling> kSpanPoolings{
    {"mean", SpanPooling::mean}, {"first", SpanPooling::first}, {"last", SpanPooling::last}};
const std::map<std::string, SymbolicLabelMode> kLabelModes{{"primary", SymbolicLabelMode::primary},
                                                           {"exclusive", SymbolicLabelMode::exclusive}};

template <class T>
std::vector<std::string> keys(const std::map<std::string, T>& m) {
  std::vector<std::string> out;
  for (const auto& [k, v] : m) out.push_back(k);
  return out;
}

std::string utc_now() {
  auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << content;
  if (!out.flush()) throw IoError("write failed: " + path.string());
}

fs::path output_dir(const Common& c) {
  if (c.out.empty()) throw UsageError("--out is required");
  fs::path dir(c.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(fmt::format("cannot create {}: {}", dir.string(), ec.message()));
  return dir;
}

void require_path(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(fmt::format("{} is required", what));
  if (!fs::exists(path)) throw UsageError(fmt::format("{} not found: {}", what, path));
}

std::vector<int> layers_or_all(const Common& c, const ActivationSet& set) {
  if (!c.layers.empty()) {
    std::vector<int> l = c.layers;
    std::sort(l.begin(), l.end());
    l.erase(std::unique(l.begin(), l.end()), l.end());
    return l;
  }
  std::set<int> seen;
  for (const auto& h : set.manifest()) seen.insert(h.layer);
  return {seen.begin(), seen.end()};
}

// ---- geometry

void pca_outputs(const ActivationSet& set, int layer, const GeometryOpts& g, const fs::path& out) {
  std::vector<ActivationRecord> recs;
  std::vector<std::string> groups;
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto r = set.record(i);
    if (r.header->layer != layer) continue;
    auto grp = group_of(*r.header, kGroupings.at(g.grouping));
    if (!grp) continue;
    recs.push_back(r);
    groups.push_back(*grp);
  }
  if (recs.size() < 3 || set.dim() < 2) {
    std::cerr << fmt::format("layer {}: {} marker vectors, PCA skipped\n", layer, recs.size());
    return;
  }
  PcaResult pca = pca_project(to_matrix(recs), 2);

  std::string csv = "sample_id,marker,step,group,pc1,pc2\n";
  std::map<std::string, plot::Series> by_group;
  std::vector<std::string> order;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const auto& h = *recs[i].header;
    double x = pca.projected(static_cast<Eigen::Index>(i), 0);
    double y = pca.projected(static_cast<Eigen::Index>(i), 1);
    csv += fmt::format("{},{},{},{},{},{}\n", h.sample_id, to_string(h.marker), h.step, groups[i], x, y);
    if (!by_group.count(groups[i])) {
      order.push_back(groups[i]);
      by_group[groups[i]].name = groups[i];
    }
    by_group[groups[i]].points.push_back({x, y});
  }
  write_file(out / fmt::format("pca_layer{}.csv", layer), csv);

  std::vector<plot::Series> series;
  for (const auto& name : order) series.push_back(by_group[name]);
  plot::Axes axes{fmt::format("Marker states, layer {} ({:.1f}% / {:.1f}% variance)", layer, 100 * pca.explained[0],
                              100 * pca.explained[1]),
                  "PC1", "PC2", false};
  write_file(out / fmt::format("pca_layer{}.svg", layer), plot::scatter_plot(axes, series));
}

int cmd_geometry(const Common& c, const GeometryOpts& g) {
  require_path(g.dump, "--dump");
  fs::path out = output_dir(c);
  ActivationSet set = read_dump(g.dump);
  std::vector<int> layers = layers_or_all(c, set);
  auto rows = trajectory_report(set, layers, {kGroupings.at(g.grouping), kPoolings.at(g.pooling), kCenters.at(g.center)});
  if (rows.empty()) {
    std::cerr << "no trajectory markers for the requested layers\n";
    return kDataFailure;
  }

  std::ostringstream csv;
  write_trajectory_csv(rows, csv);
  write_file(out / "trajectory.csv", csv.str());
  write_file(out / "trajectory.json", trajectory_json(rows));

  std::vector<std::string> group_order;
  for (const auto& r : rows)
    if (std::find(group_order.begin(), group_order.end(), r.group) == group_order.end()) group_order.push_back(r.group);

  struct Metric {
    const char* file;
    const char* label;
    std::optional<double> TrajectoryRow::*field;
  };
  for (const Metric& m : {Metric{"dispersion.svg", "Intra-step dispersion", &TrajectoryRow::dispersion},
                          Metric{"erank.svg", "ERank", &TrajectoryRow::erank},
                          Metric{"id.svg", "ID", &TrajectoryRow::id}}) {
    std::vector<plot::Series> series;
    for (const auto& grp : group_order) {
      plot::Series s{grp, {}};
      for (const auto& r : rows)
        if (r.group == grp) s.points.push_back({static_cast<double>(r.layer), r.*m.field});
      series.push_back(std::move(s));
    }
    write_file(out / m.file, plot::line_plot({std::string(m.label) + " by layer", "layer", m.label, true}, series));
  }

  if (!g.no_pca)
    for (int layer : layers) {
      try {
        pca_outputs(set, layer, g, out);
      } catch (const Error& e) {
        std::cerr << fmt::format("layer {}: PCA skipped: {}\n", layer, e.what());
      }
    }

  std::size_t incomplete = 0;
  for (const auto& r : rows)
    if (!r.note.empty()) {
      ++incomplete;
      std::cerr << fmt::format("layer {} group {}: {}\n", r.layer, r.group, r.note);
    }
  std::cout << fmt::format("{} rows ({} incomplete) written to {}\n", rows.size(), incomplete, out.string());
  return kOk;
}

// ---- probe

std::vector<Transcript> load_transcripts(const std::string& path) {
  std::vector<Transcript> out;
  for (const auto& rec : read_corpus(path)) {
    try {
      out.push_back(parse_record(rec));
    } catch (const MalformedTranscript& e) {
      std::cerr << fmt::format("{}: skipped: {}\n", rec.sample_id, e.what());
    }
  }
  return out;
}

int cmd_probe(const Common& c, const ProbeOpts& p) {
  require_path(p.dump, "--dump");
  require_path(p.corpus, "--corpus");
  if (!p.token_maps.empty()) require_path(p.token_maps, "--token-maps");
  fs::path out = output_dir(c);

  std::vector<Classifier> classifiers;
  for (const auto& name : p.classifiers) {
    auto cl = classifier_from_string(name);
    if (!cl) throw UsageError("unknown classifier " + name);
    classifiers.push_back(*cl);
  }
  static const std::set<std::string> known{"coarse", "fine_function_call", "symbolic_code", "symbolic_image"};
  for (const auto& s : p.schemes)
    if (!known.count(s)) throw UsageError("unknown scheme " + s);

  ActivationSet set = read_dump(p.dump);
  std::vector<Transcript> transcripts = load_transcripts(p.corpus);
  std::vector<TokenMap> maps;
  if (!p.token_maps.empty()) maps = read_token_maps(p.token_maps);

  ProbeConfig cfg;
  cfg.k = p.k;
  cfg.lambda = p.lambda;
  cfg.epochs = p.epochs;
  cfg.trees = p.trees;
  cfg.test_fraction = p.test_fraction;
  cfg.seed = c.seed;
  cfg.threads = static_cast<unsigned>(std::max<std::size_t>(1, c.pool_size));

  std::vector<ProbeReportRow> rows;
  for (int layer : layers_or_all(c, set)) {
    for (const auto& scheme : p.schemes) {
      ProbeDataset ds;
      try {
        if (scheme == "coarse" || scheme == "fine_function_call") {
          if (p.token_maps.empty()) {
            std::cerr << fmt::format("layer {} {}: skipped: no --token-maps\n", layer, scheme);
            continue;
          }
          SyntaxDatasetOptions o;
          o.scheme = scheme == "coarse" ? SyntaxScheme::coarse : SyntaxScheme::fine_function_call;
          o.pooling = kSpanPoolings.at(p.span_pooling);
          o.mode = kSpanModes.at(p.span_mode);
          o.min_fine_count = p.min_fine_count;
          SyntaxDatasetStats stats;
          ds = build_syntax_probe_dataset(set, transcripts, maps, layer, o, &stats);
          if (stats.unparsed_blocks || stats.unmapped_blocks || stats.dropped_spans)
            std::cerr << fmt::format("layer {} {}: {} unparsed blocks, {} unmapped blocks, {} dropped spans\n", layer,
                                     scheme, stats.unparsed_blocks, stats.unmapped_blocks, stats.dropped_spans);
        } else {
          Marker modality = scheme == "symbolic_code" ? Marker::code_pooled : Marker::image_pooled;
          ds = build_symbolic_probe_dataset(set, transcripts, modality, layer, kLabelModes.at(p.label_mode));
        }
      } catch (const ClassTooSmall& e) {
        std::cerr << fmt::format("layer {} {}: skipped: {}\n", layer, scheme, e.what());
        continue;
      }
      for (Classifier cl : classifiers) {
        try {
          rows.push_back({layer, scheme, run_probe(ds, cl, cfg)});
        } catch (const ClassTooSmall& e) {
          std::cerr << fmt::format("layer {} {} {}: skipped: {}\n", layer, scheme, to_string(cl), e.what());
        }
      }
    }
  }
  if (rows.empty()) {
    std::cerr << "no probe could be run\n";
    return kDataFailure;
  }

  std::ostringstream csv;
  write_probe_csv(rows, csv);
  write_file(out / "probe.csv", csv.str());
  write_file(out / "probe.json", probe_json(rows));

  std::vector<plot::Series> series;
  for (const auto& scheme : p.schemes)
    for (Classifier cl : classifiers) {
      plot::Series s{fmt::format("{} {}", scheme, to_string(cl)), {}};
      for (const auto& r : rows)
        if (r.label_scheme == scheme && r.result.classifier == cl)
          s.points.push_back({static_cast<double>(r.layer), r.result.accuracy});
      if (!s.points.empty()) series.push_back(std::move(s));
    }
  write_file(out / "probe_accuracy.svg", plot::line_plot({"Probe accuracy by layer", "layer", "accuracy", true}, series));
  std::cout << fmt::format("{} probe rows written to {}\n", rows.size(), out.string());
  return kOk;
}

// ---- correlate

int cmd_correlate(const Common& c, const CorrelateOpts& o) {
  require_path(o.scorecards, "--scorecards");
  fs::path out = output_dir(c);
  std::vector<MetricPair> pairs;
  for (const auto& name : o.pairs) {
    auto p = metric_pair_from_string(name);
    if (!p) throw UsageError("unknown metric pair " + name);
    pairs.push_back(*p);
  }
  if (pairs.empty()) pairs = default_metric_pairs();

  auto cards = read_scorecards(o.scorecards);
  CorrelationOutcome outcome;
  try {
    outcome = correlation_report(cards, pairs);
  } catch (const InsufficientData& e) {
    std::cerr << "correlate: " << e.what() << "\n";
    return kDataFailure;
  }
  std::ostringstream csv;
  write_correlation_csv(outcome.reports, csv);
  write_file(out / "correlation.csv", csv.str());

  json j;
  j["n_cards"] = cards.size();
  j["reports"] = json::array();
  for (const auto& r : outcome.reports)
    j["reports"].push_back({{"pair", pair_name(r.metric_pair)}, {"pearson", r.pearson}, {"spearman", r.spearman}, {"n", r.n}});
  j["flagged"] = json::array();
  for (const auto& f : outcome.flagged)
    j["flagged"].push_back({{"pair", pair_name(f.metric_pair)}, {"n", f.n}, {"reason", f.reason}});
  NormalizedScores means = mean_scores(cards);
  j["means"] = json::object();
  for (Metric m : kAllMetrics) {
    auto v = means.get(m);
    j["means"][std::string(to_string(m))] = v ? json(*v) : json(nullptr);
  }
  write_file(out / "correlation.json", j.dump(2) + "\n");

  for (const auto& f : outcome.flagged) std::cerr << fmt::format("{}: {} (n={})\n", pair_name(f.metric_pair), f.reason, f.n);
  std::cout << fmt::format("{} pairs reported, {} flagged\n", outcome.reports.size(), outcome.flagged.size());
  return outcome.flagged.empty() ? kOk : kDataFailure;
}

// ---- build-corpus

int cmd_build_corpus(const Common& c, const BuildOpts& b, json& meta) {
  require_path(c.config, "--config");
  PipelineFileConfig cfg = load_pipeline_config(c.config);
  if (!b.questions.empty()) cfg.questions = b.questions;
  require_path(cfg.questions, "questions file");
  if (!b.interpreter.empty()) cfg.pipeline.limits.interpreter = b.interpreter;
  cfg.concurrency = std::max<std::size_t>(1, c.pool_size);
  for (auto& e : cfg.endpoints)
    if (!e.seed) e.seed = c.seed;
  fs::path out = output_dir(c);

  auto questions = read_questions(cfg.questions);
  PromptSet prompts = PromptSet::load(cfg.prompts_dir);
  std::unique_ptr<LlmClient> client;
  if (b.use_mock) {
    if (b.mock.empty()) {
      client = std::make_unique<MockLlmClient>(json::object(), questions);
    } else {
      require_path(b.mock, "--mock-endpoints file");
      client = MockLlmClient::from_file(b.mock, questions);
    }
  } else {
    if (cfg.endpoints.empty()) throw UsageError("config has no endpoints; add some or pass --mock-endpoints");
    client = std::make_unique<HttpLlmClient>(cfg.endpoints, cfg.max_in_flight);
  }

  CorpusReport report = run_corpus(questions, *client, prompts, cfg.pipeline, out, cfg.concurrency);
  write_file(out / "report.json", report.to_json() + "\n");
  meta["resumed"] = report.resumed;
  meta["mock"] = b.use_mock;

  std::cout << fmt::format("{} questions: {} retained, {} rejected, {} errors ({} resumed)\n", report.total,
                           report.retained, report.rejected, report.errors, report.resumed);
  if (report.errors) {
    std::cerr << "some samples hit endpoint errors; rerun the same command to retry them\n";
    return kDataFailure;
  }
  return kOk;
}

// ---- config-file expansion for the analysis subcommands

// Turns {"layers": [10, 20], "dump": "d"} into "--layers 10,20 --dump d".
// Flags given on the command line win over the file.
std::vector<std::string> config_args(const std::string& path, const std::vector<std::string>& argv) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError(fmt::format("{}: {}", path, e.what()));
  }
  if (!j.is_object()) throw UsageError(path + ": expected a JSON object");
  fs::path base = fs::path(path).parent_path();
  static const std::set<std::string> path_keys{"dump", "corpus", "token-maps", "scorecards", "out"};

  std::vector<std::string> out;
  for (const auto& [key, value] : j.items()) {
    std::string flag = "--" + key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    if (flag == "--config") throw UsageError("config files cannot nest");
    bool given = std::any_of(argv.begin(), argv.end(),
                             [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
    if (given) continue;
    auto scalar = [&](const json& v) -> std::string {
      if (v.is_string()) return v.get<std::string>();
      if (v.is_number_integer()) return std::to_string(v.get<long long>());
      if (v.is_number()) return fmt::format("{}", v.get<double>());
      throw UsageError(fmt::format("{}: bad value for {}", path, key));
    };
    if (value.is_boolean()) {
      if (value.get<bool>()) out.push_back(flag);
    } else if (value.is_array()) {
      std::string joined;
      for (const auto& v : value) joined += (joined.empty() ? "" : ",") + scalar(v);
      out.push_back(flag);
      out.push_back(joined);
    } else {
      std::string v = scalar(value);
      if (path_keys.count(flag.substr(2)) && fs::path(v).is_relative()) v = (base / v).string();
      out.push_back(flag);
      out.push_back(v);
    }
  }
  return out;
}

int classify(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e) || dynamic_cast<const IoError*>(&e) || dynamic_cast<const SchemaError*>(&e) ||
      dynamic_cast<const InvalidArgument*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const HostError*>(&e))
    return kUsage;
  return kDataFailure;
}

int run(std::vector<std::string> args) {
  CLI::App app{"Trajectory and verification toolkit for interleaved math/code reasoning"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  Common common;
  BuildOpts build;
  GeometryOpts geo;
  ProbeOpts probe;
  CorrelateOpts corr;

  auto add_common = [&](CLI::App* sub, bool uses_layers) {
    sub->add_option("--config", common.config, "Config file");
    if (uses_layers) sub->add_option("--layers", common.layers, "Layers to analyse (default: all)")->delimiter(',');
    sub->add_option("--seed", common.seed, "Random seed")->capture_default_str();
    sub->add_option("--out", common.out, "Output directory")->required();
    sub->add_option("--pool-size", common.pool_size, "Worker pool size")->check(CLI::PositiveNumber)->capture_default_str();
  };

  auto* b = app.add_subcommand("build-corpus", "Generate, verify and filter solutions");
  add_common(b, false);
  b->add_option("--questions", build.questions, "Questions JSONL (overrides the config)");
  auto* mock_opt = b->add_option("--mock-endpoints", build.mock, "Use scripted endpoints, optionally from a script file")->expected(0, 1);
  b->add_option("--interpreter-path", build.interpreter, "Python interpreter for the sandbox");

  auto* g = app.add_subcommand("geometry", "ERank, ID, dispersion and PCA of marker trajectories");
  add_common(g, true);
  g->add_option("--dump", geo.dump, "Activation dump directory");
  g->add_option("--grouping", geo.grouping, "step, marker or layer")->check(CLI::IsMember(keys(kGroupings)));
  g->add_option("--pooling", geo.pooling, "across_samples or per_sample")->check(CLI::IsMember(keys(kPoolings)));
  g->add_option("--center", geo.center, "mean or medoid")->check(CLI::IsMember(keys(kCenters)));
  g->add_flag("--no-pca", geo.no_pca, "Skip the PCA scatter plots");

  auto* p = app.add_subcommand("probe", "Syntax and symbolic-concept probing");
  add_common(p, true);
  p->add_option("--dump", probe.dump, "Activation dump directory");
  p->add_option("--corpus", probe.corpus, "Transcripts JSONL");
  p->add_option("--token-maps", probe.token_maps, "Token maps JSONL (needed for syntax schemes)");
  p->add_option("--schemes", probe.schemes, "coarse, fine_function_call, symbolic_code, symbolic_image")
      ->delimiter(',');
  p->add_option("--classifiers", probe.classifiers, "knn, svm, forest")->delimiter(',');
  p->add_option("--k", probe.k, "KNN neighbours")->check(CLI::PositiveNumber);
  p->add_option("--trees", probe.trees, "Forest size")->check(CLI::PositiveNumber);
  p->add_option("--epochs", probe.epochs, "SVM epochs")->check(CLI::PositiveNumber);
  p->add_option("--lambda", probe.lambda, "SVM regularisation")->check(CLI::PositiveNumber);
  p->add_option("--test-fraction", probe.test_fraction, "Held-out fraction")->check(CLI::Range(0.0, 1.0));
  p->add_option("--span-mode", probe.span_mode, "all or outermost")->check(CLI::IsMember(keys(kSpanModes)));
  p->add_option("--span-pooling", probe.span_pooling, "mean, first or last")
      ->check(CLI::IsMember(keys(kSpanPoolings)));
  p->add_option("--label-mode", probe.label_mode, "primary or exclusive")->check(CLI::IsMember(keys(kLabelModes)));
  p->add_option("--min-fine-count", probe.min_fine_count, "Rarer callees merge into <other>");

  auto* c = app.add_subcommand("correlate", "Pearson/Spearman correlation of scorecard metrics");
  add_common(c, false);
  c->add_option("--scorecards", corr.scorecards, "Scorecards JSONL");
  c->add_option("--pairs", corr.pairs, "Metric pairs such as ans_acc-text")->delimiter(',');

  // analysis configs expand into flags before parsing
  if (!args.empty() && args[0] != "build-corpus") {
    for (std::size_t i = 1; i < args.size(); ++i) {
      std::string cfg;
      if (args[i] == "--config" && i + 1 < args.size()) cfg = args[i + 1];
      if (args[i].rfind("--config=", 0) == 0) cfg = args[i].substr(9);
      if (cfg.empty()) continue;
      auto extra = config_args(cfg, args);
      args.insert(args.end(), extra.begin(), extra.end());
      break;
    }
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  build.use_mock = mock_opt->count() > 0;

  json meta;
  meta["command"] = app.get_subcommands().front()->get_name();
  meta["arguments"] = args;
  meta["seed"] = common.seed;
  meta["started_at"] = utc_now();
  int rc = kOk;
  try {
    if (b->parsed()) rc = cmd_build_corpus(common, build, meta);
    if (g->parsed()) rc = cmd_geometry(common, geo);
    if (p->parsed()) rc = cmd_probe(common, probe);
    if (c->parsed()) rc = cmd_correlate(common, corr);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    rc = classify(e);
  }
  meta["finished_at"] = utc_now();
  meta["exit_code"] = rc;
  if (rc != kUsage && !common.out.empty() && fs::is_directory(common.out)) {
    try {
      write_file(fs::path(common.out) / "run_meta.json", meta.dump(2) + "\n");
    } catch (const IoError& e) {
      std::cerr << "warning: " << e.what() << "\n";
    }
  }
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(std::move(args));
}
