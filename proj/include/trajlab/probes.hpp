#pragma once

#include <compare>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace trajlab {

/// Identity of a probe example, used for canonical row ordering.
struct RowKey {
  std::string sample_id;
  int layer = 0;
  int step = 0;
  int token = 0;

  friend auto operator<=>(const RowKey&, const RowKey&) = default;
};

struct ProbeDataset {
  Eigen::MatrixXd features;  // n x d
  std::vector<int> labels;   // class ids into class_names
  std::vector<std::string> class_names;
  int layer = 0;
  /// Optional; when present, one per row.
  std::vector<RowKey> keys;

  std::size_t size() const noexcept { return labels.size(); }
  std::vector<std::size_t> class_counts() const;

  /// Row subset, preserving order.
  ProbeDataset subset(const std::vector<std::size_t>& rows) const;

  /// Requires matching sizes, at least two classes present, and at least two
  /// members per present class. Throws ClassTooSmall / InvalidArgument.
  void validate() const;
};

enum class Classifier { knn, svm, forest };

std::string_view to_string(Classifier c);
std::optional<Classifier> classifier_from_string(std::string_view name);

struct ProbeResult {
  Classifier classifier = Classifier::knn;
  double accuracy = 0.0;
  /// Recall per class name over the classes present in the test split.
  std::map<std::string, double> per_class_accuracy;
  std::map<std::string, std::size_t> per_class_count;
  std::uint64_t seed = 0;
  std::size_t n_test = 0;
};

/// Per-class proportional split: each class contributes round(n_c * f)
/// examples to test, clamped to [1, n_c - 1].
std::pair<ProbeDataset, ProbeDataset> stratified_split(const ProbeDataset& ds, double test_fraction,
                                                       std::uint64_t seed);

/// Euclidean k-nearest-neighbour vote. Vote ties go to the smallest class id,
/// distance ties to the earliest training row in canonical key order.
ProbeResult knn_probe(const ProbeDataset& train, const ProbeDataset& test, std::size_t k);

struct SvmConfig {
  double lambda = 1e-4;
  int epochs = 200;
  std::uint64_t seed = 42;
};

/// One-vs-rest linear SVM (hinge + L2) trained by Pegasos-style subgradient
/// steps of size 1/(lambda t) on features standardized with train statistics.
ProbeResult svm_probe(const ProbeDataset& train, const ProbeDataset& test, const SvmConfig& config = {});

struct ForestConfig {
  int trees = 100;
  std::uint64_t seed = 42;
  /// Trees are independent; any thread count gives identical output.
  unsigned threads = 1;
};

/// Bootstrap ensemble of unpruned Gini trees with ceil(sqrt(d)) candidate
/// features per split; tree i is seeded with seed + i.
ProbeResult forest_probe(const ProbeDataset& train, const ProbeDataset& test, const ForestConfig& config = {});

struct ProbeConfig {
  std::size_t k = 5;
  double lambda = 1e-4;
  int epochs = 200;
  int trees = 100;
  double test_fraction = 0.2;
  std::uint64_t seed = 42;
  unsigned threads = 1;
};

/// Split with config.seed, then run one classifier.
ProbeResult run_probe(const ProbeDataset& ds, Classifier classifier, const ProbeConfig& config = {});

/// Mean accuracy of run_probe over several split/training seeds.
double mean_accuracy_over_seeds(const ProbeDataset& ds, Classifier classifier, ProbeConfig config,
                                const std::vector<std::uint64_t>& seeds);

struct ProbeReportRow {
  int layer = 0;
  std::string label_scheme;
  ProbeResult result;
};

void write_probe_csv(const std::vector<ProbeReportRow>& rows, std::ostream& out);
std::string probe_json(const std::vector<ProbeReportRow>& rows);

}  // namespace trajlab
