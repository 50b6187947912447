#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "trajlab/activations.hpp"

namespace trajlab {

/// Rows are observations, columns are coordinates.
using PointMatrix = Eigen::MatrixXd;

PointMatrix to_matrix(std::span<const ActivationRecord> records);
PointMatrix to_matrix(const std::vector<std::vector<double>>& rows);

Eigen::RowVectorXd column_mean(const PointMatrix& points);

/// Eigenvalues of a covariance matrix, descending, zero-padded to the ambient
/// dimension.
struct Spectrum {
  std::vector<double> eigenvalues;
  double trace = 0.0;

  /// Sorts, validates non-negativity and fills in the trace.
  static Spectrum from_eigenvalues(std::vector<double> values);

  std::size_t dimension() const noexcept { return eigenvalues.size(); }
  std::size_t nonzero_count() const noexcept;
};

struct NormalizedSpectrum {
  std::vector<double> p;
};

/// Eigenvalues below this fraction of the trace (in magnitude) are treated as
/// round-off and clamped to zero; anything more negative is an error.
inline constexpr double kNegativeEigenTolerance = 1e-10;

/// Sample covariance (1/(n-1)) spectrum. Uses the n x n Gram matrix when the
/// ambient dimension exceeds the sample count.
Spectrum covariance_spectrum(const PointMatrix& points);

NormalizedSpectrum normalize(const Spectrum& s);

/// exp of the Shannon entropy of the normalized spectrum (0 log 0 = 0).
double erank(const Spectrum& s);

/// Participation ratio (sum lambda)^2 / sum lambda^2.
double intrinsic_dimension(const Spectrum& s);

enum class CenterKind { mean, medoid };

struct ClusterStats {
  Eigen::VectorXd centroid;
  double dispersion = 0.0;
  std::size_t size = 0;
};

/// Mean Euclidean distance from each point to the cluster center.
ClusterStats cluster_stats(const PointMatrix& points, CenterKind center = CenterKind::mean);

struct PcaResult {
  PointMatrix projected;          // n x components
  Eigen::MatrixXd components;     // d x components, unit columns
  std::vector<double> explained;  // lambda_i / trace for the kept components
};

/// Projects centered data onto the leading covariance eigenvectors. Each
/// eigenvector is oriented so that its largest-magnitude entry is positive.
PcaResult pca_project(const PointMatrix& points, std::size_t components);

// ---------------------------------------------------------------------------
// Trajectory report

/// How marker vectors are grouped into report cells within a layer.
enum class GroupingScheme {
  step,    // step1, step1_code, step2, ...
  marker,  // reasoning, code
  layer,   // all
};

/// across_samples pools every vector of a cell; per_sample computes the
/// metrics for each sample's vectors separately and averages them.
enum class Pooling { across_samples, per_sample };

struct TrajectoryOptions {
  GroupingScheme grouping = GroupingScheme::step;
  Pooling pooling = Pooling::across_samples;
  CenterKind center = CenterKind::mean;
};

struct TrajectoryRow {
  int layer = 0;
  std::string group;
  std::size_t n = 0;
  std::optional<double> dispersion;
  std::optional<double> erank;
  std::optional<double> id;
  /// Empty when the cell is complete; otherwise why metrics are missing.
  std::string note;
};

/// Group label of a marker record under a scheme, or nullopt if the record is
/// not part of the trajectory (code tokens, pooled vectors).
std::optional<std::string> group_of(const RecordHeader& h, GroupingScheme scheme);

/// One row per (layer, group) cell, ordered by layer then canonical group
/// order. Cells that cannot be evaluated are kept with empty metrics.
std::vector<TrajectoryRow> trajectory_report(const ActivationSet& set, const std::vector<int>& layers,
                                             const TrajectoryOptions& options = {});

void write_trajectory_csv(const std::vector<TrajectoryRow>& rows, std::ostream& out);
std::string trajectory_json(const std::vector<TrajectoryRow>& rows);

}  // namespace trajlab
