#include "trajlab/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "trajlab/error.hpp"
#include "trajlab/transcript.hpp"

namespace trajlab {

PointMatrix to_matrix(std::span<const ActivationRecord> records) {
  if (records.empty()) return PointMatrix(0, 0);
  const auto d = static_cast<Eigen::Index>(records.front().vector.size());
  PointMatrix m(static_cast<Eigen::Index>(records.size()), d);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const auto v = records[static_cast<std::size_t>(i)].vector;
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = static_cast<double>(v[static_cast<std::size_t>(j)]);
  }
  return m;
}

PointMatrix to_matrix(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return PointMatrix(0, 0);
  PointMatrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.front().size()) throw InvalidArgument("ragged point list");
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
  }
  return m;
}

Spectrum Spectrum::from_eigenvalues(std::vector<double> values) {
  for (double v : values) {
    if (!std::isfinite(v) || v < 0.0) throw NumericalFailure("spectrum has a negative or non-finite eigenvalue");
  }
  std::sort(values.begin(), values.end(), std::greater<>());
  Spectrum s;
  s.trace = std::accumulate(values.begin(), values.end(), 0.0);
  s.eigenvalues = std::move(values);
  return s;
}

std::size_t Spectrum::nonzero_count() const noexcept {
  return static_cast<std::size_t>(std::count_if(eigenvalues.begin(), eigenvalues.end(), [](double v) { return v > 0.0; }));
}

namespace {

void check_points(const PointMatrix& points) {
  if (points.rows() < 2) throw InsufficientSamples("need at least 2 vectors, got " + std::to_string(points.rows()));
  if (!points.allFinite()) throw InvalidArgument("points contain NaN or Inf");
}

}  // namespace

// Shifted by the first row so that a set of identical points has a mean equal
// to that point bit-for-bit.
Eigen::RowVectorXd column_mean(const PointMatrix& points) {
  const Eigen::RowVectorXd origin = points.row(0);
  return origin + (points.rowwise() - origin).colwise().mean();
}

namespace {

PointMatrix centered(const PointMatrix& points) {
  const Eigen::RowVectorXd mean = column_mean(points);
  return points.rowwise() - mean;
}

struct Eigenpairs {
  Eigen::VectorXd values;   // descending
  Eigen::MatrixXd vectors;  // columns match values; may be empty
};

// Eigendecomposition of a symmetric matrix, descending order.
Eigenpairs symmetric_eigen(const Eigen::MatrixXd& m, bool want_vectors) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m, want_vectors ? Eigen::ComputeEigenvectors
                                                                        : Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) throw NumericalFailure("symmetric eigensolver did not converge");
  Eigenpairs out;
  out.values = solver.eigenvalues().reverse();
  if (want_vectors) out.vectors = solver.eigenvectors().rowwise().reverse();
  return out;
}

std::vector<double> clamp_eigenvalues(const Eigen::VectorXd& values, double trace, std::size_t pad_to) {
  const double tol = kNegativeEigenTolerance * trace;
  std::vector<double> out(pad_to, 0.0);
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    double v = values(i);
    if (v < -tol) {
      throw NumericalFailure(fmt::format("eigenvalue {} below tolerance -{} of the trace", v, tol));
    }
    out[static_cast<std::size_t>(i)] = v < 0.0 ? 0.0 : v;
  }
  return out;
}

}  // namespace

Spectrum covariance_spectrum(const PointMatrix& points) {
  check_points(points);
  const auto n = points.rows();
  const auto d = points.cols();
  const PointMatrix xc = centered(points);
  const double denom = static_cast<double>(n - 1);

  Eigen::MatrixXd cov = d <= n ? Eigen::MatrixXd((xc.transpose() * xc) / denom)
                               : Eigen::MatrixXd((xc * xc.transpose()) / denom);
  const double trace = cov.trace();
  const auto pairs = symmetric_eigen(cov, false);
  return Spectrum::from_eigenvalues(clamp_eigenvalues(pairs.values, trace, static_cast<std::size_t>(d)));
}

NormalizedSpectrum normalize(const Spectrum& s) {
  if (!(s.trace > 0.0)) throw DegenerateSpectrum("spectrum has zero trace");
  NormalizedSpectrum out;
  out.p.reserve(s.eigenvalues.size());
  for (double v : s.eigenvalues) out.p.push_back(v / s.trace);
  return out;
}

double erank(const Spectrum& s) {
  const auto norm = normalize(s);
  double entropy = 0.0;
  for (double p : norm.p) {
    if (p > 0.0) entropy -= p * std::log(p);
  }
  return std::exp(entropy);
}

double intrinsic_dimension(const Spectrum& s) {
  if (!(s.trace > 0.0)) throw DegenerateSpectrum("spectrum has zero trace");
  double sum = 0.0;
  double sum_sq = 0.0;
  for (double v : s.eigenvalues) {
    sum += v;
    sum_sq += v * v;
  }
  return (sum * sum) / sum_sq;
}

ClusterStats cluster_stats(const PointMatrix& points, CenterKind center) {
  if (points.rows() == 0) throw EmptyCluster("cluster has no points");
  ClusterStats stats;
  stats.size = static_cast<std::size_t>(points.rows());
  if (center == CenterKind::mean) {
    stats.centroid = column_mean(points).transpose();
  } else {
    Eigen::Index best = 0;
    double best_total = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
      double total = 0.0;
      for (Eigen::Index j = 0; j < points.rows(); ++j) total += (points.row(i) - points.row(j)).norm();
      if (total < best_total) {
        best_total = total;
        best = i;
      }
    }
    stats.centroid = points.row(best).transpose();
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    total += (points.row(i).transpose() - stats.centroid).norm();
  }
  stats.dispersion = total / static_cast<double>(points.rows());
  return stats;
}

PcaResult pca_project(const PointMatrix& points, std::size_t components) {
  check_points(points);
  const auto n = points.rows();
  const auto d = points.cols();
  const auto limit = static_cast<std::size_t>(std::min<Eigen::Index>(n - 1, d));
  if (components == 0 || components > limit) {
    throw InvalidArgument(fmt::format("components must be in [1, {}], got {}", limit, components));
  }
  const auto k = static_cast<Eigen::Index>(components);
  const PointMatrix xc = centered(points);
  const double denom = static_cast<double>(n - 1);

  Eigen::MatrixXd basis(d, k);
  std::vector<double> eig;
  double trace = 0.0;
  if (d <= n) {
    const Eigen::MatrixXd cov = (xc.transpose() * xc) / denom;
    trace = cov.trace();
    const auto pairs = symmetric_eigen(cov, true);
    eig = clamp_eigenvalues(pairs.values, trace, static_cast<std::size_t>(d));
    basis = pairs.vectors.leftCols(k);
  } else {
    // Dual route: eigenvectors of the Gram matrix mapped back through the data.
    const Eigen::MatrixXd gram = (xc * xc.transpose()) / denom;
    trace = gram.trace();
    const auto pairs = symmetric_eigen(gram, true);
    eig = clamp_eigenvalues(pairs.values, trace, static_cast<std::size_t>(d));
    const double tiny = kNegativeEigenTolerance * trace;
    for (Eigen::Index c = 0; c < k; ++c) {
      const double lambda = eig[static_cast<std::size_t>(c)];
      if (lambda > tiny) {
        basis.col(c) = xc.transpose() * pairs.vectors.col(c) / std::sqrt(denom * lambda);
      } else {
        basis.col(c).setZero();
      }
    }
  }

  for (Eigen::Index c = 0; c < k; ++c) {
    Eigen::Index arg = 0;
    double best = -1.0;
    for (Eigen::Index r = 0; r < d; ++r) {
      const double mag = std::abs(basis(r, c));
      if (mag > best) {
        best = mag;
        arg = r;
      }
    }
    if (basis(arg, c) < 0.0) basis.col(c) *= -1.0;
  }

  PcaResult out;
  out.components = basis;
  out.projected = xc * basis;
  out.explained.resize(components, 0.0);
  const double total = std::accumulate(eig.begin(), eig.end(), 0.0);
  if (total > 0.0) {
    for (std::size_t c = 0; c < components; ++c) out.explained[c] = eig[c] / total;
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

// Sort key giving the canonical group order of each scheme.
std::pair<int, int> group_rank(const std::string& group) {
  if (auto key = MarkerKey::parse(group)) return {key->step, key->code ? 1 : 0};
  if (group == "reasoning") return {0, 0};
  if (group == "code") return {0, 1};
  return {0, 2};
}

struct CellMetrics {
  std::optional<double> dispersion;
  std::optional<double> erank;
  std::optional<double> id;
  std::string note;
};

CellMetrics evaluate_cell(const PointMatrix& pts, CenterKind center) {
  CellMetrics m;
  if (pts.rows() < 2) {
    m.note = "insufficient samples";
    return m;
  }
  m.dispersion = cluster_stats(pts, center).dispersion;
  try {
    const auto s = covariance_spectrum(pts);
    m.erank = erank(s);
    m.id = intrinsic_dimension(s);
  } catch (const DegenerateSpectrum&) {
    m.note = "zero variance";
  } catch (const NumericalFailure& e) {
    m.note = std::string("numerical failure: ") + e.what();
  }
  return m;
}

}  // namespace

std::optional<std::string> group_of(const RecordHeader& h, GroupingScheme scheme) {
  const bool code = h.marker == Marker::code_step;
  if (!code && h.marker != Marker::reasoning_step) return std::nullopt;
  switch (scheme) {
    case GroupingScheme::step:
      if (h.step <= 0) return std::nullopt;
      return MarkerKey{h.step, code}.to_string();
    case GroupingScheme::marker:
      return std::string(code ? "code" : "reasoning");
    case GroupingScheme::layer:
      return std::string("all");
  }
  return std::nullopt;
}

std::vector<TrajectoryRow> trajectory_report(const ActivationSet& set, const std::vector<int>& layers,
                                             const TrajectoryOptions& options) {
  // layer -> group -> record indices
  std::map<int, std::map<std::string, std::vector<std::size_t>>> cells;
  const std::set<int> wanted(layers.begin(), layers.end());
  for (const auto& h : set.manifest()) {
    if (!wanted.empty() && !wanted.contains(h.layer)) continue;
    auto group = group_of(h, options.grouping);
    if (!group) continue;
    cells[h.layer][*group].push_back(h.row);
  }

  std::vector<TrajectoryRow> rows;
  for (auto& [layer, groups] : cells) {
    std::vector<std::string> names;
    for (const auto& [name, _] : groups) names.push_back(name);
    std::sort(names.begin(), names.end(), [](const std::string& a, const std::string& b) {
      return std::make_pair(group_rank(a), a) < std::make_pair(group_rank(b), b);
    });
    for (const auto& name : names) {
      const auto& idx = groups[name];
      std::vector<ActivationRecord> recs;
      recs.reserve(idx.size());
      for (auto i : idx) recs.push_back(set.record(i));

      TrajectoryRow row;
      row.layer = layer;
      row.group = name;
      row.n = recs.size();

      if (options.pooling == Pooling::across_samples) {
        auto m = evaluate_cell(to_matrix(recs), options.center);
        row.dispersion = m.dispersion;
        row.erank = m.erank;
        row.id = m.id;
        row.note = m.note;
      } else {
        std::map<std::string, std::vector<ActivationRecord>> by_sample;
        for (const auto& r : recs) by_sample[r.header->sample_id].push_back(r);
        double disp = 0.0, er = 0.0, id = 0.0;
        std::size_t n_disp = 0, n_spec = 0;
        for (const auto& [sample, sample_recs] : by_sample) {
          auto m = evaluate_cell(to_matrix(sample_recs), options.center);
          if (m.dispersion) {
            disp += *m.dispersion;
            ++n_disp;
          }
          if (m.erank && m.id) {
            er += *m.erank;
            id += *m.id;
            ++n_spec;
          }
        }
        if (n_disp > 0) row.dispersion = disp / static_cast<double>(n_disp);
        if (n_spec > 0) {
          row.erank = er / static_cast<double>(n_spec);
          row.id = id / static_cast<double>(n_spec);
        }
        if (n_disp == 0) {
          row.note = "insufficient samples";
        } else if (n_spec == 0) {
          row.note = "zero variance";
        }
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

namespace {
std::string opt_num(const std::optional<double>& v) { return v ? fmt::format("{}", *v) : std::string{}; }
}  // namespace

void write_trajectory_csv(const std::vector<TrajectoryRow>& rows, std::ostream& out) {
  out << "layer,group,n,dispersion,erank,id\n";
  for (const auto& r : rows) {
    out << r.layer << ',' << r.group << ',' << r.n << ',' << opt_num(r.dispersion) << ',' << opt_num(r.erank) << ','
        << opt_num(r.id) << '\n';
  }
}

std::string trajectory_json(const std::vector<TrajectoryRow>& rows) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["layer"] = r.layer;
    j["group"] = r.group;
    j["n"] = r.n;
    j["dispersion"] = r.dispersion ? nlohmann::ordered_json(*r.dispersion) : nlohmann::ordered_json(nullptr);
    j["erank"] = r.erank ? nlohmann::ordered_json(*r.erank) : nlohmann::ordered_json(nullptr);
    j["id"] = r.id ? nlohmann::ordered_json(*r.id) : nlohmann::ordered_json(nullptr);
    if (!r.note.empty()) j["note"] = r.note;
    arr.push_back(std::move(j));
  }
  return arr.dump(2);
}

}  // namespace trajlab
