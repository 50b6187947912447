#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "oracle/linalg_oracle.hpp"
#include "trajlab/error.hpp"
#include "trajlab/geometry.hpp"

using namespace trajlab;
using doctest::Approx;

TEST_CASE("covariance_spectrum of a 1-D spread") {
  const auto s = covariance_spectrum(to_matrix({{0, 0}, {2, 0}}));
  REQUIRE(s.eigenvalues.size() == 2);
  CHECK(s.eigenvalues[0] == Approx(2.0).epsilon(1e-15));
  CHECK(s.eigenvalues[1] == 0.0);
  CHECK(s.trace == Approx(2.0).epsilon(1e-15));
}

TEST_CASE("identical vectors give an all-zero spectrum") {
  const auto s = covariance_spectrum(to_matrix({{0.1, 0.7, 3}, {0.1, 0.7, 3}, {0.1, 0.7, 3}}));
  for (double v : s.eigenvalues) CHECK(v == 0.0);
  CHECK(s.trace == 0.0);
  CHECK_THROWS_AS(erank(s), DegenerateSpectrum);
  CHECK_THROWS_AS(intrinsic_dimension(s), DegenerateSpectrum);
}

TEST_CASE("covariance_spectrum errors") {
  CHECK_THROWS_AS(covariance_spectrum(to_matrix({{1, 2}})), InsufficientSamples);
  PointMatrix bad(2, 2);
  bad << 1, std::nan(""), 2, 3;
  CHECK_THROWS(covariance_spectrum(bad));
  CHECK_THROWS_AS(Spectrum::from_eigenvalues({1.0, -0.5}), NumericalFailure);
}

TEST_CASE("covariance_spectrum matches the Jacobi oracle on random 50x8 data") {
  std::mt19937_64 rng(123);
  for (int trial = 0; trial < 10; ++trial) {
    const auto rows = oracle::random_rows(rng, 50, 8);
    const auto expected = oracle::jacobi_eigenvalues(oracle::covariance(rows));
    const auto s = covariance_spectrum(to_matrix(rows));
    for (std::size_t i = 0; i < 8; ++i) CHECK(oracle::rel_diff(s.eigenvalues[i], expected[i]) < 1e-8);
  }
}

TEST_CASE("Gram route (d > n) pads with zeros and agrees with the oracle") {
  std::mt19937_64 rng(9);
  const auto rows = oracle::random_rows(rng, 5, 12);
  const auto expected = oracle::jacobi_eigenvalues(oracle::covariance(rows));
  const auto s = covariance_spectrum(to_matrix(rows));
  REQUIRE(s.eigenvalues.size() == 12);
  for (std::size_t i = 0; i < 4; ++i) CHECK(oracle::rel_diff(s.eigenvalues[i], expected[i]) < 1e-8);
  for (std::size_t i = 4; i < 12; ++i) CHECK(s.eigenvalues[i] == 0.0);
}

TEST_CASE("erank and intrinsic_dimension on hand spectra") {
  CHECK(erank(Spectrum::from_eigenvalues({1, 1, 1, 1})) == Approx(4.0).epsilon(1e-14));
  CHECK(erank(Spectrum::from_eigenvalues({1, 0, 0, 0})) == 1.0);
  CHECK(erank(Spectrum::from_eigenvalues({2, 1, 1})) == Approx(std::pow(2.0, 1.5)).epsilon(1e-14));
  CHECK(erank(Spectrum::from_eigenvalues({2, 1, 1})) == Approx(2.8284).epsilon(1e-4));

  CHECK(intrinsic_dimension(Spectrum::from_eigenvalues({1, 1, 1, 1})) == 4.0);
  CHECK(intrinsic_dimension(Spectrum::from_eigenvalues({1, 0, 0})) == 1.0);
  CHECK(intrinsic_dimension(Spectrum::from_eigenvalues({2, 1, 1})) == Approx(16.0 / 6.0).epsilon(1e-15));
}

TEST_CASE("properties: scale, rotation and ordering invariants") {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<int> nd(3, 60), dd(2, 10);
  for (int trial = 0; trial < 50; ++trial) {
    const auto n = static_cast<std::size_t>(nd(rng));
    const auto d = static_cast<std::size_t>(dd(rng));
    const auto rows = oracle::random_rows(rng, n, d);
    const auto s = covariance_spectrum(to_matrix(rows));
    const double er = erank(s);
    const double id = intrinsic_dimension(s);

    // Powers of two scale every eigenvalue exactly.
    auto scaled = s;
    for (auto& v : scaled.eigenvalues) v *= 8.0;
    scaled.trace *= 8.0;
    CHECK(erank(scaled) == er);
    CHECK(intrinsic_dimension(scaled) == id);
    auto scaled_any = Spectrum::from_eigenvalues([&] {
      auto ev = s.eigenvalues;
      for (auto& v : ev) v *= 3.7;
      return ev;
    }());
    CHECK(oracle::rel_diff(erank(scaled_any), er) < 1e-12);
    CHECK(oracle::rel_diff(intrinsic_dimension(scaled_any), id) < 1e-12);

    const auto q = oracle::random_orthogonal(rng, d);
    const auto rotated = covariance_spectrum(to_matrix(oracle::multiply_rows(rows, q)));
    CHECK(std::abs(erank(rotated) - er) <= 1e-9);
    CHECK(std::abs(intrinsic_dimension(rotated) - id) <= 1e-9);

    CHECK(1.0 - 1e-12 <= id);
    CHECK(id <= er + 1e-12);
    CHECK(er <= static_cast<double>(s.nonzero_count()) + 1e-12);
    CHECK(s.nonzero_count() <= d);
  }
}

TEST_CASE("cluster_stats") {
  const auto c = cluster_stats(to_matrix({{0, 0}, {2, 0}}));
  CHECK(c.centroid(0) == 1.0);
  CHECK(c.centroid(1) == 0.0);
  CHECK(c.dispersion == 1.0);
  CHECK(c.size == 2);

  CHECK(cluster_stats(to_matrix({{3.3, -1}})).dispersion == 0.0);
  CHECK(cluster_stats(to_matrix({{0.1, 0.2}, {0.1, 0.2}, {0.1, 0.2}})).dispersion == 0.0);
  CHECK_THROWS_AS(cluster_stats(PointMatrix(0, 3)), EmptyCluster);

  std::mt19937_64 rng(1);
  const auto rows = oracle::random_rows(rng, 100, 6);
  // Naive two-pass oracle.
  std::vector<double> mean(6, 0.0);
  for (const auto& r : rows)
    for (std::size_t j = 0; j < 6; ++j) mean[j] += r[j] / 100.0;
  double total = 0.0;
  for (const auto& r : rows) {
    double sq = 0.0;
    for (std::size_t j = 0; j < 6; ++j) sq += (r[j] - mean[j]) * (r[j] - mean[j]);
    total += std::sqrt(sq);
  }
  CHECK(std::abs(cluster_stats(to_matrix(rows)).dispersion - total / 100.0) < 1e-12);
}

TEST_CASE("property: dispersion is translation invariant and scales linearly") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const auto rows = oracle::random_rows(rng, 20, 4);
    const auto base = cluster_stats(to_matrix(rows)).dispersion;
    auto moved = rows;
    for (auto& r : moved)
      for (auto& v : r) v += 5.25;
    auto scaled = rows;
    for (auto& r : scaled)
      for (auto& v : r) v *= 2.5;
    CHECK(cluster_stats(to_matrix(moved)).dispersion == Approx(base).epsilon(1e-12));
    CHECK(cluster_stats(to_matrix(scaled)).dispersion == Approx(2.5 * base).epsilon(1e-12));
  }
}

TEST_CASE("medoid center") {
  const auto c = cluster_stats(to_matrix({{0, 0}, {1, 0}, {5, 0}}), CenterKind::medoid);
  CHECK(c.centroid(0) == 1.0);
  CHECK(c.dispersion == Approx(5.0 / 3.0));
}

TEST_CASE("pca_project") {
  SUBCASE("collinear points have a zero second ratio") {
    const auto r = pca_project(to_matrix({{0, 0}, {1, 2}, {2, 4}, {-1, -2}}), 2);
    CHECK(std::abs(r.explained[1]) < 1e-10);
    CHECK(r.explained[0] == Approx(1.0));
  }
  SUBCASE("full projection preserves distances and ratios equal the spectrum") {
    std::mt19937_64 rng(4);
    const auto rows = oracle::random_rows(rng, 40, 5);
    const auto pts = to_matrix(rows);
    const auto r = pca_project(pts, 5);
    const auto s = covariance_spectrum(pts);
    for (std::size_t i = 0; i < 5; ++i) CHECK(std::abs(r.explained[i] - s.eigenvalues[i] / s.trace) < 1e-10);
    for (std::size_t i = 1; i < 5; ++i) CHECK(r.explained[i] <= r.explained[i - 1]);
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
      for (Eigen::Index j = i + 1; j < pts.rows(); ++j) {
        CHECK(std::abs((pts.row(i) - pts.row(j)).norm() - (r.projected.row(i) - r.projected.row(j)).norm()) < 1e-9);
      }
    }
    for (Eigen::Index c = 0; c < r.components.cols(); ++c) {
      Eigen::Index arg;
      r.components.col(c).cwiseAbs().maxCoeff(&arg);
      CHECK(r.components(arg, c) > 0.0);
    }
    const auto again = pca_project(pts, 5);
    CHECK(again.projected == r.projected);
  }
  SUBCASE("Gram route for wide data") {
    std::mt19937_64 rng(8);
    const auto pts = to_matrix(oracle::random_rows(rng, 6, 20));
    const auto r = pca_project(pts, 5);
    // Five components span the centered data exactly.
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
      for (Eigen::Index j = i + 1; j < pts.rows(); ++j) {
        CHECK(std::abs((pts.row(i) - pts.row(j)).norm() - (r.projected.row(i) - r.projected.row(j)).norm()) < 1e-9);
      }
    }
  }
  SUBCASE("argument errors") {
    CHECK_THROWS_AS(pca_project(to_matrix({{1, 2}}), 1), InsufficientSamples);
    CHECK_THROWS_AS(pca_project(to_matrix({{1, 2}, {3, 4}}), 2), InvalidArgument);
    CHECK_THROWS_AS(pca_project(to_matrix({{1, 2}, {3, 4}}), 0), InvalidArgument);
  }
}

namespace {

ActivationSet cloud_dump(std::mt19937_64& rng, std::size_t n, std::size_t d, bool rank_one) {
  ActivationSet set(d);
  std::normal_distribution<float> g(0.0f, 1.0f);
  std::vector<float> dir(d);
  for (auto& x : dir) x = g(rng);
  std::vector<float> v(d);
  for (std::size_t i = 0; i < n; ++i) {
    if (rank_one) {
      const float t = g(rng);
      for (std::size_t j = 0; j < d; ++j) v[j] = 2.0f + t * dir[j];
    } else {
      for (auto& x : v) x = g(rng);
    }
    set.add("s" + std::to_string(i), 5, Marker::reasoning_step, 1, 0, v);
  }
  return set;
}

}  // namespace

TEST_CASE("trajectory_report cells") {
  SUBCASE("identical vectors give zero dispersion in both groups") {
    ActivationSet set(3);
    const std::vector<float> a{1, 2, 3}, b{-1, 0.5f, 9};
    for (int s = 0; s < 4; ++s) {
      set.add("s" + std::to_string(s), 0, Marker::reasoning_step, 1, 0, a);
      set.add("s" + std::to_string(s), 0, Marker::code_step, 1, 0, b);
    }
    const auto rows = trajectory_report(set, {0});
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].group == "step1");
    CHECK(rows[1].group == "step1_code");
    for (const auto& r : rows) {
      CHECK(r.n == 4);
      REQUIRE(r.dispersion.has_value());
      CHECK(*r.dispersion == 0.0);
      CHECK_FALSE(r.erank.has_value());
      CHECK(r.note == "zero variance");
    }
  }
  SUBCASE("isotropic cloud") {
    std::mt19937_64 rng(100);
    const auto rows = trajectory_report(cloud_dump(rng, 500, 8, false), {5});
    REQUIRE(rows.size() == 1);
    CHECK(std::abs(*rows[0].erank - 8.0) <= 0.5);
    CHECK(std::abs(*rows[0].id - 8.0) <= 0.5);
  }
  SUBCASE("rank-one cloud") {
    std::mt19937_64 rng(101);
    const auto rows = trajectory_report(cloud_dump(rng, 300, 8, true), {5});
    CHECK(std::abs(*rows[0].erank - 1.0) <= 0.1);
    CHECK(std::abs(*rows[0].id - 1.0) <= 0.1);
  }
  SUBCASE("ordering, absent cells and CSV") {
    ActivationSet set(2);
    std::mt19937_64 rng(3);
    std::normal_distribution<float> g;
    for (int layer : {20, 10}) {
      for (int s = 0; s < 3; ++s) {
        for (int k : {1, 2, 10}) {
          const std::vector<float> v{g(rng), g(rng)};
          set.add("s" + std::to_string(s), layer, Marker::reasoning_step, k, 0, v);
          if (k == 2) set.add("s" + std::to_string(s), layer, Marker::code_step, k, 0, v);
        }
      }
    }
    const std::vector<float> lone{1, 1};
    set.add("s0", 10, Marker::code_step, 10, 0, lone);
    const auto rows = trajectory_report(set, {10, 20});
    std::vector<std::string> order;
    for (const auto& r : rows) order.push_back(std::to_string(r.layer) + ":" + r.group);
    CHECK(order == std::vector<std::string>{"10:step1", "10:step2", "10:step2_code", "10:step10", "10:step10_code",
                                            "20:step1", "20:step2", "20:step2_code", "20:step10"});
    CHECK(rows[4].n == 1);
    CHECK_FALSE(rows[4].dispersion.has_value());
    CHECK(rows[4].note == "insufficient samples");

    std::ostringstream csv;
    write_trajectory_csv(rows, csv);
    const auto text = csv.str();
    CHECK(text.rfind("layer,group,n,dispersion,erank,id\n", 0) == 0);
    CHECK(text.find("10,step10_code,1,,,\n") != std::string::npos);
  }
  SUBCASE("marker grouping and per-sample pooling") {
    ActivationSet set(2);
    std::mt19937_64 rng(12);
    std::normal_distribution<float> g;
    for (int s = 0; s < 5; ++s) {
      for (int k = 1; k <= 3; ++k) {
        const std::vector<float> v{g(rng), g(rng)}, w{g(rng), g(rng)};
        set.add("s" + std::to_string(s), 1, Marker::reasoning_step, k, 0, v);
        set.add("s" + std::to_string(s), 1, Marker::code_step, k, 0, w);
      }
    }
    TrajectoryOptions opts;
    opts.grouping = GroupingScheme::marker;
    const auto pooled = trajectory_report(set, {1}, opts);
    REQUIRE(pooled.size() == 2);
    CHECK(pooled[0].group == "reasoning");
    CHECK(pooled[0].n == 15);
    opts.pooling = Pooling::per_sample;
    const auto per = trajectory_report(set, {1}, opts);
    REQUIRE(per.size() == 2);
    // Per-sample dispersion is the average of each sample's own dispersion.
    double expected = 0.0;
    for (int s = 0; s < 5; ++s) {
      RecordFilter f;
      f.sample_ids = std::set<std::string>{"s" + std::to_string(s)};
      f.markers = std::set<Marker>{Marker::reasoning_step};
      const auto recs = select(set, f);
      expected += cluster_stats(to_matrix(recs)).dispersion / 5.0;
    }
    CHECK(*per[0].dispersion == Approx(expected).epsilon(1e-12));
    opts.grouping = GroupingScheme::layer;
    CHECK(trajectory_report(set, {1}, opts).front().group == "all");
  }
}
