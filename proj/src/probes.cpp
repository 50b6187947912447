#include "trajlab/probes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <thread>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "rng.hpp"
#include "trajlab/error.hpp"

namespace trajlab {

std::vector<std::size_t> ProbeDataset::class_counts() const {
  std::vector<std::size_t> counts(class_names.size(), 0);
  for (int l : labels) {
    if (l >= 0 && static_cast<std::size_t>(l) < counts.size()) ++counts[static_cast<std::size_t>(l)];
  }
  return counts;
}

ProbeDataset ProbeDataset::subset(const std::vector<std::size_t>& rows) const {
  ProbeDataset out;
  out.class_names = class_names;
  out.layer = layer;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
  out.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.features.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(rows[i]));
    out.labels.push_back(labels[rows[i]]);
    if (!keys.empty()) out.keys.push_back(keys[rows[i]]);
  }
  return out;
}

void ProbeDataset::validate() const {
  if (static_cast<std::size_t>(features.rows()) != labels.size()) {
    throw InvalidArgument("feature rows and label count differ");
  }
  if (!keys.empty() && keys.size() != labels.size()) throw InvalidArgument("key count differs from label count");
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= class_names.size()) throw InvalidArgument("label out of range");
  }
  const auto counts = class_counts();
  std::size_t present = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) continue;
    ++present;
    if (counts[c] < 2) throw ClassTooSmall("class '" + class_names[c] + "' has a single member");
  }
  if (present < 2) throw ClassTooSmall("probe dataset needs at least two classes");
}

std::string_view to_string(Classifier c) {
  switch (c) {
    case Classifier::knn: return "knn";
    case Classifier::svm: return "svm";
    case Classifier::forest: return "forest";
  }
  return "unknown";
}

std::optional<Classifier> classifier_from_string(std::string_view name) {
  if (name == "knn") return Classifier::knn;
  if (name == "svm") return Classifier::svm;
  if (name == "forest" || name == "rf") return Classifier::forest;
  return std::nullopt;
}

std::pair<ProbeDataset, ProbeDataset> stratified_split(const ProbeDataset& ds, double test_fraction,
                                                       std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw InvalidArgument("test_fraction must be in (0, 1)");
  ds.validate();
  detail::Rng rng(seed);
  std::vector<std::vector<std::size_t>> members(ds.class_names.size());
  for (std::size_t i = 0; i < ds.labels.size(); ++i) members[static_cast<std::size_t>(ds.labels[i])].push_back(i);

  std::vector<std::size_t> train, test;
  for (auto& m : members) {
    if (m.empty()) continue;
    rng.shuffle(m);
    const auto n = m.size();
    auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * test_fraction));
    n_test = std::clamp<std::size_t>(n_test, 1, n - 1);
    test.insert(test.end(), m.begin(), m.begin() + static_cast<std::ptrdiff_t>(n_test));
    train.insert(train.end(), m.begin() + static_cast<std::ptrdiff_t>(n_test), m.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {ds.subset(train), ds.subset(test)};
}

namespace {

void check_pair(const ProbeDataset& train, const ProbeDataset& test) {
  if (train.size() == 0) throw InvalidArgument("empty training split");
  if (test.size() == 0) throw InvalidArgument("empty test split");
  if (train.features.cols() != test.features.cols()) throw InvalidArgument("train/test feature widths differ");
  if (train.class_names != test.class_names) throw InvalidArgument("train/test class lists differ");
}

int argmax_smallest(const std::vector<double>& v) {
  int best = 0;
  for (std::size_t c = 1; c < v.size(); ++c) {
    if (v[c] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
  }
  return best;
}

ProbeResult score(Classifier kind, std::uint64_t seed, const ProbeDataset& test, const std::vector<int>& predicted) {
  ProbeResult r;
  r.classifier = kind;
  r.seed = seed;
  r.n_test = test.size();
  std::vector<std::size_t> hits(test.class_names.size(), 0), total(test.class_names.size(), 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto c = static_cast<std::size_t>(test.labels[i]);
    ++total[c];
    if (predicted[i] == test.labels[i]) {
      ++hits[c];
      ++correct;
    }
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  for (std::size_t c = 0; c < total.size(); ++c) {
    if (total[c] == 0) continue;
    r.per_class_accuracy[test.class_names[c]] = static_cast<double>(hits[c]) / static_cast<double>(total[c]);
    r.per_class_count[test.class_names[c]] = total[c];
  }
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// KNN

ProbeResult knn_probe(const ProbeDataset& train, const ProbeDataset& test, std::size_t k) {
  check_pair(train, test);
  if (k < 1 || k > train.size()) throw InvalidArgument(fmt::format("k={} outside [1, {}]", k, train.size()));

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  if (!train.keys.empty()) {
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return train.keys[a] < train.keys[b]; });
  }
  const Eigen::MatrixXd x = train.subset(order).features;
  std::vector<int> y(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) y[i] = train.labels[order[i]];

  std::vector<int> predicted(test.size());
  std::vector<std::pair<double, std::size_t>> dist(x.rows());
  for (std::size_t t = 0; t < test.size(); ++t) {
    const Eigen::RowVectorXd q = test.features.row(static_cast<Eigen::Index>(t));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      dist[static_cast<std::size_t>(i)] = {(x.row(i) - q).squaredNorm(), static_cast<std::size_t>(i)};
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
    std::vector<double> votes(train.class_names.size(), 0.0);
    for (std::size_t j = 0; j < k; ++j) votes[static_cast<std::size_t>(y[dist[j].second])] += 1.0;
    predicted[t] = argmax_smallest(votes);
  }
  return score(Classifier::knn, 0, test, predicted);
}

// ---------------------------------------------------------------------------
// Linear SVM

namespace {

struct Standardizer {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd scale;

  static Standardizer fit(const Eigen::MatrixXd& x) {
    Standardizer s;
    s.mean = x.colwise().mean();
    const Eigen::MatrixXd c = x.rowwise() - s.mean;
    s.scale = (c.array().square().colwise().sum() / static_cast<double>(x.rows())).sqrt().matrix();
    for (Eigen::Index j = 0; j < s.scale.size(); ++j) {
      if (!(s.scale(j) > 0.0)) s.scale(j) = 1.0;
    }
    return s;
  }

  // Standardized features with a trailing constant 1 for the bias term.
  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const {
    Eigen::MatrixXd out(x.rows(), x.cols() + 1);
    out.leftCols(x.cols()) = ((x.rowwise() - mean).array().rowwise() / scale.array()).matrix();
    out.col(x.cols()).setOnes();
    return out;
  }
};

// w = a * v, so the L2 shrink is O(1) per step.
struct ScaledWeights {
  Eigen::VectorXd v;
  double a = 1.0;
  double v_norm_sq = 0.0;

  double dot(const Eigen::Ref<const Eigen::RowVectorXd>& x) const { return a * x.dot(v); }
};

}  // namespace

ProbeResult svm_probe(const ProbeDataset& train, const ProbeDataset& test, const SvmConfig& config) {
  check_pair(train, test);
  if (!(config.lambda > 0.0)) throw InvalidArgument("lambda must be positive");
  if (config.epochs < 1) throw InvalidArgument("epochs must be at least 1");

  const auto standardizer = Standardizer::fit(train.features);
  const Eigen::MatrixXd x = standardizer.apply(train.features);
  const Eigen::MatrixXd xt = standardizer.apply(test.features);
  const auto n = static_cast<std::size_t>(x.rows());
  const auto classes = train.class_names.size();
  const double radius_sq = 1.0 / config.lambda;

  std::vector<double> row_norm_sq(n);
  for (std::size_t i = 0; i < n; ++i) row_norm_sq[i] = x.row(static_cast<Eigen::Index>(i)).squaredNorm();

  std::vector<ScaledWeights> w(classes);
  for (auto& wc : w) wc.v = Eigen::VectorXd::Zero(x.cols());

  detail::Rng rng(config.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::uint64_t t = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t i : order) {
      ++t;
      const double eta = 1.0 / (config.lambda * static_cast<double>(t));
      const double shrink = 1.0 - eta * config.lambda;
      const auto xi = x.row(static_cast<Eigen::Index>(i));
      for (std::size_t c = 0; c < classes; ++c) {
        auto& wc = w[c];
        const double y = train.labels[i] == static_cast<int>(c) ? 1.0 : -1.0;
        const double raw = xi.dot(wc.v);
        const double margin = y * wc.a * raw;
        if (shrink <= 0.0) {
          wc.v.setZero();
          wc.a = 1.0;
          wc.v_norm_sq = 0.0;
        } else {
          wc.a *= shrink;
        }
        if (margin < 1.0) {
          const double step = eta * y / wc.a;
          const double cross = shrink <= 0.0 ? 0.0 : raw;
          wc.v_norm_sq += 2.0 * step * cross + step * step * row_norm_sq[i];
          wc.v += step * xi.transpose();
        }
        // Projection onto the ball of radius 1/sqrt(lambda).
        const double norm_sq = wc.a * wc.a * wc.v_norm_sq;
        if (norm_sq > radius_sq) wc.a *= std::sqrt(radius_sq / norm_sq);
        if (std::abs(wc.a) < 1e-100) {
          wc.v *= wc.a;
          wc.v_norm_sq = wc.v.squaredNorm();
          wc.a = 1.0;
        }
      }
    }
  }

  std::vector<int> predicted(test.size());
  std::vector<double> scores(classes);
  for (std::size_t r = 0; r < test.size(); ++r) {
    const auto row = xt.row(static_cast<Eigen::Index>(r));
    for (std::size_t c = 0; c < classes; ++c) scores[c] = w[c].dot(row);
    predicted[r] = argmax_smallest(scores);
  }
  return score(Classifier::svm, config.seed, test, predicted);
}

// ---------------------------------------------------------------------------
// Random forest

namespace {

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  int label = 0;
};

class GiniTree {
 public:
  GiniTree(const Eigen::MatrixXd& x, const std::vector<int>& y, std::size_t classes, std::uint64_t seed)
      : x_(x), y_(y), classes_(classes), rng_(seed) {}

  std::vector<TreeNode> grow() {
    const auto n = static_cast<std::size_t>(x_.rows());
    std::vector<std::size_t> sample(n);
    for (auto& s : sample) s = rng_.below(n);
    std::sort(sample.begin(), sample.end());

    struct Work {
      int node;
      std::vector<std::size_t> rows;
    };
    std::vector<TreeNode> nodes(1);
    std::vector<Work> stack;
    stack.push_back({0, std::move(sample)});
    while (!stack.empty()) {
      Work work = std::move(stack.back());
      stack.pop_back();
      const auto counts = count(work.rows);
      nodes[static_cast<std::size_t>(work.node)].label = majority(counts);
      if (is_pure(counts)) continue;
      const auto split = best_split(work.rows, counts);
      if (!split) continue;

      std::vector<std::size_t> left, right;
      for (auto r : work.rows) {
        (x_(static_cast<Eigen::Index>(r), split->feature) <= split->threshold ? left : right).push_back(r);
      }
      const int li = static_cast<int>(nodes.size());
      nodes.emplace_back();
      const int ri = static_cast<int>(nodes.size());
      nodes.emplace_back();
      auto& parent = nodes[static_cast<std::size_t>(work.node)];
      parent.feature = static_cast<int>(split->feature);
      parent.threshold = split->threshold;
      parent.left = li;
      parent.right = ri;
      stack.push_back({ri, std::move(right)});
      stack.push_back({li, std::move(left)});
    }
    return nodes;
  }

 private:
  struct Split {
    Eigen::Index feature;
    double threshold;
  };

  std::vector<std::size_t> count(const std::vector<std::size_t>& rows) const {
    std::vector<std::size_t> c(classes_, 0);
    for (auto r : rows) ++c[static_cast<std::size_t>(y_[r])];
    return c;
  }

  static int majority(const std::vector<std::size_t>& counts) {
    int best = 0;
    for (std::size_t c = 1; c < counts.size(); ++c) {
      if (counts[c] > counts[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
    }
    return best;
  }

  static bool is_pure(const std::vector<std::size_t>& counts) {
    return std::count_if(counts.begin(), counts.end(), [](std::size_t c) { return c > 0; }) <= 1;
  }

  // Draws features without replacement until ceil(sqrt(d)) non-constant ones
  // have been evaluated or every feature has been tried.
  std::optional<Split> best_split(const std::vector<std::size_t>& rows, const std::vector<std::size_t>& counts) {
    const auto d = static_cast<std::size_t>(x_.cols());
    const auto wanted = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(d))));
    std::vector<std::size_t> features(d);
    std::iota(features.begin(), features.end(), 0);

    std::optional<Split> best;
    double best_score = -1.0;  // sum over children of (sum_c n_c^2) / n_child
    std::size_t evaluated = 0;
    std::vector<std::pair<double, int>> values(rows.size());
    std::vector<std::size_t> left(classes_);

    for (std::size_t drawn = 0; drawn < d && evaluated < wanted; ++drawn) {
      std::swap(features[drawn], features[drawn + rng_.below(d - drawn)]);
      const auto f = static_cast<Eigen::Index>(features[drawn]);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        values[i] = {x_(static_cast<Eigen::Index>(rows[i]), f), y_[rows[i]]};
      }
      std::sort(values.begin(), values.end());
      if (values.front().first == values.back().first) continue;
      ++evaluated;

      std::fill(left.begin(), left.end(), 0);
      double left_sq = 0.0;
      double right_sq = 0.0;
      for (auto c : counts) right_sq += static_cast<double>(c) * static_cast<double>(c);
      const auto total = rows.size();
      for (std::size_t i = 0; i + 1 < total; ++i) {
        const auto c = static_cast<std::size_t>(values[i].second);
        const double lc = static_cast<double>(left[c]);
        const double rc = static_cast<double>(counts[c] - left[c]);
        left_sq += 2.0 * lc + 1.0;
        right_sq -= 2.0 * rc - 1.0;
        ++left[c];
        if (values[i].first == values[i + 1].first) continue;
        const double nl = static_cast<double>(i + 1);
        const double nr = static_cast<double>(total - i - 1);
        const double s = left_sq / nl + right_sq / nr;
        if (s > best_score) {
          best_score = s;
          double mid = 0.5 * (values[i].first + values[i + 1].first);
          if (!(mid < values[i + 1].first)) mid = values[i].first;
          best = Split{f, mid};
        }
      }
    }
    return best;
  }

  const Eigen::MatrixXd& x_;
  const std::vector<int>& y_;
  std::size_t classes_;
  detail::Rng rng_;
};

int predict_tree(const std::vector<TreeNode>& nodes, const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  std::size_t i = 0;
  while (nodes[i].feature >= 0) {
    i = static_cast<std::size_t>(row(nodes[i].feature) <= nodes[i].threshold ? nodes[i].left : nodes[i].right);
  }
  return nodes[i].label;
}

}  // namespace

ProbeResult forest_probe(const ProbeDataset& train, const ProbeDataset& test, const ForestConfig& config) {
  check_pair(train, test);
  if (config.trees < 1) throw InvalidArgument("forest needs at least one tree");
  const auto classes = train.class_names.size();
  const auto n_trees = static_cast<std::size_t>(config.trees);

  std::vector<std::vector<TreeNode>> forest(n_trees);
  auto grow_range = [&](std::size_t begin, std::size_t end) {
    for (std::size_t t = begin; t < end; ++t) {
      forest[t] = GiniTree(train.features, train.labels, classes, config.seed + t).grow();
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(config.threads, 1, n_trees);
  if (workers == 1) {
    grow_range(0, n_trees);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (n_trees + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const auto begin = w * chunk;
      const auto end = std::min(n_trees, begin + chunk);
      if (begin < end) pool.emplace_back(grow_range, begin, end);
    }
    for (auto& th : pool) th.join();
  }

  std::vector<int> predicted(test.size());
  std::vector<double> votes(classes);
  for (std::size_t r = 0; r < test.size(); ++r) {
    std::fill(votes.begin(), votes.end(), 0.0);
    const auto row = test.features.row(static_cast<Eigen::Index>(r));
    for (const auto& tree : forest) votes[static_cast<std::size_t>(predict_tree(tree, row))] += 1.0;
    predicted[r] = argmax_smallest(votes);
  }
  return score(Classifier::forest, config.seed, test, predicted);
}

// ---------------------------------------------------------------------------

ProbeResult run_probe(const ProbeDataset& ds, Classifier classifier, const ProbeConfig& config) {
  const auto [train, test] = stratified_split(ds, config.test_fraction, config.seed);
  ProbeResult r;
  switch (classifier) {
    case Classifier::knn:
      r = knn_probe(train, test, std::min(config.k, train.size()));
      r.seed = config.seed;
      break;
    case Classifier::svm:
      r = svm_probe(train, test, {config.lambda, config.epochs, config.seed});
      break;
    case Classifier::forest:
      r = forest_probe(train, test, {config.trees, config.seed, config.threads});
      break;
  }
  return r;
}

double mean_accuracy_over_seeds(const ProbeDataset& ds, Classifier classifier, ProbeConfig config,
                                const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw InvalidArgument("no seeds given");
  double total = 0.0;
  for (auto s : seeds) {
    config.seed = s;
    total += run_probe(ds, classifier, config).accuracy;
  }
  return total / static_cast<double>(seeds.size());
}

void write_probe_csv(const std::vector<ProbeReportRow>& rows, std::ostream& out) {
  out << "layer,classifier,label_scheme,accuracy\n";
  for (const auto& r : rows) {
    out << r.layer << ',' << to_string(r.result.classifier) << ',' << r.label_scheme << ','
        << fmt::format("{}", r.result.accuracy) << '\n';
  }
}

std::string probe_json(const std::vector<ProbeReportRow>& rows) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["layer"] = r.layer;
    j["classifier"] = std::string(to_string(r.result.classifier));
    j["label_scheme"] = r.label_scheme;
    j["accuracy"] = r.result.accuracy;
    j["seed"] = r.result.seed;
    j["n_test"] = r.result.n_test;
    nlohmann::ordered_json per = nlohmann::ordered_json::object();
    for (const auto& [name, acc] : r.result.per_class_accuracy) {
      per[name] = {{"accuracy", acc}, {"count", r.result.per_class_count.at(name)}};
    }
    j["per_class"] = std::move(per);
    arr.push_back(std::move(j));
  }
  return arr.dump(2);
}

}  // namespace trajlab
