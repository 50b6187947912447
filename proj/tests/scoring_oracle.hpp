#pragma once

// Textbook reference formulas in long double, no shared code with the library.

#include <cmath>
#include <cstddef>
#include <random>
#include <vector>

namespace oracle {

inline long double naive_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const long double n = static_cast<long double>(x.size());
  long double sx = 0, sy = 0, sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
  }
  const long double mx = sx / n, my = sy / n;
  for (std::size_t i = 0; i < x.size(); ++i) {
    long double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  return sxy / std::sqrt(sxx * syy);
}

// rank = 1 + #smaller + (#equal - 1) / 2, quadratic on purpose
inline std::vector<double> brute_ranks(const std::vector<double>& x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::size_t less = 0, equal = 0;
    for (double v : x) {
      if (v < x[i]) ++less;
      if (v == x[i]) ++equal;
    }
    r[i] = 1.0 + static_cast<double>(less) + (static_cast<double>(equal) - 1.0) / 2.0;
  }
  return r;
}

inline long double naive_spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return naive_pearson(brute_ranks(x), brute_ranks(y));
}

// Random vector pair; about half the draws come from a small value set so
// ties are frequent. Never constant.
inline void random_pair(std::mt19937_64& gen, std::vector<double>& x, std::vector<double>& y) {
  std::uniform_int_distribution<int> len(3, 60);
  std::uniform_int_distribution<int> coin(0, 1);
  std::uniform_int_distribution<int> small(0, 4);
  std::normal_distribution<double> normal(0.0, 3.0);
  for (;;) {
    const int n = len(gen);
    const bool tx = coin(gen) == 1, ty = coin(gen) == 1;
    x.assign(n, 0.0);
    y.assign(n, 0.0);
    for (int i = 0; i < n; ++i) {
      x[i] = tx ? small(gen) : normal(gen);
      y[i] = ty ? small(gen) * 0.25 : 0.5 * x[i] + normal(gen);
    }
    auto varies = [](const std::vector<double>& v) {
      for (double a : v)
        if (a != v.front()) return true;
      return false;
    };
    if (varies(x) && varies(y) && varies(brute_ranks(x)) && varies(brute_ranks(y))) return;
  }
}

}  // namespace oracle
