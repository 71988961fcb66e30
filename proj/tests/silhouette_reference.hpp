#pragma once

// Textbook O(n^2) silhouette: no distance cache, one pass per cluster.

#include <algorithm>
#include <cmath>
#include <vector>

#include "cuimlm/eval.hpp"

namespace cuimlm::testing {

inline std::vector<double> naive_silhouette(const std::vector<std::vector<double>>& x,
                                            const std::vector<std::size_t>& label) {
  const std::size_t n = x.size();
  std::size_t clusters = 0;
  for (std::size_t l : label) clusters = std::max(clusters, l + 1);
  std::vector<double> s(n);
  for (std::size_t i = 0; i < n; ++i) {
    double a = 0.0, b = INFINITY;
    for (std::size_t c = 0; c < clusters; ++c) {
      double total = 0.0;
      std::size_t count = 0;
      for (std::size_t j = 0; j < n; ++j) {
        if (label[j] != c) continue;
        ++count;
        if (j != i) total += cosine_distance(x[i], x[j]);
      }
      if (c == label[i])
        a = total / static_cast<double>(count - 1);
      else
        b = std::min(b, total / static_cast<double>(count));
    }
    const double m = std::max(a, b);
    s[i] = m > 0.0 ? (b - a) / m : 0.0;
  }
  return s;
}

}  // namespace cuimlm::testing
