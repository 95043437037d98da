#pragma once

#include "owtta/types.hpp"

#include <cstdint>
#include <random>

namespace owtta {

using Rng = std::mt19937_64;

inline Mat randn(Rng& rng, Eigen::Index rows, Eigen::Index cols, double sigma = 1.0) {
  std::normal_distribution<double> dist(0.0, sigma);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = dist(rng);
  return m;
}

}  // namespace owtta
