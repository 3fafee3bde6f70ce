#pragma once

// Scenario generation for sample-average planning. Scrambled Sobol points
// mapped through the inverse normal CDF, with a plain Monte Carlo fallback.
// The digital shift makes the point set seed-dependent while preserving the
// net structure.

#include <Eigen/Dense>
#include <boost/random/sobol.hpp>
#include <cstdint>
#include <vector>

#include "adexp/rng.hpp"

namespace adexp {

// n x dim matrix of standard normal draws. Rows are scenarios.
inline Eigen::MatrixXd normal_scenarios(int n, int dim, std::uint64_t seed, bool qmc) {
  Eigen::MatrixXd z(n, dim);
  if (dim == 0 || n == 0) return z;
  if (qmc) {
    boost::random::sobol gen(static_cast<std::size_t>(dim));
    RngStream shifts(hash_u64(seed, 0x71c3u));
    std::vector<std::uint64_t> shift(static_cast<std::size_t>(dim));
    for (auto& s : shift) s = shifts.next_u64();
    for (int i = 0; i < n; ++i) {
      for (int d = 0; d < dim; ++d) {
        std::uint64_t raw = gen() ^ shift[static_cast<std::size_t>(d)];
        double u = (double(raw >> 11) + 0.5) * 0x1.0p-53;
        z(i, d) = inverse_normal_cdf(u);
      }
    }
  } else {
    RngStream stream(hash_u64(seed, 0x6d63u));
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < dim; ++d) z(i, d) = stream.normal();
  }
  return z;
}

}  // namespace adexp
