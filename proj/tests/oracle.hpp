#pragma once

// Independent brute-force CVRP optimum: every customer permutation, every way
// of cutting it into consecutive routes.

#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

#include "fmcvrp/graph.hpp"

namespace testing_util {

inline double brute_force_optimum(const fmcvrp::ProblemInstance& inst) {
  const int n = inst.n_customers();
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 1);
  double best = std::numeric_limits<double>::infinity();
  auto pt = [&](int local) { return inst.coord(static_cast<std::size_t>(local)); };
  do {
    for (unsigned cuts = 0; cuts < (1u << (n - 1)); ++cuts) {
      double cost = 0.0;
      int load = 0;
      bool ok = true;
      int prev = 0;
      for (int i = 0; i < n; ++i) {
        const int c = perm[static_cast<std::size_t>(i)];
        if (i > 0 && (cuts >> (i - 1) & 1u)) {
          cost += fmcvrp::distance(pt(prev), pt(0));
          prev = 0;
          load = 0;
        }
        load += inst.demands[static_cast<std::size_t>(c)];
        if (load > inst.capacity) {
          ok = false;
          break;
        }
        cost += fmcvrp::distance(pt(prev), pt(c));
        prev = c;
      }
      if (!ok) continue;
      cost += fmcvrp::distance(pt(prev), pt(0));
      best = std::min(best, cost);
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace testing_util
