#pragma once

#include <memory>
#include <vector>

#include "fmcvrp/datagen.hpp"
#include "fmcvrp/graph.hpp"

namespace testing_util {

using namespace fmcvrp;

/// Graph from explicit coordinates; the depot is prepended.
inline GraphPtr graph_of(std::vector<Point> customers) {
  customers.insert(customers.begin(), kDepotPoint);
  return std::make_shared<const FixedGraph>(std::move(customers), 0);
}

/// Instance over all nodes of `g` with the given customer demands.
inline ProblemInstance full_instance(const GraphPtr& g, std::vector<int> demands, int capacity) {
  ProblemInstance inst;
  inst.graph = g;
  for (std::size_t i = 0; i < g->size(); ++i) inst.node_ids.push_back(static_cast<int>(i));
  inst.demands.push_back(0);
  inst.demands.insert(inst.demands.end(), demands.begin(), demands.end());
  inst.capacity = capacity;
  return inst;
}

inline GraphPtr desk_graph(std::size_t size = 201, std::uint64_t seed = 7) {
  return std::make_shared<const FixedGraph>(datagen::build_fixed_graph(size, seed));
}

}  // namespace testing_util
