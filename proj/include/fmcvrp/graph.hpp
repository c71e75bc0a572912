#pragma once

// Core domain types: the fixed city graph, sampled instances, token-encoded
// solutions, and the per-token feature vectors consumed by the model.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fmcvrp/error.hpp"
#include "json.hpp"

namespace fmcvrp {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;
inline constexpr int kDepotId = 0;

struct Point {
  double x = 0.0;
  double y = 0.0;
};

inline constexpr Point kDepotPoint{0.5, 0.5};

inline double distance(Point a, Point b) { return std::hypot(a.x - b.x, a.y - b.y); }

/// Angle of `p` about the depot in [0, 2pi), measured counter-clockwise from +x.
inline double angle_about_depot(Point p) {
  double a = std::atan2(p.y - kDepotPoint.y, p.x - kDepotPoint.x);
  if (a < 0.0) a += kTwoPi;
  return a;
}

inline double normalize_angle(double a) {
  a = std::fmod(a, kTwoPi);
  if (a < 0.0) a += kTwoPi;
  return a;
}

/// Rigid rotation about the depot.
inline Point rotate_point(Point p, double angle) {
  if (angle == 0.0) return p;
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  const double dx = p.x - kDepotPoint.x;
  const double dy = p.y - kDepotPoint.y;
  return {kDepotPoint.x + c * dx - s * dy, kDepotPoint.y + s * dx + c * dy};
}

inline std::vector<Point> rotate(std::span<const Point> coords, double angle) {
  std::vector<Point> out;
  out.reserve(coords.size());
  for (const Point& p : coords) out.push_back(rotate_point(p, angle));
  return out;
}

// ---------------------------------------------------------------------------
// FixedGraph

class FixedGraph {
 public:
  FixedGraph(std::vector<Point> coords, std::uint64_t seed) : coords_(std::move(coords)), seed_(seed) {
    if (coords_.size() < 2) throw validation_error("fixed graph needs a depot and at least one customer");
    const Point d = coords_[0];
    if (d.x != kDepotPoint.x || d.y != kDepotPoint.y)
      throw validation_error("fixed graph depot must sit at (0.5, 0.5)");
    for (const Point& p : coords_) {
      if (!(p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0))
        throw validation_error("fixed graph coordinate outside the unit square");
      max_depot_dist_ = std::max(max_depot_dist_, distance(p, d));
    }
    if (!(max_depot_dist_ > 0.0)) throw validation_error("fixed graph has all nodes on the depot");
  }

  std::size_t size() const noexcept { return coords_.size(); }
  const std::vector<Point>& coords() const noexcept { return coords_; }
  Point coord(int node_id) const { return coords_.at(static_cast<std::size_t>(node_id)); }
  static constexpr int depot_id() noexcept { return kDepotId; }
  double max_depot_dist() const noexcept { return max_depot_dist_; }
  std::uint64_t seed() const noexcept { return seed_; }

  nlohmann::json to_json() const {
    nlohmann::json coords = nlohmann::json::array();
    for (const Point& p : coords_) coords.push_back({p.x, p.y});
    return {{"size", coords_.size()}, {"coords", std::move(coords)}, {"seed", seed_}};
  }

  static FixedGraph from_json(const nlohmann::json& j) {
    std::vector<Point> coords;
    for (const auto& c : j.at("coords")) coords.push_back({c.at(0).get<double>(), c.at(1).get<double>()});
    if (coords.size() != j.at("size").get<std::size_t>())
      throw validation_error("graph json: size does not match coordinate count");
    return FixedGraph(std::move(coords), j.at("seed").get<std::uint64_t>());
  }

 private:
  std::vector<Point> coords_;
  std::uint64_t seed_ = 0;
  double max_depot_dist_ = 0.0;
};

using GraphPtr = std::shared_ptr<const FixedGraph>;

// ---------------------------------------------------------------------------
// ProblemInstance

struct ProblemInstance {
  GraphPtr graph;
  std::vector<int> node_ids;  // strictly increasing, node_ids[0] == depot
  std::vector<int> demands;   // aligned with node_ids
  int capacity = 0;

  std::size_t size() const noexcept { return node_ids.size(); }
  int n_customers() const noexcept { return static_cast<int>(node_ids.size()) - 1; }
  Point coord(std::size_t local) const { return graph->coord(node_ids[local]); }

  int total_demand() const { return std::accumulate(demands.begin(), demands.end(), 0); }

  std::optional<std::size_t> local_index(int node_id) const {
    auto it = std::lower_bound(node_ids.begin(), node_ids.end(), node_id);
    if (it == node_ids.end() || *it != node_id) return std::nullopt;
    return static_cast<std::size_t>(it - node_ids.begin());
  }
};

/// Structural checks that do not depend on the capacity table.
inline void check_instance(const ProblemInstance& inst) {
  if (!inst.graph) throw validation_error("instance has no graph");
  if (inst.node_ids.size() < 2) throw validation_error("instance needs at least one customer");
  if (inst.demands.size() != inst.node_ids.size()) throw validation_error("instance demand count mismatch");
  if (inst.node_ids[0] != kDepotId) throw validation_error("instance must list the depot first");
  if (inst.demands[0] != 0) throw validation_error("depot demand must be 0");
  for (std::size_t i = 1; i < inst.node_ids.size(); ++i) {
    if (inst.node_ids[i] <= inst.node_ids[i - 1]) throw validation_error("instance node ids not strictly increasing");
    if (inst.node_ids[i] >= static_cast<int>(inst.graph->size()))
      throw validation_error("instance node id outside the fixed graph");
    if (inst.demands[i] < 1 || inst.demands[i] > 9) throw validation_error("customer demand outside 1..9");
    if (inst.demands[i] > inst.capacity) throw validation_error("customer demand exceeds capacity");
  }
}

// ---------------------------------------------------------------------------
// Solution

struct Solution {
  std::vector<int> tokens;

  /// Maximal depot-free runs of customer tokens.
  std::vector<std::vector<int>> routes() const {
    std::vector<std::vector<int>> out;
    std::vector<int> cur;
    for (int t : tokens) {
      if (t == kDepotId) {
        if (!cur.empty()) out.push_back(std::move(cur));
        cur.clear();
      } else {
        cur.push_back(t);
      }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
  }

  static Solution from_routes(const std::vector<std::vector<int>>& routes) {
    Solution s;
    s.tokens.push_back(kDepotId);
    for (const auto& r : routes) {
      if (r.empty()) continue;
      s.tokens.insert(s.tokens.end(), r.begin(), r.end());
      s.tokens.push_back(kDepotId);
    }
    return s;
  }

  friend bool operator==(const Solution&, const Solution&) = default;
};

enum class ViolationKind {
  empty,
  bad_start,
  bad_end,
  unknown_node,
  consecutive_depots,
  customer_repeated,
  customer_missing,
  capacity_exceeded,
};

struct Violation {
  ViolationKind kind;
  std::size_t position;  // token index; tokens.size() for whole-solution findings
  std::string message;
};

struct ValidationResult {
  std::vector<Violation> violations;

  bool ok() const noexcept { return violations.empty(); }
  explicit operator bool() const noexcept { return ok(); }

  bool has(ViolationKind k) const {
    return std::any_of(violations.begin(), violations.end(), [k](const Violation& v) { return v.kind == k; });
  }

  std::string summary() const {
    std::string s;
    for (const auto& v : violations) {
      if (!s.empty()) s += "; ";
      s += v.message + " at token " + std::to_string(v.position);
    }
    return s;
  }
};

inline ValidationResult validate_solution(const ProblemInstance& inst, const Solution& sol) {
  ValidationResult r;
  const auto& tok = sol.tokens;
  auto add = [&](ViolationKind k, std::size_t pos, std::string msg) { r.violations.push_back({k, pos, std::move(msg)}); };
  if (tok.empty()) {
    add(ViolationKind::empty, 0, "solution is empty");
    return r;
  }
  if (tok.front() != kDepotId) add(ViolationKind::bad_start, 0, "solution does not start at the depot");
  if (tok.back() != kDepotId) add(ViolationKind::bad_end, tok.size() - 1, "solution does not end at the depot");

  std::vector<char> seen(inst.size(), 0);
  int load = 0;
  bool route_over = false;
  for (std::size_t i = 0; i < tok.size(); ++i) {
    const int id = tok[i];
    if (id == kDepotId) {
      if (i > 0 && tok[i - 1] == kDepotId) add(ViolationKind::consecutive_depots, i, "consecutive depot tokens");
      load = 0;
      route_over = false;
      continue;
    }
    auto local = inst.local_index(id);
    if (!local) {
      add(ViolationKind::unknown_node, i, "node " + std::to_string(id) + " not in instance");
      continue;
    }
    if (seen[*local]) add(ViolationKind::customer_repeated, i, "customer visited twice (node " + std::to_string(id) + ")");
    seen[*local] = 1;
    load += inst.demands[*local];
    if (load > inst.capacity && !route_over) {
      add(ViolationKind::capacity_exceeded, i, "route demand exceeds capacity");
      route_over = true;
    }
  }
  for (std::size_t l = 1; l < inst.size(); ++l) {
    if (!seen[l])
      add(ViolationKind::customer_missing, tok.size(), "customer missing (node " + std::to_string(inst.node_ids[l]) + ")");
  }
  return r;
}

/// Sum of Euclidean edge lengths along the token sequence, without validation.
inline double tour_length(const ProblemInstance& inst, std::span<const int> tokens) {
  double total = 0.0;
  for (std::size_t i = 1; i < tokens.size(); ++i)
    total += distance(inst.graph->coord(tokens[i - 1]), inst.graph->coord(tokens[i]));
  return total;
}

inline double solution_cost(const ProblemInstance& inst, const Solution& sol) {
  auto v = validate_solution(inst, sol);
  if (!v) throw validation_error("invalid solution: " + v.summary());
  return tour_length(inst, sol.tokens);
}

// ---------------------------------------------------------------------------
// Partial-solution bookkeeping shared by features, masks and decoding.

class PrefixState {
 public:
  explicit PrefixState(const ProblemInstance& inst)
      : inst_(&inst), visited_(inst.size(), 0), total_demand_(inst.total_demand()) {}

  /// Extends the prefix; throws when the token would make it infeasible.
  void push(int node_id) {
    if (length_ == 0) {
      if (node_id != kDepotId) throw validation_error("prefix must start at the depot");
      ++length_;
      last_depot_ = true;
      return;
    }
    if (node_id == kDepotId) {
      if (last_depot_) throw validation_error("prefix has consecutive depot tokens");
      load_ = 0;
      last_depot_ = true;
      ++length_;
      return;
    }
    auto local = inst_->local_index(node_id);
    if (!local) throw validation_error("prefix node " + std::to_string(node_id) + " not in instance");
    if (visited_[*local]) throw validation_error("prefix visits node " + std::to_string(node_id) + " twice");
    const int d = inst_->demands[*local];
    if (load_ + d > inst_->capacity) throw validation_error("prefix exceeds capacity at node " + std::to_string(node_id));
    visited_[*local] = 1;
    load_ += d;
    served_ += d;
    ++n_visited_;
    last_depot_ = false;
    ++length_;
  }

  const ProblemInstance& instance() const noexcept { return *inst_; }
  int load() const noexcept { return load_; }
  int remaining() const noexcept { return inst_->capacity - load_; }
  int served() const noexcept { return served_; }
  int total_demand() const noexcept { return total_demand_; }
  bool last_was_depot() const noexcept { return last_depot_; }
  bool visited(std::size_t local) const { return visited_[local] != 0; }
  int n_visited() const noexcept { return n_visited_; }
  bool all_visited() const noexcept { return n_visited_ == inst_->n_customers(); }
  std::size_t length() const noexcept { return length_; }
  /// Complete once every customer is served and the vehicle is back at the depot.
  bool complete() const noexcept { return all_visited() && last_depot_ && length_ > 1; }

 private:
  const ProblemInstance* inst_;
  std::vector<char> visited_;
  int load_ = 0;
  int served_ = 0;
  int total_demand_ = 0;
  int n_visited_ = 0;
  bool last_depot_ = false;
  std::size_t length_ = 0;
};

// ---------------------------------------------------------------------------
// Token features (x, y, d, t, kappa, gamma, omega, c, a)

inline constexpr std::size_t kFeatureCount = 9;
using FeatureRow = std::array<double, kFeatureCount>;

namespace feature {
inline constexpr std::size_t x = 0, y = 1, demand = 2, is_depot = 3, kappa = 4, cos_angle = 5, sin_angle = 6,
                             load = 7, served = 8;
}

namespace detail {
inline FeatureRow node_features(const ProblemInstance& inst, std::size_t local, double rotation) {
  FeatureRow f{};
  const Point p = rotate_point(inst.coord(local), rotation);
  f[feature::x] = p.x;
  f[feature::y] = p.y;
  f[feature::demand] = static_cast<double>(inst.demands[local]) / inst.capacity;
  f[feature::is_depot] = local == 0 ? 1.0 : 0.0;
  const double dx = p.x - kDepotPoint.x;
  const double dy = p.y - kDepotPoint.y;
  const double r = std::hypot(dx, dy);
  f[feature::kappa] = r / inst.graph->max_depot_dist();
  if (local == 0 || r == 0.0) {
    f[feature::cos_angle] = 1.0;
    f[feature::sin_angle] = 0.0;
  } else {
    f[feature::cos_angle] = dx / r;
    f[feature::sin_angle] = dy / r;
  }
  return f;
}
}  // namespace detail

/// One row per instance node, in node_ids order; c = a = 0.
inline std::vector<FeatureRow> problem_features(const ProblemInstance& inst, double rotation) {
  std::vector<FeatureRow> rows;
  rows.reserve(inst.size());
  for (std::size_t l = 0; l < inst.size(); ++l) rows.push_back(detail::node_features(inst, l, rotation));
  return rows;
}

/// One row per prefix token. c is the post-visit load fraction of the current
/// route (0 at depot tokens); a is the fraction of all demand served so far.
inline std::vector<FeatureRow> solution_features(const ProblemInstance& inst, std::span<const int> prefix,
                                                 double rotation) {
  PrefixState state(inst);
  std::vector<FeatureRow> rows;
  rows.reserve(prefix.size());
  for (int id : prefix) {
    state.push(id);
    const std::size_t local = *inst.local_index(id);
    FeatureRow f = detail::node_features(inst, local, rotation);
    f[feature::load] = static_cast<double>(state.load()) / inst.capacity;
    f[feature::served] = static_cast<double>(state.served()) / state.total_demand();
    rows.push_back(f);
  }
  return rows;
}

// ---------------------------------------------------------------------------

/// Reorders routes by the angle of their demand-weighted centroid about the
/// depot (counter-clockwise from +x in the frame rotated by `rotation`).
/// Ties go to the smaller first-customer id. Route contents are untouched.
inline Solution canonicalize_route_order(const Solution& sol, const ProblemInstance& inst, double rotation = 0.0) {
  struct Keyed {
    double angle;
    int first;
    std::vector<int> route;
  };
  std::vector<Keyed> keyed;
  for (auto& r : sol.routes()) {
    double wx = 0.0, wy = 0.0, w = 0.0;
    for (int id : r) {
      const auto local = inst.local_index(id);
      const double d = local ? inst.demands[*local] : 1.0;
      const Point p = inst.graph->coord(id);
      wx += d * p.x;
      wy += d * p.y;
      w += d;
    }
    const Point centroid{wx / w, wy / w};
    const double a = normalize_angle(angle_about_depot(centroid) + rotation);
    keyed.push_back({a, r.front(), std::move(r)});
  }
  std::stable_sort(keyed.begin(), keyed.end(), [](const Keyed& a, const Keyed& b) {
    if (a.angle != b.angle) return a.angle < b.angle;
    return a.first < b.first;
  });
  std::vector<std::vector<int>> routes;
  for (auto& k : keyed) routes.push_back(std::move(k.route));
  return Solution::from_routes(routes);
}

}  // namespace fmcvrp
