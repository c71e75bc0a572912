#pragma once

// Inexpensive teacher: Clarke-Wright savings followed by first-improvement
// local search (2-opt, relocate, swap). Also an exact solver for tiny
// instances used as a quality oracle.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "fmcvrp/graph.hpp"
#include "fmcvrp/rng.hpp"

namespace fmcvrp::teacher {

enum class BudgetMode { wall_clock, moves };

struct TeacherConfig {
  double time_budget_s = 0.05;
  BudgetMode mode = BudgetMode::wall_clock;
  long max_moves = 10000;  // used in moves mode
  bool two_opt = true;
  bool relocate = true;
  bool swap = true;
  std::uint64_t seed = 0;
};

class Deadline {
 public:
  using Clock = std::chrono::steady_clock;

  static Deadline seconds(double s) {
    Deadline d;
    d.has_time_ = true;
    d.end_ = Clock::now() + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(s));
    if (s <= 0.0) d.exhausted_ = true;
    return d;
  }
  static Deadline moves(long n) {
    Deadline d;
    d.max_moves_ = n;
    if (n <= 0) d.exhausted_ = true;
    return d;
  }
  static Deadline unlimited() { return {}; }

  void record_move() {
    ++moves_;
    if (max_moves_ >= 0 && moves_ >= max_moves_) exhausted_ = true;
  }
  bool expired() {
    if (!exhausted_ && has_time_ && Clock::now() >= end_) exhausted_ = true;
    return exhausted_;
  }
  long moves_made() const noexcept { return moves_; }

 private:
  bool has_time_ = false;
  Clock::time_point end_{};
  long max_moves_ = -1;
  long moves_ = 0;
  bool exhausted_ = false;
};

namespace detail {

inline std::vector<double> distance_matrix(const ProblemInstance& inst) {
  const std::size_t m = inst.size();
  std::vector<double> d(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) d[i * m + j] = d[j * m + i] = distance(inst.coord(i), inst.coord(j));
  return d;
}

// Routes over local indices (0 is the depot, never stored in a route).
using LocalRoutes = std::vector<std::vector<int>>;

inline Solution to_solution(const ProblemInstance& inst, const LocalRoutes& routes) {
  std::vector<std::vector<int>> ids;
  for (const auto& r : routes) {
    if (r.empty()) continue;
    std::vector<int> route;
    for (int l : r) route.push_back(inst.node_ids[static_cast<std::size_t>(l)]);
    ids.push_back(std::move(route));
  }
  return Solution::from_routes(ids);
}

inline LocalRoutes to_local(const ProblemInstance& inst, const Solution& sol) {
  LocalRoutes out;
  for (const auto& r : sol.routes()) {
    std::vector<int> route;
    for (int id : r) route.push_back(static_cast<int>(*inst.local_index(id)));
    out.push_back(std::move(route));
  }
  return out;
}

class Search {
 public:
  Search(const ProblemInstance& inst, LocalRoutes routes, const TeacherConfig& cfg, Deadline& deadline)
      : inst_(inst), m_(inst.size()), dist_(distance_matrix(inst)), routes_(std::move(routes)), cfg_(cfg),
        deadline_(deadline), rng_(cfg.seed) {
    for (const auto& r : routes_) {
      int load = 0;
      for (int c : r) load += inst_.demands[static_cast<std::size_t>(c)];
      loads_.push_back(load);
    }
  }

  LocalRoutes run() {
    bool improved = true;
    while (improved && !deadline_.expired()) {
      improved = false;
      if (cfg_.two_opt && two_opt_pass()) improved = true;
      if (deadline_.expired()) break;
      if (cfg_.relocate && relocate_pass()) improved = true;
      if (deadline_.expired()) break;
      if (cfg_.swap && swap_pass()) improved = true;
      drop_empty();
    }
    drop_empty();
    return routes_;
  }

 private:
  static constexpr double kEps = 1e-10;

  double d(int a, int b) const { return dist_[static_cast<std::size_t>(a) * m_ + static_cast<std::size_t>(b)]; }
  int demand(int c) const { return inst_.demands[static_cast<std::size_t>(c)]; }

  // Neighbour of position i in route r, with the depot beyond either end.
  int at(const std::vector<int>& r, long i) const {
    if (i < 0 || i >= static_cast<long>(r.size())) return 0;
    return r[static_cast<std::size_t>(i)];
  }

  std::vector<std::size_t> route_order() {
    std::vector<std::size_t> order(routes_.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng_);
    return order;
  }

  bool two_opt_pass() {
    bool any = false;
    for (std::size_t ri : route_order()) {
      auto& r = routes_[ri];
      const long n = static_cast<long>(r.size());
      bool again = true;
      while (again && !deadline_.expired()) {
        again = false;
        for (long i = 0; i < n && !again; ++i) {
          for (long j = i + 1; j < n; ++j) {
            const int a = at(r, i - 1), b = r[static_cast<std::size_t>(i)];
            const int c = r[static_cast<std::size_t>(j)], e = at(r, j + 1);
            const double delta = d(a, c) + d(b, e) - d(a, b) - d(c, e);
            if (delta < -kEps) {
              std::reverse(r.begin() + i, r.begin() + j + 1);
              deadline_.record_move();
              any = again = true;
              break;
            }
          }
        }
      }
      if (deadline_.expired()) break;
    }
    return any;
  }

  bool relocate_pass() {
    bool any = false;
    for (std::size_t ra : route_order()) {
      for (long i = 0; i < static_cast<long>(routes_[ra].size()); ++i) {
        if (deadline_.expired()) return any;
        auto& src = routes_[ra];
        const int u = src[static_cast<std::size_t>(i)];
        const int p = at(src, i - 1), s = at(src, i + 1);
        const double removal = d(p, s) - d(p, u) - d(u, s);
        bool moved = false;
        for (std::size_t rb = 0; rb < routes_.size() && !moved; ++rb) {
          if (rb != ra && loads_[rb] + demand(u) > inst_.capacity) continue;
          auto& dst = routes_[rb];
          const long n = static_cast<long>(dst.size());
          for (long k = 0; k <= n; ++k) {
            // insert u between dst[k-1] and dst[k]
            if (rb == ra && (k == i || k == i + 1)) continue;
            const int a = at(dst, k - 1), b = at(dst, k);
            double delta;
            if (rb == ra) {
              // a or b may be u's current neighbours; evaluate on the reduced route.
              std::vector<int> tmp = src;
              tmp.erase(tmp.begin() + i);
              const long kk = k > i ? k - 1 : k;
              const int a2 = at(tmp, kk - 1), b2 = at(tmp, kk);
              delta = removal + d(a2, u) + d(u, b2) - d(a2, b2);
            } else {
              delta = removal + d(a, u) + d(u, b) - d(a, b);
            }
            if (delta < -kEps) {
              if (rb == ra) {
                src.erase(src.begin() + i);
                const long kk = k > i ? k - 1 : k;
                src.insert(src.begin() + kk, u);
              } else {
                src.erase(src.begin() + i);
                dst.insert(dst.begin() + k, u);
                loads_[ra] -= demand(u);
                loads_[rb] += demand(u);
              }
              deadline_.record_move();
              any = moved = true;
              break;
            }
          }
        }
        if (moved) --i;  // re-examine the customer that slid into position i
        if (routes_[ra].empty()) break;
      }
    }
    return any;
  }

  bool swap_pass() {
    bool any = false;
    for (std::size_t ra = 0; ra < routes_.size(); ++ra) {
      for (std::size_t rb = ra + 1; rb < routes_.size(); ++rb) {
        auto& A = routes_[ra];
        auto& B = routes_[rb];
        for (long i = 0; i < static_cast<long>(A.size()); ++i) {
          if (deadline_.expired()) return any;
          for (long j = 0; j < static_cast<long>(B.size()); ++j) {
            const int u = A[static_cast<std::size_t>(i)], v = B[static_cast<std::size_t>(j)];
            const int du = demand(u), dv = demand(v);
            if (loads_[ra] - du + dv > inst_.capacity || loads_[rb] - dv + du > inst_.capacity) continue;
            const int pa = at(A, i - 1), sa = at(A, i + 1), pb = at(B, j - 1), sb = at(B, j + 1);
            const double delta = d(pa, v) + d(v, sa) - d(pa, u) - d(u, sa) + d(pb, u) + d(u, sb) - d(pb, v) - d(v, sb);
            if (delta < -kEps) {
              std::swap(A[static_cast<std::size_t>(i)], B[static_cast<std::size_t>(j)]);
              loads_[ra] += dv - du;
              loads_[rb] += du - dv;
              deadline_.record_move();
              any = true;
            }
          }
        }
      }
    }
    return any;
  }

  void drop_empty() {
    for (std::size_t i = routes_.size(); i-- > 0;) {
      if (routes_[i].empty()) {
        routes_.erase(routes_.begin() + static_cast<long>(i));
        loads_.erase(loads_.begin() + static_cast<long>(i));
      }
    }
  }

  const ProblemInstance& inst_;
  std::size_t m_;
  std::vector<double> dist_;
  LocalRoutes routes_;
  std::vector<int> loads_;
  const TeacherConfig& cfg_;
  Deadline& deadline_;
  Rng rng_;
};

}  // namespace detail

/// Parallel Clarke-Wright savings construction.
inline Solution savings_construct(const ProblemInstance& inst) {
  check_instance(inst);
  const int m = static_cast<int>(inst.size());
  const auto dist = detail::distance_matrix(inst);
  auto d = [&](int a, int b) { return dist[static_cast<std::size_t>(a * m + b)]; };

  std::vector<std::vector<int>> routes(static_cast<std::size_t>(m));
  std::vector<int> owner(static_cast<std::size_t>(m), -1);
  std::vector<int> load(static_cast<std::size_t>(m), 0);
  for (int c = 1; c < m; ++c) {
    routes[static_cast<std::size_t>(c)] = {c};
    owner[static_cast<std::size_t>(c)] = c;
    load[static_cast<std::size_t>(c)] = inst.demands[static_cast<std::size_t>(c)];
  }

  struct Saving {
    double value;
    int i, j;
  };
  std::vector<Saving> savings;
  for (int i = 1; i < m; ++i)
    for (int j = i + 1; j < m; ++j) savings.push_back({d(0, i) + d(0, j) - d(i, j), i, j});
  std::sort(savings.begin(), savings.end(), [](const Saving& a, const Saving& b) {
    if (a.value != b.value) return a.value > b.value;
    if (a.i != b.i) return a.i < b.i;
    return a.j < b.j;
  });

  for (const Saving& s : savings) {
    const int ri = owner[static_cast<std::size_t>(s.i)], rj = owner[static_cast<std::size_t>(s.j)];
    if (ri == rj) continue;
    auto& A = routes[static_cast<std::size_t>(ri)];
    auto& B = routes[static_cast<std::size_t>(rj)];
    if (load[static_cast<std::size_t>(ri)] + load[static_cast<std::size_t>(rj)] > inst.capacity) continue;
    const bool i_front = A.front() == s.i, i_back = A.back() == s.i;
    const bool j_front = B.front() == s.j, j_back = B.back() == s.j;
    if (!(i_front || i_back) || !(j_front || j_back)) continue;
    // Orient so that A ends with i and B starts with j.
    if (!i_back) std::reverse(A.begin(), A.end());
    if (!j_front) std::reverse(B.begin(), B.end());
    A.insert(A.end(), B.begin(), B.end());
    for (int c : B) owner[static_cast<std::size_t>(c)] = ri;
    load[static_cast<std::size_t>(ri)] += load[static_cast<std::size_t>(rj)];
    B.clear();
  }

  detail::LocalRoutes out;
  for (auto& r : routes)
    if (!r.empty()) out.push_back(std::move(r));
  return detail::to_solution(inst, out);
}

/// First-improvement 2-opt / relocate / swap until a local optimum or the
/// deadline. The result is feasible and never costlier than the input.
inline Solution local_search(const ProblemInstance& inst, const Solution& sol, Deadline& deadline,
                             const TeacherConfig& cfg = {}) {
  auto v = validate_solution(inst, sol);
  if (!v) throw validation_error("local_search needs a feasible input: " + v.summary());
  detail::Search search(inst, detail::to_local(inst, sol), cfg, deadline);
  Solution out = detail::to_solution(inst, search.run());
  return out;
}

struct TeacherResult {
  Solution solution;
  double cost = 0.0;
  double wall_time_s = 0.0;
  long moves = 0;
};

inline TeacherResult solve(const ProblemInstance& inst, const TeacherConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  Solution sol = savings_construct(inst);
  Deadline deadline = cfg.mode == BudgetMode::moves ? Deadline::moves(cfg.max_moves) : Deadline::seconds(cfg.time_budget_s);
  if (!deadline.expired()) sol = local_search(inst, sol, deadline, cfg);
  sol = canonicalize_route_order(sol, inst);
  TeacherResult r;
  r.cost = solution_cost(inst, sol);
  r.solution = std::move(sol);
  r.moves = deadline.moves_made();
  r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

inline constexpr int kExactMaxCustomers = 8;

/// Optimal solution by dynamic programming: Held-Karp route costs for every
/// capacity-feasible customer subset, then a set-partition recursion.
inline Solution exact_small(const ProblemInstance& inst) {
  check_instance(inst);
  const int n = inst.n_customers();
  if (n > kExactMaxCustomers) throw validation_error("exact_small supports at most 8 customers");
  const int m = n + 1;
  const auto dist = detail::distance_matrix(inst);
  auto d = [&](int a, int b) { return dist[static_cast<std::size_t>(a * m + b)]; };
  const unsigned full = (1u << n) - 1u;
  constexpr double kInf = std::numeric_limits<double>::infinity();

  // path[S][k]: shortest depot -> ... -> customer k+1 visiting exactly S.
  std::vector<double> path(static_cast<std::size_t>((full + 1) * static_cast<unsigned>(n)), kInf);
  std::vector<int> parent(path.size(), -1);
  auto P = [&](unsigned s, int k) -> double& { return path[s * static_cast<unsigned>(n) + static_cast<unsigned>(k)]; };
  auto Par = [&](unsigned s, int k) -> int& { return parent[s * static_cast<unsigned>(n) + static_cast<unsigned>(k)]; };
  std::vector<int> subset_demand(full + 1, 0);
  for (unsigned s = 1; s <= full; ++s)
    for (int k = 0; k < n; ++k)
      if (s & (1u << k)) subset_demand[s] += inst.demands[static_cast<std::size_t>(k + 1)];

  for (int k = 0; k < n; ++k) P(1u << k, k) = d(0, k + 1);
  for (unsigned s = 1; s <= full; ++s) {
    if (subset_demand[s] > inst.capacity) continue;
    for (int k = 0; k < n; ++k) {
      if (!(s & (1u << k)) || P(s, k) == kInf) continue;
      for (int nx = 0; nx < n; ++nx) {
        if (s & (1u << nx)) continue;
        const unsigned t = s | (1u << nx);
        if (subset_demand[t] > inst.capacity) continue;
        const double c = P(s, k) + d(k + 1, nx + 1);
        if (c < P(t, nx)) {
          P(t, nx) = c;
          Par(t, nx) = k;
        }
      }
    }
  }
  std::vector<double> route_cost(full + 1, kInf);
  std::vector<int> route_last(full + 1, -1);
  for (unsigned s = 1; s <= full; ++s) {
    if (subset_demand[s] > inst.capacity) continue;
    for (int k = 0; k < n; ++k) {
      if (!(s & (1u << k)) || P(s, k) == kInf) continue;
      const double c = P(s, k) + d(k + 1, 0);
      if (c < route_cost[s]) {
        route_cost[s] = c;
        route_last[s] = k;
      }
    }
  }

  // best[S]: optimal cover of S; the route containing S's lowest customer is enumerated.
  std::vector<double> best(full + 1, kInf);
  std::vector<unsigned> choice(full + 1, 0);
  best[0] = 0.0;
  for (unsigned s = 1; s <= full; ++s) {
    const unsigned low = s & (~s + 1u);
    const unsigned rest = s & ~low;
    for (unsigned sub = rest;; sub = (sub - 1) & rest) {
      const unsigned r = sub | low;
      if (route_cost[r] < kInf) {
        const double c = route_cost[r] + best[s & ~r];
        if (c < best[s]) {
          best[s] = c;
          choice[s] = r;
        }
      }
      if (sub == 0) break;
    }
  }

  detail::LocalRoutes routes;
  for (unsigned s = full; s != 0;) {
    const unsigned r = choice[s];
    std::vector<int> route;
    unsigned cur = r;
    int k = route_last[r];
    while (k >= 0) {
      route.push_back(k + 1);
      const int pk = Par(cur, k);
      cur &= ~(1u << k);
      k = pk;
    }
    std::reverse(route.begin(), route.end());
    routes.push_back(std::move(route));
    s &= ~r;
  }
  return detail::to_solution(inst, routes);
}

}  // namespace fmcvrp::teacher
