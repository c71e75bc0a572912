#pragma once

// Fixed-graph construction, instance sampling, dataset files and curricula.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fmcvrp/graph.hpp"
#include "fmcvrp/rng.hpp"
#include "fmcvrp/teacher.hpp"
#include "json.hpp"

namespace fmcvrp::datagen {

struct CapacityRow {
  int n_lo, n_hi;  // inclusive node-count range
  int c_lo, c_hi;  // half-open capacity range
};

class CapacityTable {
 public:
  explicit CapacityTable(std::vector<CapacityRow> rows) : rows_(std::move(rows)) {}

  /// Rows as published for 20..1000 customers.
  static CapacityTable paper() {
    return CapacityTable({{20, 49, 30, 40}, {50, 99, 40, 50}, {100, 199, 50, 60}, {200, 400, 60, 70}, {401, 1000, 70, 80}});
  }

  /// Paper table with its first row extended down to a single customer.
  static CapacityTable desk() {
    auto t = paper();
    t.rows_.front().n_lo = 1;
    return t;
  }

  std::pair<int, int> range(int n_customers) const {
    for (const auto& r : rows_)
      if (n_customers >= r.n_lo && n_customers <= r.n_hi) return {r.c_lo, r.c_hi};
    throw validation_error("no capacity range for " + std::to_string(n_customers) + " customers");
  }

  const std::vector<CapacityRow>& rows() const noexcept { return rows_; }

 private:
  std::vector<CapacityRow> rows_;
};

inline std::pair<int, int> capacity_range(int n_customers, const CapacityTable& table = CapacityTable::paper()) {
  return table.range(n_customers);
}

inline FixedGraph build_fixed_graph(std::size_t size, std::uint64_t seed) {
  if (size < 21) throw validation_error("fixed graph size must be at least 21");
  Rng rng(derive_seed(seed, {0x6772617068ULL}));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Point> coords;
  coords.reserve(size);
  coords.push_back(kDepotPoint);
  for (std::size_t i = 1; i < size; ++i) {
    const double x = u(rng);
    const double y = u(rng);
    coords.push_back({x, y});
  }
  return FixedGraph(std::move(coords), seed);
}

inline ProblemInstance sample_instance(const GraphPtr& graph, int n_customers, std::uint64_t seed,
                                       const CapacityTable& table = CapacityTable::paper()) {
  if (n_customers < 1 || static_cast<std::size_t>(n_customers) >= graph->size())
    throw validation_error("n_customers must be in [1, graph size)");
  const auto [c_lo, c_hi] = table.range(n_customers);
  Rng rng(seed);
  // Partial Fisher-Yates over customer ids 1..size-1.
  std::vector<int> pool(graph->size() - 1);
  std::iota(pool.begin(), pool.end(), 1);
  for (int i = 0; i < n_customers; ++i) {
    std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), pool.size() - 1);
    std::swap(pool[static_cast<std::size_t>(i)], pool[pick(rng)]);
  }
  std::vector<int> customers(pool.begin(), pool.begin() + n_customers);
  std::sort(customers.begin(), customers.end());

  ProblemInstance inst;
  inst.graph = graph;
  inst.node_ids.push_back(kDepotId);
  inst.demands.push_back(0);
  std::uniform_int_distribution<int> demand(1, 9);
  for (int c : customers) {
    inst.node_ids.push_back(c);
    inst.demands.push_back(demand(rng));
  }
  inst.capacity = std::uniform_int_distribution<int>(c_lo, c_hi - 1)(rng);
  check_instance(inst);
  return inst;
}

inline std::uint64_t instance_seed(std::uint64_t master, int size, std::uint64_t index) {
  return derive_seed(master, {static_cast<std::uint64_t>(size), index});
}

// ---------------------------------------------------------------------------
// Dataset records

struct DatasetRecord {
  std::string instance_id;
  std::vector<int> node_ids;
  std::vector<int> demands;
  int capacity = 0;
  std::vector<int> tokens;
  double teacher_cost = 0.0;
  double teacher_wall_time_s = 0.0;

  int n_customers() const { return static_cast<int>(node_ids.size()) - 1; }

  ProblemInstance instance(const GraphPtr& graph) const {
    ProblemInstance inst{graph, node_ids, demands, capacity};
    check_instance(inst);
    return inst;
  }
  Solution solution() const { return {tokens}; }

  nlohmann::json to_json() const {
    return {{"instance_id", instance_id}, {"node_ids", node_ids},       {"demands", demands},
            {"capacity", capacity},       {"tokens", tokens},           {"teacher_cost", teacher_cost},
            {"teacher_wall_time_s", teacher_wall_time_s}};
  }
  static DatasetRecord from_json(const nlohmann::json& j) {
    DatasetRecord r;
    r.instance_id = j.at("instance_id").get<std::string>();
    r.node_ids = j.at("node_ids").get<std::vector<int>>();
    r.demands = j.at("demands").get<std::vector<int>>();
    r.capacity = j.at("capacity").get<int>();
    r.tokens = j.at("tokens").get<std::vector<int>>();
    r.teacher_cost = j.at("teacher_cost").get<double>();
    r.teacher_wall_time_s = j.value("teacher_wall_time_s", 0.0);
    return r;
  }
};

inline std::string make_instance_id(int size, std::uint64_t index) {
  return "n" + std::to_string(size) + "-" + std::to_string(index);
}

inline std::vector<DatasetRecord> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open dataset " + path);
  std::vector<DatasetRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(DatasetRecord::from_json(nlohmann::json::parse(line)));
  }
  return out;
}

inline void write_jsonl(const std::string& path, const std::vector<DatasetRecord>& records) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot write dataset " + path);
  for (const auto& r : records) out << r.to_json().dump() << '\n';
}

struct DatasetSpec {
  std::vector<int> sizes;
  int per_size = 0;
  std::uint64_t seed = 0;
  teacher::TeacherConfig teacher;
  CapacityTable capacities = CapacityTable::desk();
  int workers = 1;
  std::uint64_t index_offset = 0;  // shift instance indices for disjoint held-out sets
};

inline constexpr int kDatasetFormatVersion = 1;

inline nlohmann::json manifest(const DatasetSpec& spec, const FixedGraph& graph, std::size_t n_records) {
  return {{"format_version", kDatasetFormatVersion},
          {"graph_seed", graph.seed()},
          {"graph_size", graph.size()},
          {"sizes", spec.sizes},
          {"per_size", spec.per_size},
          {"seed", spec.seed},
          {"index_offset", spec.index_offset},
          {"teacher_budget_s", spec.teacher.time_budget_s},
          {"teacher_mode", spec.teacher.mode == teacher::BudgetMode::moves ? "moves" : "wall_clock"},
          {"teacher_max_moves", spec.teacher.max_moves},
          {"records", n_records}};
}

/// Solves every (size, index) instance with the teacher. Records come back in
/// (size, index) order regardless of worker count; failures are skipped and
/// reported through `on_skip`.
inline std::vector<DatasetRecord> build_dataset(
    const GraphPtr& graph, const DatasetSpec& spec,
    const std::function<void(const std::string&, const std::string&)>& on_skip = {}) {
  struct Job {
    int size;
    std::uint64_t index;
  };
  std::vector<Job> jobs;
  for (int n : spec.sizes)
    for (int k = 0; k < spec.per_size; ++k) jobs.push_back({n, spec.index_offset + static_cast<std::uint64_t>(k)});

  std::vector<std::optional<DatasetRecord>> slots(jobs.size());
  std::mutex log_mutex;
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t j = begin; j < jobs.size(); j += stride) {
      const auto& job = jobs[j];
      const std::string id = make_instance_id(job.size, job.index);
      try {
        const std::uint64_t seed = instance_seed(spec.seed, job.size, job.index);
        ProblemInstance inst = sample_instance(graph, job.size, seed, spec.capacities);
        teacher::TeacherConfig tc = spec.teacher;
        tc.seed = derive_seed(seed, {0x7465616368ULL});
        auto res = teacher::solve(inst, tc);
        DatasetRecord rec{id, inst.node_ids, inst.demands, inst.capacity, res.solution.tokens, res.cost, res.wall_time_s};
        slots[j] = std::move(rec);
      } catch (const std::exception& e) {
        std::lock_guard lock(log_mutex);
        if (on_skip) on_skip(id, e.what());
      }
    }
  };
  const int workers = std::max(1, spec.workers);
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work, static_cast<std::size_t>(w), static_cast<std::size_t>(workers));
  }
  std::vector<DatasetRecord> out;
  out.reserve(jobs.size());
  for (auto& s : slots)
    if (s) out.push_back(std::move(*s));
  return out;
}

// ---------------------------------------------------------------------------
// Curricula

/// Component datasets T_j keyed by customer count.
using DatasetsBySize = std::map<int, std::vector<DatasetRecord>>;

inline DatasetsBySize group_by_size(const std::vector<DatasetRecord>& records) {
  DatasetsBySize out;
  for (const auto& r : records) out[r.n_customers()].push_back(r);
  return out;
}

/// Union of T_j for min_size <= j <= i, smallest size first. With `trunc`,
/// each component keeps only its first `trunc_count` records.
inline std::vector<DatasetRecord> curriculum(const DatasetsBySize& datasets, int min_size, int i, bool truncated,
                                             std::size_t trunc_count = 1000) {
  if (i < min_size) throw validation_error("curriculum upper size below the minimum size");
  std::vector<DatasetRecord> out;
  for (int j = min_size; j <= i; ++j) {
    auto it = datasets.find(j);
    if (it == datasets.end() || it->second.empty())
      throw validation_error("curriculum missing component dataset for size " + std::to_string(j));
    const auto& comp = it->second;
    const std::size_t take = truncated ? std::min(trunc_count, comp.size()) : comp.size();
    out.insert(out.end(), comp.begin(), comp.begin() + static_cast<long>(take));
  }
  return out;
}

}  // namespace fmcvrp::datagen
