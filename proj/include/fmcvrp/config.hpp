#pragma once

// Run configuration: one JSON document, "desk" and "paper" profiles,
// FMCVRP_* environment overrides, stable hash.

#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include "fmcvrp/checkpoint.hpp"
#include "fmcvrp/datagen.hpp"
#include "fmcvrp/decode.hpp"
#include "fmcvrp/train.hpp"

extern char** environ;

namespace fmcvrp::config {

using nlohmann::json;

struct GraphConfig {
  int size = 201;  // depot included
  std::uint64_t seed = 7;
};

struct DataConfig {
  std::vector<int> sizes;
  int per_size = 0;
  int heldout_per_size = 0;
  std::uint64_t heldout_offset = 1000000;
  std::string capacities = "desk";  // desk | paper
  teacher::TeacherConfig teacher;

  datagen::CapacityTable capacity_table() const {
    return capacities == "paper" ? datagen::CapacityTable::paper() : datagen::CapacityTable::desk();
  }
};

struct EvalConfig {
  std::string baseline = "teacher";
  std::vector<int> generalization_sizes;
  int generalization_per_size = 0;
};

struct RunConfig {
  std::string profile = "desk";
  std::uint64_t seed = 0;
  int workers = 1;
  GraphConfig graph;
  DataConfig data;
  model::ModelConfig model;
  std::vector<train::PhaseSpec> phases;
  decode::DecodePolicy decode;
  EvalConfig eval;

  void validate() const;
  json to_json() const;
  static RunConfig from_json_strict(const json& j);
};

namespace detail {

inline std::vector<train::CurriculumStage> stages(int lo, int hi, bool truncated) {
  std::vector<train::CurriculumStage> out;
  for (int i = lo; i <= hi; ++i) out.push_back({i, truncated});
  return out;
}

inline json teacher_json(const teacher::TeacherConfig& t) {
  return {{"time_budget_s", t.time_budget_s},
          {"mode", t.mode == teacher::BudgetMode::moves ? "moves" : "wall_clock"},
          {"max_moves", t.max_moves},
          {"two_opt", t.two_opt},
          {"relocate", t.relocate},
          {"swap", t.swap}};
}

inline teacher::TeacherConfig teacher_from(const json& j) {
  teacher::TeacherConfig t;
  t.time_budget_s = j.at("time_budget_s").get<double>();
  const auto mode = j.at("mode").get<std::string>();
  if (mode != "moves" && mode != "wall_clock") throw validation_error("teacher.mode must be moves or wall_clock");
  t.mode = mode == "moves" ? teacher::BudgetMode::moves : teacher::BudgetMode::wall_clock;
  t.max_moves = j.at("max_moves").get<long>();
  t.two_opt = j.at("two_opt").get<bool>();
  t.relocate = j.at("relocate").get<bool>();
  t.swap = j.at("swap").get<bool>();
  return t;
}

// Every key of `j` must exist in `ref`; objects are checked recursively,
// arrays replace wholesale.
inline void check_keys(const json& j, const json& ref, const std::string& path) {
  if (!j.is_object() || !ref.is_object()) return;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string where = path.empty() ? it.key() : path + "." + it.key();
    if (!ref.contains(it.key())) throw validation_error("config: unknown key '" + where + "'");
    check_keys(it.value(), ref.at(it.key()), where);
  }
}

inline std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace detail

/// Defaults sized for one CPU core.
inline RunConfig desk_profile() {
  RunConfig c;
  c.profile = "desk";
  c.graph = {201, 7};
  for (int n = 10; n <= 20; ++n) c.data.sizes.push_back(n);
  c.data.per_size = 1820;
  c.data.heldout_per_size = 19;
  c.data.teacher.mode = teacher::BudgetMode::moves;
  c.data.teacher.max_moves = 2000;
  c.model = model::ModelConfig{};
  c.model.dropout = 0.0;

  train::PhaseSpec p1;
  p1.name = "I";
  p1.curriculum = detail::stages(10, 20, true);
  p1.trunc_count = 1000;
  p1.scope = train::Scope::encoder;
  p1.batch_size = 32;
  p1.schedule = train::Schedule::t5;
  p1.peak_lr = 2e-3;
  p1.min_lr = 5e-4;
  p1.warmup_steps = 500;
  p1.rotation = false;
  p1.steps = 3000;
  p1.checkpoint_every = 1000;

  train::PhaseSpec p2 = p1;
  p2.name = "II-A";
  p2.curriculum = {{20, false}};
  p2.scope = train::Scope::encoder_decoder;
  p2.schedule = train::Schedule::constant;
  p2.peak_lr = 1e-3;
  p2.warmup_steps = 0;
  p2.steps = 10000;
  c.phases = {p1, p2};

  c.decode.strategy = decode::Strategy::nucleus;
  c.decode.top_p = 0.9;
  c.decode.samples = 50;
  c.decode.rotate = false;
  c.eval.generalization_sizes = {25, 26, 27, 28, 29, 30};
  c.eval.generalization_per_size = 34;
  return c;
}

/// Full-scale parameters; documents the reference setup, not runnable here.
inline RunConfig paper_profile() {
  RunConfig c;
  c.profile = "paper";
  c.graph = {10000, 7};
  for (int n = 20; n <= 400; ++n) c.data.sizes.push_back(n);
  c.data.per_size = 100000;
  c.data.heldout_per_size = 1000;
  c.data.capacities = "paper";
  c.data.teacher.mode = teacher::BudgetMode::wall_clock;
  c.data.teacher.time_budget_s = 5.0;
  c.model.n_layers = 12;
  c.model.n_heads = 12;
  c.model.d_model = 768;
  c.model.d_ff = 3072;
  c.model.vocab_size = 10001;
  c.model.dropout = 0.1;

  train::PhaseSpec p1;
  p1.name = "I";
  p1.curriculum = detail::stages(20, 400, true);
  p1.trunc_count = 1000;
  p1.scope = train::Scope::encoder;
  p1.batch_size = 16;
  p1.schedule = train::Schedule::t5;
  p1.peak_lr = 0.01;
  p1.min_lr = 0.002;
  p1.warmup_steps = 10000;
  p1.rotation = false;
  p1.steps = 0;
  p1.time_budget_h = 52;
  p1.checkpoint_every = 10000;
  auto p2 = [&](std::string name, std::vector<train::CurriculumStage> cur, double hours) {
    train::PhaseSpec p = p1;
    p.name = std::move(name);
    p.curriculum = std::move(cur);
    p.scope = train::Scope::encoder_decoder;
    p.schedule = train::Schedule::constant;
    p.peak_lr = train::lr_scaled_constant(1e-3, 2.0);
    p.min_lr = p.peak_lr;
    p.warmup_steps = 0;
    p.rotation = true;
    p.time_budget_h = hours;
    return p;
  };
  c.phases = {p1, p2("II-A", detail::stages(20, 50, false), 59), p2("II-B", {{200, false}}, 26),
              p2("II-C", {{400, false}}, 96)};
  c.decode.strategy = decode::Strategy::nucleus;
  c.decode.samples = 1000;
  c.eval.generalization_sizes = {20, 50, 100, 200, 400};
  c.eval.generalization_per_size = 1000;
  return c;
}

inline RunConfig profile(const std::string& name) {
  if (name == "desk" || name == "custom") {
    auto c = desk_profile();
    c.profile = name;
    return c;
  }
  if (name == "paper") return paper_profile();
  throw validation_error("unknown profile '" + name + "'");
}

inline void RunConfig::validate() const {
  if (profile != "desk" && profile != "paper" && profile != "custom")
    throw validation_error("profile must be desk, paper or custom");
  if (workers < 1) throw validation_error("workers must be >= 1");
  if (graph.size < 21) throw validation_error("graph.size must be >= 21");
  if (data.sizes.empty()) throw validation_error("data.sizes is empty");
  for (int n : data.sizes)
    if (n < 1 || n >= graph.size) throw validation_error("data.sizes entries must lie in [1, graph.size)");
  if (data.per_size < 0 || data.heldout_per_size < 0) throw validation_error("data counts must be non-negative");
  if (data.capacities != "desk" && data.capacities != "paper")
    throw validation_error("data.capacities must be desk or paper");
  if (static_cast<int>(model.vocab_size) != graph.size + 1)
    throw validation_error("model.vocab_size must equal graph.size + 1");
  model.validate();
  for (const auto& p : phases) {
    p.validate();
    for (const auto& s : p.curriculum)
      if (std::find(data.sizes.begin(), data.sizes.end(), s.upper) == data.sizes.end())
        throw validation_error("phase " + p.name + ": curriculum size " + std::to_string(s.upper) + " not generated");
  }
  decode.validate();
  for (int n : eval.generalization_sizes)
    if (n < 1 || n >= graph.size) throw validation_error("eval.generalization_sizes entries out of range");
}

inline json RunConfig::to_json() const {
  json ph = json::array();
  for (const auto& p : phases) ph.push_back(p.to_json());
  return {{"profile", profile},
          {"seed", seed},
          {"workers", workers},
          {"graph", {{"size", graph.size}, {"seed", graph.seed}}},
          {"data",
           {{"sizes", data.sizes},
            {"per_size", data.per_size},
            {"heldout_per_size", data.heldout_per_size},
            {"heldout_offset", data.heldout_offset},
            {"capacities", data.capacities},
            {"teacher", detail::teacher_json(data.teacher)}}},
          {"model", model.to_json()},
          {"phases", ph},
          {"decode", decode.to_json()},
          {"eval",
           {{"baseline", eval.baseline},
            {"generalization_sizes", eval.generalization_sizes},
            {"generalization_per_size", eval.generalization_per_size}}}};
}

inline RunConfig RunConfig::from_json_strict(const json& j) {
  RunConfig c;
  try {
    const auto ref = config::profile("desk").to_json();
    detail::check_keys(j, ref, "");
    for (const char* k : {"profile", "seed", "workers", "graph", "data", "model", "phases", "decode", "eval"})
      if (!j.contains(k)) throw validation_error(std::string("config: missing key '") + k + "'");
    c.profile = j.at("profile").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.workers = j.at("workers").get<int>();
    c.graph.size = j.at("graph").at("size").get<int>();
    c.graph.seed = j.at("graph").at("seed").get<std::uint64_t>();
    const auto& d = j.at("data");
    c.data.sizes = d.at("sizes").get<std::vector<int>>();
    c.data.per_size = d.at("per_size").get<int>();
    c.data.heldout_per_size = d.at("heldout_per_size").get<int>();
    c.data.heldout_offset = d.at("heldout_offset").get<std::uint64_t>();
    c.data.capacities = d.at("capacities").get<std::string>();
    c.data.teacher = detail::teacher_from(d.at("teacher"));
    c.model = model::ModelConfig::from_json(j.at("model"));
    c.phases.clear();
    for (const auto& p : j.at("phases")) c.phases.push_back(train::PhaseSpec::from_json(p));
    c.decode = decode::DecodePolicy::from_json(j.at("decode"));
    const auto& e = j.at("eval");
    c.eval.baseline = e.at("baseline").get<std::string>();
    c.eval.generalization_sizes = e.at("generalization_sizes").get<std::vector<int>>();
    c.eval.generalization_per_size = e.at("generalization_per_size").get<int>();
  } catch (const json::exception& ex) {
    throw validation_error(std::string("config: ") + ex.what());
  }
  c.validate();
  return c;
}

/// Override `doc` from FMCVRP_<PATH>=value pairs. PATH is the upper-cased
/// key path joined by "__" (FMCVRP_DATA__PER_SIZE=100); values parse as
/// JSON, otherwise as strings. Unknown paths are rejected.
inline void apply_env_overrides(json& doc, const std::vector<std::pair<std::string, std::string>>& env) {
  for (const auto& [key, value] : env) {
    if (key.rfind("FMCVRP_", 0) != 0) continue;
    std::string rest = detail::lower(key.substr(7));
    std::vector<std::string> path;
    for (std::size_t pos = 0;;) {
      const auto next = rest.find("__", pos);
      path.push_back(rest.substr(pos, next == std::string::npos ? std::string::npos : next - pos));
      if (next == std::string::npos) break;
      pos = next + 2;
    }
    json* node = &doc;
    for (std::size_t i = 0; i < path.size(); ++i) {
      if (node->is_array()) {
        std::size_t idx = 0;
        try {
          idx = std::stoul(path[i]);
        } catch (...) {
          throw validation_error("env override " + key + ": '" + path[i] + "' is not an index");
        }
        if (idx >= node->size()) throw validation_error("env override " + key + ": index out of range");
        node = &(*node)[idx];
      } else {
        if (!node->is_object() || !node->contains(path[i]))
          throw validation_error("env override " + key + ": unknown key path");
        node = &(*node)[path[i]];
      }
    }
    json v = json::parse(value, nullptr, false);
    *node = v.is_discarded() ? json(value) : v;
  }
}

inline std::vector<std::pair<std::string, std::string>> process_environment() {
  std::vector<std::pair<std::string, std::string>> out;
  for (char** e = environ; e && *e; ++e) {
    std::string kv(*e);
    const auto eq = kv.find('=');
    if (eq != std::string::npos && kv.rfind("FMCVRP_", 0) == 0) out.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return out;
}

/// Profile defaults, then the file document, then `env`.
inline RunConfig resolve(const std::string& profile_name, const json& file_doc,
                         const std::vector<std::pair<std::string, std::string>>& env) {
  std::string name = profile_name;
  if (name.empty()) name = file_doc.is_object() ? file_doc.value("profile", std::string("desk")) : "desk";
  json doc = profile(name).to_json();
  if (file_doc.is_object()) {
    detail::check_keys(file_doc, doc, "");
    doc.merge_patch(file_doc);
    if (!profile_name.empty()) doc["profile"] = profile_name;
  } else if (!file_doc.is_null()) {
    throw validation_error("config file must hold a JSON object");
  }
  apply_env_overrides(doc, env);
  return RunConfig::from_json_strict(doc);
}

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// FNV-1a over the canonical (sorted-key) JSON text.
inline std::string config_hash(const RunConfig& c) {
  const auto s = c.to_json().dump();
  return hex64(tensor::fnv1a64(s.data(), s.size()));
}

inline std::string file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h = tensor::fnv1a64(buf.data(), static_cast<std::size_t>(in.gcount()), h);
  }
  return hex64(h);
}

}  // namespace fmcvrp::config
