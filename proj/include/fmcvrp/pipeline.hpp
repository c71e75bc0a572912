#pragma once

// End-to-end stages driven by one RunConfig and its master seed.

#include <chrono>
#include <sstream>

#include "fmcvrp/config.hpp"

namespace fmcvrp::pipeline {

using config::RunConfig;

/// Per-stage seeds derived from the master seed.
struct Seeds {
  std::uint64_t graph, data, init, train, decode;
};

inline Seeds seeds(const RunConfig& c) {
  return {derive_seed(c.seed, {0x67, c.graph.seed}), derive_seed(c.seed, {0x64}), derive_seed(c.seed, {0x69}),
          derive_seed(c.seed, {0x74}), derive_seed(c.seed, {0x6463, c.decode.seed})};
}

inline GraphPtr build_graph(const RunConfig& c) {
  return std::make_shared<const FixedGraph>(
      datagen::build_fixed_graph(static_cast<std::size_t>(c.graph.size), seeds(c).graph));
}

inline datagen::DatasetSpec dataset_spec(const RunConfig& c, std::vector<int> sizes, int per_size,
                                         std::uint64_t offset) {
  datagen::DatasetSpec s;
  s.sizes = std::move(sizes);
  s.per_size = per_size;
  s.seed = seeds(c).data;
  s.teacher = c.data.teacher;
  s.capacities = c.data.capacity_table();
  s.workers = c.workers;
  s.index_offset = offset;
  return s;
}

struct Datasets {
  std::vector<datagen::DatasetRecord> train, heldout, generalization;
};

/// Training set, held-out set (same sizes, disjoint indices) and the
/// generalization set (eval sizes).
inline Datasets generate_data(const RunConfig& c, const GraphPtr& g,
                              const std::function<void(const std::string&, const std::string&)>& on_skip = {}) {
  Datasets d;
  d.train = datagen::build_dataset(g, dataset_spec(c, c.data.sizes, c.data.per_size, 0), on_skip);
  d.heldout = datagen::build_dataset(g, dataset_spec(c, c.data.sizes, c.data.heldout_per_size, c.data.heldout_offset),
                                     on_skip);
  if (!c.eval.generalization_sizes.empty() && c.eval.generalization_per_size > 0)
    d.generalization = datagen::build_dataset(
        g, dataset_spec(c, c.eval.generalization_sizes, c.eval.generalization_per_size, c.data.heldout_offset), on_skip);
  return d;
}

inline std::string records_hash(const std::vector<datagen::DatasetRecord>& recs) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& r : recs) {
    auto j = r.to_json();
    j.erase("teacher_wall_time_s");
    const auto s = j.dump();
    h = tensor::fnv1a64(s.data(), s.size(), h);
  }
  return config::hex64(h);
}

inline std::string decodes_hash(const std::vector<decode::DecodeRecord>& recs) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& r : recs) {
    auto j = r.to_json();
    j.erase("wall_time_s");
    const auto s = j.dump();
    h = tensor::fnv1a64(s.data(), s.size(), h);
  }
  return config::hex64(h);
}

/// Runs every configured phase in order on a fresh or given model.
inline void train_all(model::Model<float>& m, const RunConfig& c, const GraphPtr& g,
                      const std::vector<datagen::DatasetRecord>& train, train::TrainLog& log,
                      const std::string& checkpoint_path = {},
                      const std::function<void(const train::LogRow&)>& on_step = {},
                      const std::string& only_phase = {}) {
  const auto by_size = datagen::group_by_size(train);
  bool ran = false;
  for (std::size_t i = 0; i < c.phases.size(); ++i) {
    if (!only_phase.empty() && c.phases[i].name != only_phase) continue;
    train::TrainOptions opt;
    opt.seed = derive_seed(seeds(c).train, {i});
    opt.checkpoint_path = checkpoint_path;
    opt.on_step = on_step;
    train::train_phase(m, c.phases[i], g, by_size, log, opt);
    ran = true;
  }
  if (!ran && !only_phase.empty()) throw validation_error("no phase named '" + only_phase + "'");
}

inline model::Model<float> fresh_model(const RunConfig& c) { return model::Model<float>(c.model, seeds(c).init); }

/// One decode record per instance; sample streams derive from the decode
/// seed and the instance id.
inline std::vector<decode::DecodeRecord> decode_all(model::Model<float>& m, const RunConfig& c, const GraphPtr& g,
                                                     const std::vector<datagen::DatasetRecord>& data,
                                                     decode::DecodePolicy policy) {
  std::vector<decode::DecodeRecord> out;
  out.reserve(data.size());
  for (const auto& r : data) {
    auto p = policy;
    p.seed = derive_seed(seeds(c).decode, {tensor::fnv1a64(r.instance_id.data(), r.instance_id.size())});
    p.workers = c.workers;
    auto rec = decode::decode_record(m, r.instance(g), r.instance_id, p);
    rec.seed = p.seed;
    out.push_back(std::move(rec));
  }
  return out;
}

/// Finite-difference check of the full dual loss in double precision with
/// dropout off, at the random parameter point `seed`, on a two-instance
/// rotated batch.
inline tensor::GradCheckResult grad_check_point(model::ModelConfig cfg, const GraphPtr& g, std::uint64_t seed,
                                                std::size_t coords_per_param) {
  cfg.dropout = 0.0;
  cfg.validate_for(*g);
  model::Model<double> m(cfg, seed);
  std::vector<ProblemInstance> insts;
  std::vector<model::Example> ex;
  Rng rng(derive_seed(seed, {1}));
  for (std::uint64_t k = 0; k < 2; ++k)
    insts.push_back(datagen::sample_instance(g, 5 + 3 * static_cast<int>(k), derive_seed(seed, {2, k}),
                                             datagen::CapacityTable::desk()));
  for (auto& inst : insts) ex.push_back({&inst, teacher::savings_construct(inst).tokens, uniform01(rng) * kTwoPi});
  auto batch = model::make_batch<double>(ex, cfg.vocab_size);
  auto loss = [&](bool with_grad) {
    tensor::Tape<double> tape(with_grad);
    auto l = model::dual_loss(tape, m, batch).total();
    if (with_grad) tape.backward(l);
    return l.value().item();
  };
  return tensor::finite_diff_check<double>(loss, m.parameters(), 1e-5, coords_per_param);
}

}  // namespace fmcvrp::pipeline
