#pragma once

// Curriculum phases: batching, rotation augmentation, schedules, clipping,
// checkpoints and the per-step loss log.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "fmcvrp/checkpoint.hpp"
#include "fmcvrp/datagen.hpp"
#include "fmcvrp/model.hpp"
#include "fmcvrp/optim.hpp"

namespace fmcvrp::train {

using model::Model;
using model::ModelConfig;

// ---------------------------------------------------------------------------
// Learning-rate schedules

/// Inverse square-root decay after a constant warm-up, clamped below.
inline double lr_t5(long step, long warmup_k, double peak, double floor) {
  if (step < 1) throw validation_error("lr_t5: step must be >= 1");
  const double k = static_cast<double>(std::max(warmup_k, 1L));
  const double s = static_cast<double>(std::max(step, std::max(warmup_k, 1L)));
  return std::max(floor, peak * std::min(1.0, std::sqrt(k / s)));
}

/// Constant rate rescaled for a batch `k` times larger than the reference.
inline double lr_scaled_constant(double base, double k) {
  if (!(k > 0.0)) throw validation_error("lr_scaled_constant: batch ratio must be positive");
  return base * std::sqrt(k);
}

// ---------------------------------------------------------------------------
// Phase specification

enum class Scope { encoder, encoder_decoder };
enum class Schedule { t5, constant };

struct CurriculumStage {
  int upper = 0;  // Cr_upper
  bool truncated = false;
};

struct PhaseSpec {
  std::string name = "I";
  std::vector<CurriculumStage> curriculum;
  std::size_t trunc_count = 1000;
  Scope scope = Scope::encoder;
  int batch_size = 32;
  Schedule schedule = Schedule::t5;
  double peak_lr = 0.01;
  double min_lr = 0.002;
  long warmup_steps = 0;
  bool rotation = false;
  long steps = 1000;
  double time_budget_h = 0.0;  // documentation only; budgets are counted in steps
  long checkpoint_every = 500;
  double weight_decay = 0.0;

  double lr(long step) const {
    return schedule == Schedule::t5 ? lr_t5(step, warmup_steps, peak_lr, min_lr) : peak_lr;
  }

  void validate() const {
    if (curriculum.empty()) throw validation_error("phase " + name + ": empty curriculum");
    if (batch_size < 1) throw validation_error("phase " + name + ": batch_size must be positive");
    if (steps < 0) throw validation_error("phase " + name + ": steps must be non-negative");
    if (!(peak_lr > 0.0) || min_lr < 0.0) throw validation_error("phase " + name + ": invalid learning rates");
    if (checkpoint_every < 1) throw validation_error("phase " + name + ": checkpoint_every must be positive");
  }

  nlohmann::json to_json() const {
    nlohmann::json cur = nlohmann::json::array();
    for (const auto& c : curriculum) cur.push_back({{"upper", c.upper}, {"truncated", c.truncated}});
    return {{"name", name},
            {"curriculum", cur},
            {"trunc_count", trunc_count},
            {"scope", scope == Scope::encoder ? "encoder" : "encoder_decoder"},
            {"batch_size", batch_size},
            {"schedule", schedule == Schedule::t5 ? "t5" : "constant"},
            {"peak_lr", peak_lr},
            {"min_lr", min_lr},
            {"warmup_steps", warmup_steps},
            {"rotation", rotation},
            {"steps", steps},
            {"time_budget_h", time_budget_h},
            {"checkpoint_every", checkpoint_every},
            {"weight_decay", weight_decay}};
  }

  static PhaseSpec from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known = {"name",         "curriculum", "trunc_count", "scope",
                                                   "batch_size",   "schedule",   "peak_lr",     "min_lr",
                                                   "warmup_steps", "rotation",   "steps",       "time_budget_h",
                                                   "checkpoint_every", "weight_decay"};
    for (auto it = j.begin(); it != j.end(); ++it)
      if (std::find(known.begin(), known.end(), it.key()) == known.end())
        throw validation_error("phase: unknown key '" + it.key() + "'");
    PhaseSpec p;
    p.name = j.value("name", p.name);
    if (j.contains("curriculum"))
      for (const auto& c : j.at("curriculum"))
        p.curriculum.push_back({c.at("upper").get<int>(), c.value("truncated", false)});
    p.trunc_count = j.value("trunc_count", p.trunc_count);
    const std::string scope = j.value("scope", std::string("encoder"));
    if (scope != "encoder" && scope != "encoder_decoder") throw validation_error("phase: bad scope '" + scope + "'");
    p.scope = scope == "encoder" ? Scope::encoder : Scope::encoder_decoder;
    p.batch_size = j.value("batch_size", p.batch_size);
    const std::string sched = j.value("schedule", std::string("t5"));
    if (sched != "t5" && sched != "constant") throw validation_error("phase: bad schedule '" + sched + "'");
    p.schedule = sched == "t5" ? Schedule::t5 : Schedule::constant;
    p.peak_lr = j.value("peak_lr", p.peak_lr);
    p.min_lr = j.value("min_lr", p.min_lr);
    p.warmup_steps = j.value("warmup_steps", p.warmup_steps);
    p.rotation = j.value("rotation", p.rotation);
    p.steps = j.value("steps", p.steps);
    p.time_budget_h = j.value("time_budget_h", p.time_budget_h);
    p.checkpoint_every = j.value("checkpoint_every", p.checkpoint_every);
    p.weight_decay = j.value("weight_decay", p.weight_decay);
    p.validate();
    return p;
  }
};

// ---------------------------------------------------------------------------
// Training log

struct LogRow {
  long step = 0;
  std::string phase;
  double lr = 0.0;
  double problem_loss = 0.0;
  double solution_loss = std::numeric_limits<double>::quiet_NaN();  // NaN in encoder-only phases
  double grad_norm = 0.0;  // after clipping
  double wall_time_s = 0.0;

  /// Equality on everything but wall time.
  bool same_trajectory(const LogRow& o) const {
    auto eq = [](double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); };
    return step == o.step && phase == o.phase && eq(lr, o.lr) && eq(problem_loss, o.problem_loss) &&
           eq(solution_loss, o.solution_loss) && eq(grad_norm, o.grad_norm);
  }
};

class TrainLog {
 public:
  static constexpr const char* kHeader = "step,phase,lr,problem_loss,solution_loss,grad_norm,wall_time_s";

  void append(LogRow r) { rows_.push_back(std::move(r)); }
  const std::vector<LogRow>& rows() const noexcept { return rows_; }
  std::size_t size() const noexcept { return rows_.size(); }

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write train log " + path);
    out << kHeader << '\n';
    out.precision(17);
    for (const auto& r : rows_)
      out << r.step << ',' << r.phase << ',' << r.lr << ',' << r.problem_loss << ','
          << (std::isnan(r.solution_loss) ? std::string() : num(r.solution_loss)) << ',' << r.grad_norm << ','
          << r.wall_time_s << '\n';
    if (!out) throw io_error("failed writing train log " + path);
  }

  static TrainLog read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open train log " + path);
    std::string line;
    std::getline(in, line);
    if (line != kHeader) throw io_error("train log header mismatch in " + path);
    TrainLog log;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> f;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) f.push_back(cell);
      if (f.size() == 6) f.emplace_back();
      if (f.size() != 7) throw io_error("malformed train log row: " + line);
      LogRow r;
      r.step = std::stol(f[0]);
      r.phase = f[1];
      r.lr = std::stod(f[2]);
      r.problem_loss = std::stod(f[3]);
      r.solution_loss = f[4].empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(f[4]);
      r.grad_norm = std::stod(f[5]);
      r.wall_time_s = std::stod(f[6]);
      log.append(r);
    }
    return log;
  }

  bool same_trajectory(const TrainLog& o) const {
    if (rows_.size() != o.rows_.size()) return false;
    for (std::size_t i = 0; i < rows_.size(); ++i)
      if (!rows_[i].same_trajectory(o.rows_[i])) return false;
    return true;
  }

 private:
  static std::string num(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  }
  std::vector<LogRow> rows_;
};

// ---------------------------------------------------------------------------
// Batching

/// Index groups over a size-ordered record list. Records of one size are
/// shuffled with `seed`, sizes stay ascending, consecutive runs of
/// `batch_size` records form a batch.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<datagen::DatasetRecord>& records,
                                                          int batch_size, std::uint64_t seed) {
  if (batch_size < 1) throw validation_error("make_batches: batch_size must be positive");
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return records[a].n_customers() < records[b].n_customers(); });
  Rng rng(seed);
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && records[order[j]].n_customers() == records[order[i]].n_customers()) ++j;
    std::shuffle(order.begin() + static_cast<long>(i), order.begin() + static_cast<long>(j), rng);
    i = j;
  }
  std::vector<std::vector<std::size_t>> out;
  const auto bs = static_cast<std::size_t>(batch_size);
  for (std::size_t i = 0; i < order.size(); i += bs)
    out.emplace_back(order.begin() + static_cast<long>(i), order.begin() + static_cast<long>(std::min(i + bs, order.size())));
  return out;
}

/// Fraction of padded (problem + solution) token slots that carry no data.
inline double padding_fraction(const std::vector<datagen::DatasetRecord>& records,
                               const std::vector<std::vector<std::size_t>>& batches) {
  std::size_t real = 0, padded = 0;
  for (const auto& b : batches) {
    std::size_t m = 0, n = 0;
    for (auto i : b) {
      m = std::max(m, records[i].node_ids.size());
      n = std::max(n, records[i].tokens.size() - 1);
      real += records[i].node_ids.size() + records[i].tokens.size() - 1;
    }
    padded += b.size() * (m + n);
  }
  return padded == 0 ? 0.0 : 1.0 - static_cast<double>(real) / static_cast<double>(padded);
}

/// Training example in the frame rotated by `rotation`; target routes are
/// re-ordered by centroid angle in that frame.
inline model::Example make_example(const ProblemInstance& inst, const datagen::DatasetRecord& rec, double rotation) {
  model::Example e{&inst, rec.tokens, rotation};
  if (rotation != 0.0) e.tokens = canonicalize_route_order(rec.solution(), inst, rotation).tokens;
  return e;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void save_checkpoint(Model<float>& m, const std::string& path, const nlohmann::json& meta = nlohmann::json::object()) {
  tensor::CheckpointData ck;
  ck.config_json = nlohmann::json{{"model", m.config().to_json()}, {"meta", meta}}.dump();
  for (auto* p : m.parameters()) ck.tensors.push_back({p->name, p->value});
  const std::string tmp = path + ".tmp";
  tensor::write_checkpoint(tmp, ck);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw io_error("cannot move checkpoint into place at " + path + ": " + ec.message());
}

inline ModelConfig checkpoint_config(const tensor::CheckpointData& ck) {
  try {
    return ModelConfig::from_json(nlohmann::json::parse(ck.config_json).at("model"));
  } catch (const nlohmann::json::exception& e) {
    throw io_error(std::string("checkpoint config unreadable: ") + e.what());
  }
}

/// Loads parameters into `m`; the stored config must equal m.config().
inline void load_checkpoint_into(Model<float>& m, const std::string& path) {
  auto ck = tensor::read_checkpoint(path);
  const auto cfg = checkpoint_config(ck);
  if (!(cfg == m.config()))
    throw validation_error("checkpoint config mismatch: file has " + cfg.to_json().dump() + ", model has " +
                           m.config().to_json().dump());
  auto params = m.parameters();
  if (params.size() != ck.tensors.size()) throw validation_error("checkpoint config mismatch: tensor count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->name != ck.tensors[i].name || !params[i]->value.same_shape(ck.tensors[i].value))
      throw validation_error("checkpoint config mismatch at tensor " + ck.tensors[i].name);
    params[i]->value = std::move(ck.tensors[i].value);
    params[i]->zero_grad();
  }
}

inline Model<float> load_checkpoint(const std::string& path) {
  auto ck = tensor::read_checkpoint(path);
  Model<float> m(checkpoint_config(ck), 0);
  auto params = m.parameters();
  if (params.size() != ck.tensors.size()) throw io_error("checkpoint tensor count does not match its config");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->name != ck.tensors[i].name || !params[i]->value.same_shape(ck.tensors[i].value))
      throw io_error("checkpoint tensor " + ck.tensors[i].name + " does not match its config");
    params[i]->value = std::move(ck.tensors[i].value);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Phase loop

struct TrainOptions {
  std::uint64_t seed = 0;
  std::string checkpoint_path;  // empty: no checkpoints
  std::function<void(const LogRow&)> on_step;
  double clip_norm = 1.0;
};

/// Runs one phase. `records` holds every component dataset the curriculum
/// may draw from. The step budget is split evenly across curriculum stages;
/// inside a stage, epochs cycle over Cr_i in ascending size order.
inline void train_phase(Model<float>& m, const PhaseSpec& spec, const GraphPtr& graph,
                        const datagen::DatasetsBySize& datasets, TrainLog& log, const TrainOptions& opt = {}) {
  spec.validate();
  m.config().validate_for(*graph);
  if (datasets.empty()) throw validation_error("train_phase: no data");
  const int min_size = datasets.begin()->first;
  const bool with_decoder = spec.scope == Scope::encoder_decoder;
  auto params = with_decoder ? m.parameters() : m.encoder_parameters();
  tensor::AdamW<float> optim(params, {0.9, 0.999, 1e-8, spec.weight_decay});
  const auto t0 = std::chrono::steady_clock::now();
  const long n_stages = static_cast<long>(spec.curriculum.size());
  long step = 0;
  bool saved = false;

  for (long s = 0; s < n_stages; ++s) {
    const auto& stage = spec.curriculum[static_cast<std::size_t>(s)];
    const long stage_steps = spec.steps * (s + 1) / n_stages - spec.steps * s / n_stages;
    if (stage_steps == 0) continue;
    const auto records = datagen::curriculum(datasets, min_size, stage.upper, stage.truncated, spec.trunc_count);
    std::vector<ProblemInstance> instances;
    instances.reserve(records.size());
    for (const auto& r : records) instances.push_back(r.instance(graph));

    std::uint64_t epoch = 0;
    std::vector<std::vector<std::size_t>> batches;
    std::size_t next = 0;
    for (long k = 0; k < stage_steps; ++k) {
      if (next == batches.size()) {
        batches = make_batches(records, spec.batch_size,
                               derive_seed(opt.seed, {0x6570ULL, static_cast<std::uint64_t>(s), epoch++}));
        next = 0;
      }
      const auto& idx = batches[next++];
      ++step;
      Rng rot_rng(derive_seed(opt.seed, {0x726fULL, static_cast<std::uint64_t>(step)}));
      std::vector<model::Example> ex;
      ex.reserve(idx.size());
      for (auto i : idx) {
        const double angle = spec.rotation ? uniform01(rot_rng) * kTwoPi : 0.0;
        ex.push_back(make_example(instances[i], records[i], angle));
      }
      auto batch = model::make_batch<float>(ex, m.config().vocab_size);

      m.zero_grad();
      tensor::Tape<float> tape(true, true, derive_seed(opt.seed, {0x6470ULL, static_cast<std::uint64_t>(step)}));
      auto losses = model::dual_loss(tape, m, batch, with_decoder);
      auto total = losses.total();
      const double pl = losses.problem.value().item();
      const double sl = with_decoder ? static_cast<double>(losses.solution->value().item())
                                     : std::numeric_limits<double>::quiet_NaN();
      if (!std::isfinite(total.value().item()))
        throw divergence_error("non-finite loss in phase " + spec.name + " at step " + std::to_string(step) +
                               (saved ? "; last good checkpoint kept at " + opt.checkpoint_path : ""));
      tape.backward(total);
      const auto clip = tensor::clip_global_norm(params, opt.clip_norm);
      if (!std::isfinite(clip.norm_before))
        throw divergence_error("non-finite gradient in phase " + spec.name + " at step " + std::to_string(step) +
                               (saved ? "; last good checkpoint kept at " + opt.checkpoint_path : ""));
      const double lr = spec.lr(step);
      optim.step(lr);

      LogRow row{step, spec.name, lr, pl, sl, clip.norm_after,
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
      log.append(row);
      if (opt.on_step) opt.on_step(row);
      if (!opt.checkpoint_path.empty() && step % spec.checkpoint_every == 0) {
        save_checkpoint(m, opt.checkpoint_path, {{"phase", spec.name}, {"step", step}});
        saved = true;
      }
    }
  }
  if (!opt.checkpoint_path.empty()) save_checkpoint(m, opt.checkpoint_path, {{"phase", spec.name}, {"step", step}});
}

}  // namespace fmcvrp::train
