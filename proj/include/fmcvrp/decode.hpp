#pragma once

// Autoregressive solution construction: greedy and nucleus sampling over
// the masked next-token distribution, best-of-s with random rotations.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "fmcvrp/model.hpp"

namespace fmcvrp::decode {

using model::Model;

enum class Strategy { greedy, nucleus };

inline std::string to_string(Strategy s) { return s == Strategy::greedy ? "greedy" : "nucleus"; }

struct DecodePolicy {
  Strategy strategy = Strategy::greedy;
  double top_p = 0.9;
  int samples = 1;
  std::uint64_t seed = 0;
  bool rotate = true;
  int max_tokens = 0;  // 0: 3 * customers + 2
  int workers = 1;

  int token_budget(int n_customers) const { return max_tokens > 0 ? max_tokens : 3 * n_customers + 2; }

  void validate() const {
    if (!(top_p > 0.0 && top_p <= 1.0)) throw validation_error("top_p must be in (0, 1]");
    if (samples < 1) throw validation_error("sample count must be >= 1");
    if (workers < 1) throw validation_error("workers must be >= 1");
    if (max_tokens < 0) throw validation_error("max_tokens must be >= 0");
  }

  nlohmann::json to_json() const {
    return {{"strategy", to_string(strategy)}, {"top_p", top_p},           {"samples", samples},
            {"seed", seed},                    {"rotate", rotate},         {"max_tokens", max_tokens}};
  }
  static DecodePolicy from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known = {"strategy", "top_p", "samples", "seed", "rotate", "max_tokens"};
    for (auto it = j.begin(); it != j.end(); ++it)
      if (std::find(known.begin(), known.end(), it.key()) == known.end())
        throw validation_error("decode: unknown key '" + it.key() + "'");
    DecodePolicy p;
    const std::string s = j.value("strategy", std::string("greedy"));
    if (s != "greedy" && s != "nucleus") throw validation_error("decode: bad strategy '" + s + "'");
    p.strategy = s == "greedy" ? Strategy::greedy : Strategy::nucleus;
    p.top_p = j.value("top_p", p.top_p);
    p.samples = j.value("samples", p.samples);
    p.seed = j.value("seed", p.seed);
    p.rotate = j.value("rotate", p.rotate);
    p.max_tokens = j.value("max_tokens", p.max_tokens);
    p.validate();
    return p;
  }
};

/// Samples from the smallest highest-probability prefix reaching mass p
/// (descending probability, ties by ascending id), renormalised.
inline int nucleus_sample_step(std::span<const double> probs, double p, Rng& rng) {
  if (!(p > 0.0 && p <= 1.0)) throw validation_error("top_p must be in (0, 1]");
  std::vector<int> order;
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i)
    if (probs[i] > 0.0) {
      order.push_back(static_cast<int>(i));
      total += probs[i];
    }
  if (order.empty() || !(total > 0.0)) throw std::invalid_argument("nucleus: probability row is all zero");
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const double pa = probs[static_cast<std::size_t>(a)], pb = probs[static_cast<std::size_t>(b)];
    return pa != pb ? pa > pb : a < b;
  });
  double cum = 0.0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    cum += probs[static_cast<std::size_t>(order[keep++])];
    if (cum >= p * total * (1.0 - 1e-12)) break;
  }
  const double u = uniform01(rng) * cum;
  double acc = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    acc += probs[static_cast<std::size_t>(order[i])];
    if (u < acc) return order[i];
  }
  return order[keep - 1];
}

namespace detail {

inline FeatureRow token_features(const ProblemInstance& inst, const PrefixState& st, int id, double rotation) {
  FeatureRow f = fmcvrp::detail::node_features(inst, *inst.local_index(id), rotation);
  f[feature::load] = static_cast<double>(st.load()) / inst.capacity;
  f[feature::served] = static_cast<double>(st.served()) / st.total_demand();
  return f;
}

}  // namespace detail

/// One trajectory in the frame rotated by `rotation`. `rng` is required for
/// nucleus sampling.
template <class T>
Solution decode_trajectory(Model<T>& m, const ProblemInstance& inst, double rotation, Strategy strategy,
                           double top_p, Rng* rng, int max_tokens) {
  check_instance(inst);
  const int V = m.config().vocab_size;
  if (static_cast<std::size_t>(V) != inst.graph->size() + 1)
    throw validation_error("model vocabulary does not match the instance graph");
  model::DecodeSession<T> session(m, problem_features(inst, rotation));
  PrefixState st(inst);
  std::vector<int> tokens{kDepotId};
  st.push(kDepotId);
  std::vector<double> probs(static_cast<std::size_t>(V));
  while (!st.complete()) {
    if (static_cast<int>(tokens.size()) >= max_tokens)
      throw Error(ErrorKind::validation, "decode: token budget of " + std::to_string(max_tokens) + " exceeded");
    const auto logits = session.step(detail::token_features(inst, st, tokens.back(), rotation));
    const auto allowed = model::feasible_next(st, V);
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < V; ++i)
      if (allowed[static_cast<std::size_t>(i)]) mx = std::max(mx, static_cast<double>(logits[i]));
    double z = 0.0;
    for (int i = 0; i < V; ++i) {
      const auto u = static_cast<std::size_t>(i);
      probs[u] = allowed[u] ? std::exp(static_cast<double>(logits[i]) - mx) : 0.0;
      z += probs[u];
    }
    for (auto& p : probs) p /= z;
    int next = -1;
    if (strategy == Strategy::greedy) {
      double best = -1.0;
      for (int i = 0; i < V; ++i)
        if (allowed[static_cast<std::size_t>(i)] && probs[static_cast<std::size_t>(i)] > best) {
          best = probs[static_cast<std::size_t>(i)];
          next = i;
        }
    } else {
      if (!rng) throw std::invalid_argument("nucleus decoding needs an rng");
      next = nucleus_sample_step(probs, top_p, *rng);
    }
    st.push(next);
    tokens.push_back(next);
  }
  return Solution{std::move(tokens)};
}

template <class T>
Solution greedy_decode(Model<T>& m, const ProblemInstance& inst, int max_tokens = 0) {
  return decode_trajectory(m, inst, 0.0, Strategy::greedy, 1.0, nullptr,
                           max_tokens > 0 ? max_tokens : 3 * inst.n_customers() + 2);
}

struct BestOf {
  Solution best;
  double best_cost = std::numeric_limits<double>::infinity();
  std::size_t best_index = 0;
  std::vector<double> costs;      // per sample, unrotated frame
  std::vector<double> rotations;  // per sample
};

/// Sample k uses its own stream derive_seed(seed, k); sample 0 is decoded in
/// the original frame, later samples at i.i.d. uniform angles when rotation
/// is enabled. Identical results for any worker count.
template <class T>
BestOf best_of(Model<T>& m, const ProblemInstance& inst, const DecodePolicy& policy) {
  policy.validate();
  const auto s = static_cast<std::size_t>(policy.samples);
  std::vector<std::optional<Solution>> sols(s);
  std::vector<double> rots(s, 0.0);
  std::vector<std::exception_ptr> errors(s);
  const int budget = policy.token_budget(inst.n_customers());
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t k = begin; k < s; k += stride) {
      try {
        Rng rng(derive_seed(policy.seed, {static_cast<std::uint64_t>(k)}));
        const double angle = policy.rotate && k > 0 ? uniform01(rng) * kTwoPi : 0.0;
        rots[k] = angle;
        sols[k] = decode_trajectory(m, inst, angle, policy.strategy, policy.top_p, &rng, budget);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(policy.workers), s);
  if (workers <= 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  BestOf out;
  out.rotations = rots;
  for (std::size_t k = 0; k < s; ++k) {
    const double c = solution_cost(inst, *sols[k]);
    out.costs.push_back(c);
    if (c < out.best_cost) {
      out.best_cost = c;
      out.best = *sols[k];
      out.best_index = k;
    }
  }
  return out;
}

struct DecodeRecord {
  std::string instance_id;
  std::string strategy;
  double p = 0.0;
  int s = 1;
  std::uint64_t seed = 0;
  std::vector<int> tokens;
  double cost = 0.0;
  double wall_time_s = 0.0;

  nlohmann::json to_json() const {
    return {{"instance_id", instance_id}, {"strategy", strategy}, {"p", p},       {"s", s},
            {"seed", seed},               {"tokens", tokens},     {"cost", cost}, {"wall_time_s", wall_time_s}};
  }
  static DecodeRecord from_json(const nlohmann::json& j) {
    DecodeRecord r;
    r.instance_id = j.at("instance_id").get<std::string>();
    r.strategy = j.at("strategy").get<std::string>();
    r.p = j.at("p").get<double>();
    r.s = j.at("s").get<int>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.tokens = j.at("tokens").get<std::vector<int>>();
    r.cost = j.at("cost").get<double>();
    r.wall_time_s = j.value("wall_time_s", 0.0);
    return r;
  }
};

template <class T>
DecodeRecord decode_record(Model<T>& m, const ProblemInstance& inst, const std::string& id, const DecodePolicy& policy) {
  const auto t0 = std::chrono::steady_clock::now();
  auto r = best_of(m, inst, policy);
  DecodeRecord rec;
  rec.instance_id = id;
  rec.strategy = to_string(policy.strategy);
  rec.p = policy.strategy == Strategy::nucleus ? policy.top_p : 0.0;
  rec.s = policy.samples;
  rec.seed = policy.seed;
  rec.tokens = r.best.tokens;
  rec.cost = r.best_cost;
  rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

inline void write_jsonl(const std::string& path, const std::vector<DecodeRecord>& recs) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot write " + path);
  for (const auto& r : recs) out << r.to_json().dump() << '\n';
}

inline std::vector<DecodeRecord> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open " + path);
  std::vector<DecodeRecord> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(DecodeRecord::from_json(nlohmann::json::parse(line)));
  return out;
}

}  // namespace fmcvrp::decode
