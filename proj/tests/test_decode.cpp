#include <gtest/gtest.h>

#include <filesystem>
#include <map>

#include "fmcvrp/decode.hpp"
#include "helpers.hpp"

using namespace fmcvrp;
using namespace fmcvrp::decode;
using model::Model;
using model::ModelConfig;

namespace {

ModelConfig config_for(const FixedGraph& g, int d = 16) {
  ModelConfig c;
  c.d_model = d;
  c.d_ff = 2 * d;
  c.vocab_size = static_cast<int>(g.size()) + 1;
  c.dropout = 0.0;
  return c;
}

// Large random weights make the logits sharp and arbitrary.
template <class T>
void scramble(Model<T>& m, std::uint64_t seed, double scale) {
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  for (auto* p : m.parameters())
    for (auto& v : p->value.values()) v = static_cast<T>(nd(rng));
}

ProblemInstance random_instance(const GraphPtr& g, int n, std::uint64_t seed) {
  return datagen::sample_instance(g, n, seed, datagen::CapacityTable::desk());
}

}  // namespace

TEST(Nucleus, CumulativeRuleExample) {
  const std::vector<double> probs{0.5, 0.3, 0.15, 0.05};
  Rng rng(1);
  std::map<int, int> counts;
  const int n = 200000;
  for (int i = 0; i < n; ++i) ++counts[nucleus_sample_step(probs, 0.8, rng)];
  EXPECT_EQ(counts.size(), 2u);
  EXPECT_NEAR(counts[0] / double(n), 0.625, 0.005);
  EXPECT_NEAR(counts[1] / double(n), 0.375, 0.005);
}

TEST(Nucleus, FullSupportAtOne) {
  const std::vector<double> probs{0.5, 0.3, 0.15, 0.05};
  Rng rng(2);
  std::map<int, int> counts;
  const int n = 200000;
  for (int i = 0; i < n; ++i) ++counts[nucleus_sample_step(probs, 1.0, rng)];
  ASSERT_EQ(counts.size(), 4u);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(counts[i] / double(n), probs[static_cast<std::size_t>(i)], 0.005);
}

TEST(Nucleus, TopProbabilityAboveThresholdAlwaysWins) {
  const std::vector<double> probs{0.05, 0.0, 0.9, 0.05};
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(nucleus_sample_step(probs, 0.9, rng), 2);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(nucleus_sample_step(probs, 0.5, rng), 2);
}

TEST(Nucleus, TiesByAscendingIdAndMaskedNeverSampled) {
  const std::vector<double> probs{0.0, 0.25, 0.25, 0.25, 0.25};
  Rng rng(4);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(nucleus_sample_step(probs, 0.2, rng), 1);
  for (int i = 0; i < 1000; ++i) {
    const int k = nucleus_sample_step(probs, 0.5, rng);
    EXPECT_TRUE(k == 1 || k == 2);
  }
}

TEST(Nucleus, AllZeroRowThrows) {
  const std::vector<double> probs(5, 0.0);
  Rng rng(5);
  EXPECT_ANY_THROW(nucleus_sample_step(probs, 0.9, rng));
}

TEST(Greedy, SingleCustomerForcedRoute) {
  auto g = testing_util::desk_graph(30, 3);
  Model<double> m(config_for(*g), 1);
  for (int c = 1; c < 30; c += 7) {
    ProblemInstance inst{g, {0, c}, {0, 4}, 10};
    for (std::uint64_t s = 0; s < 3; ++s) {
      scramble(m, s, 3.0);
      EXPECT_EQ(greedy_decode(m, inst).tokens, (std::vector<int>{0, c, 0}));
    }
  }
}

TEST(Greedy, FeasibleUnderAdversarialParameters) {
  auto g = testing_util::desk_graph();
  Model<float> m(config_for(*g), 2);
  int decoded = 0;
  for (std::uint64_t k = 0; k < 1000; ++k) {
    if (k % 50 == 0) scramble(m, 100 + k, k % 100 == 0 ? 0.2 : 4.0);
    const int n = 5 + static_cast<int>(k % 26);
    auto inst = random_instance(g, n, 1000 + k);
    auto sol = greedy_decode(m, inst);
    auto v = validate_solution(inst, sol);
    EXPECT_TRUE(v.ok()) << v.summary();
    EXPECT_LE(sol.tokens.size(), static_cast<std::size_t>(3 * n + 2));
    ++decoded;
  }
  EXPECT_EQ(decoded, 1000);
}

TEST(Greedy, Deterministic) {
  auto g = testing_util::desk_graph();
  Model<float> m(config_for(*g), 3);
  auto inst = random_instance(g, 15, 7);
  auto a = greedy_decode(m, inst);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(greedy_decode(m, inst).tokens, a.tokens);
}

TEST(Greedy, TokenBudgetErrorIsReported) {
  auto g = testing_util::desk_graph();
  Model<float> m(config_for(*g), 3);
  auto inst = random_instance(g, 10, 8);
  EXPECT_THROW(greedy_decode(m, inst, 5), Error);
}

TEST(BestOf, SingleGreedyMatchesGreedyDecode) {
  auto g = testing_util::desk_graph();
  Model<float> m(config_for(*g), 4);
  auto inst = random_instance(g, 12, 9);
  DecodePolicy p;
  p.strategy = Strategy::greedy;
  p.samples = 1;
  auto r = best_of(m, inst, p);
  EXPECT_EQ(r.best.tokens, greedy_decode(m, inst).tokens);
  EXPECT_DOUBLE_EQ(r.best_cost, solution_cost(inst, r.best));
}

TEST(BestOf, NestedSamplesNonIncreasingAndWorkerInvariant) {
  auto g = testing_util::desk_graph();
  Model<float> m(config_for(*g), 5);
  scramble(m, 6, 0.5);
  auto inst = random_instance(g, 14, 10);
  DecodePolicy p;
  p.strategy = Strategy::nucleus;
  p.seed = 77;
  p.samples = 16;
  auto full = best_of(m, inst, p);
  ASSERT_EQ(full.costs.size(), 16u);
  double prev = std::numeric_limits<double>::infinity();
  for (int s = 1; s <= 16; ++s) {
    p.samples = s;
    auto r = best_of(m, inst, p);
    for (int k = 0; k < s; ++k) EXPECT_EQ(r.costs[static_cast<std::size_t>(k)], full.costs[static_cast<std::size_t>(k)]);
    EXPECT_LE(r.best_cost, prev);
    prev = r.best_cost;
    EXPECT_DOUBLE_EQ(r.best_cost, *std::min_element(r.costs.begin(), r.costs.end()));
  }
  p.samples = 16;
  p.workers = 4;
  auto par = best_of(m, inst, p);
  EXPECT_EQ(par.costs, full.costs);
  EXPECT_EQ(par.best.tokens, full.best.tokens);
  EXPECT_EQ(par.rotations, full.rotations);
}

TEST(BestOf, RotatedSamplesFeasibleAndCostInOriginalFrame) {
  auto g = testing_util::desk_graph();
  Model<float> m(config_for(*g), 6);
  for (std::uint64_t k = 0; k < 20; ++k) {
    auto inst = random_instance(g, 8 + static_cast<int>(k), 200 + k);
    DecodePolicy p;
    p.strategy = Strategy::nucleus;
    p.samples = 4;
    p.seed = k;
    auto r = best_of(m, inst, p);
    EXPECT_EQ(r.rotations[0], 0.0);
    EXPECT_TRUE(validate_solution(inst, r.best).ok());
    EXPECT_NEAR(r.best_cost, solution_cost(inst, r.best), 1e-12);
  }
}

TEST(BestOf, SeedFixesOutput) {
  auto g = testing_util::desk_graph();
  Model<float> m(config_for(*g), 7);
  auto inst = random_instance(g, 11, 12);
  DecodePolicy p;
  p.strategy = Strategy::nucleus;
  p.samples = 5;
  p.seed = 3;
  auto a = best_of(m, inst, p), b = best_of(m, inst, p);
  EXPECT_EQ(a.costs, b.costs);
  p.seed = 4;
  EXPECT_NE(best_of(m, inst, p).costs, a.costs);
}

TEST(DecodeRecord, JsonlRoundTrip) {
  auto g = testing_util::desk_graph();
  Model<float> m(config_for(*g), 8);
  auto inst = random_instance(g, 9, 13);
  DecodePolicy p;
  p.strategy = Strategy::nucleus;
  p.samples = 3;
  auto rec = decode_record(m, inst, "n9_i0", p);
  const auto path = (std::filesystem::temp_directory_path() / "fmcvrp_decode.jsonl").string();
  write_jsonl(path, {rec, rec});
  auto back = read_jsonl(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].tokens, rec.tokens);
  EXPECT_EQ(back[0].cost, rec.cost);
  EXPECT_EQ(back[0].strategy, "nucleus");
  EXPECT_EQ(back[1].s, 3);
}

TEST(DecodePolicy, JsonRejectsUnknownKeys) {
  DecodePolicy p;
  p.strategy = Strategy::nucleus;
  p.top_p = 0.7;
  auto q = DecodePolicy::from_json(p.to_json());
  EXPECT_EQ(q.to_json(), p.to_json());
  auto j = p.to_json();
  j["beam"] = 4;
  EXPECT_THROW(DecodePolicy::from_json(j), Error);
  j = p.to_json();
  j["top_p"] = 0.0;
  EXPECT_THROW(DecodePolicy::from_json(j), Error);
}
