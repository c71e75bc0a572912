#include <gtest/gtest.h>

#include <cmath>

#include "fmcvrp/model.hpp"
#include "fmcvrp/optim.hpp"
#include "fmcvrp/teacher.hpp"
#include "helpers.hpp"

using namespace fmcvrp;
using namespace fmcvrp::model;
using tensor::Tape;
using tensor::Tensor;

namespace {

Tensor<double> random_tensor(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  Tensor<double> t(r, c);
  for (auto& v : t.values()) v = nd(rng);
  return t;
}

ModelConfig small_config(std::size_t graph_size, int d = 16) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_model = d;
  c.d_ff = 2 * d;
  c.vocab_size = static_cast<int>(graph_size) + 1;
  c.dropout = 0.0;
  return c;
}

Tensor<double> features_tensor(const std::vector<FeatureRow>& rows) {
  Tensor<double> t(rows.size(), kFeatureCount);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t f = 0; f < kFeatureCount; ++f) t(i, f) = rows[i][f];
  return t;
}

struct Fixture {
  GraphPtr graph = testing_util::desk_graph(60, 5);
  ProblemInstance inst = datagen::sample_instance(graph, 12, 3, datagen::CapacityTable::desk());
  Solution sol = teacher::savings_construct(inst);
};

}  // namespace

TEST(Attention, SaturatesOnMatchingKey) {
  Tape<double> tape(false);
  Tensor<double> k(3, 4);
  k(0, 0) = 1;
  k(1, 1) = 1;
  k(2, 2) = 1;
  Tensor<double> q(1, 4);
  q(0, 1) = 100.0;
  auto v = random_tensor(3, 5, 1);
  auto out = attention(tape.constant(q), tape.constant(k), tape.constant(v)).value();
  for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(out(0, j), v(1, j), 1e-12);
}

TEST(Attention, ZeroQueriesAverageValues) {
  Tape<double> tape(false);
  auto v = random_tensor(4, 3, 2);
  auto out = attention(tape.constant(Tensor<double>(2, 6)), tape.constant(Tensor<double>(4, 6)), tape.constant(v)).value();
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out(1, j), v.mat().col(static_cast<Eigen::Index>(j)).mean(), 1e-12);
}

TEST(Attention, CausalMaskIndependence) {
  const std::size_t n = 5, d = 4;
  Tensor<double> mask(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) mask(i, j) = neg_inf<double>();
  auto x = random_tensor(n, d, 3);
  auto run = [&](const Tensor<double>& in) {
    Tape<double> tape(false);
    auto c = tape.constant(in);
    return attention(c, c, c, mask).value();
  };
  auto base = run(x);
  auto y = x;
  y(3, 0) += 5.0;
  auto pert = run(y);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(base(i, j), pert(i, j));
  EXPECT_NE(base(3, 0), pert(3, 0));
  Tape<double> tape(false);
  EXPECT_THROW(attention(tape.constant(Tensor<double>(2, 3)), tape.constant(Tensor<double>(2, 4)),
                         tape.constant(Tensor<double>(2, 4))),
               std::invalid_argument);
}

TEST(Attention, FusedMatchesComposedPerHead) {
  const std::size_t n = 6, d = 8, heads = 2;
  auto q = random_tensor(n, d, 4), k = random_tensor(n, d, 5), v = random_tensor(n, d, 6);
  Tape<double> tape(false);
  tensor::AttentionLayout lay{1, n, n, heads, true, {}};
  auto fused = tensor::multi_head_attention(tape.constant(q), tape.constant(k), tape.constant(v), lay).value();
  Tensor<double> mask(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) mask(i, j) = neg_inf<double>();
  for (std::size_t h = 0; h < heads; ++h) {
    auto sl = [&](const Tensor<double>& t) { return tensor::slice(tape.constant(t), 1, h * 4, h * 4 + 4); };
    auto ref = attention(sl(q), sl(k), sl(v), mask).value();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(fused(i, h * 4 + j), ref(i, j), 1e-12);
  }
}

TEST(Encoder, ShapeDeterminismAndPermutationEquivariance) {
  Fixture f;
  Model<double> m(small_config(f.graph->size()), 11);
  auto pf = problem_features(f.inst, 0.4);
  const std::size_t n = pf.size();
  auto run = [&](const std::vector<FeatureRow>& rows) {
    Tape<double> tape(false);
    auto e = m.encode(tape, features_tensor(rows), 1, rows.size(), {rows.size()});
    auto fl = m.logits(tape, e);
    return std::make_pair(e.value(), fl.value());
  };
  auto [e, fl] = run(pf);
  EXPECT_EQ(e.rows(), n);
  EXPECT_EQ(e.cols(), 16u);
  EXPECT_EQ(run(pf).first.storage(), e.storage());

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(1);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<FeatureRow> shuffled;
  for (auto p : perm) shuffled.push_back(pf[p]);
  auto [e2, fl2] = run(shuffled);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < e.cols(); ++j) EXPECT_NEAR(e2(i, j), e(perm[i], j), 1e-12);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < fl.cols(); ++j) EXPECT_NEAR(fl2(i, j), fl(perm[i], j), 1e-12);
}

TEST(Decoder, CausalityAndCrossAttention) {
  Fixture f;
  Model<double> m(small_config(f.graph->size()), 12);
  auto pf = features_tensor(problem_features(f.inst, 0.0));
  auto sf = features_tensor(solution_features(f.inst, f.sol.tokens, 0.0));
  const std::size_t mm = pf.rows(), n = sf.rows();
  auto run = [&](const Tensor<double>& p, const Tensor<double>& s) {
    Tape<double> tape(false);
    auto e = m.encode(tape, p, 1, mm, {mm});
    return m.decode(tape, e, s, 1, n, {n}, mm, {mm}).value();
  };
  auto g = run(pf, sf);
  EXPECT_EQ(g.rows(), n);
  EXPECT_EQ(g.cols(), 16u);
  for (std::size_t j : {1ul, n / 2, n - 1}) {
    auto s2 = sf;
    s2(j, 0) += 0.3;
    s2(j, 7) += 0.2;
    auto g2 = run(pf, s2);
    for (std::size_t i = 0; i < n; ++i) {
      const bool same = g.mat().row(static_cast<Eigen::Index>(i)) == g2.mat().row(static_cast<Eigen::Index>(i));
      if (i < j) {
        EXPECT_TRUE(same) << i << " " << j;
      }
      if (i == j) {
        EXPECT_FALSE(same);
      }
    }
  }
  auto p2 = pf;
  p2(mm - 1, 0) += 0.3;
  auto g3 = run(p2, sf);
  for (std::size_t i = 0; i < n; ++i)
    EXPECT_NE(g.mat().row(static_cast<Eigen::Index>(i)), g3.mat().row(static_cast<Eigen::Index>(i)));
}

TEST(OutputHeads, Probabilities) {
  auto E = random_tensor(4, 8, 20).mat();
  auto G = random_tensor(3, 8, 21).mat();
  auto W = random_tensor(8, 6, 22).mat();
  Matrix<double> M = Matrix<double>::Zero(3, 6);
  M(0, 2) = M(0, 4) = neg_inf<double>();
  for (int j = 0; j < 6; ++j)
    if (j != 3) M(1, j) = neg_inf<double>();
  auto h = output_heads<double>(E, G, W, M);
  for (Eigen::Index r = 0; r < 4; ++r) EXPECT_NEAR(h.F.row(r).sum(), 1.0, 1e-6);
  for (Eigen::Index r = 0; r < 3; ++r) EXPECT_NEAR(h.H.row(r).sum(), 1.0, 1e-6);
  EXPECT_EQ(h.H(0, 2), 0.0);
  EXPECT_EQ(h.H(0, 4), 0.0);
  EXPECT_EQ(h.H(1, 3), 1.0);
  M.row(2).setConstant(neg_inf<double>());
  EXPECT_THROW(output_heads<double>(E, G, W, M), std::invalid_argument);
}

TEST(FeasibilityMask, Rules) {
  using testing_util::full_instance;
  using testing_util::graph_of;
  auto g = graph_of({{0.1, 0.1}, {0.2, 0.2}, {0.3, 0.3}, {0.4, 0.9}});
  // instance uses nodes 0, 1, 2, 4; node 3 is outside the instance
  ProblemInstance inst{g, {0, 1, 2, 4}, {0, 4, 5, 7}, 8};
  const int V = static_cast<int>(g->size()) + 1;
  const int pad = V - 1;
  auto allowed = [&](std::vector<int> prefix) {
    auto row = feasibility_mask(inst, prefix, V);
    std::vector<int> ids;
    for (int i = 0; i < V; ++i)
      if (row[static_cast<std::size_t>(i)] == 0.0) ids.push_back(i);
    EXPECT_EQ(row[static_cast<std::size_t>(pad)], neg_inf<double>());
    return ids;
  };
  EXPECT_EQ(allowed({0}), (std::vector<int>{1, 2, 4}));
  EXPECT_EQ(allowed({0, 1}), (std::vector<int>{0}));  // remaining 4 < {5, 7}
  EXPECT_EQ(allowed({0, 2}), (std::vector<int>{0}));
  EXPECT_EQ(allowed({0, 1, 0}), (std::vector<int>{2, 4}));
  EXPECT_EQ(allowed({0, 1, 0, 2, 0, 4}), (std::vector<int>{0}));
  inst.capacity = 20;
  EXPECT_EQ(allowed({0, 1}), (std::vector<int>{0, 2, 4}));
}

TEST(DualLoss, UniformBaselines) {
  Fixture f;
  auto cfg = small_config(f.graph->size());
  Model<double> m(cfg, 13);
  for (auto* p : m.parameters())
    if (p->name == "output.w") p->value.fill(0.0);
  std::vector<Example> ex{{&f.inst, f.sol.tokens, 0.0}};
  auto batch = make_batch<double>(ex, cfg.vocab_size);
  Tape<double> tape(false);
  auto loss = dual_loss(tape, m, batch);
  EXPECT_NEAR(loss.problem.value().item(), std::log(static_cast<double>(cfg.vocab_size)), 1e-12);
  double expect = 0.0;
  PrefixState st(f.inst);
  for (std::size_t i = 0; i + 1 < f.sol.tokens.size(); ++i) {
    st.push(f.sol.tokens[i]);
    auto a = feasible_next(st, cfg.vocab_size);
    expect += std::log(static_cast<double>(std::count(a.begin(), a.end(), 1)));
  }
  expect /= static_cast<double>(f.sol.tokens.size() - 1);
  EXPECT_NEAR(loss.solution->value().item(), expect, 1e-12);
  EXPECT_NEAR(std::exp(-0.09), 0.91, 0.005);
}

TEST(DualLoss, PaddingIsExact) {
  auto g = testing_util::desk_graph(60, 5);
  auto cfg = small_config(g->size());
  Model<double> m(cfg, 14);
  auto a = datagen::sample_instance(g, 6, 1, datagen::CapacityTable::desk());
  auto b = datagen::sample_instance(g, 14, 2, datagen::CapacityTable::desk());
  auto sa = teacher::savings_construct(a), sb = teacher::savings_construct(b);
  std::vector<Example> ea{{&a, sa.tokens, 0.3}}, eb{{&b, sb.tokens, 1.1}}, both{ea[0], eb[0]};
  auto loss_of = [&](const std::vector<Example>& ex) {
    auto batch = make_batch<double>(ex, cfg.vocab_size);
    Tape<double> tape(false);
    auto l = dual_loss(tape, m, batch);
    return std::make_pair(l.problem.value().item(), l.solution->value().item());
  };
  auto [pa, sa_] = loss_of(ea);
  auto [pb, sb_] = loss_of(eb);
  auto [pab, sab] = loss_of(both);
  const double ma = static_cast<double>(a.size()), mb = static_cast<double>(b.size());
  const double na = static_cast<double>(sa.tokens.size() - 1), nb = static_cast<double>(sb.tokens.size() - 1);
  EXPECT_NEAR(pab, (pa * ma + pb * mb) / (ma + mb), 1e-12);
  EXPECT_NEAR(sab, (sa_ * na + sb_ * nb) / (na + nb), 1e-12);
}

TEST(DualLoss, FiniteForEveryRotation) {
  Fixture f;
  auto cfg = small_config(f.graph->size());
  Model<double> m(cfg, 15);
  for (int k = 0; k < 16; ++k) {
    const double rot = kTwoPi * k / 16.0;
    std::vector<Example> ex{{&f.inst, canonicalize_route_order(f.sol, f.inst, rot).tokens, rot}};
    auto batch = make_batch<double>(ex, cfg.vocab_size);
    Tape<double> tape(false);
    auto l = dual_loss(tape, m, batch);
    EXPECT_TRUE(std::isfinite(l.total().value().item()));
  }
}

TEST(DecodeSession, MatchesTapeDecoder) {
  Fixture f;
  auto cfg = small_config(f.graph->size());
  Model<double> m(cfg, 16);
  const double rot = 0.9;
  auto pf = problem_features(f.inst, rot);
  auto sf = solution_features(f.inst, f.sol.tokens, rot);
  Tape<double> tape(false);
  auto e = m.encode(tape, features_tensor(pf), 1, pf.size(), {pf.size()});
  auto gl = m.logits(tape, m.decode(tape, e, features_tensor(sf), 1, sf.size(), {sf.size()}, pf.size(), {pf.size()}))
                .value();
  DecodeSession<double> session(m, pf);
  for (std::size_t i = 0; i < sf.size(); ++i) {
    auto row = session.step(sf[i]);
    for (std::size_t j = 0; j < gl.cols(); ++j) ASSERT_NEAR(row[static_cast<Eigen::Index>(j)], gl(i, j), 1e-10);
  }
}

TEST(Model, ParameterNamesAndScopes) {
  Model<double> m(small_config(60), 1);
  auto all = m.parameters();
  auto enc = m.encoder_parameters();
  EXPECT_LT(enc.size(), all.size());
  std::set<std::string> names;
  for (auto* p : all) names.insert(p->name);
  EXPECT_EQ(names.size(), all.size());
  EXPECT_TRUE(names.count("output.w"));
  EXPECT_TRUE(names.count("input.w"));
  ModelConfig bad = small_config(60);
  bad.n_heads = 5;
  EXPECT_THROW(bad.validate(), Error);
  auto cast = m.cast<float>().cast<double>();
  auto p1 = m.parameters(), p2 = cast.parameters();
  for (std::size_t i = 0; i < p1.size(); ++i) EXPECT_NEAR(p1[i]->value[0], p2[i]->value[0], 1e-6);
}

TEST(GradCheck, FullModelDoublePrecision) {
  Fixture f;
  auto cfg = small_config(f.graph->size());
  Model<double> m(cfg, 17);
  auto b2 = datagen::sample_instance(f.graph, 7, 9, datagen::CapacityTable::desk());
  auto s2 = teacher::savings_construct(b2);
  std::vector<Example> ex{{&f.inst, f.sol.tokens, 0.7}, {&b2, s2.tokens, 2.0}};
  auto batch = make_batch<double>(ex, cfg.vocab_size);
  auto params = m.parameters();
  auto loss = [&](bool with_grad) {
    Tape<double> tape(with_grad);
    auto l = dual_loss(tape, m, batch).total();
    if (with_grad) tape.backward(l);
    return l.value().item();
  };
  auto r = tensor::finite_diff_check<double>(loss, params, 1e-5, 6);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
  EXPECT_GT(r.checked, 100u);
}
