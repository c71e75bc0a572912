#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fmcvrp/checkpoint.hpp"
#include "fmcvrp/optim.hpp"
#include "fmcvrp/tensor.hpp"

using namespace fmcvrp;
using namespace fmcvrp::tensor;

namespace {

Tensor<double> random_tensor(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  Tensor<double> t(r, c);
  for (auto& v : t.values()) v = nd(rng);
  return t;
}

// Scalar reduction <out, W> with a fixed random W so every output entry matters.
Var<double> weighted_sum(Var<double> out, std::uint64_t seed) {
  auto w = random_tensor(out.rows(), out.cols(), seed);
  return sum(mul(out, out.tape->constant(w)));
}

using Builder = std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>;

double check(std::vector<Parameter<double>>& ps, const Builder& build, double eps = 1e-5) {
  std::vector<Parameter<double>*> ptrs;
  for (auto& p : ps) ptrs.push_back(&p);
  auto loss = [&](bool with_grad) {
    Tape<double> tape(with_grad);
    std::vector<Var<double>> vars;
    for (auto& p : ps) vars.push_back(tape.param(p));
    auto l = build(tape, vars);
    if (with_grad) tape.backward(l);
    return l.value().item();
  };
  return finite_diff_check<double>(loss, ptrs, eps, 0, 1e-3).max_rel_error;
}

}  // namespace

TEST(Tensor, ShapeInvariant) {
  Tensor<double> t(Shape{2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rows(), 6u);
  EXPECT_EQ(t.cols(), 4u);
  EXPECT_THROW(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 2, 3}), std::invalid_argument);
  Parameter<double> p("p", t);
  EXPECT_TRUE(p.grad.same_shape(p.value));
}

TEST(Primitives, MatmulIdentity) {
  Tape<double> tape;
  auto a = random_tensor(4, 3, 1);
  Tensor<double> eye(4, 4);
  eye.mat().setIdentity();
  auto r = matmul(tape.constant(eye), tape.constant(a));
  EXPECT_EQ(r.value().storage(), a.storage());
}

TEST(Primitives, ShapeErrorsNameBothShapes) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>(2, 3));
  auto b = tape.constant(Tensor<double>(2, 3));
  try {
    matmul(a, b);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("[2, 3]"), std::string::npos);
  }
  EXPECT_THROW(add(a, tape.constant(Tensor<double>(3, 2))), std::invalid_argument);
  EXPECT_THROW(mul(a, tape.constant(Tensor<double>(3, 2))), std::invalid_argument);
  EXPECT_THROW(slice(a, 1, 2, 4), std::invalid_argument);
}

TEST(Primitives, SoftmaxRowsAndShiftInvariance) {
  Tape<double> tape(false);
  auto x = random_tensor(5, 7, 2, 3.0);
  auto y = row_softmax(tape.constant(x)).value();
  for (std::size_t r = 0; r < 5; ++r) EXPECT_NEAR(y.mat().row(static_cast<Eigen::Index>(r)).sum(), 1.0, 1e-12);
  auto shifted = x;
  shifted.mat().row(2).array() += 1000.0;
  auto y2 = row_softmax(tape.constant(shifted)).value();
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], y2[i], 1e-12);
}

TEST(Primitives, LayerNormDefinition) {
  Tape<double> tape(false);
  auto x = random_tensor(6, 16, 3, 4.0);
  auto g = tape.constant(Tensor<double>(1, 16, 1.0));
  auto b = tape.constant(Tensor<double>(1, 16, 0.0));
  auto y = layer_norm(tape.constant(x), g, b, 0.0).value();
  for (Eigen::Index r = 0; r < 6; ++r) {
    const auto row = y.mat().row(r);
    EXPECT_NEAR(row.mean(), 0.0, 1e-9);
    EXPECT_NEAR((row.array() - row.mean()).square().mean(), 1.0, 1e-9);
  }
}

TEST(Backward, Square) {
  Parameter<double> x("x", Tensor<double>::scalar(3.0));
  Tape<double> tape;
  auto v = tape.param(x);
  tape.backward(mul(v, v));
  EXPECT_DOUBLE_EQ(x.grad[0], 6.0);
}

TEST(Backward, ConcatSumIsOnes) {
  Parameter<double> a("a", random_tensor(2, 3, 4)), b("b", random_tensor(4, 3, 5));
  Tape<double> tape;
  tape.backward(sum(concat<double>({tape.param(a), tape.param(b)}, 0)));
  for (double g : a.grad.values()) EXPECT_EQ(g, 1.0);
  for (double g : b.grad.values()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, NonScalarRootAndDoubleSweep) {
  Parameter<double> a("a", random_tensor(2, 3, 4));
  Tape<double> tape;
  auto v = tape.param(a);
  EXPECT_THROW(tape.backward(v), std::invalid_argument);
  auto s = sum(v);
  tape.backward(s);
  EXPECT_THROW(tape.backward(s), std::logic_error);
}

TEST(GradCheck, Quadratic) {
  std::vector<Parameter<double>> ps{{"x", random_tensor(3, 3, 9)}};
  EXPECT_LT(check(ps, [](Tape<double>&, std::vector<Var<double>>& v) { return sum(mul(v[0], v[0])); }, 1e-3), 1e-9);
}

TEST(GradCheck, ElementwisePrimitives) {
  std::vector<Parameter<double>> ps{{"a", random_tensor(3, 4, 10)}, {"b", random_tensor(3, 4, 11)}};
  std::vector<Parameter<double>> pr{{"a", random_tensor(3, 4, 10)}, {"r", random_tensor(1, 4, 12)}};
  const std::vector<std::pair<std::string, Builder>> cases = {
      {"add", [](Tape<double>&, auto& v) { return weighted_sum(add(v[0], v[1]), 1); }},
      {"mul", [](Tape<double>&, auto& v) { return weighted_sum(mul(v[0], v[1]), 3); }},
      {"scale", [](Tape<double>&, auto& v) { return weighted_sum(add_scalar(scale(v[0], 2.5), 1.0), 4); }},
      {"transpose", [](Tape<double>&, auto& v) { return weighted_sum(transpose(v[0]), 5); }},
      {"concat0", [](Tape<double>&, auto& v) { return weighted_sum(concat<double>({v[0], v[1]}, 0), 6); }},
      {"concat1", [](Tape<double>&, auto& v) { return weighted_sum(concat<double>({v[0], v[1]}, 1), 7); }},
      {"slice", [](Tape<double>&, auto& v) { return weighted_sum(slice(v[0], 1, 1, 3), 8); }},
      {"relu", [](Tape<double>&, auto& v) { return weighted_sum(relu(v[0]), 9); }},
  };
  for (const auto& [name, b] : cases) EXPECT_LT(check(ps, b), 1e-6) << name;
  EXPECT_LT(check(pr, [](Tape<double>&, auto& v) { return weighted_sum(add(v[0], v[1]), 2); }), 1e-6);
}

TEST(GradCheck, ComposedPrimitives) {
  std::vector<Parameter<double>> ps{{"a", random_tensor(4, 5, 20)},
                                    {"b", random_tensor(5, 6, 21)},
                                    {"g", random_tensor(1, 6, 22)},
                                    {"h", random_tensor(1, 6, 23)}};
  EXPECT_LT(check(ps, [](Tape<double>&, auto& v) { return weighted_sum(matmul(v[0], v[1]), 1); }), 1e-6);
  EXPECT_LT(check(ps, [](Tape<double>&, auto& v) { return weighted_sum(row_softmax(matmul(v[0], v[1])), 2); }), 1e-6);
  EXPECT_LT(check(ps, [](Tape<double>&, auto& v) { return weighted_sum(layer_norm(matmul(v[0], v[1]), v[2], v[3]), 3); }),
            1e-6);
}

TEST(GradCheck, SoftmaxCrossEntropy) {
  std::vector<Parameter<double>> ps{{"logits", random_tensor(6, 9, 30)}};
  const std::vector<int> targets{1, 4, 8, 0, 2, 3};
  const std::vector<char> mask{1, 1, 0, 1, 1, 1};
  Tensor<double> add_mask(6, 9);
  add_mask(0, 7) = -std::numeric_limits<double>::infinity();
  add_mask(3, 5) = -std::numeric_limits<double>::infinity();
  EXPECT_LT(check(ps, [&](Tape<double>&, auto& v) { return cross_entropy(v[0], targets, mask, add_mask); }), 1e-6);
}

TEST(GradCheck, FusedAttention) {
  const std::size_t B = 2, q = 3, k = 4, d = 8;
  std::vector<Parameter<double>> ps{{"q", random_tensor(B * q, d, 40)},
                                    {"k", random_tensor(B * k, d, 41)},
                                    {"v", random_tensor(B * k, d, 42)}};
  AttentionLayout lay{B, q, k, 2, false, {4, 2}};
  EXPECT_LT(check(ps, [&](Tape<double>&, auto& v) { return weighted_sum(multi_head_attention(v[0], v[1], v[2], lay), 1); }),
            1e-6);
  std::vector<Parameter<double>> self{{"x", random_tensor(B * 4, d, 43)}};
  AttentionLayout causal{B, 4, 4, 4, true, {4, 3}};
  EXPECT_LT(
      check(self, [&](Tape<double>&, auto& v) { return weighted_sum(multi_head_attention(v[0], v[0], v[0], causal), 2); }),
      1e-6);
}

TEST(CrossEntropy, UniformAndErrors) {
  Tape<double> tape(false);
  const std::size_t V = 10001;
  auto l = cross_entropy(tape.constant(Tensor<double>(2, V)), {5, 17}, {1, 1});
  EXPECT_NEAR(l.value().item(), std::log(10001.0), 1e-12);
  EXPECT_NEAR(std::log(10001.0), 9.2105, 1e-4);
  EXPECT_THROW(cross_entropy(tape.constant(Tensor<double>(2, 4)), {1, 1}, {0, 0}), std::invalid_argument);
  Tensor<double> dom(1, 4);
  dom(0, 2) = 1e4;
  EXPECT_NEAR(cross_entropy(tape.constant(dom), {2}, {1}).value().item(), 0.0, 1e-12);
}

TEST(CrossEntropy, MaskedRowsContributeNothing) {
  Tape<double> tape(false);
  auto a = random_tensor(3, 5, 50);
  auto b = a;
  b.mat().row(1).setConstant(123.0);
  auto la = cross_entropy(tape.constant(a), {0, 1, 2}, {1, 0, 1}).value().item();
  auto lb = cross_entropy(tape.constant(b), {0, 4, 2}, {1, 0, 1}).value().item();
  EXPECT_EQ(la, lb);
}

TEST(Dropout, SeededAndIdentityInEval) {
  auto x = random_tensor(10, 10, 60);
  Tape<double> eval(false, false, 1);
  EXPECT_EQ(dropout(eval.constant(x), 0.5).value().storage(), x.storage());
  Tape<double> t1(false, true, 7), t2(false, true, 7), t3(false, true, 8);
  auto a = dropout(t1.constant(x), 0.5).value();
  auto b = dropout(t2.constant(x), 0.5).value();
  auto c = dropout(t3.constant(x), 0.5).value();
  EXPECT_EQ(a.storage(), b.storage());
  EXPECT_NE(a.storage(), c.storage());
  int zeros = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == 0.0) ++zeros;
    else EXPECT_NEAR(a[i], 2.0 * x[i], 1e-15);
  }
  EXPECT_GT(zeros, 20);
  EXPECT_LT(zeros, 80);
}

TEST(Clip, Semantics) {
  Parameter<double> p("p", Tensor<double>(1, 2));
  p.grad[0] = 0.3;
  p.grad[1] = 0.4;
  std::vector<Parameter<double>*> ps{&p};
  auto r = clip_global_norm(ps, 1.0);
  EXPECT_EQ(r.scale, 1.0);
  EXPECT_EQ(p.grad[0], 0.3);
  p.grad[0] = 1.2;
  p.grad[1] = 1.6;
  r = clip_global_norm(ps, 1.0);
  EXPECT_NEAR(r.scale, 1.0 / (2.0 + 1e-6), 1e-15);
  EXPECT_LE(global_grad_norm(ps), 1.0);
  EXPECT_NEAR(global_grad_norm(ps), 1.0, 1e-6);
  p.zero_grad();
  r = clip_global_norm(ps, 1.0);
  EXPECT_EQ(r.norm_before, 0.0);
  EXPECT_EQ(p.grad[0], 0.0);
}

TEST(AdamW, ZeroGradientNoDecayUnchanged) {
  Parameter<double> p("p", random_tensor(2, 2, 70));
  auto before = p.value.storage();
  AdamW<double> opt({&p});
  opt.step(0.1);
  EXPECT_EQ(p.value.storage(), before);
}

TEST(AdamW, SingleScalarStep) {
  Parameter<double> p("w", Tensor<double>::scalar(1.0));
  p.grad[0] = 1.0;
  AdamW<double> opt({&p});
  opt.step(0.1);
  EXPECT_NEAR(p.value[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(AdamW, DecoupledDecay) {
  Parameter<double> p("w", Tensor<double>::scalar(2.0));
  AdamW<double> opt({&p}, {0.9, 0.999, 1e-8, 0.01});
  opt.step(0.1);
  EXPECT_NEAR(p.value[0], 2.0 - 0.1 * 0.01 * 2.0, 1e-15);
}

TEST(AdamW, MatchesReferenceAdam) {
  // plain Adam written out independently
  Parameter<double> p("w", random_tensor(1, 5, 71));
  std::vector<double> w(p.value.storage().begin(), p.value.storage().end()), m(5, 0.0), v(5, 0.0);
  AdamW<double> opt({&p});
  Rng rng(72);
  std::normal_distribution<double> nd;
  for (int t = 1; t <= 20; ++t) {
    for (int j = 0; j < 5; ++j) {
      const double g = nd(rng);
      p.grad[static_cast<std::size_t>(j)] = g;
      m[j] = 0.9 * m[j] + 0.1 * g;
      v[j] = 0.999 * v[j] + 0.001 * g * g;
      const double mh = m[j] / (1 - std::pow(0.9, t)), vh = v[j] / (1 - std::pow(0.999, t));
      w[j] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    }
    opt.step(0.01);
    for (int j = 0; j < 5; ++j) EXPECT_NEAR(p.value[static_cast<std::size_t>(j)], w[j], 1e-12);
  }
  EXPECT_EQ(opt.step_count(), 20);
}

TEST(Checkpoint, RoundTripTruncationVersion) {
  const std::string path = ::testing::TempDir() + "ck.bin";
  CheckpointData ck{R"({"a":1})", {{"w", random_tensor(3, 4, 80).cast<float>()}, {"b", Tensor<float>(Shape{5}, 0.5f)}}};
  write_checkpoint(path, ck);
  auto back = read_checkpoint(path);
  EXPECT_EQ(back.config_json, ck.config_json);
  ASSERT_EQ(back.tensors.size(), 2u);
  EXPECT_EQ(back.tensors[0].name, "w");
  EXPECT_EQ(back.tensors[0].value.shape(), ck.tensors[0].value.shape());
  EXPECT_EQ(std::memcmp(back.tensors[0].value.data(), ck.tensors[0].value.data(), 12 * sizeof(float)), 0);

  const auto full = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, full - 5);
  try {
    read_checkpoint(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
  }

  write_checkpoint(path, ck);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(static_cast<std::streamoff>(full - 12));
    f.put('\x7f');
  }
  EXPECT_THROW(read_checkpoint(path), Error);

  write_checkpoint(path, ck);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const std::uint32_t v = 99;
    f.write(reinterpret_cast<const char*>(&v), 4);
  }
  try {
    read_checkpoint(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}
