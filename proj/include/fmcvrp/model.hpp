#pragma once

// Encoder-decoder transformer over node-ID vocabulary. The encoder reads
// problem-token features, the decoder reads solution-token features and
// cross-attends to the encoder output; one output matrix maps both streams
// to node-ID logits.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fmcvrp/graph.hpp"
#include "fmcvrp/rng.hpp"
#include "fmcvrp/tensor.hpp"
#include "json.hpp"

namespace fmcvrp::model {

using tensor::AttentionLayout;
using tensor::Matrix;
using tensor::Parameter;
using tensor::Shape;
using tensor::Tape;
using tensor::Tensor;
using tensor::Var;

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 64;
  int d_ff = 256;
  int vocab_size = 202;  // fixed-graph size + 1 padding id
  double dropout = 0.1;

  int pad_id() const noexcept { return vocab_size - 1; }

  void validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1) throw validation_error("model sizes must be positive");
    if (d_model % n_heads != 0) throw validation_error("d_model must be divisible by n_heads");
    if (vocab_size < 3) throw validation_error("vocab_size too small");
    if (dropout < 0.0 || dropout >= 1.0) throw validation_error("dropout must be in [0, 1)");
  }
  void validate_for(const FixedGraph& g) const {
    validate();
    if (static_cast<std::size_t>(vocab_size) != g.size() + 1)
      throw validation_error("vocab_size must equal fixed-graph size + 1");
  }

  nlohmann::json to_json() const {
    return {{"n_layers", n_layers}, {"n_heads", n_heads},       {"d_model", d_model},
            {"d_ff", d_ff},         {"vocab_size", vocab_size}, {"dropout", dropout}};
  }
  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.validate();
    return c;
  }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <class T>
constexpr T neg_inf() {
  return -std::numeric_limits<T>::infinity();
}

// ---------------------------------------------------------------------------
// Feasibility mask

/// Allowed next ids given a feasible prefix: unvisited instance customers
/// that fit the remaining capacity, and the depot unless the previous token
/// was the depot. When no customer fits the depot is the only choice. The
/// padding id is never allowed.
inline std::vector<char> feasible_next(const PrefixState& state, int vocab_size) {
  const auto& inst = state.instance();
  std::vector<char> allowed(static_cast<std::size_t>(vocab_size), 0);
  bool any_customer = false;
  for (std::size_t l = 1; l < inst.size(); ++l) {
    if (state.visited(l) || inst.demands[l] > state.remaining()) continue;
    allowed[static_cast<std::size_t>(inst.node_ids[l])] = 1;
    any_customer = true;
  }
  if (!state.last_was_depot() || !any_customer) allowed[kDepotId] = 1;
  return allowed;
}

template <class T = double>
Tensor<T> feasibility_mask(const ProblemInstance& inst, std::span<const int> prefix, int vocab_size) {
  PrefixState state(inst);
  for (int id : prefix) state.push(id);
  const auto allowed = feasible_next(state, vocab_size);
  Tensor<T> row(1, static_cast<std::size_t>(vocab_size));
  for (std::size_t i = 0; i < allowed.size(); ++i) row[i] = allowed[i] ? T{0} : neg_inf<T>();
  return row;
}

// ---------------------------------------------------------------------------
// Padded batch of problem/solution pairs

template <class T>
struct Batch {
  std::size_t size = 0;   // samples
  std::size_t m_len = 0;  // padded problem tokens per sample
  std::size_t n_len = 0;  // padded decoder positions per sample
  std::vector<std::size_t> m_valid, n_valid;
  Tensor<T> problem;   // (size*m_len) x 9
  Tensor<T> solution;  // (size*n_len) x 9, decoder inputs (tokens 0..L-2)
  std::vector<int> problem_targets;
  std::vector<char> problem_mask;
  std::vector<int> solution_targets;  // next tokens (1..L-1)
  std::vector<char> solution_mask;
  Tensor<T> feasibility;  // (size*n_len) x vocab, 0 or -inf

  std::size_t padded_tokens() const { return size * (m_len + n_len); }
  std::size_t real_tokens() const {
    std::size_t r = 0;
    for (std::size_t b = 0; b < size; ++b) r += m_valid[b] + n_valid[b];
    return r;
  }
};

struct Example {
  const ProblemInstance* instance = nullptr;
  std::vector<int> tokens;  // full teacher solution, depot first and last
  double rotation = 0.0;
};

/// Builds padded feature/target/mask tensors. Padding rows carry zero
/// features, the pad id as target and a cleared loss mask.
template <class T>
Batch<T> make_batch(std::span<const Example> examples, int vocab_size) {
  Batch<T> b;
  b.size = examples.size();
  for (const auto& e : examples) {
    b.m_len = std::max(b.m_len, e.instance->size());
    b.n_len = std::max(b.n_len, e.tokens.size() - 1);
  }
  const int pad = vocab_size - 1;
  const auto V = static_cast<std::size_t>(vocab_size);
  b.problem = Tensor<T>(b.size * b.m_len, kFeatureCount);
  b.solution = Tensor<T>(b.size * b.n_len, kFeatureCount);
  b.problem_targets.assign(b.size * b.m_len, pad);
  b.problem_mask.assign(b.size * b.m_len, 0);
  b.solution_targets.assign(b.size * b.n_len, pad);
  b.solution_mask.assign(b.size * b.n_len, 0);
  b.feasibility = Tensor<T>(b.size * b.n_len, V, neg_inf<T>());
  for (std::size_t s = 0; s < b.size; ++s) {
    const auto& e = examples[s];
    const auto& inst = *e.instance;
    const auto pf = problem_features(inst, e.rotation);
    for (std::size_t i = 0; i < pf.size(); ++i) {
      const std::size_t row = s * b.m_len + i;
      for (std::size_t f = 0; f < kFeatureCount; ++f) b.problem(row, f) = static_cast<T>(pf[i][f]);
      b.problem_targets[row] = inst.node_ids[i];
      b.problem_mask[row] = 1;
    }
    b.m_valid.push_back(pf.size());
    const std::size_t n = e.tokens.size() - 1;
    const std::span<const int> inputs(e.tokens.data(), n);
    const auto sf = solution_features(inst, inputs, e.rotation);
    PrefixState state(inst);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t row = s * b.n_len + i;
      for (std::size_t f = 0; f < kFeatureCount; ++f) b.solution(row, f) = static_cast<T>(sf[i][f]);
      state.push(e.tokens[i]);
      const auto allowed = feasible_next(state, vocab_size);
      for (std::size_t v = 0; v < V; ++v)
        if (allowed[v]) b.feasibility(row, v) = T{0};
      b.solution_targets[row] = e.tokens[i + 1];
      b.solution_mask[row] = 1;
    }
    b.n_valid.push_back(n);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Parameters

template <class T>
struct AttentionParams {
  Parameter<T> wq, wk, wv, wo;
};
template <class T>
struct FeedForwardParams {
  Parameter<T> w1, b1, w2, b2;
};
template <class T>
struct NormParams {
  Parameter<T> gain, bias;
};
template <class T>
struct EncoderLayer {
  NormParams<T> ln1;
  AttentionParams<T> self;
  NormParams<T> ln2;
  FeedForwardParams<T> ff;
};
template <class T>
struct DecoderLayer {
  NormParams<T> ln1;
  AttentionParams<T> self;
  NormParams<T> ln2;
  AttentionParams<T> cross;
  NormParams<T> ln3;
  FeedForwardParams<T> ff;
};

/// Sinusoidal position table, rows = positions.
template <class T>
Tensor<T> positional_encoding(std::size_t positions, std::size_t d) {
  Tensor<T> pe(positions, d);
  for (std::size_t p = 0; p < positions; ++p)
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      pe(p, i) = static_cast<T>(std::sin(static_cast<double>(p) * freq));
      if (i + 1 < d) pe(p, i + 1) = static_cast<T>(std::cos(static_cast<double>(p) * freq));
    }
  return pe;
}

struct LossPair;

template <class T>
class Model {
 public:
  Model() = default;
  Model(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    const auto d = static_cast<std::size_t>(cfg_.d_model), ff = static_cast<std::size_t>(cfg_.d_ff);
    const auto V = static_cast<std::size_t>(cfg_.vocab_size);
    w_in_ = {"input.w", Tensor<T>(kFeatureCount, d)};
    b_in_ = {"input.b", Tensor<T>(1, d)};
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string e = "enc" + std::to_string(l) + ".";
      EncoderLayer<T> el;
      el.ln1 = norm(e + "ln1", d);
      el.self = attention_params(e + "self", d);
      el.ln2 = norm(e + "ln2", d);
      el.ff = feed_forward(e + "ff", d, ff);
      enc_.push_back(std::move(el));
    }
    enc_norm_ = norm("enc.ln_final", d);
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "dec" + std::to_string(l) + ".";
      DecoderLayer<T> dl;
      dl.ln1 = norm(p + "ln1", d);
      dl.self = attention_params(p + "self", d);
      dl.ln2 = norm(p + "ln2", d);
      dl.cross = attention_params(p + "cross", d);
      dl.ln3 = norm(p + "ln3", d);
      dl.ff = feed_forward(p + "ff", d, ff);
      dec_.push_back(std::move(dl));
    }
    dec_norm_ = norm("dec.ln_final", d);
    w_out_ = {"output.w", Tensor<T>(d, V)};

    Rng rng(seed);
    for (auto* p : parameters()) {
      const auto& name = p->name;
      const bool is_norm = name.find("ln") != std::string::npos;
      const bool is_bias = name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") || name.ends_with(".bias");
      if (is_norm && name.ends_with(".gain")) {
        p->value.fill(T{1});
      } else if (is_bias) {
        p->value.fill(T{0});
      } else {
        const double stdev = 1.0 / std::sqrt(static_cast<double>(p->value.shape()[0]));
        std::normal_distribution<double> nd(0.0, stdev);
        for (auto& v : p->value.values()) v = static_cast<T>(nd(rng));
      }
      p->zero_grad();
    }
  }

  const ModelConfig& config() const noexcept { return cfg_; }

  template <class F>
  void for_each_parameter(F&& f) {
    f(w_in_);
    f(b_in_);
    for (auto& l : enc_) {
      for_norm(l.ln1, f);
      for_attn(l.self, f);
      for_norm(l.ln2, f);
      for_ff(l.ff, f);
    }
    for_norm(enc_norm_, f);
    for (auto& l : dec_) {
      for_norm(l.ln1, f);
      for_attn(l.self, f);
      for_norm(l.ln2, f);
      for_attn(l.cross, f);
      for_norm(l.ln3, f);
      for_ff(l.ff, f);
    }
    for_norm(dec_norm_, f);
    f(w_out_);
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for_each_parameter([&](Parameter<T>& p) { out.push_back(&p); });
    return out;
  }

  /// Parameters reached by the problem loss alone.
  std::vector<Parameter<T>*> encoder_parameters() {
    std::vector<Parameter<T>*> out;
    for (auto* p : parameters())
      if (!p->name.starts_with("dec")) out.push_back(p);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  template <class U>
  Model<U> cast() const {
    Model<U> out(cfg_, 0);
    auto src = const_cast<Model*>(this)->parameters();
    auto dst = out.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      dst[i]->value = src[i]->value.template cast<U>();
      dst[i]->zero_grad();
    }
    return out;
  }

  // --- tape forward -------------------------------------------------------

  /// Problem features (batch*m_len x 9) -> encoder output E (batch*m_len x d).
  Var<T> encode(Tape<T>& tape, const Tensor<T>& problem, std::size_t batch, std::size_t m_len,
                const std::vector<std::size_t>& m_valid) {
    AttentionLayout lay{batch, m_len, m_len, static_cast<std::size_t>(cfg_.n_heads), false, m_valid};
    Var<T> x = tensor::add(tensor::matmul(tape.constant(problem), tape.param(w_in_)), tape.param(b_in_));
    for (auto& l : enc_) {
      Var<T> h = layer_norm(tape, x, l.ln1);
      x = tensor::add(x, tensor::dropout(attend(tape, h, h, l.self, lay), cfg_.dropout));
      h = layer_norm(tape, x, l.ln2);
      x = tensor::add(x, tensor::dropout(feed_forward(tape, h, l.ff), cfg_.dropout));
    }
    return layer_norm(tape, x, enc_norm_);
  }

  /// Solution features (batch*n_len x 9) and E -> decoder output G (batch*n_len x d).
  Var<T> decode(Tape<T>& tape, Var<T> enc_out, const Tensor<T>& solution, std::size_t batch, std::size_t n_len,
                const std::vector<std::size_t>& n_valid, std::size_t m_len, const std::vector<std::size_t>& m_valid) {
    const auto heads = static_cast<std::size_t>(cfg_.n_heads);
    AttentionLayout self_lay{batch, n_len, n_len, heads, true, n_valid};
    AttentionLayout cross_lay{batch, n_len, m_len, heads, false, m_valid};
    Tensor<T> pe(batch * n_len, static_cast<std::size_t>(cfg_.d_model));
    const auto table = positional_encoding<T>(n_len, static_cast<std::size_t>(cfg_.d_model));
    for (std::size_t b = 0; b < batch; ++b)
      pe.mat().middleRows(static_cast<Eigen::Index>(b * n_len), static_cast<Eigen::Index>(n_len)) = table.mat();
    Var<T> y = tensor::add(tensor::matmul(tape.constant(solution), tape.param(w_in_)), tape.param(b_in_));
    y = tensor::add(y, tape.constant(std::move(pe)));
    for (auto& l : dec_) {
      Var<T> h = layer_norm(tape, y, l.ln1);
      y = tensor::add(y, tensor::dropout(attend(tape, h, h, l.self, self_lay), cfg_.dropout));
      h = layer_norm(tape, y, l.ln2);
      y = tensor::add(y, tensor::dropout(attend(tape, h, enc_out, l.cross, cross_lay), cfg_.dropout));
      h = layer_norm(tape, y, l.ln3);
      y = tensor::add(y, tensor::dropout(feed_forward(tape, h, l.ff), cfg_.dropout));
    }
    return layer_norm(tape, y, dec_norm_);
  }

  /// Node-ID logits X * W_o through the shared output matrix.
  Var<T> logits(Tape<T>& tape, Var<T> x) { return tensor::matmul(x, tape.param(w_out_)); }

  // Read access for the inference session.
  const Parameter<T>& input_w() const { return w_in_; }
  const Parameter<T>& input_b() const { return b_in_; }
  const std::vector<EncoderLayer<T>>& encoder_layers() const { return enc_; }
  const std::vector<DecoderLayer<T>>& decoder_layers() const { return dec_; }
  const NormParams<T>& encoder_norm() const { return enc_norm_; }
  const NormParams<T>& decoder_norm() const { return dec_norm_; }
  const Parameter<T>& output_w() const { return w_out_; }

 private:
  static NormParams<T> norm(const std::string& name, std::size_t d) {
    return {{name + ".gain", Tensor<T>(1, d, T{1})}, {name + ".bias", Tensor<T>(1, d)}};
  }
  static AttentionParams<T> attention_params(const std::string& name, std::size_t d) {
    return {{name + ".wq", Tensor<T>(d, d)}, {name + ".wk", Tensor<T>(d, d)}, {name + ".wv", Tensor<T>(d, d)},
            {name + ".wo", Tensor<T>(d, d)}};
  }
  static FeedForwardParams<T> feed_forward(const std::string& name, std::size_t d, std::size_t ff) {
    return {{name + ".w1", Tensor<T>(d, ff)}, {name + ".b1", Tensor<T>(1, ff)}, {name + ".w2", Tensor<T>(ff, d)},
            {name + ".b2", Tensor<T>(1, d)}};
  }
  template <class F>
  static void for_norm(NormParams<T>& n, F& f) {
    f(n.gain);
    f(n.bias);
  }
  template <class F>
  static void for_attn(AttentionParams<T>& a, F& f) {
    f(a.wq);
    f(a.wk);
    f(a.wv);
    f(a.wo);
  }
  template <class F>
  static void for_ff(FeedForwardParams<T>& p, F& f) {
    f(p.w1);
    f(p.b1);
    f(p.w2);
    f(p.b2);
  }

  Var<T> layer_norm(Tape<T>& tape, Var<T> x, NormParams<T>& n) {
    return tensor::layer_norm(x, tape.param(n.gain), tape.param(n.bias));
  }
  Var<T> attend(Tape<T>& tape, Var<T> queries, Var<T> keys, AttentionParams<T>& a, const AttentionLayout& lay) {
    Var<T> q = tensor::matmul(queries, tape.param(a.wq));
    Var<T> k = tensor::matmul(keys, tape.param(a.wk));
    Var<T> v = tensor::matmul(keys, tape.param(a.wv));
    return tensor::matmul(tensor::multi_head_attention(q, k, v, lay), tape.param(a.wo));
  }
  Var<T> feed_forward(Tape<T>& tape, Var<T> x, FeedForwardParams<T>& p) {
    Var<T> h = tensor::relu(tensor::add(tensor::matmul(x, tape.param(p.w1)), tape.param(p.b1)));
    return tensor::add(tensor::matmul(h, tape.param(p.w2)), tape.param(p.b2));
  }

  ModelConfig cfg_;
  Parameter<T> w_in_, b_in_;
  std::vector<EncoderLayer<T>> enc_;
  NormParams<T> enc_norm_;
  std::vector<DecoderLayer<T>> dec_;
  NormParams<T> dec_norm_;
  Parameter<T> w_out_;
};

// ---------------------------------------------------------------------------
// Losses

template <class T>
struct DualLoss {
  Var<T> problem;
  std::optional<Var<T>> solution;  // absent for encoder-only passes

  Var<T> total() const { return solution ? tensor::add(problem, *solution) : problem; }
};

/// Forward pass plus cross-entropy of F against each problem token's own id
/// and of H (with the feasibility mask) against the next teacher token.
template <class T>
DualLoss<T> dual_loss(Tape<T>& tape, Model<T>& model, const Batch<T>& batch, bool with_decoder = true) {
  Var<T> enc = model.encode(tape, batch.problem, batch.size, batch.m_len, batch.m_valid);
  DualLoss<T> out{tensor::cross_entropy(model.logits(tape, enc), batch.problem_targets, batch.problem_mask), {}};
  if (with_decoder) {
    Var<T> dec =
        model.decode(tape, enc, batch.solution, batch.size, batch.n_len, batch.n_valid, batch.m_len, batch.m_valid);
    out.solution =
        tensor::cross_entropy(model.logits(tape, dec), batch.solution_targets, batch.solution_mask, batch.feasibility);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Standalone operations

/// Single-head scaled dot-product attention from tape primitives, with an
/// additive mask (0 or -inf) on the scores.
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const Tensor<T>& additive_mask = {}) {
  if (q.cols() != k.cols() || k.rows() != v.rows())
    throw std::invalid_argument("attention: shape mismatch " + tensor::shape_str(q.shape()) + " / " +
                                tensor::shape_str(k.shape()) + " / " + tensor::shape_str(v.shape()));
  Var<T> scores = tensor::scale(tensor::matmul(q, tensor::transpose(k)), T{1} / std::sqrt(static_cast<T>(q.cols())));
  if (!additive_mask.empty()) scores = tensor::add(scores, q.tape->constant(additive_mask));
  return tensor::matmul(tensor::row_softmax(scores), v);
}

template <class T>
struct OutputHeads {
  Matrix<T> F;  // m x vocab
  Matrix<T> H;  // n x vocab
};

/// F = softmax(E W_o), H = softmax(G W_o + M).
template <class T>
OutputHeads<T> output_heads(const Matrix<T>& E, const Matrix<T>& G, const Matrix<T>& W_o, const Matrix<T>& M) {
  if (M.rows() != G.rows() || M.cols() != W_o.cols())
    throw std::invalid_argument("output_heads: mask shape does not match decoder logits");
  OutputHeads<T> out;
  Matrix<T> fl = E * W_o;
  Matrix<T> hl = G * W_o + M;
  out.F.resize(fl.rows(), fl.cols());
  out.H.resize(hl.rows(), hl.cols());
  tensor::detail::softmax_rows<T>(fl, out.F);
  for (Eigen::Index r = 0; r < M.rows(); ++r)
    if (M.row(r).maxCoeff() == neg_inf<T>()) throw std::invalid_argument("output_heads: mask row excludes every id");
  tensor::detail::softmax_rows<T>(hl, out.H);
  return out;
}

// ---------------------------------------------------------------------------
// Incremental decoding with cached keys/values

template <class T>
class DecodeSession {
 public:
  using Row = Eigen::Matrix<T, 1, Eigen::Dynamic>;

  DecodeSession(Model<T>& model, const std::vector<FeatureRow>& problem) : model_(&model) {
    const auto& cfg = model.config();
    const std::size_t m = problem.size();
    Tensor<T> feats(m, kFeatureCount);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t f = 0; f < kFeatureCount; ++f) feats(i, f) = static_cast<T>(problem[i][f]);
    Tape<T> tape(false, false);
    Var<T> e = model.encode(tape, feats, 1, m, {m});
    enc_ = e.value().mat();
    for (const auto& l : model.decoder_layers()) {
      cross_k_.push_back(enc_ * l.cross.wk.value.mat());
      cross_v_.push_back(enc_ * l.cross.wv.value.mat());
      self_k_.emplace_back(0, cfg.d_model);
      self_v_.emplace_back(0, cfg.d_model);
    }
  }

  const Matrix<T>& encoder_output() const noexcept { return enc_; }
  std::size_t position() const noexcept { return pos_; }

  /// Feeds the next solution token and returns its node-ID logits (unmasked).
  Row step(const FeatureRow& token) {
    const auto& cfg = model_->config();
    const auto d = static_cast<Eigen::Index>(cfg.d_model);
    Row s(static_cast<Eigen::Index>(kFeatureCount));
    for (std::size_t f = 0; f < kFeatureCount; ++f) s[static_cast<Eigen::Index>(f)] = static_cast<T>(token[f]);
    Row x = s * model_->input_w().value.mat() + model_->input_b().value.mat().row(0);
    Row pe(d);
    for (Eigen::Index i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      pe[i] = static_cast<T>(std::sin(static_cast<double>(pos_) * freq));
      if (i + 1 < d) pe[i + 1] = static_cast<T>(std::cos(static_cast<double>(pos_) * freq));
    }
    x += pe;
    const auto& layers = model_->decoder_layers();
    for (std::size_t li = 0; li < layers.size(); ++li) {
      const auto& l = layers[li];
      Row h = norm(x, l.ln1);
      append(self_k_[li], h * l.self.wk.value.mat());
      append(self_v_[li], h * l.self.wv.value.mat());
      x += attend(h * l.self.wq.value.mat(), self_k_[li], self_v_[li]) * l.self.wo.value.mat();
      h = norm(x, l.ln2);
      x += attend(h * l.cross.wq.value.mat(), cross_k_[li], cross_v_[li]) * l.cross.wo.value.mat();
      h = norm(x, l.ln3);
      Row f = (h * l.ff.w1.value.mat() + l.ff.b1.value.mat().row(0)).cwiseMax(T{0});
      x += f * l.ff.w2.value.mat() + l.ff.b2.value.mat().row(0);
    }
    ++pos_;
    return norm(x, model_->decoder_norm()) * model_->output_w().value.mat();
  }

 private:
  static void append(Matrix<T>& m, const Row& r) {
    m.conservativeResize(m.rows() + 1, Eigen::NoChange);
    m.row(m.rows() - 1) = r;
  }

  static Row norm(const Row& x, const NormParams<T>& n) {
    const T mu = x.mean();
    const T var = (x.array() - mu).square().mean();
    const T is = T{1} / std::sqrt(var + T(1e-5));
    return ((x.array() - mu) * is * n.gain.value.mat().row(0).array() + n.bias.value.mat().row(0).array()).matrix();
  }

  Row attend(const Row& q, const Matrix<T>& K, const Matrix<T>& V) const {
    const auto heads = model_->config().n_heads;
    const auto dk = static_cast<Eigen::Index>(q.size() / heads);
    const T sc = T{1} / std::sqrt(static_cast<T>(dk));
    Row out(q.size());
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index c = h * dk;
      Eigen::Matrix<T, 1, Eigen::Dynamic> s = sc * q.segment(c, dk) * K.middleCols(c, dk).transpose();
      s.array() = (s.array() - s.maxCoeff()).exp();
      s /= s.sum();
      out.segment(c, dk) = s * V.middleCols(c, dk);
    }
    return out;
  }

  Model<T>* model_;
  Matrix<T> enc_;
  std::vector<Matrix<T>> cross_k_, cross_v_, self_k_, self_v_;
  std::size_t pos_ = 0;
};

}  // namespace fmcvrp::model
