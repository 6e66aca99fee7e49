#pragma once

// Encoder, answerability head, two-level attention aggregation, decoder and
// reward head. Differentiable forward passes run on an ad::Tape; the plain
// helpers below evaluate the same graph without recording gradients.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rul/autodiff.hpp"
#include "rul/corpus.hpp"
#include "rul/errors.hpp"
#include "rul/rng.hpp"

namespace rul {

using ad::Matrix;
using ad::Var;

enum class Aggregation { Attention, Mean };
enum class Mode { Answer, Refusal };

inline const char* to_string(Aggregation a) { return a == Aggregation::Attention ? "attention" : "mean"; }
inline Aggregation parse_aggregation(const std::string& s) {
  if (s == "attention") return Aggregation::Attention;
  if (s == "mean") return Aggregation::Mean;
  throw ConfigError("aggregation must be attention or mean, got " + s);
}

struct ModelConfig {
  int vocab_size = 0;
  int d = 32;
  int d_a = 16;
  int d_a_prime = 16;
  int max_len = 40;  // decoder steps, EOS included
  double tau = 0.5;
  Aggregation aggregation = Aggregation::Attention;

  void validate() const {
    if (vocab_size < 7) throw ConfigError("model.vocab_size must be >= 7");
    if (d < 1) throw ConfigError("model.d must be >= 1");
    if (d_a < 1) throw ConfigError("model.d_a must be >= 1");
    if (d_a_prime < 1) throw ConfigError("model.d_a_prime must be >= 1");
    if (max_len < 1) throw ConfigError("model.max_len must be >= 1");
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("model.tau must be in (0, 1)");
  }
  bool operator==(const ModelConfig&) const = default;
};

struct ModelParams {
  ModelConfig config;
  // encoder
  Matrix E, X, W_q, W_k, W_v, W_o, b_o;
  // classification head and attention
  Matrix W_cls, b_cls, W_a, b_a, v, W_a_prime, b_a_prime, v_prime;
  // decoder
  Matrix m_ans, m_ref, P, W_h, b_h, W_out, b_out, W_c, w_g, b_g;
  // reward head
  Matrix w_r, b_r;

  template <class Self, class F>
  static void visit(Self& s, F&& f) {
    f("E", s.E), f("X", s.X), f("W_q", s.W_q), f("W_k", s.W_k), f("W_v", s.W_v), f("W_o", s.W_o), f("b_o", s.b_o);
    f("W_cls", s.W_cls), f("b_cls", s.b_cls), f("W_a", s.W_a), f("b_a", s.b_a), f("v", s.v);
    f("W_a_prime", s.W_a_prime), f("b_a_prime", s.b_a_prime), f("v_prime", s.v_prime);
    f("m_ans", s.m_ans), f("m_ref", s.m_ref), f("P", s.P), f("W_h", s.W_h), f("b_h", s.b_h);
    f("W_out", s.W_out), f("b_out", s.b_out), f("W_c", s.W_c), f("w_g", s.w_g), f("b_g", s.b_g);
    f("w_r", s.w_r), f("b_r", s.b_r);
  }
  template <class F>
  void for_each(F&& f) { visit(*this, f); }
  template <class F>
  void for_each(F&& f) const { visit(*this, f); }

  /// Expected (rows, cols) of a named tensor under `c`.
  static std::pair<int, int> shape(const ModelConfig& c, const std::string& name) {
    const int V = c.vocab_size, d = c.d;
    static const std::unordered_map<std::string, int> id = {
        {"E", 0},      {"X", 1},          {"W_q", 2},     {"W_k", 2},    {"W_v", 2},   {"W_o", 2},     {"b_o", 3},
        {"W_cls", 4},  {"b_cls", 5},      {"W_a", 6},     {"b_a", 7},    {"v", 7},     {"W_a_prime", 8},
        {"b_a_prime", 8}, {"v_prime", 8}, {"m_ans", 3},   {"m_ref", 3},  {"P", 9},     {"W_h", 10},    {"b_h", 3},
        {"W_out", 11}, {"b_out", 12},     {"W_c", 2},     {"w_g", 4},    {"b_g", 5},   {"w_r", 3},     {"b_r", 5}};
    switch (id.at(name)) {
      case 0: return {V, d};
      case 1: return {2, d};
      case 2: return {d, d};
      case 3: return {d, 1};
      case 4: return {1, d};
      case 5: return {1, 1};
      case 6: return {c.d_a, d};
      case 7: return {c.d_a, 1};
      case 8: return {c.d_a_prime, 1};
      case 9: return {c.max_len, d};
      case 10: return {d, 3 * d};
      case 11: return {V, d};
      default: return {V, 1};
    }
  }

  static bool is_bias(const std::string& name) { return name.rfind("b_", 0) == 0; }

  static ModelParams zeros(const ModelConfig& c) {
    c.validate();
    ModelParams p;
    p.config = c;
    p.for_each([&](const char* name, Matrix& m) {
      const auto [r, k] = shape(c, name);
      m = Matrix::Zero(r, k);
    });
    return p;
  }

  /// Matrices and vectors uniform(-0.1, 0.1), biases zero. Each tensor draws
  /// from its own named substream.
  static ModelParams init(const ModelConfig& c, std::uint64_t seed) {
    ModelParams p = zeros(c);
    p.for_each([&](const char* name, Matrix& m) {
      if (is_bias(name)) return;
      Rng rng(seed, std::string("init/") + name);
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.uniform(-0.1, 0.1);
    });
    return p;
  }

  /// Same-shaped tensors filled with zeros (a gradient buffer).
  ModelParams zeros_like() const { return zeros(config); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const char*, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    for_each([&](const char*, const Matrix& m) { ok = ok && m.allFinite(); });
    return ok;
  }
};

/// Applies f(name, a_tensor, b_tensor) over two same-config parameter sets.
template <class A, class B, class F>
void zip_params(A& a, B& b, F&& f) {
  std::vector<std::pair<const char*, decltype(&a.E)>> left;
  std::vector<decltype(&b.E)> right;
  a.for_each([&](const char* n, auto& m) { left.emplace_back(n, &m); });
  b.for_each([&](const char*, auto& m) { right.push_back(&m); });
  for (std::size_t i = 0; i < left.size(); ++i) {
    if (left[i].second->rows() != right[i]->rows() || left[i].second->cols() != right[i]->cols())
      throw ValidationError(std::string("tensor shape mismatch: ") + left[i].first);
    f(left[i].first, *left[i].second, *right[i]);
  }
}

inline double max_abs_diff(const ModelParams& a, const ModelParams& b) {
  double m = 0.0;
  zip_params(a, b, [&](const char*, const Matrix& x, const Matrix& y) {
    if (x.size()) m = std::max(m, (x - y).cwiseAbs().maxCoeff());
  });
  return m;
}

/// Binds parameter tensors onto a tape on first use. With `trainable` false
/// they enter as constants and nothing is recorded for the backward sweep.
class Bound {
 public:
  Bound(ad::Tape& tape, const ModelParams& params, bool trainable = true)
      : tape_(tape), params_(params), trainable_(trainable) {}

  Var operator()(const Matrix& tensor) {
    auto it = vars_.find(&tensor);
    if (it != vars_.end()) return it->second;
    Var v = trainable_ ? tape_.leaf(tensor) : tape_.constant(tensor);
    vars_.emplace(&tensor, v);
    return v;
  }

  ad::Tape& tape() { return tape_; }
  const ModelParams& params() const { return params_; }
  const ModelConfig& config() const { return params_.config; }

  /// Adds d(root)/d(param) into `grads` after tape.backward(root). Unbound
  /// tensors receive nothing (their gradient is zero).
  void accumulate_grads(ModelParams& grads) const {
    if (!tape_.backward_done()) throw UsageError("gradients requested before a backward pass");
    zip_params(params_, grads, [&](const char*, const Matrix& p, Matrix& g) {
      auto it = vars_.find(&p);
      if (it != vars_.end()) g += tape_.grad(it->second);
    });
  }

 private:
  ad::Tape& tape_;
  const ModelParams& params_;
  bool trainable_;
  std::unordered_map<const Matrix*, Var> vars_;
};

/// Runs `loss_fn(Bound&) -> Var` and returns the gradient of the scalar it
/// produces, with zero for tensors it never touched.
template <class F>
ModelParams gradients(const ModelParams& params, F&& loss_fn, double* loss_out = nullptr) {
  ad::Tape tape;
  Bound b(tape, params);
  Var loss = loss_fn(b);
  tape.backward(loss);
  ModelParams g = params.zeros_like();
  b.accumulate_grads(g);
  if (loss_out) *loss_out = loss.scalar();
  return g;
}

// ---------------------------------------------------------------------------
// Inputs

struct EncodedExample {
  std::vector<int> query;
  std::vector<std::vector<std::vector<int>>> paragraphs;  // [m][k] -> token ids
  std::vector<std::vector<int>> sentence_labels;
  int y = 0;
  std::vector<int> target;  // without EOS

  std::size_t sentence_count() const {
    std::size_t n = 0;
    for (const auto& p : paragraphs) n += p.size();
    return n;
  }
};

inline EncodedExample encode_example(const Example& ex, const Vocab& vocab) {
  EncodedExample out;
  out.query = vocab.encode(ex.query);
  for (const auto& p : ex.context.paragraphs) {
    std::vector<std::vector<int>> ps;
    std::vector<int> ls;
    for (const auto& s : p.sentences) {
      ps.push_back(vocab.encode(s.tokens));
      ls.push_back(s.answerable ? 1 : 0);
    }
    out.paragraphs.push_back(std::move(ps));
    out.sentence_labels.push_back(std::move(ls));
  }
  out.y = ex.y;
  out.target = vocab.encode(ex.target.tokens);
  return out;
}

/// [CLS] s0 [SEP] s1 [SEP] s2 ... with a per-position flag set when the token
/// also occurs in a different segment.
struct Sequence {
  std::vector<int> tokens;
  std::vector<int> flags;
  std::vector<std::pair<int, int>> segments;  // [start, end) of each segment
};

inline Sequence build_sequence(const std::vector<const std::vector<int>*>& segments) {
  Sequence s;
  s.tokens.push_back(kCls);
  std::vector<std::unordered_set<int>> members;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    if (i) s.tokens.push_back(kSep);
    const int start = static_cast<int>(s.tokens.size());
    s.tokens.insert(s.tokens.end(), segments[i]->begin(), segments[i]->end());
    s.segments.emplace_back(start, static_cast<int>(s.tokens.size()));
    members.emplace_back(segments[i]->begin(), segments[i]->end());
  }
  s.flags.assign(s.tokens.size(), 0);
  for (std::size_t i = 0; i < segments.size(); ++i)
    for (int j = s.segments[i].first; j < s.segments[i].second; ++j)
      for (std::size_t o = 0; o < segments.size(); ++o)
        if (o != i && members[o].count(s.tokens[j])) {
          s.flags[j] = 1;
          break;
        }
  return s;
}

inline void check_tokens(const std::vector<int>& ids, int vocab_size) {
  for (int t : ids)
    if (t < 0 || t >= vocab_size) throw ValidationError("token index " + std::to_string(t) + " out of range");
}

// ---------------------------------------------------------------------------
// Differentiable building blocks

/// One self-attention mixing layer with a tanh output affine: L x d states.
inline Var encode_sequence(Bound& b, const Sequence& seq) {
  const ModelParams& p = b.params();
  check_tokens(seq.tokens, p.config.vocab_size);
  Var x = ad::gather_rows(b(p.E), seq.tokens) + ad::gather_rows(b(p.X), seq.flags);
  Var q = ad::matmul_nt(x, b(p.W_q));
  Var k = ad::matmul_nt(x, b(p.W_k));
  Var v = ad::matmul_nt(x, b(p.W_v));
  Var a = ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(p.config.d))));
  return ad::tanh(ad::add_bias(ad::matmul_nt(ad::matmul(a, v), b(p.W_o)), b(p.b_o)));
}

/// sigma(W_cls h + b_cls) for each row of h.
inline Var classify(Bound& b, const Var& h) {
  return ad::sigmoid(ad::add_bias(ad::matmul_nt(h, b(b.params().W_cls)), b(b.params().b_cls)));
}

/// Energies v^T tanh(W_a h_k + b_a), one per row: K x 1.
inline Var sentence_energies(Bound& b, const Var& h) {
  const ModelParams& p = b.params();
  return ad::matmul(ad::tanh(ad::add_bias(ad::matmul_nt(h, b(p.W_a)), b(p.b_a))), b(p.v));
}

/// Energies v'^T tanh(W_a' y_P + b_a') for a column of paragraph scores: M x 1.
inline Var paragraph_energies(Bound& b, const Var& scores) {
  const ModelParams& p = b.params();
  return ad::matmul(ad::tanh(ad::add_bias(ad::matmul_nt(scores, b(p.W_a_prime)), b(p.b_a_prime))), b(p.v_prime));
}

/// Softmax over a column of energies, returned as a 1 x n row of weights.
inline Var attention_weights(const Var& energies) { return ad::softmax_rows(ad::transpose(energies)); }

inline Var uniform_weights(ad::Tape& t, Eigen::Index n) {
  return t.constant(Matrix::Constant(1, n, 1.0 / static_cast<double>(n)));
}

/// Everything the loss functions and the decoder need from one example.
struct Forward {
  Var sentence_scores;     // S x 1
  std::vector<Var> alpha;  // per paragraph, 1 x K
  Var paragraph_scores;    // M x 1
  Var beta;                // 1 x M
  Var ranking_score;       // 1 x 1
  Var h_cls;               // 1 x d, sum_m beta_m sum_k alpha_mk h_CLS(m,k)
  Var q_bar;               // 1 x d
  Var cls_rows;            // S x d
  Var h_k;                 // S x d
  Var src_states;          // N x d copy source
  Var src_log_prior;       // 1 x N
  std::vector<int> src_tokens;
};

inline Forward forward(Bound& b, const EncodedExample& ex, Aggregation agg) {
  ad::Tape& t = b.tape();
  if (ex.paragraphs.empty()) throw ValidationError("forward: empty context");
  if (ex.query.empty()) throw ValidationError("forward: empty query");
  const int nq = static_cast<int>(ex.query.size());

  Forward f;
  std::vector<Var> cls_rows, hk_rows, query_states, sentence_states;
  f.src_tokens = ex.query;
  for (const auto& para : ex.paragraphs) {
    if (para.empty()) throw ValidationError("forward: empty paragraph");
    for (const auto& sent : para) {
      if (sent.empty()) throw ValidationError("forward: empty sentence");
      const Sequence seq = build_sequence({&ex.query, &sent});
      Var h = encode_sequence(b, seq);
      cls_rows.push_back(ad::row_slice(h, 0, 1));
      query_states.push_back(ad::row_slice(h, 1, nq));
      sentence_states.push_back(ad::row_slice(h, nq + 2, static_cast<Eigen::Index>(sent.size())));
      hk_rows.push_back(ad::mean_rows(sentence_states.back()));
      f.src_tokens.insert(f.src_tokens.end(), sent.begin(), sent.end());
    }
  }
  f.cls_rows = ad::concat_rows(cls_rows);
  f.h_k = ad::concat_rows(hk_rows);
  f.sentence_scores = classify(b, f.cls_rows);
  Var energies;
  if (agg == Aggregation::Attention) energies = sentence_energies(b, f.h_k);

  std::vector<Var> para_scores, para_h;
  Eigen::Index off = 0;
  for (const auto& para : ex.paragraphs) {
    const auto K = static_cast<Eigen::Index>(para.size());
    Var alpha = agg == Aggregation::Attention ? attention_weights(ad::row_slice(energies, off, K)) : uniform_weights(t, K);
    para_scores.push_back(ad::matmul(alpha, ad::row_slice(f.sentence_scores, off, K)));
    para_h.push_back(ad::matmul(alpha, ad::row_slice(f.cls_rows, off, K)));
    f.alpha.push_back(alpha);
    off += K;
  }
  f.paragraph_scores = ad::concat_rows(para_scores);
  const auto M = static_cast<Eigen::Index>(ex.paragraphs.size());
  f.beta = agg == Aggregation::Attention ? attention_weights(paragraph_energies(b, f.paragraph_scores))
                                         : uniform_weights(t, M);
  f.ranking_score = ad::matmul(f.beta, f.paragraph_scores);
  f.h_cls = ad::matmul(f.beta, ad::concat_rows(para_h));

  // Query states averaged over the per-sentence passes.
  Var qsum = query_states[0];
  for (std::size_t i = 1; i < query_states.size(); ++i) qsum = qsum + query_states[i];
  Var qmean = ad::scale(qsum, 1.0 / static_cast<double>(query_states.size()));
  f.q_bar = ad::mean_rows(qmean);

  // Copy prior: half the mass on the query, half spread by beta_m alpha_mk.
  std::vector<Var> prior{t.constant(Matrix::Constant(1, nq, 0.5 / nq))};
  std::size_t s = 0;
  for (std::size_t m = 0; m < ex.paragraphs.size(); ++m)
    for (std::size_t k = 0; k < ex.paragraphs[m].size(); ++k, ++s) {
      const auto n = static_cast<Eigen::Index>(ex.paragraphs[m][k].size());
      Var w = ad::matmul(ad::element(f.beta, 0, static_cast<Eigen::Index>(m)),
                         ad::element(f.alpha[m], 0, static_cast<Eigen::Index>(k)));
      prior.push_back(ad::matmul(w, t.constant(Matrix::Constant(1, n, 0.5 / static_cast<double>(n)))));
    }
  f.src_log_prior = ad::log_clamped(ad::concat_cols(prior));
  std::vector<Var> src{qmean};
  src.insert(src.end(), sentence_states.begin(), sentence_states.end());
  f.src_states = ad::concat_rows(src);
  return f;
}

/// Teacher-forced decoder: row t holds log P(. | prev[0..t], Q, C, mode).
inline Var decoder_logprobs(Bound& b, const Forward& f, Mode mode, const std::vector<int>& prev,
                            double temperature = 1.0) {
  const ModelParams& p = b.params();
  const auto T = static_cast<Eigen::Index>(prev.size());
  if (T == 0) throw ValidationError("decoder: empty prefix");
  if (T > p.config.max_len) throw ValidationError("decoder: sequence longer than max_len");
  check_tokens(prev, p.config.vocab_size);
  Var m = ad::transpose(b(mode == Mode::Answer ? p.m_ans : p.m_ref));
  Var c = ad::concat_cols({ad::gather_rows(b(p.E), prev), ad::broadcast_rows(f.q_bar + f.h_cls, T),
                           ad::broadcast_rows(m, T) + ad::row_slice(b(p.P), 0, T)});
  Var u = ad::tanh(ad::add_bias(ad::matmul_nt(c, b(p.W_h)), b(p.b_h)));
  Var scores = ad::add_bias(ad::matmul_nt(ad::matmul_nt(u, b(p.W_c)), f.src_states), f.src_log_prior);
  Var copy = ad::scatter_cols(ad::softmax_rows(scores), f.src_tokens, p.config.vocab_size);
  Var gate = ad::add_bias(ad::matmul_nt(u, b(p.w_g)), b(p.b_g));
  Var logits = ad::add_bias(ad::matmul_nt(u, b(p.W_out)), b(p.b_out)) + ad::scale_rows(gate, copy);
  if (temperature != 1.0) logits = ad::scale(logits, 1.0 / temperature);
  return ad::log_softmax_rows(logits);
}

/// Decoder inputs for a target: [BOS] + target and target + [EOS].
inline std::pair<std::vector<int>, std::vector<int>> teacher_forcing(const std::vector<int>& target) {
  std::vector<int> prev{kBos};
  prev.insert(prev.end(), target.begin(), target.end());
  std::vector<int> next = target;
  next.push_back(kEos);
  return {prev, next};
}

/// Reward-model sequence: [CLS] query [SEP] context [SEP] response.
inline Sequence reward_sequence(const EncodedExample& ex, const std::vector<int>& response) {
  std::vector<int> ctx;
  for (const auto& p : ex.paragraphs)
    for (const auto& s : p) ctx.insert(ctx.end(), s.begin(), s.end());
  return build_sequence({&ex.query, &ctx, &response});
}

inline Var reward_var(Bound& b, const EncodedExample& ex, const std::vector<int>& response) {
  if (response.empty()) throw ValidationError("reward: empty response");
  Var h = ad::row_slice(encode_sequence(b, reward_sequence(ex, response)), 0, 1);
  return ad::add_bias(ad::matmul(h, b(b.params().w_r)), b(b.params().b_r));
}

// ---------------------------------------------------------------------------
// Plain evaluation

inline bool decide(double score, double tau) { return score >= tau; }

struct AnswerabilityOutput {
  std::vector<double> sentence_scores;                 // flattened, paragraph-major
  std::vector<std::vector<double>> sentence_attn;      // alpha per paragraph
  std::vector<std::vector<double>> sentence_scores_by_paragraph;
  std::vector<double> paragraph_scores;
  std::vector<double> paragraph_attn;                  // beta
  double ranking_score = 0.0;
  int y_pred = 0;
};

/// Constant-valued decoder context extracted from a forward pass.
struct DecoderContext {
  Eigen::RowVectorXd summary;  // q_bar + h_CLS
  Matrix src_states;
  Eigen::RowVectorXd src_log_prior;
  std::vector<int> src_tokens;
};

struct EncodedContext {
  std::vector<Matrix> states;  // per sentence pass, L x d
  Matrix h_k;                  // S x d
  Matrix cls_rows;             // S x d
  Eigen::RowVectorXd h_cls;    // pooled
  Eigen::RowVectorXd q_bar;
};

struct Inference {
  AnswerabilityOutput answer;
  DecoderContext decoder;
  EncodedContext encoded;
};

inline std::vector<double> row_values(const Matrix& m) { return {m.data(), m.data() + m.size()}; }

inline Inference infer(const ModelParams& params, const EncodedExample& ex, Aggregation agg, double tau) {
  ad::Tape tape;
  Bound b(tape, params, false);
  const Forward f = forward(b, ex, agg);
  Inference out;
  AnswerabilityOutput& a = out.answer;
  a.sentence_scores = row_values(f.sentence_scores.value());
  std::size_t off = 0;
  for (std::size_t m = 0; m < f.alpha.size(); ++m) {
    a.sentence_attn.push_back(row_values(f.alpha[m].value()));
    const std::size_t K = a.sentence_attn.back().size();
    a.sentence_scores_by_paragraph.emplace_back(a.sentence_scores.begin() + off, a.sentence_scores.begin() + off + K);
    off += K;
  }
  a.paragraph_scores = row_values(f.paragraph_scores.value());
  a.paragraph_attn = row_values(f.beta.value());
  a.ranking_score = f.ranking_score.scalar();
  a.y_pred = decide(a.ranking_score, tau) ? 1 : 0;
  out.decoder.summary = (f.q_bar.value() + f.h_cls.value()).row(0);
  out.decoder.src_states = f.src_states.value();
  out.decoder.src_log_prior = f.src_log_prior.value().row(0);
  out.decoder.src_tokens = f.src_tokens;
  out.encoded.h_k = f.h_k.value();
  out.encoded.cls_rows = f.cls_rows.value();
  out.encoded.h_cls = f.h_cls.value().row(0);
  out.encoded.q_bar = f.q_bar.value().row(0);
  return out;
}

/// Per-sentence encoding of a query against each sentence of a flat list.
inline EncodedContext encode(const std::vector<int>& query, const std::vector<std::vector<int>>& sentences,
                             const ModelParams& params) {
  EncodedExample ex;
  ex.query = query;
  ex.paragraphs.push_back(sentences);
  ad::Tape tape;
  Bound b(tape, params, false);
  EncodedContext out;
  const int nq = static_cast<int>(query.size());
  out.h_k.resize(static_cast<Eigen::Index>(sentences.size()), params.config.d);
  out.cls_rows.resizeLike(out.h_k);
  out.q_bar = Eigen::RowVectorXd::Zero(params.config.d);
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const Sequence seq = build_sequence({&query, &sentences[i]});
    const Matrix h = encode_sequence(b, seq).value();
    const auto r = static_cast<Eigen::Index>(i);
    out.cls_rows.row(r) = h.row(0);
    out.h_k.row(r) = h.middleRows(nq + 2, static_cast<Eigen::Index>(sentences[i].size())).colwise().mean();
    out.q_bar += h.middleRows(1, nq).colwise().mean();
    out.states.push_back(h);
  }
  if (!sentences.empty()) out.q_bar /= static_cast<double>(sentences.size());
  out.h_cls = out.cls_rows.colwise().mean();
  return out;
}

inline double classify(const Eigen::RowVectorXd& h_cls, const ModelParams& p) {
  const double z = (p.W_cls.row(0).dot(h_cls)) + p.b_cls(0, 0);
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

inline std::vector<double> softmax(const std::vector<double>& e) {
  if (e.empty()) throw ValidationError("softmax: empty input");
  double mx = e[0];
  for (double x : e) mx = std::max(mx, x);
  std::vector<double> out(e.size());
  double z = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) z += (out[i] = std::exp(e[i] - mx));
  for (double& x : out) x /= z;
  return out;
}

inline std::vector<double> sentence_attention(const Matrix& h_k, const ModelParams& p) {
  if (h_k.rows() < 1) throw ValidationError("sentence_attention: K must be >= 1");
  const Matrix hidden = ((h_k * p.W_a.transpose()).rowwise() + p.b_a.col(0).transpose()).array().tanh().matrix();
  return softmax(row_values(hidden * p.v));
}

inline std::vector<double> ranking_attention(const std::vector<double>& scores, const ModelParams& p) {
  if (scores.empty()) throw ValidationError("ranking_attention: M must be >= 1");
  std::vector<double> e;
  for (double s : scores)
    e.push_back(p.v_prime.col(0).dot((p.W_a_prime.col(0) * s + p.b_a_prime.col(0)).array().tanh().matrix()));
  return softmax(e);
}

/// Convex combination sum_i w_i x_i (paragraph and ranking scores).
inline double weighted_score(const std::vector<double>& w, const std::vector<double>& x) {
  if (w.size() != x.size() || w.empty()) throw ValidationError("weighted_score: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * x[i];
  return s;
}
inline double paragraph_score(const std::vector<double>& alpha, const std::vector<double>& scores) {
  return weighted_score(alpha, scores);
}
inline double ranking_score(const std::vector<double>& beta, const std::vector<double>& scores) {
  return weighted_score(beta, scores);
}

/// Log-probabilities of the next token after `prefix` (which starts with BOS).
inline Eigen::VectorXd decode_step_log(const std::vector<int>& prefix, const DecoderContext& ctx, Mode mode,
                                       const ModelParams& p, double temperature = 1.0) {
  if (prefix.empty()) throw ValidationError("decode_step: empty prefix");
  const auto t = static_cast<Eigen::Index>(prefix.size() - 1);
  if (t >= p.config.max_len) throw ValidationError("decode_step: prefix longer than max_len");
  const int prev = prefix.back();
  if (prev < 0 || prev >= p.config.vocab_size) throw ValidationError("decode_step: token out of range");
  const int d = p.config.d;
  Eigen::VectorXd c(3 * d);
  c.segment(0, d) = p.E.row(prev).transpose();
  c.segment(d, d) = ctx.summary.transpose();
  c.segment(2 * d, d) = (mode == Mode::Answer ? p.m_ans : p.m_ref).col(0) + p.P.row(t).transpose();
  const Eigen::VectorXd u = (p.W_h * c + p.b_h.col(0)).array().tanh().matrix();
  Eigen::VectorXd scores = ctx.src_states * (p.W_c * u) + ctx.src_log_prior.transpose();
  scores = (scores.array() - scores.maxCoeff()).exp().matrix();
  scores /= scores.sum();
  Eigen::VectorXd logits = p.W_out * u + p.b_out.col(0);
  const double gate = p.w_g.row(0).dot(u) + p.b_g(0, 0);
  for (std::size_t j = 0; j < ctx.src_tokens.size(); ++j) logits(ctx.src_tokens[j]) += gate * scores(static_cast<Eigen::Index>(j));
  logits /= temperature;
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return (logits.array() - lse).matrix();
}

inline Eigen::VectorXd decode_step(const std::vector<int>& prefix, const DecoderContext& ctx, Mode mode,
                                   const ModelParams& p) {
  return decode_step_log(prefix, ctx, mode, p).array().exp().matrix();
}

struct Generation {
  int y_pred = 0;
  Mode mode = Mode::Refusal;
  std::vector<int> tokens;  // without EOS
  bool stopped_at_eos = false;
  AnswerabilityOutput answer;
};

/// Greedy (temperature 0) or sampled generation with the mode picked by the
/// ranking-level decision. Aggregation follows params.config.
inline Generation generate(const ModelParams& params, const EncodedExample& ex, double tau, int max_len,
                           double temperature, Rng* rng = nullptr) {
  if (max_len < 1) throw ValidationError("generate: max_len must be >= 1");
  if (temperature < 0) throw ValidationError("generate: temperature must be >= 0");
  if (temperature > 0 && !rng) throw ValidationError("generate: sampling needs an rng");
  const Inference inf = infer(params, ex, params.config.aggregation, tau);
  Generation g;
  g.answer = inf.answer;
  g.y_pred = inf.answer.y_pred;
  g.mode = g.y_pred == 1 ? Mode::Answer : Mode::Refusal;
  const int steps = std::min(max_len, params.config.max_len);
  std::vector<int> prefix{kBos};
  for (int t = 0; t < steps; ++t) {
    const Eigen::VectorXd lp = decode_step_log(prefix, inf.decoder, g.mode, params, temperature > 0 ? temperature : 1.0);
    int next;
    if (temperature == 0) {
      lp.maxCoeff(&next);
    } else {
      const Eigen::VectorXd pr = lp.array().exp().matrix();
      next = static_cast<int>(rng->categorical(std::span<const double>(pr.data(), static_cast<std::size_t>(pr.size()))));
    }
    if (next == kEos) {
      g.stopped_at_eos = true;
      break;
    }
    g.tokens.push_back(next);
    prefix.push_back(next);
  }
  return g;
}

inline double reward_score(const ModelParams& params, const EncodedExample& ex, const std::vector<int>& response) {
  ad::Tape tape;
  Bound b(tape, params, false);
  return reward_var(b, ex, response).scalar();
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr const char* kCheckpointFormat = "rul-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::ordered_json config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d", c.d},     {"d_a", c.d_a}, {"d_a_prime", c.d_a_prime},
          {"max_len", c.max_len},       {"tau", c.tau}, {"aggregation", to_string(c.aggregation)}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d = j.at("d").get<int>();
    c.d_a = j.at("d_a").get<int>();
    c.d_a_prime = j.at("d_a_prime").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.tau = j.at("tau").get<double>();
    c.aggregation = parse_aggregation(j.at("aggregation").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint config: ") + e.what());
  }
  return c;
}

inline std::string checkpoint_to_string(const ModelParams& p, const Vocab& vocab) {
  if (vocab.size() != p.config.vocab_size) throw ValidationError("checkpoint: vocab size differs from config");
  nlohmann::ordered_json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["config"] = config_to_json(p.config);
  j["vocab"] = vocab.tokens();
  nlohmann::ordered_json tensors;
  p.for_each([&](const char* name, const Matrix& m) {
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
    tensors[name] = {{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
  });
  j["tensors"] = tensors;
  return j.dump() + "\n";
}

inline void save_checkpoint(const ModelParams& p, const Vocab& vocab, const std::string& path) {
  write_file_atomic(path, checkpoint_to_string(p, vocab));
}

struct Checkpoint {
  ModelParams params;
  Vocab vocab;
};

inline Checkpoint checkpoint_from_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("checkpoint: malformed JSON: ") + e.what());
  }
  if (j.value("format", "") != kCheckpointFormat) throw ValidationError("checkpoint: unknown format");
  if (j.value("version", 0) != kCheckpointVersion) throw ValidationError("checkpoint: unsupported version");
  Checkpoint ck;
  ck.params.config = config_from_json(j.at("config"));
  ck.params.config.validate();
  ck.vocab = Vocab(j.at("vocab").get<std::vector<std::string>>());
  if (ck.vocab.size() != ck.params.config.vocab_size) throw ValidationError("checkpoint: vocab size differs from config");
  const auto& tensors = j.at("tensors");
  ck.params.for_each([&](const char* name, Matrix& m) {
    if (!tensors.contains(name)) throw ValidationError(std::string("checkpoint: missing tensor ") + name);
    const auto& t = tensors.at(name);
    const auto [r, c] = ModelParams::shape(ck.params.config, name);
    if (t.at("rows").get<int>() != r || t.at("cols").get<int>() != c)
      throw ValidationError(std::string("checkpoint: shape mismatch for ") + name);
    const auto data = t.at("data").get<std::vector<double>>();
    if (data.size() != static_cast<std::size_t>(r) * static_cast<std::size_t>(c))
      throw ValidationError(std::string("checkpoint: wrong element count for ") + name);
    m.resize(r, c);
    for (int i = 0; i < r; ++i)
      for (int k = 0; k < c; ++k) m(i, k) = data[static_cast<std::size_t>(i) * c + k];
  });
  if (!ck.params.all_finite()) throw ValidationError("checkpoint: non-finite entries");
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) { return checkpoint_from_string(read_file(path)); }

}  // namespace rul
