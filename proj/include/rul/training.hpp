#pragma once

// Optimizers, finite-difference gradient checks, and the three training
// stages: supervised fine-tuning, reward-model fitting, KL-regularised
// policy-gradient refinement.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rul/corpus.hpp"
#include "rul/errors.hpp"
#include "rul/losses.hpp"
#include "rul/model.hpp"
#include "rul/rng.hpp"

namespace rul {

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { Sgd, Adam };

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }
inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw ConfigError("optimizer must be sgd or adam, got " + s);
}

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::optional<ModelParams> m, v;

  explicit OptimizerState(OptimizerKind k = OptimizerKind::Adam) : kind(k) {}
};

/// Rescales `grads` in place so its global L2 norm is at most `max_norm`;
/// returns the norm before clipping. max_norm <= 0 disables clipping.
inline double clip_global_norm(ModelParams& grads, double max_norm) {
  double sq = 0.0;
  grads.for_each([&](const char*, const Matrix& g) { sq += g.squaredNorm(); });
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) grads.for_each([&](const char*, Matrix& g) { g *= max_norm / norm; });
  return norm;
}

inline void optimizer_step(ModelParams& params, const ModelParams& grads, OptimizerState& st, double lr) {
  if (st.kind == OptimizerKind::Sgd) {
    zip_params(params, grads, [&](const char*, Matrix& p, const Matrix& g) { p -= lr * g; });
    ++st.step;
    return;
  }
  if (!st.m) {
    st.m = params.zeros_like();
    st.v = params.zeros_like();
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  std::vector<Matrix*> ms, vs;
  st.m->for_each([&](const char*, Matrix& x) { ms.push_back(&x); });
  st.v->for_each([&](const char*, Matrix& x) { vs.push_back(&x); });
  std::size_t i = 0;
  zip_params(params, grads, [&](const char*, Matrix& p, const Matrix& g) {
    Matrix& m = *ms[i];
    Matrix& v = *vs[i];
    ++i;
    m = st.beta1 * m + (1.0 - st.beta1) * g;
    v = st.beta2 * v + (1.0 - st.beta2) * g.cwiseProduct(g);
    p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + st.eps);
  });
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  int epochs = 50;
  int batch_size = 16;
  double lr = 3e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::uint64_t seed = 0;
  loss::SftWeights weights;
  double tau = 0.5;
  int patience = 5;

  void validate(const std::string& section = "sft") const {
    if (epochs < 1) throw ConfigError(section + ".epochs must be >= 1");
    if (batch_size < 1) throw ConfigError(section + ".batch_size must be >= 1");
    if (!(lr > 0)) throw ConfigError(section + ".lr must be > 0");
    if (patience < 1) throw ConfigError(section + ".patience must be >= 1");
    if (!(tau > 0 && tau < 1)) throw ConfigError(section + ".tau must be in (0, 1)");
    weights.validate();
  }
};

struct RlTrainConfig {
  loss::RlConfig rl;
  int iterations = 150;
  double lr = 0.05;
  // Plain SGD: Adam's per-coordinate rescaling undoes the 1 / (1 + beta) loss
  // scaling, so a large beta would no longer hold the policy at the reference.
  OptimizerKind optimizer = OptimizerKind::Sgd;
  std::uint64_t seed = 0;
  double clip_norm = 1.0;  // global gradient-norm bound, <= 0 disables
  double kl_bound = 20.0;
  int max_len = 40;
  int heldout_size = 200;
  int heldout_samples = 8;  // responses drawn per held-out prompt
  double tau = 0.5;

  void validate() const {
    rl.validate();
    if (iterations < 1) throw ConfigError("rl.iterations must be >= 1");
    if (!(lr > 0)) throw ConfigError("rl.lr must be > 0");
    if (!std::isfinite(clip_norm)) throw ConfigError("rl.clip_norm must be finite");
    if (!(kl_bound > 0)) throw ConfigError("rl.kl_bound must be > 0");
    if (max_len < 1) throw ConfigError("rl.max_len must be >= 1");
    if (heldout_size < 1) throw ConfigError("rl.heldout_size must be >= 1");
    if (heldout_samples < 1) throw ConfigError("rl.heldout_samples must be >= 1");
    if (!(tau > 0 && tau < 1)) throw ConfigError("rl.tau must be in (0, 1)");
  }
};

/// Progress sink: receives one JSON object per epoch or iteration.
using ProgressFn = std::function<void(const nlohmann::ordered_json&)>;

struct EpochRecord {
  int epoch = 0;
  double train_bce = 0, train_nll = 0, train_loss = 0;
  double valid_bce = 0, valid_nll = 0, valid_loss = 0;
  double valid_accuracy = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0;  // wall clock; kept out of serialized reports
};

struct TrainReport {
  std::string stage;
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  bool early_stopped = false;
  std::string checkpoint;
};

inline nlohmann::ordered_json epoch_to_json(const EpochRecord& e, bool with_time) {
  nlohmann::ordered_json j{{"epoch", e.epoch},         {"train_bce", e.train_bce}, {"train_nll", e.train_nll},
                           {"train_loss", e.train_loss}, {"valid_bce", e.valid_bce}, {"valid_nll", e.valid_nll},
                           {"valid_loss", e.valid_loss}};
  if (!std::isnan(e.valid_accuracy)) j["valid_accuracy"] = e.valid_accuracy;
  if (with_time) j["seconds"] = e.seconds;
  return j;
}

inline nlohmann::ordered_json report_to_json(const TrainReport& r) {
  nlohmann::ordered_json j;
  j["stage"] = r.stage;
  auto eps = nlohmann::ordered_json::array();
  for (const auto& e : r.epochs) eps.push_back(epoch_to_json(e, false));
  j["epochs"] = eps;
  j["best_epoch"] = r.best_epoch;
  j["early_stopped"] = r.early_stopped;
  j["checkpoint"] = r.checkpoint;
  return j;
}

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline void require_finite(double v, const std::string& where) {
  if (!std::isfinite(v)) throw TrainingAbort("non-finite loss at " + where);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Loss graphs shared by training and gradient checks

struct SftLossVars {
  Var total, bce, nll;
};

inline SftLossVars sft_batch_loss(Bound& b, const std::vector<const EncodedExample*>& batch,
                                  const loss::SftWeights& w, Aggregation agg) {
  std::vector<Var> scores, logprobs;
  std::vector<int> ys;
  std::vector<std::vector<int>> targets;
  for (const EncodedExample* ex : batch) {
    const Forward f = forward(b, *ex, agg);
    scores.push_back(f.ranking_score);
    ys.push_back(ex->y);
    auto [prev, next] = teacher_forcing(ex->target);
    logprobs.push_back(decoder_logprobs(b, f, ex->y == 1 ? Mode::Answer : Mode::Refusal, prev));
    targets.push_back(std::move(next));
  }
  SftLossVars out;
  out.bce = loss::bce(ad::concat_rows(scores), ys);
  out.nll = loss::nll(logprobs, targets);
  out.total = loss::sft(out.bce, out.nll, w);
  return out;
}

/// Response fed to the reward model: generated tokens followed by EOS.
inline std::vector<int> with_eos(std::vector<int> tokens) {
  tokens.push_back(kEos);
  return tokens;
}

struct ScoredPair {
  const EncodedExample* example = nullptr;
  std::vector<int> chosen;    // with EOS
  std::vector<int> rejected;  // with EOS
};

inline Var rm_batch_loss(Bound& b, const std::vector<const ScoredPair*>& batch) {
  Var total;
  for (const ScoredPair* p : batch) {
    Var l = loss::rm_pairwise(reward_var(b, *p->example, p->chosen), reward_var(b, *p->example, p->rejected));
    total = total.valid() ? total + l : l;
  }
  return ad::scale(total, 1.0 / static_cast<double>(batch.size()));
}

// ---------------------------------------------------------------------------
// Gradient check

enum class LossSelector { Bce, Nll, Sft, Rm, Kl };
inline constexpr std::array<LossSelector, 5> kAllLosses = {LossSelector::Bce, LossSelector::Nll, LossSelector::Sft,
                                                           LossSelector::Rm, LossSelector::Kl};

inline const char* to_string(LossSelector s) {
  switch (s) {
    case LossSelector::Bce: return "bce";
    case LossSelector::Nll: return "nll";
    case LossSelector::Sft: return "sft";
    case LossSelector::Rm: return "rm";
    case LossSelector::Kl: return "kl";
  }
  return "?";
}

inline LossSelector parse_loss_selector(const std::string& s) {
  for (LossSelector l : kAllLosses)
    if (s == to_string(l)) return l;
  throw ConfigError("loss must be one of all|bce|nll|sft|rm|kl, got " + s);
}

struct GradCheckReport {
  LossSelector loss = LossSelector::Bce;
  double max_rel_error = 0.0;
  std::string worst_tensor;
  Eigen::Index worst_row = 0, worst_col = 0;
  double worst_analytic = 0.0, worst_numeric = 0.0;
  std::size_t coordinates = 0;
  bool passed = false;
  std::string message;
};

/// Relative error with a floor on the denominator, so near-zero gradients are
/// compared absolutely. Central differences of a loss of size ~100 carry
/// roundoff near 1e-10; the floor keeps that noise two decades under tol.
inline constexpr double kRelErrorFloor = 1e-5;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kRelErrorFloor});
}

/// Scalar loss for a selector, built on `b` over a batch. The KL selector
/// compares against `reference` (policy distributions on the gold targets).
inline Var selector_loss(Bound& b, LossSelector sel, const std::vector<const EncodedExample*>& batch,
                         const ModelParams& reference) {
  switch (sel) {
    case LossSelector::Bce:
    case LossSelector::Nll:
    case LossSelector::Sft: {
      const SftLossVars l = sft_batch_loss(b, batch, {}, Aggregation::Attention);
      return sel == LossSelector::Bce ? l.bce : sel == LossSelector::Nll ? l.nll : l.total;
    }
    case LossSelector::Rm: {
      std::vector<ScoredPair> pairs;
      for (const EncodedExample* ex : batch) pairs.push_back({ex, with_eos(ex->target), {kUnk, kEos}});
      std::vector<const ScoredPair*> ptrs;
      for (const auto& p : pairs) ptrs.push_back(&p);
      return rm_batch_loss(b, ptrs);
    }
    case LossSelector::Kl: {
      Var total;
      for (const EncodedExample* ex : batch) {
        const Mode mode = ex->y == 1 ? Mode::Answer : Mode::Refusal;
        const auto prev = teacher_forcing(ex->target).first;
        ad::Tape ref_tape;
        Bound rb(ref_tape, reference, false);
        const Forward rf = forward(rb, *ex, Aggregation::Attention);
        const Matrix ref = decoder_logprobs(rb, rf, mode, prev).value().array().exp().matrix();
        const Forward f = forward(b, *ex, Aggregation::Attention);
        Var kl = loss::sequence_kl(decoder_logprobs(b, f, mode, prev), ref);
        total = total.valid() ? total + kl : kl;
      }
      return total;
    }
  }
  throw UsageError("unknown loss selector");
}

inline double selector_value(const ModelParams& p, LossSelector sel, const std::vector<const EncodedExample*>& batch,
                             const ModelParams& reference) {
  ad::Tape tape;
  Bound b(tape, p, false);
  return selector_loss(b, sel, batch, reference).scalar();
}

/// Central-difference check of every tensor (all coordinates, or a seeded
/// subsample of `max_coords` per tensor).
inline GradCheckReport grad_check(const ModelParams& params, const std::vector<EncodedExample>& batch,
                                  LossSelector sel, double eps = 1e-4, double tol = 1e-4,
                                  std::size_t max_coords = 200, std::uint64_t seed = 0) {
  if (batch.empty()) throw ValidationError("grad_check: empty batch");
  std::vector<const EncodedExample*> ptrs;
  for (const auto& ex : batch) ptrs.push_back(&ex);
  const ModelParams reference = ModelParams::init(params.config, substream_seed(seed, "gradcheck/reference"));

  GradCheckReport rep;
  rep.loss = sel;
  double f0 = 0.0;
  const ModelParams analytic = gradients(
      params, [&](Bound& b) { return selector_loss(b, sel, ptrs, reference); }, &f0);
  if (!std::isfinite(f0)) {
    rep.message = "non-finite loss at the base point";
    rep.max_rel_error = std::numeric_limits<double>::infinity();
    return rep;
  }

  ModelParams probe = params;
  std::vector<std::pair<const char*, Matrix*>> tensors;
  probe.for_each([&](const char* n, Matrix& m) { tensors.emplace_back(n, &m); });
  std::vector<const Matrix*> grads;
  analytic.for_each([&](const char*, const Matrix& m) { grads.push_back(&m); });

  Rng rng(seed, std::string("gradcheck/coords/") + to_string(sel));
  for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
    Matrix& m = *tensors[ti].second;
    std::vector<Eigen::Index> coords(static_cast<std::size_t>(m.size()));
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = static_cast<Eigen::Index>(i);
    if (coords.size() > max_coords) {
      rng.shuffle(coords);
      coords.resize(max_coords);
    }
    for (Eigen::Index c : coords) {
      double& x = m.data()[c];
      const double saved = x;
      x = saved + eps;
      const double fp = selector_value(probe, sel, ptrs, reference);
      x = saved - eps;
      const double fm = selector_value(probe, sel, ptrs, reference);
      x = saved;
      const Eigen::Index r = c % m.rows(), k = c / m.rows();
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        rep.max_rel_error = std::numeric_limits<double>::infinity();
        rep.worst_tensor = tensors[ti].first;
        rep.worst_row = r;
        rep.worst_col = k;
        rep.message = "non-finite loss at " + rep.worst_tensor + "(" + std::to_string(r) + "," + std::to_string(k) + ")";
        return rep;
      }
      const double numeric = (fp - fm) / (2.0 * eps);
      const double err = relative_error(grads[ti]->data()[c], numeric);
      ++rep.coordinates;
      if (err > rep.max_rel_error || rep.coordinates == 1) {
        rep.max_rel_error = err;
        rep.worst_tensor = tensors[ti].first;
        rep.worst_row = r;
        rep.worst_col = k;
        rep.worst_analytic = grads[ti]->data()[c];
        rep.worst_numeric = numeric;
      }
    }
  }
  rep.passed = rep.max_rel_error < tol;
  return rep;
}

struct GradCheckCase {
  ModelParams params;
  std::vector<EncodedExample> batch;
};

/// Small model and batch for finite-difference checks. Parameters are drawn
/// uniformly from [-0.5, 0.5] so the nonlinearities leave their linear regime.
inline GradCheckCase gradcheck_case(std::uint64_t seed, std::size_t batch_size = 3) {
  GenerationSpec spec;
  spec.n_train = 20;
  spec.n_valid = spec.n_test = 4;
  spec.k_max = 2;
  spec.m_max = 2;
  spec.seed = substream_seed(seed, "gradcheck/data");
  const Dataset ds = generate_dataset(spec);
  const Vocab vocab = build_vocab({&ds.train}, kBareRefusal);
  ModelConfig c;
  c.vocab_size = vocab.size();
  c.d = 6;
  c.d_a = c.d_a_prime = 4;
  c.max_len = 24;
  GradCheckCase out;
  out.params = ModelParams::zeros(c);
  out.params.for_each([&](const char* name, Matrix& m) {
    Rng r(seed, std::string("gradcheck/params/") + name);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.uniform(-0.5, 0.5);
  });
  for (std::size_t i = 0; i < batch_size && i < ds.train.size(); ++i) out.batch.push_back(encode_example(ds.train[i], vocab));
  return out;
}

// ---------------------------------------------------------------------------
// Stage 1: supervised fine-tuning

struct SftResult {
  ModelParams params;
  TrainReport report;
};

struct SftEval {
  double bce = 0, nll = 0, loss = 0, accuracy = 0;
};

inline SftEval evaluate_sft(const ModelParams& p, const std::vector<EncodedExample>& data, const loss::SftWeights& w,
                            Aggregation agg, double tau) {
  SftEval out;
  const std::size_t chunk = 32;
  std::size_t correct = 0;
  for (std::size_t s = 0; s < data.size(); s += chunk) {
    std::vector<const EncodedExample*> batch;
    for (std::size_t i = s; i < std::min(data.size(), s + chunk); ++i) batch.push_back(&data[i]);
    ad::Tape tape;
    Bound b(tape, p, false);
    const SftLossVars l = sft_batch_loss(b, batch, w, agg);
    const double n = static_cast<double>(batch.size());
    out.bce += l.bce.scalar() * n;
    out.nll += l.nll.scalar() * n;
  }
  for (const auto& ex : data) correct += infer(p, ex, agg, tau).answer.y_pred == ex.y;
  const double n = static_cast<double>(data.size());
  out.bce /= n;
  out.nll /= n;
  out.loss = loss::sft(out.bce, out.nll, w);
  out.accuracy = static_cast<double>(correct) / n;
  return out;
}

inline std::vector<EncodedExample> encode_all(const std::vector<Example>& data, const Vocab& vocab) {
  std::vector<EncodedExample> out;
  out.reserve(data.size());
  for (const auto& ex : data) out.push_back(encode_example(ex, vocab));
  return out;
}

inline SftResult train_sft(const std::vector<Example>& train, const std::vector<Example>& valid, const Vocab& vocab,
                           ModelConfig model, const TrainConfig& cfg, const ProgressFn& progress = {}) {
  cfg.validate();
  if (train.empty()) throw ValidationError("train_sft: empty training set");
  if (valid.empty()) throw ValidationError("train_sft: empty validation set");
  model.vocab_size = vocab.size();
  model.tau = cfg.tau;
  model.validate();
  const auto tr = encode_all(train, vocab);
  const auto va = encode_all(valid, vocab);
  for (const auto* set : {&tr, &va})
    for (const auto& ex : *set)
      if (static_cast<int>(ex.target.size()) + 1 > model.max_len)
        throw ConfigError("model.max_len is shorter than a target sequence");

  SftResult res;
  res.report.stage = "sft";
  ModelParams params = ModelParams::init(model, substream_seed(cfg.seed, "sft/init"));
  ModelParams best = params;
  double best_loss = std::numeric_limits<double>::infinity();
  OptimizerState opt(cfg.optimizer);
  Rng order_rng(cfg.seed, "sft/order");
  std::vector<std::size_t> order(tr.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  int since_best = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    order_rng.shuffle(order);
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<const EncodedExample*> batch;
      for (std::size_t i = s; i < std::min(order.size(), s + cfg.batch_size); ++i) batch.push_back(&tr[order[i]]);
      double bce_v = 0, nll_v = 0;
      const ModelParams g = gradients(params, [&](Bound& b) {
        const SftLossVars l = sft_batch_loss(b, batch, cfg.weights, model.aggregation);
        bce_v = l.bce.scalar();
        nll_v = l.nll.scalar();
        return l.total;
      });
      detail::require_finite(bce_v + nll_v, "sft epoch " + std::to_string(epoch));
      if (!g.all_finite()) throw TrainingAbort("non-finite gradient at sft epoch " + std::to_string(epoch));
      optimizer_step(params, g, opt, cfg.lr);
      const double n = static_cast<double>(batch.size());
      rec.train_bce += bce_v * n;
      rec.train_nll += nll_v * n;
    }
    rec.train_bce /= static_cast<double>(tr.size());
    rec.train_nll /= static_cast<double>(tr.size());
    rec.train_loss = loss::sft(rec.train_bce, rec.train_nll, cfg.weights);
    const SftEval ev = evaluate_sft(params, va, cfg.weights, model.aggregation, cfg.tau);
    detail::require_finite(ev.loss, "sft validation, epoch " + std::to_string(epoch));
    rec.valid_bce = ev.bce;
    rec.valid_nll = ev.nll;
    rec.valid_loss = ev.loss;
    rec.valid_accuracy = ev.accuracy;
    rec.seconds = detail::seconds_since(t0);
    res.report.epochs.push_back(rec);
    if (progress) progress(epoch_to_json(rec, true));
    if (ev.loss < best_loss) {
      best_loss = ev.loss;
      best = params;
      res.report.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      res.report.early_stopped = epoch < cfg.epochs;
      break;
    }
  }
  res.params = std::move(best);
  return res;
}

// ---------------------------------------------------------------------------
// Reward model

struct RmResult {
  ModelParams params;
  TrainReport report;
  double heldout_accuracy = 0.0;
};

inline std::vector<ScoredPair> score_pairs(const std::vector<PreferencePair>& pairs,
                                           const std::unordered_map<std::string, const EncodedExample*>& by_id,
                                           const Vocab& vocab) {
  std::vector<ScoredPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    auto it = by_id.find(p.example_id);
    if (it == by_id.end()) throw ValidationError("preference pair refers to unknown example " + p.example_id);
    out.push_back({it->second, with_eos(vocab.encode(p.chosen())), with_eos(vocab.encode(p.rejected()))});
  }
  return out;
}

/// Fraction of pairs whose preferred response scores strictly higher.
inline double pair_accuracy(const ModelParams& rm, const std::vector<ScoredPair>& pairs) {
  if (pairs.empty()) return 0.0;
  std::size_t ok = 0;
  for (const auto& p : pairs) ok += reward_score(rm, *p.example, p.chosen) > reward_score(rm, *p.example, p.rejected);
  return static_cast<double>(ok) / static_cast<double>(pairs.size());
}

inline double mean_pair_loss(const ModelParams& rm, const std::vector<ScoredPair>& pairs) {
  double s = 0.0;
  for (const auto& p : pairs)
    s += loss::rm_pairwise(reward_score(rm, *p.example, p.chosen), reward_score(rm, *p.example, p.rejected));
  return pairs.empty() ? 0.0 : s / static_cast<double>(pairs.size());
}

/// Pairs reference examples in `examples` by id. Early stopping watches the
/// held-out pair loss.
inline RmResult train_reward_model(const std::vector<PreferencePair>& train_pairs,
                                   const std::vector<PreferencePair>& valid_pairs,
                                   const std::vector<Example>& examples, const Vocab& vocab, ModelConfig model,
                                   const TrainConfig& cfg, const ProgressFn& progress = {}) {
  cfg.validate("rm");
  if (train_pairs.empty()) throw ValidationError("train_reward_model: no training pairs");
  model.vocab_size = vocab.size();
  model.validate();
  const auto enc = encode_all(examples, vocab);
  std::unordered_map<std::string, const EncodedExample*> by_id;
  for (std::size_t i = 0; i < examples.size(); ++i) by_id[examples[i].id] = &enc[i];
  const auto tr = score_pairs(train_pairs, by_id, vocab);
  const auto va = score_pairs(valid_pairs, by_id, vocab);

  RmResult res;
  res.report.stage = "rm";
  ModelParams params = ModelParams::init(model, substream_seed(cfg.seed, "rm/init"));
  ModelParams best = params;
  double best_loss = std::numeric_limits<double>::infinity();
  OptimizerState opt(cfg.optimizer);
  Rng order_rng(cfg.seed, "rm/order");
  std::vector<std::size_t> order(tr.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  int since_best = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    order_rng.shuffle(order);
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<const ScoredPair*> batch;
      for (std::size_t i = s; i < std::min(order.size(), s + cfg.batch_size); ++i) batch.push_back(&tr[order[i]]);
      double l = 0;
      const ModelParams g = gradients(params, [&](Bound& b) { return rm_batch_loss(b, batch); }, &l);
      detail::require_finite(l, "rm epoch " + std::to_string(epoch));
      optimizer_step(params, g, opt, cfg.lr);
      rec.train_loss += l * static_cast<double>(batch.size());
    }
    rec.train_loss /= static_cast<double>(tr.size());
    rec.valid_loss = va.empty() ? rec.train_loss : mean_pair_loss(params, va);
    rec.valid_accuracy = pair_accuracy(params, va.empty() ? tr : va);
    rec.seconds = detail::seconds_since(t0);
    res.report.epochs.push_back(rec);
    if (progress) progress(epoch_to_json(rec, true));
    if (rec.valid_loss < best_loss) {
      best_loss = rec.valid_loss;
      best = params;
      res.report.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      res.report.early_stopped = epoch < cfg.epochs;
      break;
    }
  }
  res.params = std::move(best);
  res.heldout_accuracy = pair_accuracy(res.params, va.empty() ? tr : va);
  return res;
}

// ---------------------------------------------------------------------------
// Stage 2: KL-regularised policy gradient

/// Reward of a generated response (tokens without EOS) for an example.
using RewardFn = std::function<double(const EncodedExample&, const std::vector<int>&)>;

inline RewardFn reward_model_fn(const ModelParams& rm) {
  return [&rm](const EncodedExample& ex, const std::vector<int>& response) {
    return reward_score(rm, ex, with_eos(response));
  };
}

struct RlIteration {
  int iteration = 0;
  double mean_reward = 0, mean_kl = 0, mean_length = 0, objective = 0, grad_norm = 0;
  double seconds = 0;
};

struct RlReport {
  std::vector<RlIteration> iterations;
  double heldout_reward_before = 0, heldout_reward_after = 0;
  double heldout_kl_after = 0;
  std::string checkpoint;
};

inline nlohmann::ordered_json iteration_to_json(const RlIteration& it, bool with_time) {
  nlohmann::ordered_json j{{"iteration", it.iteration},
                           {"mean_reward", it.mean_reward},
                           {"mean_kl", it.mean_kl},
                           {"mean_length", it.mean_length},
                           {"objective", it.objective},
                           {"grad_norm", it.grad_norm}};
  if (with_time) j["seconds"] = it.seconds;
  return j;
}

inline nlohmann::ordered_json report_to_json(const RlReport& r) {
  nlohmann::ordered_json j;
  j["stage"] = "rl";
  auto its = nlohmann::ordered_json::array();
  for (const auto& it : r.iterations) its.push_back(iteration_to_json(it, false));
  j["iterations"] = its;
  j["heldout_reward_before"] = r.heldout_reward_before;
  j["heldout_reward_after"] = r.heldout_reward_after;
  j["heldout_kl_after"] = r.heldout_kl_after;
  j["checkpoint"] = r.checkpoint;
  return j;
}

struct RlResult {
  ModelParams params;
  RlReport report;
};

struct PolicySample {
  Mode mode = Mode::Refusal;
  std::vector<int> tokens;   // sampled, without EOS
  std::vector<int> targets;  // decoder targets (EOS appended when emitted)
};

inline PolicySample sample_response(const ModelParams& policy, const EncodedExample& ex, double tau, int max_len,
                                    double temperature, Rng& rng) {
  const Generation g = generate(policy, ex, tau, max_len, temperature, &rng);
  PolicySample s;
  s.mode = g.mode;
  s.tokens = g.tokens;
  s.targets = g.tokens;
  if (g.stopped_at_eos) s.targets.push_back(kEos);
  return s;
}

/// Reference probabilities pi_ref(. | prefix) along a sampled sequence.
inline Matrix reference_probs(const ModelParams& ref, const EncodedExample& ex, const PolicySample& s,
                              double temperature) {
  ad::Tape tape;
  Bound b(tape, ref, false);
  const Forward f = forward(b, ex, ref.config.aggregation);
  std::vector<int> prev{kBos};
  prev.insert(prev.end(), s.targets.begin(), s.targets.end() - 1);
  return decoder_logprobs(b, f, s.mode, prev, temperature).value().array().exp().matrix();
}

/// Mean reward and mean sequence KL of `heldout_samples` sampled responses per
/// prompt. Every (prompt, sample) pair has its own stream, so two policies are
/// compared on identical randomness and differ only where their samples do.
inline std::pair<double, double> heldout_reward(const ModelParams& policy, const ModelParams& ref,
                                                const std::vector<EncodedExample>& prompts, const RewardFn& reward,
                                                const RlTrainConfig& cfg) {
  double r = 0, kl = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i)
    for (int rep = 0; rep < cfg.heldout_samples; ++rep) {
      const EncodedExample& ex = prompts[i];
      Rng rng(cfg.seed, "rl/heldout/" + std::to_string(i) + "/" + std::to_string(rep));
      const PolicySample s = sample_response(policy, ex, cfg.tau, cfg.max_len, cfg.rl.temperature, rng);
      r += reward(ex, s.tokens);
      if (!s.targets.empty()) {
        ad::Tape tape;
        Bound b(tape, policy, false);
        const Forward f = forward(b, ex, policy.config.aggregation);
        std::vector<int> prev{kBos};
        prev.insert(prev.end(), s.targets.begin(), s.targets.end() - 1);
        const Matrix pol = decoder_logprobs(b, f, s.mode, prev, cfg.rl.temperature).value().array().exp().matrix();
        kl += loss::sequence_kl(pol, reference_probs(ref, ex, s, cfg.rl.temperature));
      }
      ++n;
    }
  return {r / static_cast<double>(n), kl / static_cast<double>(n)};
}

/// Tensors the policy-gradient step updates: the decoder only. The answer or
/// refuse decision is a hard threshold on the classifier, invisible to the
/// sampled-action gradient, so the encoder, embeddings, classifier and
/// aggregation stay at their SFT values.
inline bool rl_trainable(const std::string& name) {
  static const std::set<std::string> decoder = {"m_ans", "m_ref", "P",  "W_h", "b_h",
                                                "W_out", "b_out", "W_c", "w_g", "b_g"};
  return decoder.count(name) > 0;
}

/// REINFORCE on the return r - beta*KL with a batch-mean or per-prompt
/// leave-one-out baseline, plus the pathwise gradient of the KL penalty.
/// Gradients are clipped to a global norm before the optimizer step.
inline RlResult train_rl(const ModelParams& sft, const RewardFn& reward, const std::vector<Example>& prompts,
                         const std::vector<Example>& heldout, const Vocab& vocab, const RlTrainConfig& cfg,
                         const ProgressFn& progress = {}) {
  cfg.validate();
  if (prompts.empty()) throw ValidationError("train_rl: no prompts");
  if (sft.config.vocab_size != vocab.size()) throw ValidationError("train_rl: vocab differs from policy");
  const auto tr = encode_all(prompts, vocab);
  std::vector<EncodedExample> ho = encode_all(heldout.empty() ? prompts : heldout, vocab);
  if (static_cast<int>(ho.size()) > cfg.heldout_size) ho.resize(static_cast<std::size_t>(cfg.heldout_size));

  const ModelParams reference = sft;  // frozen pi_SFT
  RlResult res;
  res.params = sft;
  ModelParams& policy = res.params;
  res.report.heldout_reward_before = heldout_reward(policy, reference, ho, reward, cfg).first;

  OptimizerState opt(cfg.optimizer);
  Rng prompt_rng(cfg.seed, "rl/prompts");
  Rng sample_rng(cfg.seed, "rl/sample");
  const double beta = cfg.rl.beta_kl;
  const double temp = cfg.rl.temperature;
  int over_bound = 0;
  const std::size_t group = static_cast<std::size_t>(cfg.rl.samples_per_prompt);

  for (int it = 1; it <= cfg.iterations; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<const EncodedExample*> batch;
    std::vector<PolicySample> samples;
    std::vector<Matrix> refs;
    std::vector<double> rewards;
    const EncodedExample* ex = nullptr;
    for (int i = 0; i < cfg.rl.batch_size; ++i) {
      if (i % group == 0) ex = &tr[prompt_rng.index(tr.size())];
      batch.push_back(ex);
      samples.push_back(sample_response(policy, *ex, cfg.tau, cfg.max_len, temp, sample_rng));
      rewards.push_back(reward(*ex, samples.back().tokens));
      refs.push_back(samples.back().targets.empty() ? Matrix() : reference_probs(reference, *ex, samples.back(), temp));
    }

    ad::Tape tape;
    Bound b(tape, policy);
    std::vector<Var> logp, kls;
    std::vector<double> kl_values, returns;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const PolicySample& s = samples[i];
      if (s.targets.empty()) {  // max_len reached before any token: nothing to score
        logp.emplace_back();
        kls.emplace_back();
        kl_values.push_back(0.0);
        returns.push_back(rewards[i]);
        continue;
      }
      const Forward f = forward(b, *batch[i], policy.config.aggregation);
      std::vector<int> prev{kBos};
      prev.insert(prev.end(), s.targets.begin(), s.targets.end() - 1);
      Var lp = decoder_logprobs(b, f, s.mode, prev, temp);
      logp.push_back(ad::scale(loss::sequence_nll(lp, s.targets), -1.0));
      kls.push_back(loss::sequence_kl(lp, refs[i]));
      kl_values.push_back(kls.back().scalar());
      returns.push_back(rewards[i] - beta * kl_values.back());
    }
    // Batch mean, or the leave-one-out mean over samples of the same prompt.
    std::vector<double> baseline(returns.size(), 0.0);
    if (cfg.rl.baseline == "batch-mean") {
      double m = 0.0;
      for (double r : returns) m += r;
      std::fill(baseline.begin(), baseline.end(), m / static_cast<double>(returns.size()));
    } else {
      for (std::size_t g = 0; g < returns.size(); g += group) {
        double s = 0.0;
        for (std::size_t i = g; i < g + group; ++i) s += returns[i];
        for (std::size_t i = g; i < g + group; ++i) baseline[i] = (s - returns[i]) / static_cast<double>(group - 1);
      }
    }

    Var total;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (!logp[i].valid()) continue;
      Var term = ad::scale(logp[i], -(returns[i] - baseline[i])) + ad::scale(kls[i], beta);
      total = total.valid() ? total + term : term;
    }
    RlIteration rec;
    rec.iteration = it;
    std::vector<loss::RlSample> rs;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      rec.mean_reward += rewards[i];
      rec.mean_kl += kl_values[i];
      rec.mean_length += static_cast<double>(samples[i].tokens.size());
      rs.push_back({rewards[i], kl_values[i]});
    }
    const double n = static_cast<double>(batch.size());
    rec.mean_reward /= n;
    rec.mean_kl /= n;
    rec.mean_length /= n;
    rec.objective = loss::rl_objective(rs, cfg.rl);
    detail::require_finite(rec.objective, "rl iteration " + std::to_string(it));

    if (total.valid()) {
      // Dividing by 1 + beta leaves the maximiser unchanged and keeps the step
      // bounded as beta grows, so a dominant penalty pins the policy in place.
      total = ad::scale(total, 1.0 / (n * (1.0 + beta)));
      tape.backward(total);
      ModelParams g = policy.zeros_like();
      b.accumulate_grads(g);
      g.for_each([](const char* name, Matrix& m) {
        if (!rl_trainable(name)) m.setZero();
      });
      if (!g.all_finite()) throw TrainingAbort("non-finite gradient at rl iteration " + std::to_string(it));
      rec.grad_norm = clip_global_norm(g, cfg.clip_norm);
      optimizer_step(policy, g, opt, cfg.lr);
    }
    rec.seconds = detail::seconds_since(t0);
    res.report.iterations.push_back(rec);
    if (progress) progress(iteration_to_json(rec, true));

    over_bound = rec.mean_kl > cfg.kl_bound ? over_bound + 1 : 0;
    if (over_bound >= 3)
      throw TrainingAbort("policy drift: mean KL above " + std::to_string(cfg.kl_bound) +
                          " for 3 consecutive iterations (iteration " + std::to_string(it) + ")");
  }
  const auto [r_after, kl_after] = heldout_reward(policy, reference, ho, reward, cfg);
  res.report.heldout_reward_after = r_after;
  res.report.heldout_kl_after = kl_after;
  return res;
}

}  // namespace rul
