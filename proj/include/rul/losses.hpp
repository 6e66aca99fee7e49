#pragma once

// Training objectives. Each loss has a differentiable form over ad::Var and a
// plain form over doubles; both share the same clamping rules.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "rul/autodiff.hpp"
#include "rul/corpus.hpp"
#include "rul/errors.hpp"

namespace rul::loss {

using ad::Matrix;
using ad::Var;

inline constexpr double kLogFloor = 1e-12;

struct SftWeights {
  double lambda_cls = 1.0;
  double lambda_gen = 1.0;

  void validate() const {
    if (lambda_cls < 0) throw ConfigError("sft.lambda_cls must be >= 0");
    if (lambda_gen < 0) throw ConfigError("sft.lambda_gen must be >= 0");
    if (lambda_cls == 0 && lambda_gen == 0) throw ConfigError("sft.lambda_cls and sft.lambda_gen are both zero");
  }
};

struct RlConfig {
  double beta_kl = 0.1;
  int batch_size = 16;
  double temperature = 1.0;
  std::string baseline = "prompt-mean";  // or "batch-mean"
  int samples_per_prompt = 4;

  void validate() const {
    if (!(beta_kl >= 0)) throw ConfigError("rl.beta_kl must be >= 0");
    if (batch_size < 1) throw ConfigError("rl.batch_size must be >= 1");
    if (!(temperature > 0)) throw ConfigError("rl.temperature must be > 0");
    if (baseline != "batch-mean" && baseline != "prompt-mean")
      throw ConfigError("rl.baseline must be batch-mean or prompt-mean");
    if (samples_per_prompt < 1) throw ConfigError("rl.samples_per_prompt must be >= 1");
    if (batch_size % samples_per_prompt != 0)
      throw ConfigError("rl.batch_size must be a multiple of rl.samples_per_prompt");
    if (baseline == "prompt-mean" && samples_per_prompt < 2)
      throw ConfigError("rl.baseline prompt-mean needs rl.samples_per_prompt >= 2");
  }
};

// ---------------------------------------------------------------------------
// Binary cross-entropy

/// Mean BCE of an N x 1 column of probabilities against 0/1 labels.
inline Var bce(const Var& yhat, const std::vector<int>& y) {
  if (yhat.cols() != 1 || static_cast<std::size_t>(yhat.rows()) != y.size() || y.empty())
    throw ValidationError("bce: length mismatch");
  ad::Tape& t = yhat.tape();
  Matrix ym(y.size(), 1);
  for (std::size_t i = 0; i < y.size(); ++i) ym(static_cast<Eigen::Index>(i), 0) = y[i];
  Var pos = ad::mul(t.constant(ym), ad::log_clamped(yhat, kLogFloor));
  Var neg = ad::mul(t.constant((1.0 - ym.array()).matrix()),
                    ad::log_clamped(ad::add_constant(ad::scale(yhat, -1.0), 1.0), kLogFloor));
  return ad::scale(ad::sum(pos + neg), -1.0 / static_cast<double>(y.size()));
}

inline double bce(const std::vector<double>& yhat, const std::vector<int>& y) {
  if (yhat.size() != y.size() || y.empty()) throw ValidationError("bce: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i)
    s += y[i] * std::log(std::max(yhat[i], kLogFloor)) + (1 - y[i]) * std::log(std::max(1.0 - yhat[i], kLogFloor));
  return -s / static_cast<double>(y.size());
}

// ---------------------------------------------------------------------------
// Negative log-likelihood (per-example token sum, batch mean)

/// Summed -log P over the rows of a T x V log-probability matrix; PAD
/// targets are skipped.
inline Var sequence_nll(const Var& logprobs, const std::vector<int>& targets) {
  if (static_cast<std::size_t>(logprobs.rows()) != targets.size())
    throw ValidationError("nll: distribution/target length mismatch");
  std::vector<int> cols(targets);
  Matrix mask = Matrix::Ones(static_cast<Eigen::Index>(targets.size()), 1);
  for (std::size_t i = 0; i < cols.size(); ++i)
    if (cols[i] == kPad) {
      cols[i] = 0;
      mask(static_cast<Eigen::Index>(i), 0) = 0.0;
    }
  return ad::scale(ad::sum(ad::mul(ad::pick(logprobs, std::move(cols)), logprobs.tape().constant(mask))), -1.0);
}

inline Var nll(const std::vector<Var>& logprobs, const std::vector<std::vector<int>>& targets) {
  if (logprobs.size() != targets.size() || logprobs.empty()) throw ValidationError("nll: batch size mismatch");
  Var total = sequence_nll(logprobs[0], targets[0]);
  for (std::size_t i = 1; i < logprobs.size(); ++i) total = total + sequence_nll(logprobs[i], targets[i]);
  return ad::scale(total, 1.0 / static_cast<double>(logprobs.size()));
}

/// Plain form over probability matrices (one T x V matrix per example).
inline double nll(const std::vector<Matrix>& distributions, const std::vector<std::vector<int>>& targets) {
  if (distributions.size() != targets.size() || distributions.empty())
    throw ValidationError("nll: batch size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (static_cast<std::size_t>(distributions[i].rows()) != targets[i].size())
      throw ValidationError("nll: distribution/target length mismatch");
    for (std::size_t t = 0; t < targets[i].size(); ++t) {
      if (targets[i][t] == kPad) continue;
      s -= std::log(std::max(distributions[i](static_cast<Eigen::Index>(t), targets[i][t]), kLogFloor));
    }
  }
  return s / static_cast<double>(targets.size());
}

// ---------------------------------------------------------------------------
// Composite SFT loss

inline Var sft(const Var& bce_value, const Var& nll_value, const SftWeights& w) {
  return ad::scale(bce_value, w.lambda_cls) + ad::scale(nll_value, w.lambda_gen);
}

inline double sft(double bce_value, double nll_value, const SftWeights& w) {
  return w.lambda_cls * bce_value + w.lambda_gen * nll_value;
}

// ---------------------------------------------------------------------------
// Reward-model pairwise loss: -log sigma(score_A - score_B), A preferred

inline Var rm_pairwise(const Var& preferred, const Var& other) {
  return ad::scale(ad::log_sigmoid(preferred - other), -1.0);
}

inline double rm_pairwise(double preferred, double other) {
  const double m = preferred - other;
  return m >= 0 ? std::log1p(std::exp(-m)) : -m + std::log1p(std::exp(m));
}

// ---------------------------------------------------------------------------
// Sequence KL(pi || pi_ref), summed over positions

/// `policy_logprobs` is T x V log pi; `reference` holds pi_ref probabilities.
inline Var sequence_kl(const Var& policy_logprobs, const Matrix& reference) {
  if (policy_logprobs.rows() != reference.rows() || policy_logprobs.cols() != reference.cols())
    throw ValidationError("sequence_kl: length mismatch");
  const Matrix log_ref = reference.unaryExpr([](double q) { return std::log(std::max(q, kLogFloor)); });
  Var p = ad::exp(policy_logprobs);
  return ad::sum(ad::mul(p, policy_logprobs - policy_logprobs.tape().constant(log_ref)));
}

/// Plain form over probability matrices; zero-probability policy terms add 0.
inline double sequence_kl(const Matrix& policy, const Matrix& reference) {
  if (policy.rows() != reference.rows() || policy.cols() != reference.cols())
    throw ValidationError("sequence_kl: length mismatch");
  double s = 0.0;
  for (Eigen::Index i = 0; i < policy.rows(); ++i)
    for (Eigen::Index j = 0; j < policy.cols(); ++j) {
      const double p = policy(i, j);
      if (p > 0) s += p * (std::log(p) - std::log(std::max(reference(i, j), kLogFloor)));
    }
  return s;
}

// ---------------------------------------------------------------------------
// KL-regularised objective estimate, for monitoring

struct RlSample {
  double reward = 0.0;
  double kl = 0.0;
};

inline double rl_objective(const std::vector<RlSample>& samples, const RlConfig& cfg) {
  if (samples.empty()) throw ValidationError("rl_objective: no samples");
  double s = 0.0;
  for (const auto& x : samples) s += x.reward - cfg.beta_kl * x.kl;
  return s / static_cast<double>(samples.size());
}

}  // namespace rul::loss
