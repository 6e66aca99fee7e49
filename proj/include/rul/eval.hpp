#pragma once

// Metrics: detection accuracy at three levels, token F1, refusal rate,
// informativeness, per-type accuracy, timing, and the three-arm ablation.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rul/corpus.hpp"
#include "rul/errors.hpp"
#include "rul/model.hpp"
#include "rul/training.hpp"

namespace rul {

struct LevelAccuracy {
  double sentence = 0, paragraph = 0, ranking = 0;
};

/// Scores for one example under a chosen aggregation.
struct ExampleScores {
  std::vector<std::vector<double>> sentence;  // per paragraph
  std::vector<double> paragraph;
  double ranking = 0;
};

inline ExampleScores example_scores(const AnswerabilityOutput& a) {
  return {a.sentence_scores_by_paragraph, a.paragraph_scores, a.ranking_score};
}

/// Unweighted means replacing the attention-weighted sums at both levels.
inline std::pair<std::vector<double>, double> mean_pool_scores(const std::vector<std::vector<double>>& sentence_scores) {
  if (sentence_scores.empty()) throw ValidationError("mean_pool_scores: empty ranking");
  std::vector<double> para;
  for (const auto& p : sentence_scores) {
    if (p.empty()) throw ValidationError("mean_pool_scores: empty paragraph");
    double s = 0;
    for (double x : p) s += x;
    para.push_back(s / static_cast<double>(p.size()));
  }
  double r = 0;
  for (double x : para) r += x;
  return {para, r / static_cast<double>(para.size())};
}

/// Accuracy of decide(score, tau) against the labels at each level.
inline LevelAccuracy level_accuracy(const std::vector<ExampleScores>& scores, const std::vector<Example>& data,
                                    double tau) {
  if (scores.size() != data.size()) throw ValidationError("level_accuracy: size mismatch");
  std::size_t s_ok = 0, s_n = 0, p_ok = 0, p_n = 0, r_ok = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto labels = derive_hierarchical_labels(data[i].context);
    for (std::size_t m = 0; m < labels.paragraph.size(); ++m) {
      for (std::size_t k = 0; k < labels.sentence[m].size(); ++k, ++s_n)
        s_ok += decide(scores[i].sentence[m][k], tau) == (labels.sentence[m][k] == 1);
      p_ok += decide(scores[i].paragraph[m], tau) == (labels.paragraph[m] == 1);
      ++p_n;
    }
    r_ok += decide(scores[i].ranking, tau) == (data[i].y == 1);
  }
  LevelAccuracy a;
  if (s_n) a.sentence = static_cast<double>(s_ok) / static_cast<double>(s_n);
  if (p_n) a.paragraph = static_cast<double>(p_ok) / static_cast<double>(p_n);
  if (!data.empty()) a.ranking = static_cast<double>(r_ok) / static_cast<double>(data.size());
  return a;
}

inline std::vector<ExampleScores> score_dataset(const ModelParams& params, const std::vector<Example>& data,
                                                const Vocab& vocab, Aggregation agg, double tau) {
  std::vector<ExampleScores> out;
  out.reserve(data.size());
  for (const auto& ex : data) out.push_back(example_scores(infer(params, encode_example(ex, vocab), agg, tau).answer));
  return out;
}

inline LevelAccuracy detection_accuracy(const ModelParams& params, const std::vector<Example>& data,
                                        const Vocab& vocab, double tau, Aggregation agg = Aggregation::Attention) {
  return level_accuracy(score_dataset(params, data, vocab, agg, tau), data, tau);
}

/// Multiset token overlap F1; an empty prediction scores 0.
inline double token_f1(const Tokens& pred, const Tokens& gold) {
  if (pred.empty() || gold.empty()) return 0.0;
  std::map<std::string, int> counts;
  for (const auto& t : gold) ++counts[t];
  int overlap = 0;
  for (const auto& t : pred) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / static_cast<double>(pred.size());
  const double r = static_cast<double>(overlap) / static_cast<double>(gold.size());
  return 2 * p * r / (p + r);
}

namespace detail {
inline bool contains_run(const Tokens& text, const Tokens& run) {
  return std::search(text.begin(), text.end(), run.begin(), run.end()) != text.end();
}
}  // namespace detail

/// Starts with one of the refusal openers of the template inventory.
inline bool matches_refusal_grammar(const Tokens& text) {
  for (const auto& stem : kRefusalOpeners)
    if (text.size() >= stem.size() && std::equal(stem.begin(), stem.end(), text.begin())) return true;
  return false;
}

struct Informativeness {
  int score = 0;  // reason present + suggestion present
  int length = 0;
};

/// `text` holds the tokens before EOS.
inline Informativeness informativeness(const Tokens& text) {
  Informativeness out;
  out.score = (detail::contains_run(text, kReasonStem) ? 1 : 0) + (detail::contains_run(text, kSuggestionStem) ? 1 : 0);
  out.length = static_cast<int>(text.size());
  return out;
}

struct TimingResult {
  double mean_ms = 0, std_ms = 0;
  int repetitions = 0;
};

/// Mean and standard deviation over repetitions of the per-pair inference
/// time (classify + greedy generation), after one warm-up pass.
inline TimingResult timing(const ModelParams& params, const std::vector<Example>& data, const Vocab& vocab,
                           int repetitions, double tau, int max_len) {
  if (data.empty()) throw ValidationError("timing: empty dataset");
  if (repetitions < 3) throw ValidationError("timing: repetitions must be >= 3");
  std::vector<EncodedExample> enc;
  for (const auto& ex : data) enc.push_back(encode_example(ex, vocab));
  auto pass = [&] {
    std::size_t sink = 0;
    for (const auto& ex : enc) sink += generate(params, ex, tau, max_len, 0.0).tokens.size();
    return sink;
  };
  volatile std::size_t keep = pass();
  std::vector<double> per_pair;
  for (int r = 0; r < repetitions; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    keep = keep + pass();
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    per_pair.push_back(ms / static_cast<double>(enc.size()));
  }
  TimingResult t;
  t.repetitions = repetitions;
  for (double x : per_pair) t.mean_ms += x;
  t.mean_ms /= repetitions;
  for (double x : per_pair) t.std_ms += (x - t.mean_ms) * (x - t.mean_ms);
  t.std_ms = std::sqrt(t.std_ms / std::max(1, repetitions - 1));
  return t;
}

// ---------------------------------------------------------------------------
// Full report

struct MetricsReport {
  LevelAccuracy accuracy;
  std::optional<double> f1_answerable;
  std::optional<double> refusal_rate;
  std::optional<double> informativeness_avg;
  std::optional<double> refusal_len_avg;
  std::map<std::string, double> per_type;
  std::optional<TimingResult> timing;
  std::size_t n_total = 0, n_answerable = 0, n_unanswerable = 0;
  std::map<std::string, std::size_t> per_type_counts;
};

struct EvalOptions {
  double tau = 0.5;
  int max_len = 40;
  Aggregation aggregation = Aggregation::Attention;
  int timing_repetitions = 0;  // 0 disables timing
};

/// Every metric in one pass over `data`. Refusal metrics use y = 0 examples
/// and F1 uses y = 1 examples, so the two sets partition the data.
inline MetricsReport evaluate(const ModelParams& params, const std::vector<Example>& data, const Vocab& vocab,
                              const EvalOptions& opt) {
  ModelParams p = params;
  p.config.aggregation = opt.aggregation;
  MetricsReport rep;
  rep.n_total = data.size();
  std::vector<ExampleScores> scores;
  std::map<std::string, std::pair<std::size_t, std::size_t>> by_type;
  double f1 = 0, info = 0, len = 0;
  std::size_t refusals = 0, refusal_mode = 0;
  for (const auto& ex : data) {
    const Generation g = generate(p, encode_example(ex, vocab), opt.tau, opt.max_len, 0.0);
    scores.push_back(example_scores(g.answer));
    const Tokens out = vocab.decode(g.tokens);
    auto& bt = by_type[to_string(ex.utype)];
    bt.first += g.y_pred == ex.y;
    ++bt.second;
    if (ex.y == 1) {
      ++rep.n_answerable;
      f1 += token_f1(out, ex.target.tokens);
    } else {
      ++rep.n_unanswerable;
      if (g.mode == Mode::Refusal) {
        ++refusal_mode;
        refusals += matches_refusal_grammar(out);
        const Informativeness inf = informativeness(out);
        info += inf.score;
        len += inf.length;
      }
    }
  }
  rep.accuracy = level_accuracy(scores, data, opt.tau);
  if (rep.n_answerable) rep.f1_answerable = f1 / static_cast<double>(rep.n_answerable);
  if (rep.n_unanswerable) rep.refusal_rate = static_cast<double>(refusals) / static_cast<double>(rep.n_unanswerable);
  if (refusal_mode) {
    rep.informativeness_avg = info / static_cast<double>(refusal_mode);
    rep.refusal_len_avg = len / static_cast<double>(refusal_mode);
  }
  for (const auto& [t, c] : by_type) {
    rep.per_type[t] = static_cast<double>(c.first) / static_cast<double>(c.second);
    rep.per_type_counts[t] = c.second;
  }
  if (opt.timing_repetitions > 0) rep.timing = timing(p, data, vocab, opt.timing_repetitions, opt.tau, opt.max_len);
  return rep;
}

/// Ranking accuracy grouped by unanswerability type.
inline std::map<std::string, double> per_type_accuracy(const ModelParams& params, const std::vector<Example>& data,
                                                       const Vocab& vocab, double tau) {
  std::map<std::string, std::pair<std::size_t, std::size_t>> c;
  for (const auto& ex : data) {
    auto& e = c[to_string(ex.utype)];
    e.first += infer(params, encode_example(ex, vocab), params.config.aggregation, tau).answer.y_pred == ex.y;
    ++e.second;
  }
  std::map<std::string, double> out;
  for (const auto& [t, v] : c) out[t] = static_cast<double>(v.first) / static_cast<double>(v.second);
  return out;
}

/// Fraction of y = 0 examples answered with a refusal-mode output that
/// matches the refusal grammar; nullopt when there are none.
inline std::optional<double> refusal_rate(const ModelParams& params, const std::vector<Example>& data,
                                          const Vocab& vocab, double tau, int max_len = 40) {
  std::size_t n = 0, ok = 0;
  for (const auto& ex : data) {
    if (ex.y != 0) continue;
    ++n;
    const Generation g = generate(params, encode_example(ex, vocab), tau, max_len, 0.0);
    ok += g.mode == Mode::Refusal && matches_refusal_grammar(vocab.decode(g.tokens));
  }
  if (n == 0) return std::nullopt;
  return static_cast<double>(ok) / static_cast<double>(n);
}

inline nlohmann::ordered_json metrics_to_json(const MetricsReport& r) {
  auto opt = [](const std::optional<double>& x) { return x ? nlohmann::ordered_json(*x) : nlohmann::ordered_json(nullptr); };
  nlohmann::ordered_json j;
  j["sentence_acc"] = r.accuracy.sentence;
  j["paragraph_acc"] = r.accuracy.paragraph;
  j["ranking_acc"] = r.accuracy.ranking;
  j["f1_answerable"] = opt(r.f1_answerable);
  j["refusal_rate"] = opt(r.refusal_rate);
  j["informativeness_avg"] = opt(r.informativeness_avg);
  j["refusal_len_avg"] = opt(r.refusal_len_avg);
  nlohmann::ordered_json pt = nlohmann::ordered_json::object();
  for (UType t : kAllUTypes)
    if (r.per_type.count(to_string(t))) pt[to_string(t)] = r.per_type.at(to_string(t));
  j["per_type_ranking_acc"] = pt;
  j["avg_inference_ms"] = r.timing ? nlohmann::ordered_json(r.timing->mean_ms) : nlohmann::ordered_json(nullptr);
  j["inference_ms_std"] = r.timing ? nlohmann::ordered_json(r.timing->std_ms) : nlohmann::ordered_json(nullptr);
  nlohmann::ordered_json counts;
  counts["total"] = r.n_total;
  counts["answerable"] = r.n_answerable;
  counts["unanswerable"] = r.n_unanswerable;
  nlohmann::ordered_json ct = nlohmann::ordered_json::object();
  for (UType t : kAllUTypes)
    if (r.per_type_counts.count(to_string(t))) ct[to_string(t)] = r.per_type_counts.at(to_string(t));
  counts["per_type"] = ct;
  j["counts"] = counts;
  return j;
}

/// Plain-text rendering in the layout of the detection and generation tables.
inline std::string render_table(const MetricsReport& r) {
  char buf[512];
  std::string out;
  auto fmt = [](const std::optional<double>& x) {
    char b[32];
    if (!x) return std::string("n/a");
    std::snprintf(b, sizeof b, "%.3f", *x);
    return std::string(b);
  };
  std::snprintf(buf, sizeof buf, "%-12s %-12s %-12s\n%-12.3f %-12.3f %-12.3f\n", "Sentence", "Paragraph", "Ranking",
                r.accuracy.sentence, r.accuracy.paragraph, r.accuracy.ranking);
  out += buf;
  out += "F1 " + fmt(r.f1_answerable) + "  refusal " + fmt(r.refusal_rate) + "  informativeness " +
         fmt(r.informativeness_avg) + "  refusal length " + fmt(r.refusal_len_avg) + "\n";
  for (const auto& [t, a] : r.per_type) {
    std::snprintf(buf, sizeof buf, "%-14s %.3f\n", t.c_str(), a);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationConfig {
  ModelConfig model;
  TrainConfig sft;
  TrainConfig rm;
  RlTrainConfig rl;
  long rm_train_pairs = 3000;
  long rm_valid_pairs = 600;
  std::uint64_t seed = 0;
};

struct AblationArm {
  std::string name;
  Aggregation aggregation = Aggregation::Attention;
  bool rl = false;
  MetricsReport metrics;
  std::uint64_t seed = 0;
};

struct AblationTable {
  std::vector<AblationArm> arms;  // full, mean, sft_only
  double rm_heldout_accuracy = 0;
};

/// Every arm shares the seed, the data and the reward model: full RUL
/// (attention + SFT + RL), the mean-pooling variant (mean + SFT + RL), and
/// SFT only (attention + SFT). Metrics are on `test`.
inline AblationTable run_ablation(const Dataset& data, const Vocab& vocab, AblationConfig cfg,
                                  const ProgressFn& progress = {}) {
  cfg.sft.seed = cfg.rm.seed = cfg.rl.seed = cfg.seed;
  AblationTable table;
  auto log = [&](const std::string& stage, nlohmann::ordered_json j) {
    if (!progress) return;
    j["stage"] = stage;
    progress(j);
  };

  const auto train_pairs = make_preference_pairs(data.train, cfg.rm_train_pairs, substream_seed(cfg.seed, "pairs/train"));
  const auto valid_pairs = make_preference_pairs(data.valid, cfg.rm_valid_pairs, substream_seed(cfg.seed, "pairs/valid"));
  std::vector<Example> all = data.train;
  all.insert(all.end(), data.valid.begin(), data.valid.end());
  const RmResult rm = train_reward_model(train_pairs, valid_pairs, all, vocab, cfg.model, cfg.rm,
                                         [&](const auto& j) { log("rm", j); });
  table.rm_heldout_accuracy = rm.heldout_accuracy;
  const RewardFn reward = reward_model_fn(rm.params);
  EvalOptions eo;
  eo.tau = cfg.sft.tau;
  eo.max_len = cfg.rl.max_len;

  for (Aggregation agg : {Aggregation::Attention, Aggregation::Mean}) {
    ModelConfig mc = cfg.model;
    mc.aggregation = agg;
    const SftResult sft = train_sft(data.train, data.valid, vocab, mc, cfg.sft,
                                    [&](const auto& j) { log(std::string("sft/") + to_string(agg), j); });
    const RlResult rl = train_rl(sft.params, reward, data.train, data.valid, vocab, cfg.rl,
                                 [&](const auto& j) { log(std::string("rl/") + to_string(agg), j); });
    eo.aggregation = agg;
    AblationArm arm;
    arm.name = agg == Aggregation::Attention ? "full" : "mean";
    arm.aggregation = agg;
    arm.rl = true;
    arm.seed = cfg.seed;
    arm.metrics = evaluate(rl.params, data.test, vocab, eo);
    table.arms.push_back(arm);
    if (agg == Aggregation::Attention) {
      AblationArm base;
      base.name = "sft_only";
      base.aggregation = agg;
      base.rl = false;
      base.seed = cfg.seed;
      base.metrics = evaluate(sft.params, data.test, vocab, eo);
      table.arms.push_back(base);
    }
  }
  std::swap(table.arms[1], table.arms[2]);  // full, mean, sft_only
  return table;
}

inline nlohmann::ordered_json ablation_to_json(const AblationTable& t) {
  nlohmann::ordered_json j;
  auto arms = nlohmann::ordered_json::array();
  for (const auto& a : t.arms) {
    nlohmann::ordered_json x;
    x["arm"] = a.name;
    x["aggregation"] = to_string(a.aggregation);
    x["rl"] = a.rl;
    x["seed"] = a.seed;
    x["ranking_acc"] = a.metrics.accuracy.ranking;
    x["informativeness_avg"] =
        a.metrics.informativeness_avg ? nlohmann::ordered_json(*a.metrics.informativeness_avg) : nlohmann::ordered_json(nullptr);
    x["metrics"] = metrics_to_json(a.metrics);
    arms.push_back(x);
  }
  j["arms"] = arms;
  j["rm_heldout_accuracy"] = t.rm_heldout_accuracy;
  return j;
}

}  // namespace rul
