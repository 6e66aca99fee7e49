// Acceptance suite: one PASS/FAIL line per criterion, exit 1 if any fails.
//   acceptance [criteria...] [--work DIR]
#include <sys/wait.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>

#include "rul/cli.hpp"

using namespace rul;
namespace fs = std::filesystem;

namespace {

// Tolerances and thresholds.
constexpr double kGradEps = 1e-4;
constexpr double kGradTol = 1e-4;
constexpr int kGradSeeds = 5;
constexpr double kGradSeconds = 120.0;
constexpr int kAlgebraInputs = 10000;
constexpr double kSumTol = 1e-9;
constexpr double kMeanTol = 1e-12;
constexpr double kIdentityTol = 1e-9;
constexpr double kKlSelfTol = 1e-12;
constexpr int kKlPairs = 1000;
constexpr double kSftRanking = 0.90;
constexpr double kSftSentence = 0.85;
constexpr double kSftRefusal = 0.85;
constexpr double kSftF1 = 0.80;
constexpr int kSftMaxEpochs = 50;
constexpr double kRmAccuracy = 0.90;
constexpr double kRmGoldOverBare = 0.90;
constexpr double kRlKlBound = 20.0;
constexpr double kDominatingBeta = 1e6;
constexpr double kDominatedDrift = 1e-3;
constexpr int kAblationSeeds = 3;
constexpr int kSalientK = 5;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

/// Desk corpus and the models trained on it, built on first use.
class Desk {
 public:
  const Dataset& data() {
    if (!data_) {
      GenerationSpec spec;
      data_ = generate_dataset(spec);
      vocab_ = build_vocab(std::vector<const std::vector<Example>*>{&data_->train, &data_->valid, &data_->test}, kBareRefusal);
    }
    return *data_;
  }
  const Vocab& vocab() {
    data();
    return *vocab_;
  }

  const SftResult& sft() {
    if (!sft_) {
      const auto t0 = Clock::now();
      ModelConfig mc;
      TrainConfig tc;
      tc.epochs = kSftMaxEpochs;
      sft_ = train_sft(data().train, data().valid, vocab(), mc, tc, {});
      sft_seconds_ = seconds_since(t0);
    }
    return *sft_;
  }
  double sft_seconds() const { return sft_seconds_; }

  const RmResult& rm() {
    if (!rm_) {
      const auto t0 = Clock::now();
      const cli::PipelineConfig d;
      const auto train_pairs = make_preference_pairs(data().train, d.pairs_train, substream_seed(0, "pairs/train"));
      const auto valid_pairs = make_preference_pairs(data().valid, d.pairs_valid, substream_seed(0, "pairs/valid"));
      std::vector<Example> all = data().train;
      all.insert(all.end(), data().valid.begin(), data().valid.end());
      rm_ = train_reward_model(train_pairs, valid_pairs, all, vocab(), d.model, d.rm, {});
      rm_seconds_ = seconds_since(t0);
    }
    return *rm_;
  }
  double rm_seconds() const { return rm_seconds_; }

  const RlResult& rl() {
    if (!rl_) {
      const auto t0 = Clock::now();
      rl_ = train_rl(sft().params, reward_model_fn(rm().params), data().train, data().valid, vocab(), RlTrainConfig{}, {});
      rl_seconds_ = seconds_since(t0);
    }
    return *rl_;
  }
  double rl_seconds() const { return rl_seconds_; }

 private:
  std::optional<Dataset> data_;
  std::optional<Vocab> vocab_;
  std::optional<SftResult> sft_;
  std::optional<RmResult> rm_;
  std::optional<RlResult> rl_;
  double sft_seconds_ = 0, rm_seconds_ = 0, rl_seconds_ = 0;
};

// ---------------------------------------------------------------------------

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  double worst = 0;
  std::string where;
  bool ok = true;
  for (int seed = 1; seed <= kGradSeeds; ++seed) {
    const GradCheckCase c = gradcheck_case(static_cast<std::uint64_t>(seed));
    for (LossSelector sel : kAllLosses) {
      const GradCheckReport r = grad_check(c.params, c.batch, sel, kGradEps, kGradTol, cli::kGradCheckCoords,
                                           static_cast<std::uint64_t>(seed));
      ok = ok && r.passed;
      if (!r.passed || r.max_rel_error >= worst) {
        worst = std::max(worst, r.max_rel_error);
        where = fmt("%s seed %d %s", to_string(sel), seed, r.worst_tensor.c_str());
      }
    }
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < kGradSeconds;
  return {ok, fmt("%d seeds x %zu losses, max rel error %.2e (%s), %.1f s", kGradSeeds, kAllLosses.size(), worst,
                  where.c_str(), secs)};
}

Outcome aggregation_algebra() {
  GenerationSpec spec;
  spec.n_train = 500;
  spec.n_valid = spec.n_test = 50;
  spec.k_min = spec.m_min = 1;
  spec.k_max = 6;
  spec.m_max = 5;
  spec.seed = 17;
  const Dataset ds = generate_dataset(spec);
  const Vocab vocab = build_vocab(ds.train);
  std::vector<EncodedExample> encoded;
  for (const auto& ex : ds.train) encoded.push_back(encode_example(ex, vocab));

  double sum_err = 0, hull_violation = 0, mean_err = 0;
  int n = 0;
  for (std::uint64_t s = 0; n < kAlgebraInputs; ++s) {
    ModelConfig mc;
    mc.d = 8;
    mc.d_a = mc.d_a_prime = 4;
    mc.vocab_size = vocab.size();
    ModelParams p = ModelParams::init(mc, s);
    Rng rng(s, "acceptance/algebra");
    // Spread the attention parameters so the weights are far from uniform.
    for (ad::Matrix* m : {&p.W_a, &p.b_a, &p.v, &p.W_a_prime, &p.b_a_prime, &p.v_prime})
      for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = rng.uniform(-3, 3);
    ModelParams flat = p;
    for (ad::Matrix* m : {&flat.W_a, &flat.b_a, &flat.v, &flat.W_a_prime, &flat.b_a_prime, &flat.v_prime}) m->setZero();
    for (std::size_t i = 0; i < encoded.size() && n < kAlgebraInputs; i += 1 + s % 3, ++n) {
      const AnswerabilityOutput a = infer(p, encoded[i], Aggregation::Attention, 0.5).answer;
      double beta_sum = 0;
      for (double b : a.paragraph_attn) beta_sum += b;
      sum_err = std::max(sum_err, std::abs(beta_sum - 1));
      for (std::size_t k = 0; k < a.sentence_attn.size(); ++k) {
        double alpha_sum = 0;
        for (double x : a.sentence_attn[k]) alpha_sum += x;
        sum_err = std::max(sum_err, std::abs(alpha_sum - 1));
        const auto& ch = a.sentence_scores_by_paragraph[k];
        const auto [lo, hi] = std::minmax_element(ch.begin(), ch.end());
        hull_violation = std::max({hull_violation, *lo - a.paragraph_scores[k], a.paragraph_scores[k] - *hi});
      }
      const auto [lo, hi] = std::minmax_element(a.paragraph_scores.begin(), a.paragraph_scores.end());
      hull_violation = std::max({hull_violation, *lo - a.ranking_score, a.ranking_score - *hi});

      const AnswerabilityOutput za = infer(flat, encoded[i], Aggregation::Attention, 0.5).answer;
      const AnswerabilityOutput zm = infer(flat, encoded[i], Aggregation::Mean, 0.5).answer;
      mean_err = std::max(mean_err, std::abs(za.ranking_score - zm.ranking_score));
      for (std::size_t k = 0; k < za.paragraph_scores.size(); ++k)
        mean_err = std::max(mean_err, std::abs(za.paragraph_scores[k] - zm.paragraph_scores[k]));
    }
  }
  const bool ok = sum_err <= kSumTol && hull_violation <= kMeanTol && mean_err <= kMeanTol;
  return {ok, fmt("%d inputs, max |sum-1| %.1e, hull violation %.1e, zeroed-attention vs mean %.1e", n, sum_err,
                  hull_violation, mean_err)};
}

Outcome loss_identities() {
  const double bce = loss::bce(std::vector<double>{0.5}, {1});
  const double nll = loss::nll(std::vector<ad::Matrix>{ad::Matrix::Constant(3, 10, 0.1)}, {{7, 8, kEos}});
  const double rm0 = loss::rm_pairwise(0.7, 0.7);
  Rng rng(0, "acceptance/kl");
  auto dist = [&](Eigen::Index rows, Eigen::Index cols) {
    ad::Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(0.001, 1.0);
    for (Eigen::Index r = 0; r < rows; ++r) m.row(r) /= m.row(r).sum();
    return m;
  };
  double self_kl = 0, min_kl = 1e300;
  for (int i = 0; i < kKlPairs; ++i) {
    const Eigen::Index rows = 1 + static_cast<Eigen::Index>(rng.index(6)), cols = 2 + static_cast<Eigen::Index>(rng.index(20));
    const ad::Matrix p = dist(rows, cols), q = dist(rows, cols);
    self_kl = std::max(self_kl, std::abs(loss::sequence_kl(p, p)));
    min_kl = std::min(min_kl, loss::sequence_kl(p, q));
  }
  const double e_bce = std::abs(bce - std::log(2.0)), e_nll = std::abs(nll - 3 * std::log(10.0)),
               e_rm = std::abs(rm0 - std::log(2.0));
  const bool ok = e_bce <= kIdentityTol && e_nll <= kIdentityTol && e_rm <= kIdentityTol && self_kl <= kKlSelfTol &&
                  min_kl >= 0;
  return {ok, fmt("|bce-ln2| %.1e, |nll-3ln10| %.1e, |rm-ln2| %.1e, max KL(p,p) %.1e, min KL %.3g over %d pairs", e_bce,
                  e_nll, e_rm, self_kl, min_kl, kKlPairs)};
}

Outcome sft_desk(Desk& desk) {
  const SftResult& sft = desk.sft();
  const LevelAccuracy valid = detection_accuracy(sft.params, desk.data().valid, desk.vocab(), 0.5);
  const MetricsReport test = evaluate(sft.params, desk.data().test, desk.vocab(), EvalOptions{});
  const double refusal = test.refusal_rate.value_or(0), f1 = test.f1_answerable.value_or(0);
  const int epochs = static_cast<int>(sft.report.epochs.size());
  const bool ok = valid.ranking >= kSftRanking && valid.sentence >= kSftSentence && refusal >= kSftRefusal &&
                  f1 >= kSftF1 && epochs <= kSftMaxEpochs;
  return {ok, fmt("valid ranking %.3f sentence %.3f paragraph %.3f; test refusal rate %.3f, F1 %.3f; %d epochs, %.0f s",
                  valid.ranking, valid.sentence, valid.paragraph, refusal, f1, epochs, desk.sft_seconds())};
}

Outcome ablation_direction() {
  int attention_wins = 0, rl_wins = 0;
  std::string detail;
  const auto t0 = Clock::now();
  for (int seed = 1; seed <= kAblationSeeds; ++seed) {
    GenerationSpec spec;
    spec.n_train = 1000;
    spec.n_valid = spec.n_test = 200;
    spec.k_min = spec.k_max = kSalientK;
    spec.m_min = spec.m_max = 1;
    spec.seed = static_cast<std::uint64_t>(seed);
    const Dataset ds = generate_dataset(spec);
    const Vocab vocab =
        build_vocab(std::vector<const std::vector<Example>*>{&ds.train, &ds.valid, &ds.test}, kBareRefusal);
    AblationConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(seed);
    const AblationTable t = run_ablation(ds, vocab, cfg);
    const MetricsReport &full = t.arms[0].metrics, &mean = t.arms[1].metrics, &sft = t.arms[2].metrics;
    const double margin = full.accuracy.ranking - mean.accuracy.ranking;
    const double inf_full = full.informativeness_avg.value_or(0), inf_sft = sft.informativeness_avg.value_or(0);
    attention_wins += margin >= 0;
    rl_wins += inf_full >= inf_sft;
    detail += fmt("%sseed %d: ranking full %.3f mean %.3f (margin %+.3f), informativeness SFT+RL %.3f SFT %.3f",
                  seed > 1 ? "; " : "", seed, full.accuracy.ranking, mean.accuracy.ranking, margin, inf_full, inf_sft);
  }
  const int majority = kAblationSeeds / 2 + 1;
  const bool ok = attention_wins >= majority && rl_wins >= majority;
  return {ok, fmt("attention>=mean %d/%d, SFT+RL>=SFT %d/%d, %.0f s; ", attention_wins, kAblationSeeds, rl_wins,
                  kAblationSeeds, seconds_since(t0)) +
                  detail};
}

Outcome rm_desk(Desk& desk) {
  const RmResult& rm = desk.rm();
  std::size_t n = 0, wins = 0;
  for (const auto& ex : desk.data().test) {
    if (ex.y != 0) continue;
    const EncodedExample e = encode_example(ex, desk.vocab());
    const double gold = reward_score(rm.params, e, with_eos(desk.vocab().encode(ex.target.tokens)));
    const double bare = reward_score(rm.params, e, with_eos(desk.vocab().encode(kBareRefusal)));
    wins += gold > bare;
    ++n;
  }
  const double frac = n ? static_cast<double>(wins) / static_cast<double>(n) : 0.0;
  const bool ok = rm.heldout_accuracy >= kRmAccuracy && frac >= kRmGoldOverBare;
  return {ok, fmt("held-out preference accuracy %.3f; gold refusal over bare on %zu/%zu test y=0 (%.3f); %.0f s",
                  rm.heldout_accuracy, wins, n, frac, desk.rm_seconds())};
}

Outcome rl_desk(Desk& desk) {
  const RlResult& rl = desk.rl();
  const RlReport& r = rl.report;
  RlTrainConfig dominated;
  dominated.rl.beta_kl = kDominatingBeta;
  const RlResult held = train_rl(desk.sft().params, reward_model_fn(desk.rm().params), desk.data().train,
                                 desk.data().valid, desk.vocab(), dominated, {});
  const double drift = max_abs_diff(held.params, desk.sft().params);
  const bool ok = r.heldout_reward_after > r.heldout_reward_before && r.heldout_kl_after <= kRlKlBound &&
                  drift < kDominatedDrift;
  return {ok, fmt("held-out reward %.4f -> %.4f, KL %.4f; beta %.0e drift %.2e; %.0f s", r.heldout_reward_before,
                  r.heldout_reward_after, r.heldout_kl_after, kDominatingBeta, drift, desk.rl_seconds())};
}

int run_tool(const std::string& args) {
  const std::string cmd = std::string(RUL_TOOL_PATH) + " " + args + " >/dev/null 2>&1";
  const int s = std::system(cmd.c_str());
  return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
}

/// Hash of every non-manifest artifact under `dir`, keyed by relative path.
std::map<std::string, std::string> artifact_hashes(const fs::path& dir) {
  std::map<std::string, std::string> h;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string name = e.path().filename().string();
    if (name.find("manifest.json") != std::string::npos) continue;
    h[fs::relative(e.path(), dir).string()] = cli::sha256_file(e.path().string());
  }
  return h;
}

Outcome determinism(const fs::path& work) {
  const fs::path dir = work / "determinism";
  const fs::path run = dir / "run";
  fs::create_directories(dir);
  std::ofstream(dir / "spec.json") << R"({"counts": {"train": 200, "valid": 40, "test": 40}})";
  std::ofstream(dir / "config.json") << R"({"model": {"d": 16, "d_a": 8, "d_a_prime": 8},
    "sft": {"epochs": 3}, "rm": {"epochs": 2}, "rl": {"iterations": 5, "heldout_size": 20},
    "pairs": {"n_train": 300, "n_valid": 60}})";
  const std::string cfg = "--config " + (dir / "config.json").string() + " --seed 7";
  const std::string r = run.string();
  const std::vector<std::pair<std::string, std::string>> steps = {
      {"gen-data", "gen-data --spec " + (dir / "spec.json").string() + " --out " + r + "/data --seed 7"},
      {"train-sft", "train-sft --data " + r + "/data " + cfg + " --out " + r + "/sft.json"},
      {"train-rm", "train-rm --data " + r + "/data " + cfg + " --out " + r + "/rm.json"},
      {"train-rl", "train-rl --data " + r + "/data " + cfg + " --sft-ckpt " + r + "/sft.json --rm-ckpt " + r +
                       "/rm.json --out " + r + "/rl.json"},
      {"eval", "eval --data " + r + "/data --ckpt " + r + "/rl.json --out " + r + "/eval.json --seed 7"},
  };
  std::map<std::string, std::string> first;
  for (int pass = 0; pass < 2; ++pass) {
    fs::remove_all(run);
    for (const auto& [name, args] : steps)
      if (const int code = run_tool(args); code != 0) return {false, fmt("%s exited %d", name.c_str(), code)};
    auto h = artifact_hashes(run);
    if (pass == 0) {
      first = std::move(h);
      continue;
    }
    for (const auto& [path, hash] : first) {
      auto it = h.find(path);
      if (it == h.end() || it->second != hash) return {false, "artifact differs across runs: " + path};
    }
    if (h.size() != first.size()) return {false, "artifact sets differ across runs"};
  }
  return {true, fmt("%zu artifacts from gen-data, train-sft, train-rm, train-rl, eval byte-identical across two runs",
                    first.size())};
}

Outcome per_type_report(Desk& desk) {
  const MetricsReport rep = evaluate(desk.rl().params, desk.data().test, desk.vocab(), EvalOptions{});
  const auto j = metrics_to_json(rep);
  bool ok = true;
  std::string detail;
  for (const char* t : {"MISSING", "CONTRADICTORY", "AMBIGUOUS"}) {
    const bool present = j["per_type_ranking_acc"].contains(t) && rep.per_type_counts.count(t) &&
                         rep.per_type_counts.at(t) > 0;
    ok = ok && present;
    detail += fmt("%s%s %s (n=%zu)", detail.empty() ? "" : ", ", t,
                  present ? fmt("%.3f", rep.per_type.at(t)).c_str() : "missing",
                  present ? rep.per_type_counts.at(t) : std::size_t{0});
  }
  return {ok, "test ranking accuracy by type: " + detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> selected;
  std::string work = (fs::temp_directory_path() / "rul_acceptance").string();
  app.add_option("criteria", selected, "criteria to run (default all)")->check(CLI::Range(1, 9));
  app.add_option("--work", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);
  if (selected.empty()) selected = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  fs::create_directories(work);

  Desk desk;
  const std::map<int, std::pair<std::string, std::function<Outcome()>>> criteria = {
      {1, {"gradient fidelity", gradient_fidelity}},
      {2, {"aggregation algebra", aggregation_algebra}},
      {3, {"loss identities", loss_identities}},
      {4, {"SFT desk run", [&] { return sft_desk(desk); }}},
      {5, {"ablation direction", ablation_direction}},
      {6, {"RM desk run", [&] { return rm_desk(desk); }}},
      {7, {"RL desk run", [&] { return rl_desk(desk); }}},
      {8, {"determinism", [&] { return determinism(work); }}},
      {9, {"per-type report", [&] { return per_type_report(desk); }}},
  };
  bool all = true;
  for (int c : selected) {
    const auto& [name, fn] = criteria.at(c);
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << c << " " << name << ": " << o.detail << std::endl;
  }
  return all ? 0 : 1;
}
